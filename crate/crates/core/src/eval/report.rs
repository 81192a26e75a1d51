use serde::{Deserialize, Serialize};

use super::RepresentationRow;

/// Mean SDR improvement of one (level, mode, i-vector configuration) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationRow {
    pub label: String,
    pub level: usize,
    pub mode: String,
    pub mean_sdr_improvement: f64,
    pub n_sources: usize,
}

/// Identification accuracy of i-vectors extracted from each network's estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationRow {
    pub label: String,
    pub baseline: Option<f64>,
    pub oracle: Option<f64>,
    pub realistic: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub mixture_mean_sdr: Option<f64>,
    pub ideal_mask_mean_sdr_improvement: Option<f64>,
    pub clean_identification_accuracy: Option<f64>,
    pub separation: Vec<SeparationRow>,
    pub identification: Vec<IdentificationRow>,
    pub representation: Vec<RepresentationRow>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn signed(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:+.4}"))
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Mean SDR improvement per configuration: one column per (level, mode).
    pub fn separation_tsv(&self) -> String {
        let mut columns: Vec<(usize, String)> = Vec::new();
        let mut labels: Vec<String> = Vec::new();
        for r in &self.separation {
            if !columns.contains(&(r.level, r.mode.clone())) {
                columns.push((r.level, r.mode.clone()));
            }
            if !labels.contains(&r.label) {
                labels.push(r.label.clone());
            }
        }
        let mut out = String::from("config");
        for (level, mode) in &columns {
            out.push_str(&format!("\tlevel{level}_{mode}"));
        }
        out.push('\n');
        for label in &labels {
            out.push_str(label);
            for (level, mode) in &columns {
                let v = self
                    .separation
                    .iter()
                    .find(|r| &r.label == label && r.level == *level && &r.mode == mode)
                    .map(|r| r.mean_sdr_improvement);
                out.push('\t');
                out.push_str(&cell(v));
            }
            out.push('\n');
        }
        out
    }

    pub fn identification_tsv(&self) -> String {
        let mut out = String::from("config\tbaseline\toracle\trealistic\n");
        for r in &self.identification {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.label,
                cell(r.baseline),
                cell(r.oracle),
                cell(r.realistic)
            ));
        }
        out
    }

    pub fn representation_tsv(&self) -> String {
        let mut out =
            String::from("config\tcorr_id\toracle_incr\tfalse_id\toracle_incr\tn_corr\tn_false\n");
        for r in &self.representation {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.label,
                cell(r.correct_mean),
                signed(r.correct_oracle_increase),
                cell(r.false_mean),
                signed(r.false_oracle_increase),
                r.n_correct,
                r.n_false
            ));
        }
        out
    }
}

use serde::{Deserialize, Serialize};

use super::SdrReport;
use crate::error::{Error, Result};
use crate::speaker::{identify, IVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Speaker labels indexing the confusion matrix, ascending.
    pub speakers: Vec<usize>,
    /// `confusion[true][predicted]`; probes with a zero i-vector are missing from it.
    pub confusion: Vec<Vec<usize>>,
    /// Per-probe outcome, in probe order.
    pub outcomes: Vec<bool>,
}

/// Identifies every probe against `models` and tallies the outcomes.
pub fn speaker_id_eval(
    models: &[(usize, IVector)],
    probes: &[(IVector, usize)],
) -> Result<IdReport> {
    let mut speakers: Vec<usize> = models.iter().map(|(s, _)| *s).collect();
    speakers.sort_unstable();
    speakers.dedup();
    let index = |s: usize| {
        speakers
            .binary_search(&s)
            .map_err(|_| Error::UnknownLabel(s))
    };
    let mut confusion = vec![vec![0; speakers.len()]; speakers.len()];
    let mut outcomes = Vec::with_capacity(probes.len());
    for (w, label) in probes {
        let truth = index(*label)?;
        // a probe with no usable frames has a zero i-vector and counts as a miss
        let predicted = match identify(models, w) {
            Ok(p) => p,
            Err(Error::ZeroVector) => {
                outcomes.push(false);
                continue;
            }
            Err(e) => return Err(e),
        };
        confusion[truth][index(predicted)?] += 1;
        outcomes.push(predicted == *label);
    }
    let correct = outcomes.iter().filter(|&&o| o).count();
    let total = probes.len();
    Ok(IdReport {
        accuracy: if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        },
        correct,
        total,
        speakers,
        confusion,
        outcomes,
    })
}

/// One row of the representation-quality table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentationRow {
    pub label: String,
    pub n_correct: usize,
    pub n_false: usize,
    /// Mean realistic SDR improvement of sources whose i-vector was identified correctly.
    pub correct_mean: Option<f64>,
    /// Oracle minus realistic, same sources.
    pub correct_oracle_increase: Option<f64>,
    pub false_mean: Option<f64>,
    pub false_oracle_increase: Option<f64>,
}

/// Splits sources by identification outcome and compares realistic and oracle improvements.
/// `identified[m][j]` refers to reference `j` of mixture `m`.
pub fn representation_analysis(
    label: &str,
    realistic: &[SdrReport],
    identified: &[Vec<bool>],
    oracle: &[SdrReport],
) -> Result<RepresentationRow> {
    if realistic.len() != oracle.len() || realistic.len() != identified.len() {
        return Err(Error::DimensionMismatch(
            "records are not aligned across runs".into(),
        ));
    }
    let mut groups = [(0usize, 0.0, 0.0), (0usize, 0.0, 0.0)];
    for ((r, o), ids) in realistic.iter().zip(oracle).zip(identified) {
        if r.improvement.len() != ids.len() || o.improvement.len() != ids.len() {
            return Err(Error::DimensionMismatch(
                "source counts differ across runs".into(),
            ));
        }
        for (j, &ok) in ids.iter().enumerate() {
            let g = &mut groups[if ok { 0 } else { 1 }];
            g.0 += 1;
            g.1 += r.improvement[j];
            g.2 += o.improvement[j] - r.improvement[j];
        }
    }
    let stat = |g: (usize, f64, f64)| {
        if g.0 == 0 {
            (None, None)
        } else {
            (Some(g.1 / g.0 as f64), Some(g.2 / g.0 as f64))
        }
    };
    let (correct_mean, correct_oracle_increase) = stat(groups[0]);
    let (false_mean, false_oracle_increase) = stat(groups[1]);
    Ok(RepresentationRow {
        label: label.to_string(),
        n_correct: groups[0].0,
        n_false: groups[1].0,
        correct_mean,
        correct_oracle_increase,
        false_mean,
        false_oracle_increase,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn report(improvement: Vec<f64>) -> SdrReport {
        let mean_improvement = improvement.iter().sum::<f64>() / improvement.len() as f64;
        SdrReport {
            sdr: improvement.clone(),
            mixture_sdr: vec![0.0; improvement.len()],
            improvement,
            mean_improvement,
            permutation: vec![0, 1],
        }
    }

    #[test]
    fn identical_probes_are_all_correct() {
        let models = vec![(3, array![1.0, 0.0]), (5, array![0.0, 1.0])];
        let probes = vec![
            (array![1.0, 0.0], 3),
            (array![0.0, 1.0], 5),
            (array![0.0, 2.0], 5),
        ];
        let r = speaker_id_eval(&models, &probes).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.confusion, vec![vec![1, 0], vec![0, 2]]);
        assert!(speaker_id_eval(&models, &[(array![1.0, 0.0], 4)]).is_err());
    }

    #[test]
    fn random_probes_sit_at_chance() {
        let n_speakers = 5;
        let mut total = 0.0;
        let seeds = 40;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let models: Vec<(usize, Array1<f64>)> = (0..n_speakers)
                .map(|s| (s, Array1::from_shape_fn(8, |_| rng.random_range(-1.0..1.0))))
                .collect();
            let probes: Vec<(Array1<f64>, usize)> = (0..50)
                .map(|i| {
                    (
                        Array1::from_shape_fn(8, |_| rng.random_range(-1.0..1.0)),
                        i % n_speakers,
                    )
                })
                .collect();
            total += speaker_id_eval(&models, &probes).unwrap().accuracy;
        }
        let mean = total / seeds as f64;
        assert!((mean - 1.0 / n_speakers as f64).abs() < 0.1, "{mean}");
    }

    #[test]
    fn representation_groups_and_deltas() {
        let realistic = vec![report(vec![4.0, 6.0]), report(vec![5.0, 7.0])];
        let all = vec![vec![true, true], vec![true, true]];
        let row = representation_analysis("dim=5", &realistic, &all, &realistic).unwrap();
        assert_eq!(row.correct_mean, Some(5.5));
        assert_eq!(row.correct_oracle_increase, Some(0.0));
        assert_eq!(row.false_mean, None);
        let oracle = vec![report(vec![4.5, 6.0]), report(vec![5.0, 8.0])];
        let mixed = vec![vec![true, false], vec![false, true]];
        let row = representation_analysis("dim=5", &realistic, &mixed, &oracle).unwrap();
        assert_eq!(row.n_correct, 2);
        assert_eq!(row.correct_mean, Some(5.5));
        assert_eq!(row.correct_oracle_increase, Some(0.75));
        assert_eq!(row.false_mean, Some(5.5));
        assert_eq!(row.false_oracle_increase, Some(0.0));
        assert!(representation_analysis("x", &realistic, &mixed[..1], &oracle).is_err());
    }
}

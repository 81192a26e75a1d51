//! Iterative separation: a baseline network, speaker vectors from its estimates, and adapted
//! networks that take those vectors as extra input.

mod config;
mod corpus;
mod experiment;
mod level;
mod speaker;

use ndarray::Array2;
use sha2::{Digest, Sha256};

pub use config::{DspConfig, ExperimentConfig, Mode, NetConfig, PipelineConfig, SpeakerConfig};
pub use corpus::{generate_corpus, Corpus, CorpusSpec, MixtureItem, Split, Utterance, Voice};
pub use experiment::{ideal_mask_reports, run_experiment, ExperimentOutcome};
pub use level::{
    ivectors_from_tsv, ivectors_to_rows, prepare_examples, Experiment, LevelArtifacts,
    LevelMetrics, PreparedData,
};
pub use speaker::{fit_lda, fit_tv, fit_ubm, speaker_frames, SpeakerModels};

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::speaker::IVector;

fn waveform_digest(w: &Waveform) -> [u8; 32] {
    let mut h = Sha256::new();
    for s in w.samples() {
        h.update(s.to_le_bytes());
    }
    h.finalize().into()
}

/// Canonical slot order of a set of estimates: descending energy, ties broken by the SHA-256
/// of the little-endian sample bytes.
pub fn slot_order(estimates: &[Waveform]) -> Vec<usize> {
    let keys: Vec<(f64, [u8; 32])> = estimates
        .iter()
        .map(|w| (w.energy(), waveform_digest(w)))
        .collect();
    let mut order: Vec<usize> = (0..estimates.len()).collect();
    order.sort_by(|&a, &b| {
        keys[b]
            .0
            .total_cmp(&keys[a].0)
            .then_with(|| keys[a].1.cmp(&keys[b].1))
            .then(a.cmp(&b))
    });
    order
}

/// Stacks the i-vectors of `estimates` into a `C x dim` block in canonical slot order.
pub fn order_ivectors(estimates: &[Waveform], ivectors: &[IVector]) -> Result<Array2<f64>> {
    if estimates.len() != ivectors.len() || estimates.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} estimates with {} i-vectors",
            estimates.len(),
            ivectors.len()
        )));
    }
    let dim = ivectors[0].len();
    if ivectors.iter().any(|v| v.len() != dim) {
        return Err(Error::DimensionMismatch(
            "i-vectors of different widths".into(),
        ));
    }
    let order = slot_order(estimates);
    Ok(Array2::from_shape_fn((order.len(), dim), |(slot, j)| {
        ivectors[order[slot]][j]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wave(v: Vec<f64>) -> Waveform {
        Waveform::new(v, 8000).unwrap()
    }

    #[test]
    fn louder_estimate_takes_the_first_slot() {
        let est = [wave(vec![1.0, 0.0]), wave(vec![2.0_f64.sqrt(), 0.0])];
        let iv = [array![1.0, 0.0], array![0.0, 1.0]];
        assert_eq!(
            order_ivectors(&est, &iv).unwrap(),
            array![[0.0, 1.0], [1.0, 0.0]]
        );
        let est = [wave(vec![2.0_f64.sqrt(), 0.0]), wave(vec![1.0, 0.0])];
        assert_eq!(
            order_ivectors(&est, &iv).unwrap(),
            array![[1.0, 0.0], [0.0, 1.0]]
        );
    }

    #[test]
    fn equal_energies_order_by_content_hash() {
        let a = wave(vec![1.0, 0.0]);
        let b = wave(vec![0.0, 1.0]);
        let ab = slot_order(&[a.clone(), b.clone()]);
        let ba = slot_order(&[b, a]);
        assert_eq!(ab[0], 1 - ba[0]);
        assert_eq!(
            ab,
            slot_order(&[wave(vec![1.0, 0.0]), wave(vec![0.0, 1.0])])
        );
    }

    #[test]
    fn input_permutation_does_not_change_the_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = rng.random_range(2..5);
            let mut items: Vec<(Waveform, IVector)> = (0..n)
                .map(|_| {
                    let w = wave((0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
                    let v = IVector::from(
                        (0..3)
                            .map(|_| rng.random_range(-1.0..1.0))
                            .collect::<Vec<_>>(),
                    );
                    (w, v)
                })
                .collect();
            // include an exact energy tie
            items[1].0 = wave(items[0].0.samples().iter().rev().cloned().collect());
            let (w, v): (Vec<_>, Vec<_>) = items.iter().cloned().unzip();
            let reference = order_ivectors(&w, &v).unwrap();
            items.shuffle(&mut rng);
            let (w, v): (Vec<_>, Vec<_>) = items.into_iter().unzip();
            assert_eq!(order_ivectors(&w, &v).unwrap(), reference);
        }
    }

    #[test]
    fn mismatched_counts_rejected() {
        assert!(order_ivectors(&[wave(vec![1.0])], &[]).is_err());
    }
}

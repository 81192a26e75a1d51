use serde::{Deserialize, Serialize};

use crate::cluster::BinaryMaskSet;
use crate::dsp::{Spectrogram, Waveform};
use crate::error::{Error, Result};
use crate::net::{build_targets, BinMask};

pub const SDR_CAP_DB: f64 = 100.0;

/// Scale-invariant projection SDR in dB, clamped to `[-100, 100]`. Signals are trimmed to the
/// shorter length.
pub fn sdr(estimate: &Waveform, reference: &Waveform) -> Result<f64> {
    let n = estimate.len().min(reference.len());
    let e = &estimate.samples()[..n];
    let s = &reference.samples()[..n];
    let ss: f64 = s.iter().map(|v| v * v).sum();
    if ss == 0.0 {
        return Err(Error::ZeroEnergySource);
    }
    let alpha = e.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() / ss;
    let mut target = 0.0;
    let mut distortion = 0.0;
    for (a, b) in e.iter().zip(s) {
        let t = alpha * b;
        target += t * t;
        distortion += (a - t) * (a - t);
    }
    if target == 0.0 {
        return Ok(-SDR_CAP_DB);
    }
    if distortion == 0.0 {
        return Ok(SDR_CAP_DB);
    }
    Ok((10.0 * (target / distortion).log10()).clamp(-SDR_CAP_DB, SDR_CAP_DB))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdrReport {
    /// `sdr[j]`: SDR of the estimate matched to reference `j`.
    pub sdr: Vec<f64>,
    /// SDR of the unprocessed mixture against reference `j`.
    pub mixture_sdr: Vec<f64>,
    pub improvement: Vec<f64>,
    pub mean_improvement: f64,
    /// `permutation[j]`: index of the estimate matched to reference `j`.
    pub permutation: Vec<usize>,
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn extend(prefix: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                extend(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    extend(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Matches estimates to references by the permutation with the highest mean SDR (the first in
/// lexicographic order on ties) and reports the gain over the mixture.
pub fn sdr_improvement(
    estimates: &[Waveform],
    references: &[Waveform],
    mixture: &Waveform,
) -> Result<SdrReport> {
    let c = references.len();
    if estimates.len() != c || c == 0 {
        return Err(Error::DimensionMismatch(format!(
            "{} estimates for {c} references",
            estimates.len()
        )));
    }
    let mut table = vec![vec![0.0; c]; c];
    for (i, e) in estimates.iter().enumerate() {
        for (j, r) in references.iter().enumerate() {
            table[i][j] = sdr(e, r)?;
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for p in permutations(c) {
        let mean = (0..c).map(|j| table[p[j]][j]).sum::<f64>() / c as f64;
        if best.as_ref().is_none_or(|(m, _)| mean > *m) {
            best = Some((mean, p));
        }
    }
    let permutation = best.expect("at least one permutation").1;
    let sdr_vals: Vec<f64> = (0..c).map(|j| table[permutation[j]][j]).collect();
    let mixture_sdr = references
        .iter()
        .map(|r| sdr(mixture, r))
        .collect::<Result<Vec<_>>>()?;
    let improvement: Vec<f64> = sdr_vals
        .iter()
        .zip(&mixture_sdr)
        .map(|(a, b)| a - b)
        .collect();
    let mean_improvement = improvement.iter().sum::<f64>() / c as f64;
    Ok(SdrReport {
        sdr: sdr_vals,
        mixture_sdr,
        improvement,
        mean_improvement,
        permutation,
    })
}

/// Per-bin argmax of the source magnitudes; ties go to the lowest source index.
pub fn ideal_binary_mask(sources: &[Spectrogram]) -> Result<BinaryMaskSet> {
    let first = sources.first().ok_or(Error::EmptyInput)?;
    let all = BinMask::all(first.n_frames(), first.freq_bins());
    let targets = build_targets(sources, &all)?;
    let freq = first.freq_bins();
    let mut masks = vec![ndarray::Array2::from_elem(all.keep.dim(), false); sources.len()];
    for (i, label) in targets.labels.iter().enumerate() {
        let c = label.expect("every bin retained");
        masks[c][[i / freq, i % freq]] = true;
    }
    Ok(BinaryMaskSet { masks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::reconstruct;
    use crate::dsp::{mix_at_snr, stft};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), 8000).unwrap()
    }

    #[test]
    fn perfect_and_scaled_estimates_hit_the_cap() {
        let s = noise(500, 1);
        assert_eq!(sdr(&s, &s).unwrap(), SDR_CAP_DB);
        assert_eq!(sdr(&s.scaled(0.25), &s).unwrap(), SDR_CAP_DB);
        assert_eq!(sdr(&Waveform::zeros(500, 8000), &s).unwrap(), -SDR_CAP_DB);
        assert!(sdr(&s, &Waveform::zeros(500, 8000)).is_err());
    }

    #[test]
    fn orthogonal_noise_at_equal_energy_is_zero_db() {
        let s = noise(800, 2);
        let raw = noise(800, 3);
        // Gram-Schmidt against s, then match energies
        let proj = raw
            .samples()
            .iter()
            .zip(s.samples())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / s.energy();
        let orth: Vec<f64> = raw
            .samples()
            .iter()
            .zip(s.samples())
            .map(|(a, b)| a - proj * b)
            .collect();
        let scale = (s.energy() / orth.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let est: Vec<f64> = s
            .samples()
            .iter()
            .zip(&orth)
            .map(|(a, b)| a + scale * b)
            .collect();
        let v = sdr(&Waveform::new(est, 8000).unwrap(), &s).unwrap();
        assert!(v.abs() < 1e-6, "{v}");
    }

    #[test]
    fn scale_invariance_in_both_arguments() {
        let s = noise(600, 4);
        let e = s.add(&noise(600, 5).scaled(0.3)).unwrap();
        let base = sdr(&e, &s).unwrap();
        assert!((sdr(&e.scaled(3.0), &s).unwrap() - base).abs() < 1e-9);
        assert!((sdr(&e, &s.scaled(0.1)).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn improvement_of_references_and_of_mixture() {
        let a = noise(1000, 6);
        let b = noise(1000, 7);
        let mix = mix_at_snr(&a, &b, 0.0).unwrap();
        let refs = vec![mix.scaled_a.clone(), mix.scaled_b.clone()];
        let swapped = vec![mix.scaled_b.clone(), mix.scaled_a.clone()];
        let r = sdr_improvement(&swapped, &refs, &mix.mixture).unwrap();
        assert_eq!(r.permutation, vec![1, 0]);
        for j in 0..2 {
            assert_eq!(r.improvement[j], SDR_CAP_DB - r.mixture_sdr[j]);
        }
        let m = vec![mix.mixture.clone(), mix.mixture.clone()];
        let z = sdr_improvement(&m, &refs, &mix.mixture).unwrap();
        assert!(z.improvement.iter().all(|&v| v == 0.0));
        assert!(sdr_improvement(&m[..1], &refs, &mix.mixture).is_err());
    }

    #[test]
    fn permutation_search_is_the_brute_force_argmax() {
        let refs: Vec<Waveform> = (0..3).map(|i| noise(400, 10 + i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let ests: Vec<Waveform> = (0..3)
            .map(|i| {
                let mut e = refs[(i + 1) % 3].scaled(rng.random_range(0.5..1.5));
                for r in &refs {
                    e = e.add(&r.scaled(rng.random_range(-0.4..0.4))).unwrap();
                }
                e
            })
            .collect();
        let mix = refs[0].add(&refs[1]).unwrap().add(&refs[2]).unwrap();
        let report = sdr_improvement(&ests, &refs, &mix).unwrap();
        let perms = permutations(3);
        assert_eq!(perms.len(), 6);
        for p in perms {
            let mean: f64 = (0..3)
                .map(|j| sdr(&ests[p[j]], &refs[j]).unwrap())
                .sum::<f64>()
                / 3.0;
            let best: f64 = report.sdr.iter().sum::<f64>() / 3.0;
            assert!(best >= mean);
        }
    }

    #[test]
    fn ibm_ties_silence_and_target_equivalence() {
        let a = noise(700, 30);
        let sa = stft(&a, 64, 16).unwrap();
        let silent = stft(&Waveform::zeros(700, 8000), 64, 16).unwrap();
        let ibm = ideal_binary_mask(&[silent.clone(), sa.clone()]).unwrap();
        let retained = BinMask::from_spectrogram(&sa, -40.0);
        for (m, k) in ibm.masks[1].iter().zip(retained.keep.iter()) {
            assert!(!*k || *m);
        }
        let tie = ideal_binary_mask(&[sa.clone(), sa.clone()]).unwrap();
        assert!(tie.masks[0].iter().all(|&m| m));
        let b = noise(700, 31);
        let sb = stft(&b, 64, 16).unwrap();
        let ibm = ideal_binary_mask(&[sa.clone(), sb.clone()]).unwrap();
        let targets = build_targets(
            &[sa.clone(), sb.clone()],
            &BinMask::all(sa.n_frames(), sa.freq_bins()),
        )
        .unwrap();
        for (i, l) in targets.labels.iter().enumerate() {
            let (t, f) = (i / sa.freq_bins(), i % sa.freq_bins());
            assert!(ibm.masks[l.unwrap()][[t, f]]);
        }
    }

    #[test]
    fn ibm_masking_moves_mixture_towards_source() {
        let a = noise(1500, 40);
        let b = Waveform::new(
            (0..1500)
                .map(|n| (2.0 * std::f64::consts::PI * 700.0 * n as f64 / 8000.0).sin())
                .collect(),
            8000,
        )
        .unwrap();
        let mix = mix_at_snr(&a, &b, 0.0).unwrap();
        let x = stft(&mix.mixture, 64, 16).unwrap();
        let sa = stft(&mix.scaled_a, 64, 16).unwrap();
        let sb = stft(&mix.scaled_b, 64, 16).unwrap();
        let ibm = ideal_binary_mask(&[sa.clone(), sb.clone()]).unwrap();
        let masked = crate::cluster::apply_mask(&x, &ibm.masks[0]).unwrap();
        let dist = |p: &Spectrogram, q: &Spectrogram| -> f64 {
            p.bins()
                .iter()
                .zip(q.bins().iter())
                .map(|(u, v)| (u - v).norm_sqr())
                .sum()
        };
        assert!(dist(&masked, &sa) < dist(&x, &sa));
        let est = reconstruct(&x, &ibm).unwrap();
        let r = sdr_improvement(
            &est,
            &[mix.scaled_a.clone(), mix.scaled_b.clone()],
            &mix.mixture,
        )
        .unwrap();
        assert!(r.mean_improvement > 5.0, "{}", r.mean_improvement);
    }
}

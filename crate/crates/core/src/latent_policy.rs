//! Matryoshka tail dropout over the 1D latent and the training-time
//! condition-mode sampler.

use crate::encoder::HybridLatent;
use crate::error::{CoreError, Result};
use crate::motion::{sample_eta, token_count};
use crate::rng::SeedRng;
use crate::tensor::Real;

/// How the decoder is conditioned for one training sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConditionMode {
    /// Every 1D token valid.
    Full,
    /// No 1D tokens (keep_len = 0).
    StructuralOnly,
    /// Motion-scaled random budget.
    MotionSampled { keep_len: usize },
}

impl ConditionMode {
    pub fn keep_len(&self, l_full: usize) -> usize {
        match *self {
            ConditionMode::Full => l_full,
            ConditionMode::StructuralOnly => 0,
            ConditionMode::MotionSampled { keep_len } => keep_len.min(l_full),
        }
    }
}

/// Truncate validity to `keep_len` rows; the structural latent and the stored
/// row data are untouched (the decoder substitutes its pad token beyond the
/// valid prefix).
pub fn tail_dropout<T: Real>(latent: &HybridLatent<T>, keep_len: usize) -> Result<HybridLatent<T>> {
    if keep_len > latent.l_full() {
        return Err(CoreError::InvalidArgument(format!(
            "keep_len {} exceeds L_full {}",
            keep_len,
            latent.l_full()
        )));
    }
    let mut out = latent.clone();
    out.valid_len = keep_len;
    Ok(out)
}

pub const P_FULL_CONDITION: f64 = 0.1;
pub const P_STRUCTURAL_ONLY: f64 = 0.1;

/// Full with p=0.1, StructuralOnly with p=0.1, otherwise a motion-sampled
/// budget token_count(s_hat, n_max, eta) with eta freshly drawn.
pub fn sample_condition_mode(s_hat: f64, n_max: usize, rng: &mut SeedRng) -> ConditionMode {
    let u = rng.uniform();
    if u < P_FULL_CONDITION {
        ConditionMode::Full
    } else if u < P_FULL_CONDITION + P_STRUCTURAL_ONLY {
        ConditionMode::StructuralOnly
    } else {
        let eta = sample_eta(rng);
        ConditionMode::MotionSampled {
            keep_len: token_count(s_hat, n_max, eta),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{HybridLatent, LatentMeta};
    use crate::tensor::Tensor;

    fn latent(l_full: usize) -> HybridLatent<f64> {
        let c = 3;
        HybridLatent {
            structural: Tensor::new(vec![1, 1, 2, c], vec![0.5; 2 * c]),
            oned: Tensor::new(vec![l_full, c], (0..l_full * c).map(|i| i as f64).collect()),
            valid_len: l_full,
            meta: LatentMeta {
                t: 3,
                h: 4,
                w: 8,
                motion_score: 0.5,
            },
        }
    }

    #[test]
    fn dropout_identity_and_zero() {
        let l = latent(8);
        let full = tail_dropout(&l, 8).unwrap();
        assert_eq!(full.valid_len, 8);
        assert_eq!(full.oned.data(), l.oned.data());
        let none = tail_dropout(&l, 0).unwrap();
        assert_eq!(none.valid_len, 0);
        assert_eq!(none.structural.data(), l.structural.data());
        assert!(tail_dropout(&l, 9).is_err());
    }

    #[test]
    fn dropout_preserves_valid_prefix_bits() {
        let l = latent(8);
        let k3 = tail_dropout(&l, 3).unwrap();
        assert_eq!(k3.valid_len, 3);
        assert_eq!(&k3.oned.data()[..3 * 3], &l.oned.data()[..3 * 3]);
        assert_eq!(k3.structural.data(), l.structural.data());
    }

    #[test]
    fn matryoshka_nesting() {
        let l = latent(16);
        for k2 in [4usize, 9, 16] {
            let outer = tail_dropout(&l, k2).unwrap();
            for k1 in 0..k2 {
                let inner = tail_dropout(&outer, k1).unwrap();
                assert_eq!(
                    &inner.oned.data()[..k1 * 3],
                    &outer.oned.data()[..k1 * 3],
                    "prefix mismatch k1={k1} k2={k2}"
                );
            }
        }
    }

    #[test]
    fn condition_mode_frequencies() {
        let mut rng = SeedRng::from_seed(31);
        let n = 100_000;
        let (mut full, mut structural, mut motion) = (0usize, 0usize, 0usize);
        let mut keep_hist: Vec<usize> = Vec::new();
        for _ in 0..n {
            match sample_condition_mode(1.0, 64, &mut rng) {
                ConditionMode::Full => full += 1,
                ConditionMode::StructuralOnly => structural += 1,
                ConditionMode::MotionSampled { keep_len } => {
                    motion += 1;
                    keep_hist.push(keep_len);
                }
            }
        }
        let ff = full as f64 / n as f64;
        let sf = structural as f64 / n as f64;
        assert!((ff - 0.10).abs() < 0.01, "full fraction {ff}");
        assert!((sf - 0.10).abs() < 0.01, "structural fraction {sf}");
        assert_eq!(full + structural + motion, n);
        // s_hat=1: median eta is 1 so median keep_len is n_max (clamped).
        keep_hist.sort_unstable();
        let median = keep_hist[keep_hist.len() / 2];
        assert_eq!(median, 64);
        assert!(keep_hist.iter().all(|&k| k <= 64));
    }

    #[test]
    fn zero_motion_always_keeps_nothing_in_motion_branch() {
        let mut rng = SeedRng::from_seed(32);
        for _ in 0..1000 {
            if let ConditionMode::MotionSampled { keep_len } =
                sample_condition_mode(0.0, 128, &mut rng)
            {
                assert_eq!(keep_len, 0);
            }
        }
    }

    #[test]
    fn condition_mode_is_deterministic_in_rng_state() {
        let mut a = SeedRng::from_seed(33);
        let mut b = SeedRng::from_seed(33);
        for _ in 0..200 {
            assert_eq!(
                sample_condition_mode(0.7, 32, &mut a),
                sample_condition_mode(0.7, 32, &mut b)
            );
        }
    }
}

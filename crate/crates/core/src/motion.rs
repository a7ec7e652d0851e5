//! Motion-aware token budgeting: a raw frame-difference score, online EMA
//! normalization, and the sampled/deterministic token-count rules.

use crate::error::{CoreError, Result};
use crate::rng::SeedRng;
use crate::synthdata::VideoClip;

/// Online estimate of the raw-score distribution (EMA of s and s²).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionStats {
    pub mu: f64,
    pub m2: f64,
    pub decay: f64,
    pub count: u64,
}

impl MotionStats {
    pub fn new(decay: f64) -> Self {
        assert!(decay > 0.0 && decay < 1.0, "decay must be in (0, 1)");
        MotionStats {
            mu: 0.0,
            m2: 0.0,
            decay,
            count: 0,
        }
    }

    pub fn sigma(&self) -> f64 {
        (self.m2 - self.mu * self.mu).max(0.0).sqrt()
    }
}

impl Default for MotionStats {
    fn default() -> Self {
        MotionStats::new(0.99)
    }
}

/// A resolved token budget for one clip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenBudget {
    pub s_hat: f64,
    pub eta: f64,
    pub count: usize,
}

const BT601: [f64; 3] = [0.299, 0.587, 0.114];

/// Mean absolute grayscale difference between consecutive frames.
/// Grayscale uses BT.601 weights on pixels rescaled from [-1,1] to [0,1].
pub fn raw_motion_score(clip: &VideoClip) -> f64 {
    let (t, h, w) = (clip.t(), clip.h(), clip.w());
    if t < 2 {
        return 0.0;
    }
    let d = clip.frames.data();
    let fsz = h * w * 3;
    let gray = |base: usize| -> f64 {
        let r = (d[base] as f64 + 1.0) * 0.5;
        let g = (d[base + 1] as f64 + 1.0) * 0.5;
        let b = (d[base + 2] as f64 + 1.0) * 0.5;
        BT601[0] * r + BT601[1] * g + BT601[2] * b
    };
    let mut acc = 0.0;
    for ti in 1..t {
        for p in 0..h * w {
            let cur = gray(ti * fsz + p * 3);
            let prev = gray((ti - 1) * fsz + p * 3);
            acc += (cur - prev).abs();
        }
    }
    acc / ((t - 1) * h * w) as f64
}

/// mu <- d*mu + (1-d)*s; m2 <- d*m2 + (1-d)*s².
pub fn ema_update(stats: &MotionStats, s: f64) -> Result<MotionStats> {
    if !(s >= 0.0) {
        return Err(CoreError::InvalidArgument(format!(
            "raw motion score must be >= 0, got {s}"
        )));
    }
    let d = stats.decay;
    Ok(MotionStats {
        mu: d * stats.mu + (1.0 - d) * s,
        m2: d * stats.m2 + (1.0 - d) * s * s,
        decay: d,
        count: stats.count + 1,
    })
}

const NORM_EPS: f64 = 1e-8;

/// s_hat = clamp(s / (mu + 3*sigma + eps), 0, 1); never NaN, even untrained.
pub fn normalize_score(stats: &MotionStats, s: f64) -> f64 {
    (s / (stats.mu + 3.0 * stats.sigma() + NORM_EPS)).clamp(0.0, 1.0)
}

/// eta = 2*sigmoid(z), z ~ N(0,1); median 1, range (0, 2).
pub fn sample_eta(rng: &mut SeedRng) -> f64 {
    eta_from_z(rng.normal())
}

pub fn eta_from_z(z: f64) -> f64 {
    2.0 / (1.0 + (-z).exp())
}

/// clamp(round(s_hat * n_max * eta), 0, n_max)
pub fn token_count(s_hat: f64, n_max: usize, eta: f64) -> usize {
    let raw = (s_hat * n_max as f64 * eta).round();
    (raw.max(0.0) as usize).min(n_max)
}

/// Inference-path budget: eta pinned to 1.
pub fn deterministic_token_count(s_hat: f64, n_max: usize) -> usize {
    token_count(s_hat, n_max, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{make_clip, ClipSpec};
    use crate::tensor::Tensor;

    fn clip_from(frames: Vec<f32>, t: usize, h: usize, w: usize) -> VideoClip {
        VideoClip::new(Tensor::new(vec![t, h, w, 3], frames), 8, 0).unwrap()
    }

    #[test]
    fn static_clip_scores_zero() {
        let frame: Vec<f32> = (0..4 * 4 * 3).map(|i| (i as f32 / 48.0) - 0.5).collect();
        let mut frames = frame.clone();
        frames.extend_from_slice(&frame);
        frames.extend_from_slice(&frame);
        let c = clip_from(frames, 3, 4, 4);
        assert_eq!(raw_motion_score(&c), 0.0);
    }

    #[test]
    fn constant_half_step_scores_half() {
        // Grayscale of all -1 is 0; all 0 is 0.5 (weights sum to 1).
        let lo = vec![-1.0f32; 4 * 4 * 3];
        let hi = vec![0.0f32; 4 * 4 * 3];
        let mut frames = lo;
        frames.extend_from_slice(&hi);
        let c = clip_from(frames, 2, 4, 4);
        assert!((raw_motion_score(&c) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn score_matches_brute_force_loop() {
        let spec = ClipSpec {
            seed: 303,
            motion_level: 0.8,
            n_shapes: 2,
            t: 3,
            h: 4,
            w: 4,
        };
        let c = make_clip(spec).unwrap();
        let d = c.frames.data();
        // Independent oracle: explicit element loops, no shared helpers.
        let mut total = 0.0f64;
        let mut n = 0u64;
        for t in 1..3usize {
            for y in 0..4usize {
                for x in 0..4usize {
                    let px = |tt: usize, ch: usize| {
                        let i = ((tt * 4 + y) * 4 + x) * 3 + ch;
                        (d[i] as f64 + 1.0) / 2.0
                    };
                    let g1 = 0.299 * px(t, 0) + 0.587 * px(t, 1) + 0.114 * px(t, 2);
                    let g0 = 0.299 * px(t - 1, 0) + 0.587 * px(t - 1, 1) + 0.114 * px(t - 1, 2);
                    total += (g1 - g0).abs();
                    n += 1;
                }
            }
        }
        let oracle = total / n as f64;
        assert!((raw_motion_score(&c) - oracle).abs() < 1e-12);
    }

    #[test]
    fn higher_motion_level_scores_higher_on_average() {
        let mut hi_sum = 0.0;
        let mut lo_sum = 0.0;
        for seed in 0..32u64 {
            let base = ClipSpec {
                seed,
                motion_level: 0.8,
                n_shapes: 3,
                t: 4,
                h: 16,
                w: 16,
            };
            hi_sum += raw_motion_score(&make_clip(base).unwrap());
            lo_sum += raw_motion_score(
                &make_clip(ClipSpec {
                    motion_level: 0.1,
                    ..base
                })
                .unwrap(),
            );
        }
        assert!(
            hi_sum > lo_sum,
            "expected mean score to rise with motion level: {hi_sum} vs {lo_sum}"
        );
    }

    #[test]
    fn ema_update_first_step_and_rejection() {
        let s0 = MotionStats::new(0.99);
        let s1 = ema_update(&s0, 1.0).unwrap();
        assert!((s1.mu - 0.01).abs() < 1e-15);
        assert!((s1.m2 - 0.01).abs() < 1e-15);
        assert_eq!(s1.count, 1);
        assert!(ema_update(&s0, -0.1).is_err());
        assert!(ema_update(&s0, f64::NAN).is_err());
    }

    #[test]
    fn ema_converges_to_constant_input() {
        let mut s = MotionStats::new(0.9);
        for _ in 0..400 {
            s = ema_update(&s, 0.25).unwrap();
        }
        assert!((s.mu - 0.25).abs() < 1e-10);
        assert!(s.sigma() < 1e-5);
    }

    #[test]
    fn ema_tracks_alternating_input() {
        // Oracle is the recurrence itself, run independently.
        let mut s = MotionStats::new(0.99);
        let (mut mu_o, mut m2_o) = (0.0f64, 0.0f64);
        for i in 0..10_000 {
            let x = (i % 2) as f64;
            s = ema_update(&s, x).unwrap();
            mu_o = 0.99 * mu_o + 0.01 * x;
            m2_o = 0.99 * m2_o + 0.01 * x * x;
        }
        assert!((s.mu - mu_o).abs() < 1e-12);
        assert!((s.m2 - m2_o).abs() < 1e-12);
        assert!((s.mu - 0.5).abs() < 0.05);
        assert!((s.sigma() - 0.5).abs() < 0.05);
    }

    #[test]
    fn normalize_score_boundaries() {
        let mut s = MotionStats::new(0.99);
        for _ in 0..500 {
            s = ema_update(&s, 0.2).unwrap();
        }
        assert_eq!(normalize_score(&s, 0.0), 0.0);
        let denom = s.mu + 3.0 * s.sigma();
        let at_boundary = normalize_score(&s, denom);
        assert!((at_boundary - 1.0).abs() < 1e-6);
        assert_eq!(normalize_score(&s, 2.0 * denom), 1.0);
        // Fresh stats: guard keeps it finite.
        let fresh = MotionStats::new(0.99);
        let v = normalize_score(&fresh, 0.3);
        assert!(v.is_finite());
        assert_eq!(v, 1.0);
    }

    #[test]
    fn eta_properties() {
        assert_eq!(eta_from_z(0.0), 1.0);
        assert!(eta_from_z(40.0) > 1.999);
        assert!(eta_from_z(-40.0) < 0.001);
        let mut rng = SeedRng::from_seed(77);
        let n = 100_000;
        let mut above = 0usize;
        let mut vals: Vec<f64> = Vec::with_capacity(n);
        for _ in 0..n {
            let e = sample_eta(&mut rng);
            assert!(e > 0.0 && e < 2.0);
            if e > 1.0 {
                above += 1;
            }
            vals.push(e);
        }
        let frac = above as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "P(eta>1) = {frac}");
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = vals[n / 2];
        assert!((median - 1.0).abs() < 0.02, "median {median}");
    }

    #[test]
    fn token_count_examples_and_clamp() {
        assert_eq!(token_count(0.0, 1024, 1.7), 0);
        assert_eq!(token_count(1.0, 1024, 1.0), 1024);
        assert_eq!(token_count(0.5, 1024, 1.0), 512);
        assert_eq!(token_count(1.0, 1024, 1.99), 1024);
        assert_eq!(deterministic_token_count(0.558, 1000), 558);
        assert_eq!(deterministic_token_count(1.0, 777), 777);
    }

    #[test]
    fn token_count_monotone_in_s_hat() {
        for n_max in [7usize, 128, 1024] {
            for eta in [0.3, 1.0, 1.9] {
                let mut prev = 0usize;
                for i in 0..=100 {
                    let s = i as f64 / 100.0;
                    let c = token_count(s, n_max, eta);
                    assert!(c >= prev, "not monotone at s={s}, eta={eta}");
                    assert!(c <= n_max);
                    prev = c;
                }
            }
        }
    }
}

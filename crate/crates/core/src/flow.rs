//! Flow-matching primitives: linear interpolation toward noise, velocity
//! targets, timestep sampling with a full-noise spike, and Euler sampling
//! from t = 1 down to t = 0.

use crate::error::{CoreError, Result};
use crate::rng::SeedRng;
use crate::tensor::{Real, Tensor};

/// A point on the noising path.
#[derive(Clone, Debug)]
pub struct FlowState<T: Real> {
    pub x: Tensor<T>,
    pub t: f64,
}

impl<T: Real> FlowState<T> {
    pub fn new(x: Tensor<T>, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(CoreError::InvalidArgument(format!(
                "flow time {t} outside [0, 1]"
            )));
        }
        Ok(FlowState { x, t })
    }
}

/// How training timesteps are drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimestepSampler {
    /// t = 1 always (pure-noise regime).
    Stage1Constant,
    /// With probability `p_full` return exactly 1.0; otherwise
    /// sigmoid(loc + scale * z) with z ~ N(0, 1).
    ThickTailedLogitNormal { p_full: f64, loc: f64, scale: f64 },
}

impl TimestepSampler {
    pub fn thick_tailed_default() -> Self {
        TimestepSampler::ThickTailedLogitNormal {
            p_full: 0.1,
            loc: 0.0,
            scale: 1.0,
        }
    }
}

/// x_t = (1 - t) * x0 + t * x1.
pub fn interpolate<T: Real>(x0: &Tensor<T>, x1: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    if x0.shape() != x1.shape() {
        return Err(CoreError::ShapeMismatch(format!(
            "interpolate: {:?} vs {:?}",
            x0.shape(),
            x1.shape()
        )));
    }
    let a = T::from_f64(1.0 - t);
    let b = T::from_f64(t);
    Ok(x0.zip_map(x1, |p, q| a * p + b * q))
}

/// v = x1 - x0 (the time-derivative of the interpolation path).
pub fn velocity_target<T: Real>(x0: &Tensor<T>, x1: &Tensor<T>) -> Result<Tensor<T>> {
    if x0.shape() != x1.shape() {
        return Err(CoreError::ShapeMismatch(format!(
            "velocity_target: {:?} vs {:?}",
            x0.shape(),
            x1.shape()
        )));
    }
    Ok(x1.zip_map(x0, |q, p| q - p))
}

pub fn sample_timestep(sampler: &TimestepSampler, rng: &mut SeedRng) -> f64 {
    match *sampler {
        TimestepSampler::Stage1Constant => 1.0,
        TimestepSampler::ThickTailedLogitNormal { p_full, loc, scale } => {
            if rng.uniform() < p_full {
                1.0
            } else {
                let z = rng.normal();
                1.0 / (1.0 + (-(loc + scale * z)).exp())
            }
        }
    }
}

/// One denoising Euler step from time s to time t < s.
pub fn euler_step<T: Real>(x_s: &Tensor<T>, v: &Tensor<T>, s: f64, t: f64) -> Result<Tensor<T>> {
    if x_s.shape() != v.shape() {
        return Err(CoreError::ShapeMismatch(format!(
            "euler_step: {:?} vs {:?}",
            x_s.shape(),
            v.shape()
        )));
    }
    if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&t) || t >= s {
        return Err(CoreError::InvalidArgument(format!(
            "euler_step needs 0 <= t < s <= 1, got s={s}, t={t}"
        )));
    }
    let dt = T::from_f64(t - s);
    Ok(x_s.zip_map(v, |x, vv| x + vv * dt))
}

/// t_k = 1 - k/K for k = 0..=K: uniform denoising schedule.
pub fn uniform_schedule(steps: usize) -> Vec<f64> {
    assert!(steps >= 1);
    (0..=steps).map(|k| 1.0 - k as f64 / steps as f64).collect()
}

pub fn validate_schedule(schedule: &[f64]) -> Result<()> {
    if schedule.len() < 2 || schedule[0] != 1.0 || *schedule.last().unwrap() != 0.0 {
        return Err(CoreError::InvalidArgument(
            "schedule must run from 1.0 down to 0.0".into(),
        ));
    }
    for pair in schedule.windows(2) {
        if pair[1] >= pair[0] {
            return Err(CoreError::InvalidArgument(
                "schedule must be strictly decreasing".into(),
            ));
        }
    }
    Ok(())
}

/// Integrate dx/dt = v(x, t) from t=1 to t=0 with Euler steps along
/// `schedule`. `velocity_fn` sees the current state and time.
pub fn sample_loop<T: Real, F>(
    mut velocity_fn: F,
    x_init: Tensor<T>,
    schedule: &[f64],
) -> Result<Tensor<T>>
where
    F: FnMut(&Tensor<T>, f64) -> Result<Tensor<T>>,
{
    validate_schedule(schedule)?;
    let mut x = x_init;
    for pair in schedule.windows(2) {
        let (s, t) = (pair[0], pair[1]);
        let v = velocity_fn(&x, s)?;
        x = euler_step(&x, &v, s, t)?;
    }
    Ok(x)
}

//! Rectified-flow noise schedules with resolution-dependent shifting.
//!
//! The noise level at continuous time `t ∈ [0, 1]` under shift `μ` is
//!
//! ```text
//! σ(t, μ) = e^μ / (e^μ + 1/t − 1)
//! ```
//!
//! with `μ = k · (L_x · m + b)`. `k = 1` is the standard shifted schedule,
//! `k = −1` mirrors it below the identity line (the reference-side schedule),
//! and `k = 0` is the unshifted identity `σ = t`.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor;

/// Sequence length of the low anchor of the default shift line.
pub const BASE_SEQ_LEN: f64 = 256.0;
/// Shift at [`BASE_SEQ_LEN`].
pub const BASE_SHIFT: f64 = 0.5;
/// Sequence length of the high anchor of the default shift line.
pub const MAX_SEQ_LEN: f64 = 4096.0;
/// Shift at [`MAX_SEQ_LEN`].
pub const MAX_SHIFT: f64 = 1.15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid shift parameters: {0}")]
    InvalidParams(String),
    #[error("shift evaluated to a non-finite value ({0})")]
    NonFinite(f64),
    #[error("time {0} is outside [0, 1]")]
    Domain(f64),
    #[error("noise level {0} is outside [0, 1]")]
    SigmaDomain(f64),
    #[error("number of steps must be at least 1")]
    ZeroSteps,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
}

/// Parameters of the linear dynamic shift `μ = k · (seq_len · m + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftParams {
    pub m: f64,
    pub b: f64,
    pub seq_len: usize,
    pub factor_k: f64,
}

impl ShiftParams {
    /// Line through the default anchors `(256, 0.5)` and `(4096, 1.15)`.
    pub fn new(seq_len: usize, factor_k: f64) -> Self {
        Self::from_anchors(BASE_SEQ_LEN, BASE_SHIFT, MAX_SEQ_LEN, MAX_SHIFT, seq_len, factor_k)
    }

    pub fn from_anchors(x1: f64, y1: f64, x2: f64, y2: f64, seq_len: usize, factor_k: f64) -> Self {
        let m = (y2 - y1) / (x2 - x1);
        let b = y1 - m * x1;
        Self { m, b, seq_len, factor_k }
    }

    pub fn with_factor(self, factor_k: f64) -> Self {
        Self { factor_k, ..self }
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.seq_len == 0 {
            return Err(ScheduleError::InvalidParams("seq_len must be >= 1".into()));
        }
        if !self.m.is_finite() || !self.b.is_finite() || !self.factor_k.is_finite() {
            return Err(ScheduleError::InvalidParams(format!(
                "m={}, b={}, k={} must be finite",
                self.m, self.b, self.factor_k
            )));
        }
        Ok(())
    }

    pub fn variant(&self) -> ScheduleVariant {
        ScheduleVariant::from_factor(self.factor_k)
    }
}

/// Returns `k · (seq_len · m + b)`.
pub fn compute_mu(params: &ShiftParams) -> Result<f64, ScheduleError> {
    params.validate()?;
    let mu = params.factor_k * (params.seq_len as f64 * params.m + params.b);
    if mu.is_finite() {
        Ok(mu)
    } else {
        Err(ScheduleError::NonFinite(mu))
    }
}

/// Shifted noise level at time `t`. The endpoints are pinned to their limits.
pub fn sigma<T: Scalar>(t: T, mu: T) -> Result<T, ScheduleError> {
    if !(t >= T::zero() && t <= T::one()) {
        return Err(ScheduleError::Domain(t.as_f64()));
    }
    if t == T::zero() {
        return Ok(T::zero());
    }
    if t == T::one() {
        return Ok(T::one());
    }
    if mu == T::zero() {
        return Ok(t);
    }
    // e^μ / (e^μ + 1/t − 1), divided through by e^μ so large |μ| saturates instead of NaN.
    Ok(T::one() / (T::one() + (-mu).exp() * (t.recip() - T::one())))
}

/// Time at which [`sigma`] reaches `s`: `t = 1 / (1 + e^μ (1/s − 1))`.
pub fn sigma_inverse<T: Scalar>(s: T, mu: T) -> Result<T, ScheduleError> {
    if !(s >= T::zero() && s <= T::one()) {
        return Err(ScheduleError::SigmaDomain(s.as_f64()));
    }
    if s == T::zero() || s == T::one() || mu == T::zero() {
        return Ok(s);
    }
    Ok(T::one() / (T::one() + mu.exp() * (s.recip() - T::one())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleVariant {
    Standard,
    Reversed,
    Scaled(f64),
}

impl ScheduleVariant {
    pub fn from_factor(k: f64) -> Self {
        if k == 1.0 {
            Self::Standard
        } else if k == -1.0 {
            Self::Reversed
        } else {
            Self::Scaled(k)
        }
    }

    pub fn factor(&self) -> f64 {
        match *self {
            Self::Standard => 1.0,
            Self::Reversed => -1.0,
            Self::Scaled(k) => k,
        }
    }

    /// True when the schedule bends towards lower noise than the identity.
    pub fn is_reversed(&self) -> bool {
        self.factor() < 0.0
    }
}

/// Uniform time grid `1 = t_0 > t_1 > … > t_N = 0` and its noise levels.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<T> {
    pub timesteps: Vec<T>,
    pub sigmas: Vec<T>,
    pub variant: ScheduleVariant,
    pub mu: f64,
}

impl<T: Scalar> NoiseSchedule<T> {
    /// Grid for an explicit shift value.
    pub fn from_mu(num_steps: usize, mu: f64, variant: ScheduleVariant) -> Result<Self, ScheduleError> {
        if num_steps == 0 {
            return Err(ScheduleError::ZeroSteps);
        }
        if !mu.is_finite() {
            return Err(ScheduleError::NonFinite(mu));
        }
        let n = num_steps as f64;
        let timesteps: Vec<T> = (0..=num_steps).map(|i| T::of((num_steps - i) as f64 / n)).collect();
        let mu_t = T::of(mu);
        let sigmas = timesteps.iter().map(|&t| sigma(t, mu_t)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self { timesteps, sigmas, variant, mu })
    }

    /// Number of grid points, including both endpoints.
    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    /// Number of integration steps (one less than the grid length).
    pub fn num_steps(&self) -> usize {
        self.len().saturating_sub(1)
    }
}

pub fn build_schedule<T: Scalar>(num_steps: usize, params: &ShiftParams) -> Result<NoiseSchedule<T>, ScheduleError> {
    let mu = compute_mu(params)?;
    NoiseSchedule::from_mu(num_steps, mu, params.variant())
}

/// `(1 − σ)·z0 + σ·ε`, returning the exact endpoint when `σ ∈ {0, 1}`.
pub fn forward_sample<T: Scalar>(z0: &Array2<T>, eps: &Array2<T>, sigma_t: T) -> Result<Array2<T>, ScheduleError> {
    if z0.dim() != eps.dim() {
        return Err(ScheduleError::ShapeMismatch(z0.dim(), eps.dim()));
    }
    if !(sigma_t >= T::zero() && sigma_t <= T::one()) {
        return Err(ScheduleError::SigmaDomain(sigma_t.as_f64()));
    }
    if sigma_t == T::zero() {
        return Ok(z0.clone());
    }
    if sigma_t == T::one() {
        return Ok(eps.clone());
    }
    let keep = T::one() - sigma_t;
    Ok(Zip::from(z0).and(eps).map_collect(|&a, &e| keep * a + sigma_t * e))
}

/// Noisy latents along one forward trajectory, ordered like the schedule (noise first).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub latents: Vec<Array2<T>>,
    pub noise: Array2<T>,
    pub schedule: NoiseSchedule<T>,
}

/// Draws one `ε` from `seed` and places `z0` at every grid point of `schedule`.
pub fn build_trajectory<T: Scalar>(
    z0: &Array2<T>,
    seed: u64,
    schedule: &NoiseSchedule<T>,
) -> Result<Trajectory<T>, ScheduleError> {
    if schedule.is_empty() {
        return Err(ScheduleError::ZeroSteps);
    }
    let (rows, cols) = z0.dim();
    let noise = tensor::noise::<T>(seed, rows, cols);
    let latents = schedule.sigmas.iter().map(|&s| forward_sample(z0, &noise, s)).collect::<Result<Vec<_>, _>>()?;
    Ok(Trajectory { latents, noise, schedule: schedule.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn mu_zero_constants() {
        let p = ShiftParams { m: 0.0, b: 0.0, seq_len: 1024, factor_k: 1.0 };
        assert_eq!(compute_mu(&p).unwrap(), 0.0);
    }

    #[test]
    fn mu_default_anchors() {
        let p = ShiftParams::new(1024, 1.0);
        assert_abs_diff_eq!(p.m, 1.69271e-4, epsilon = 1e-9);
        assert_abs_diff_eq!(p.b, 0.45667, epsilon = 1e-5);
        // 0.5 + (1024 - 256) * 0.65 / 3840
        assert_abs_diff_eq!(compute_mu(&p).unwrap(), 0.63, epsilon = 1e-12);
        assert_abs_diff_eq!(compute_mu(&p.with_factor(-1.0)).unwrap(), -0.63, epsilon = 1e-12);
    }

    #[test]
    fn mu_rejects_bad_params() {
        let p = ShiftParams { m: f64::NAN, b: 0.0, seq_len: 4, factor_k: 1.0 };
        assert!(compute_mu(&p).is_err());
        let p = ShiftParams { m: 0.0, b: 0.0, seq_len: 0, factor_k: 1.0 };
        assert!(compute_mu(&p).is_err());
        let p = ShiftParams { m: 1e308, b: 1e308, seq_len: 10, factor_k: 1.0 };
        assert_eq!(compute_mu(&p), Err(ScheduleError::NonFinite(f64::INFINITY)));
    }

    #[test]
    fn sigma_points() {
        assert_eq!(sigma(0.5f64, 0.0).unwrap(), 0.5);
        let ln2 = std::f64::consts::LN_2;
        assert_abs_diff_eq!(sigma(0.5, ln2).unwrap(), 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sigma(0.5, -ln2).unwrap(), 1.0 / 3.0, epsilon = 1e-12);
        assert_eq!(sigma(0.0f64, 5.0).unwrap(), 0.0);
        assert_eq!(sigma(1.0f64, -5.0).unwrap(), 1.0);
    }

    #[test]
    fn sigma_domain() {
        assert_eq!(sigma(1.5f64, 0.0), Err(ScheduleError::Domain(1.5)));
        assert!(sigma(-0.1f64, 0.0).is_err());
        assert!(sigma(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn sigma_saturates_for_huge_shift() {
        let s = sigma(0.5f64, 800.0).unwrap();
        assert!(s.is_finite() && s <= 1.0);
        let s = sigma(0.5f64, -800.0).unwrap();
        assert!(s.is_finite() && s >= 0.0);
    }

    #[test]
    fn schedule_examples() {
        let p = ShiftParams { m: 0.0, b: 0.0, seq_len: 1, factor_k: 1.0 };
        let s = build_schedule::<f64>(1, &p).unwrap();
        assert_eq!(s.timesteps, vec![1.0, 0.0]);
        assert_eq!(s.sigmas, vec![1.0, 0.0]);
        let s = build_schedule::<f64>(2, &p).unwrap();
        assert_eq!(s.sigmas, vec![1.0, 0.5, 0.0]);
        let s = NoiseSchedule::<f64>::from_mu(2, std::f64::consts::LN_2, ScheduleVariant::Standard).unwrap();
        assert_eq!(s.sigmas[0], 1.0);
        assert_abs_diff_eq!(s.sigmas[1], 2.0 / 3.0, epsilon = 1e-12);
        assert_eq!(s.sigmas[2], 0.0);
        assert_eq!(build_schedule::<f64>(0, &p), Err(ScheduleError::ZeroSteps));
    }

    #[test]
    fn variant_from_factor() {
        assert_eq!(ShiftParams::new(64, 1.0).variant(), ScheduleVariant::Standard);
        assert_eq!(ShiftParams::new(64, -1.0).variant(), ScheduleVariant::Reversed);
        assert_eq!(ShiftParams::new(64, -0.5).variant(), ScheduleVariant::Scaled(-0.5));
        assert!(ScheduleVariant::Scaled(-2.0).is_reversed());
        assert!(!ScheduleVariant::Scaled(0.0).is_reversed());
    }

    #[test]
    fn forward_sample_examples() {
        let z0 = array![[2.0f64, 0.0]];
        let eps = array![[0.0f64, 2.0]];
        assert_eq!(forward_sample(&z0, &eps, 0.0).unwrap(), z0);
        assert_eq!(forward_sample(&z0, &eps, 1.0).unwrap(), eps);
        assert_eq!(forward_sample(&z0, &eps, 0.25).unwrap(), array![[1.5, 0.5]]);
        let bad = array![[1.0f64, 2.0, 3.0]];
        assert!(matches!(forward_sample(&z0, &bad, 0.5), Err(ScheduleError::ShapeMismatch(..))));
        assert!(forward_sample(&z0, &eps, 1.5).is_err());
    }

    #[test]
    fn trajectory_endpoints_and_determinism() {
        let z0 = array![[-0.0f32, 1.25, -3.5], [0.125, 7.0, -1.0]];
        let sched = build_schedule::<f32>(7, &ShiftParams::new(64, -1.0)).unwrap();
        let a = build_trajectory(&z0, 11, &sched).unwrap();
        let b = build_trajectory(&z0, 11, &sched).unwrap();
        assert_eq!(a.latents.len(), sched.len());
        let last = a.latents.last().unwrap();
        for (x, y) in last.iter().zip(z0.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(a.latents[0], a.noise);
        assert_eq!(a, b);
    }
}

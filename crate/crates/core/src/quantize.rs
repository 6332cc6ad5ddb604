//! Scalar quantizers and their training-time relaxations.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("cannot quantize non-finite value {0}")]
    NonFinite(f64),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("invalid schedule: {0}")]
    Schedule(String),
}

/// Nearest integer, ties away from zero.
pub fn round(v: f64) -> Result<i64, QuantError> {
    if !v.is_finite() {
        return Err(QuantError::NonFinite(v));
    }
    Ok(round_half_away(v) as i64)
}

#[inline]
pub(crate) fn round_half_away(v: f64) -> f64 {
    // f64::round already rounds half away from zero.
    v.round()
}

/// Differentiable rounding relaxation. Exact at integers and half-integers
/// for every temperature; approaches hard rounding as `t → 0⁺`.
pub fn softround(x: f64, t: f64) -> Result<f64, QuantError> {
    if !(t > 0.0) {
        return Err(QuantError::Temperature(t));
    }
    Ok(softround_value(x, t))
}

#[inline]
pub(crate) fn softround_value(x: f64, t: f64) -> f64 {
    let fl = x.floor();
    let delta = x - fl - 0.5;
    fl + (delta / t).tanh() / (2.0 * (0.5 / t).tanh()) + 0.5
}

#[inline]
pub(crate) fn softround_derivative(x: f64, t: f64) -> f64 {
    let delta = x - x.floor() - 0.5;
    let th = (delta / t).tanh();
    (1.0 - th * th) / (t * 2.0 * (0.5 / t).tanh())
}

/// `softround(softround(x, t) + n, t)` with `n ~ N(0, noise_std²)`.
pub fn noisy_softround<R: Rng + ?Sized>(x: f64, t: f64, noise_std: f64, rng: &mut R) -> Result<f64, QuantError> {
    let inner = softround(x, t)?;
    let n = gaussian(noise_std, rng);
    softround(inner + n, t)
}

pub(crate) fn gaussian<R: Rng + ?Sized>(std: f64, rng: &mut R) -> f64 {
    if std > 0.0 {
        Normal::new(0.0, std).expect("positive std").sample(rng)
    } else {
        0.0
    }
}

/// Straight-through rounding: returns `(forward value, dforward/dx)`.
pub fn ste_round(x: f64) -> Result<(f64, f64), QuantError> {
    Ok((round(x)? as f64, 1.0))
}

/// Annealing schedule for the two training phases.
///
/// Phase 1 uses noisy soft rounding with temperature and noise standard
/// deviation interpolated linearly from their start to their end values;
/// phase 2 uses straight-through rounding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantSchedule {
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    pub temperature_start: f64,
    pub temperature_end: f64,
    pub noise_std_start: f64,
    pub noise_std_end: f64,
    pub med_temperature_start: f64,
    pub med_temperature_end: f64,
}

impl Default for QuantSchedule {
    fn default() -> Self {
        Self {
            phase1_iters: 9000,
            phase2_iters: 1000,
            temperature_start: 0.3,
            temperature_end: 0.1,
            noise_std_start: 0.25,
            noise_std_end: 0.1,
            med_temperature_start: 1.0,
            med_temperature_end: 0.05,
        }
    }
}

/// Quantizer state for one training iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Relaxation {
    Soft { temperature: f64, noise_std: f64, med_temperature: f64 },
    Straight,
}

impl QuantSchedule {
    /// Splits `total` iterations with 10% in the straight-through phase.
    pub fn with_total(total: usize) -> Self {
        let phase2 = (total / 10).max(1);
        Self { phase1_iters: total.saturating_sub(phase2).max(1), phase2_iters: phase2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        if self.phase1_iters == 0 || self.phase2_iters == 0 {
            return Err(QuantError::Schedule("phase lengths must be at least 1".into()));
        }
        for t in [self.temperature_start, self.temperature_end, self.med_temperature_start, self.med_temperature_end] {
            if !(t > 0.0) {
                return Err(QuantError::Temperature(t));
            }
        }
        if self.noise_std_start < 0.0 || self.noise_std_end < 0.0 {
            return Err(QuantError::Schedule("noise std must be non-negative".into()));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.phase1_iters + self.phase2_iters
    }

    pub fn relaxation(&self, iter: usize) -> Relaxation {
        if iter >= self.phase1_iters {
            return Relaxation::Straight;
        }
        let f = if self.phase1_iters > 1 { iter as f64 / (self.phase1_iters - 1) as f64 } else { 0.0 };
        let lerp = |a: f64, b: f64| a + (b - a) * f;
        Relaxation::Soft {
            temperature: lerp(self.temperature_start, self.temperature_end),
            noise_std: lerp(self.noise_std_start, self.noise_std_end),
            med_temperature: lerp(self.med_temperature_start, self.med_temperature_end),
        }
    }
}

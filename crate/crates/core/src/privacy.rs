//! Gaussian mechanism, norm clipping, cosine-similarity deviation factors,
//! deviation-scaled noise for the master's per-device copies, and privacy
//! loss accounting.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fl_core::ModelVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrivacyError {
    #[error("epsilon = {0} outside (0, 1)")]
    InvalidEpsilon(f64),
    #[error("delta = {0} outside (0, 1)")]
    InvalidDelta(f64),
    #[error("theta = {0} outside [0, 1]")]
    InvalidTheta(f64),
    #[error("deviation factor {0} outside [0, 1]")]
    InvalidDeviation(f64),
    #[error("deviation * theta = {0} >= 1 gives unbounded noise")]
    UnboundedNoise(f64),
    #[error("no updates to compare against the global model")]
    NoUpdates,
}

pub type Result<T> = std::result::Result<T, PrivacyError>;

/// An `(epsilon, delta)` target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyParams {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyParams {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(PrivacyError::InvalidEpsilon(epsilon));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(PrivacyError::InvalidDelta(delta));
        }
        Ok(Self { epsilon, delta })
    }
}

/// L2 sensitivity of a released vector.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Sensitivity(pub f64);

/// Deviation of a device's update from the global model, in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct DeviationFactor(f64);

impl DeviationFactor {
    pub const ZERO: Self = Self(0.0);

    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(PrivacyError::InvalidDeviation(value));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

fn gaussian_scale(epsilon: f64, delta: f64) -> f64 {
    (2.0 * (1.25 / delta).ln()).sqrt() / epsilon
}

/// Smallest noise multiplier for which the Gaussian mechanism is
/// `(epsilon, delta)`-DP.
pub fn min_sigma(p: PrivacyParams) -> Result<f64> {
    let p = PrivacyParams::new(p.epsilon, p.delta)?;
    Ok(gaussian_scale(p.epsilon, p.delta))
}

/// Adds i.i.d. `N(0, (S_f * sigma)²)` noise to every coordinate.
pub fn gaussian_perturb<R: Rng + ?Sized>(v: &ModelVector, sensitivity: Sensitivity, sigma: f64, rng: &mut R) -> ModelVector {
    let std = sensitivity.0 * sigma;
    if std == 0.0 {
        return v.clone();
    }
    let noisy = v
        .as_slice()
        .iter()
        .map(|x| {
            let z: f64 = rng.sample(StandardNormal);
            x + std * z
        })
        .collect();
    ModelVector::from_vec(noisy)
}

/// Rescales `h` onto the L2 ball of radius `bound`. The clip bound is the
/// sensitivity of the released vector.
pub fn clip_to_sensitivity(h: &ModelVector, bound: f64) -> (ModelVector, Sensitivity) {
    let norm = h.norm();
    let clipped = if norm > bound { h.scaled(bound / norm) } else { h.clone() };
    (clipped, Sensitivity(bound))
}

/// Cosine similarity; zero when either vector has (near) zero norm.
pub fn cosine_similarity(a: &ModelVector, b: &ModelVector) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na <= 1e-15 || nb <= 1e-15 {
        return 0.0;
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0)
}

/// `E_k = 1 - sim(w, h_k) / max_i sim(w, h_i)`, clamped to `[0, 1]`.
///
/// When no similarity is positive there is no meaningful reference
/// direction and every device gets 0.
pub fn deviation_factors(global: &ModelVector, updates: &[ModelVector]) -> Result<Vec<DeviationFactor>> {
    if updates.is_empty() {
        return Err(PrivacyError::NoUpdates);
    }
    let sims: Vec<f64> = updates.iter().map(|h| cosine_similarity(global, h)).collect();
    let best = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if best <= 0.0 {
        return Ok(vec![DeviationFactor::ZERO; updates.len()]);
    }
    Ok(sims
        .into_iter()
        .map(|s| DeviationFactor((1.0 - s / best).clamp(0.0, 1.0)))
        .collect())
}

/// Noise multiplier for the master's copy of the global model sent to a
/// device with deviation `E`: the budget shrinks to `epsilon (1 - E theta)`.
pub fn adaptive_sigma(global: PrivacyParams, deviation: DeviationFactor, theta: f64) -> Result<f64> {
    let global = PrivacyParams::new(global.epsilon, global.delta)?;
    if !(0.0..=1.0).contains(&theta) {
        return Err(PrivacyError::InvalidTheta(theta));
    }
    let shrink = deviation.0 * theta;
    if shrink >= 1.0 {
        return Err(PrivacyError::UnboundedNoise(shrink));
    }
    Ok(gaussian_scale(global.epsilon * (1.0 - shrink), global.delta))
}

/// Basic composition over `rounds` releases.
pub fn compose_basic(rounds: u64, p: PrivacyParams) -> (f64, f64) {
    let m = rounds as f64;
    (m * p.epsilon, m * p.delta)
}

/// Strong composition: `(epsilon sqrt(M ln(1/delta)), M delta)`.
pub fn compose_strong(rounds: u64, p: PrivacyParams) -> (f64, f64) {
    if rounds == 0 {
        return (0.0, 0.0);
    }
    let m = rounds as f64;
    (p.epsilon * (m * (1.0 / p.delta).ln()).sqrt(), m * p.delta)
}

/// Running privacy-loss account for one entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    params: PrivacyParams,
    rounds: u64,
}

impl PrivacyLedger {
    pub fn new(params: PrivacyParams) -> Self {
        Self { params, rounds: 0 }
    }

    pub fn record_release(&mut self) {
        self.rounds += 1;
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    pub fn basic_total(&self) -> (f64, f64) {
        compose_basic(self.rounds, self.params)
    }

    pub fn strong_total(&self) -> (f64, f64) {
        compose_strong(self.rounds, self.params)
    }
}

//! Device-side computation/transmission policies.
//!
//! A device trades learning gain against energy. The expected deviation
//! factor decays exponentially in computation energy, and the utility is
//!
//! ```text
//! U(j, Z) = beta1 - beta1 exp(-E_cp / beta2) - E (E - rho)
//! ```
//!
//! with `E = E_cp + E_tx`. The change of variable `Z = ln(1 + g P)`, where
//! `g` is the SNR per watt over the modulation gap, makes `E_tx(Z)` convex
//! and turns the deadline into a convex constraint in `(j, Z)`.
//!
//! Energies entering the utility are multiplied by a configurable
//! normalization (`energy_scale`, in 1/J). Everything else is in SI units.

use std::collections::VecDeque;
use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fl_core::{accuracy_upper_bound, LossSpec};
use crate::wireless::{round_energy, ChannelState, MtdProfile, RoundEnergy, WirelessError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("device skips the round: {0}")]
    Skip(SkipReason),
    #[error("non-finite stationarity residual at Z = {z} (bracket [{lo}, {hi}])")]
    NonFiniteResidual { z: f64, lo: f64, hi: f64 },
    #[error("invalid policy input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SkipReason {
    /// `T <= j_min d tau`: not even the minimum work fits the deadline
    DeadlineInfeasible,
    /// `P_min > P_max`
    PowerInfeasible,
    /// `j_max < j_min`
    NoComputeBudget,
    LinkDown,
}

impl std::fmt::Display for SkipReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SkipReason::DeadlineInfeasible => "deadline infeasible",
            SkipReason::PowerInfeasible => "minimum power exceeds maximum power",
            SkipReason::NoComputeBudget => "no compute budget",
            SkipReason::LinkDown => "link down",
        };
        f.write_str(s)
    }
}

impl From<WirelessError> for PolicyError {
    fn from(e: WirelessError) -> Self {
        match e {
            WirelessError::LinkDown => PolicyError::Skip(SkipReason::LinkDown),
            other => PolicyError::InvalidInput(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, PolicyError>;

pub const DEFAULT_FIT_WINDOW: usize = 8;

/// Exponential model of the deviation factor a device expects for a given
/// (normalized) computation energy, refit from a sliding window of
/// observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationModelFit {
    beta1: f64,
    beta2: f64,
    default_beta1: f64,
    default_beta2: f64,
    window: usize,
    history: VecDeque<(f64, f64)>,
}

impl DeviationModelFit {
    pub fn new(default_beta1: f64, default_beta2: f64, window: usize) -> Self {
        assert!(default_beta1 > 0.0 && default_beta2 > 0.0 && window >= 2);
        Self {
            beta1: default_beta1,
            beta2: default_beta2,
            default_beta1,
            default_beta2,
            window,
            history: VecDeque::with_capacity(window),
        }
    }

    /// A fixed model, as used by oracles and tests.
    pub fn with_params(beta1: f64, beta2: f64) -> Self {
        Self::new(beta1, beta2, DEFAULT_FIT_WINDOW)
    }

    pub fn beta1(&self) -> f64 {
        self.beta1
    }

    pub fn beta2(&self) -> f64 {
        self.beta2
    }

    pub fn history(&self) -> impl Iterator<Item = &(f64, f64)> {
        self.history.iter()
    }

    /// Records the deviation observed after spending `e_cp` (normalized) on
    /// computation and refits.
    pub fn observe(&mut self, e_cp: f64, deviation: f64) {
        if self.history.len() == self.window {
            self.history.pop_front();
        }
        self.history.push_back((e_cp, deviation));
        self.refit();
    }

    fn refit(&mut self) {
        let usable: Vec<(f64, f64)> = self.history.iter().copied().filter(|&(_, e)| e > 0.0).collect();
        if usable.len() < 2 {
            self.beta1 = self.default_beta1;
            self.beta2 = self.default_beta2;
            return;
        }
        if let Some((b1, b2)) = fit_deviation_model(&usable) {
            self.beta1 = b1;
            self.beta2 = b2;
        }
    }
}

pub fn expected_deviation(fit: &DeviationModelFit, e_cp: f64) -> f64 {
    fit.beta1 * (-e_cp / fit.beta2).exp()
}

/// Least squares on `ln E = ln beta1 - E_cp / beta2` over points with
/// `E > 0`. Returns `None` when the fit is degenerate (all energies equal)
/// or the deviation does not decrease with energy. `beta1` is capped at 1.
pub fn fit_deviation_model(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> = points.iter().filter(|p| p.1 > 0.0).map(|&(x, e)| (x, e.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 1e-24 * (1.0 + mx * mx) {
        return None;
    }
    let slope = sxy / sxx;
    if !(slope < 0.0) {
        return None;
    }
    let intercept = my - slope * mx;
    let beta1 = intercept.exp().min(1.0);
    let beta2 = -1.0 / slope;
    (beta1 > 0.0 && beta2.is_finite()).then_some((beta1, beta2))
}

/// Everything a device knows when choosing its policy for one round.
#[derive(Debug, Clone, Copy)]
pub struct PolicyProblem<'a> {
    pub profile: &'a MtdProfile,
    pub channel: &'a ChannelState,
    /// delay bound `T`, seconds
    pub deadline_s: f64,
    /// update size `V_v`, bits
    pub model_bits: f64,
    /// utility-energy trade-off `rho`
    pub energy_weight: f64,
    /// normalization applied to joules before they enter the utility
    pub energy_scale: f64,
}

impl PolicyProblem<'_> {
    /// SNR per watt divided by the gap.
    fn gain(&self) -> f64 {
        self.channel.snr_per_watt_over_gap(self.profile.distance_m)
    }

    fn nats_time(&self) -> f64 {
        self.model_bits * LN_2 / self.profile.bandwidth_hz
    }

    fn b(&self) -> f64 {
        LN_2 / (self.profile.drain_efficiency * self.profile.bandwidth_hz * self.gain())
    }

    fn c(&self) -> f64 {
        self.profile.drain_efficiency * self.gain() * self.profile.circuit_power_w - 1.0
    }

    pub fn z_of_p(&self, power_w: f64) -> f64 {
        (self.gain() * power_w).ln_1p()
    }

    pub fn p_of_z(&self, z: f64) -> f64 {
        z.exp_m1() / self.gain()
    }

    pub fn rate_of_z(&self, z: f64) -> f64 {
        self.profile.bandwidth_hz * z / LN_2
    }

    pub fn tx_time_of_z(&self, z: f64) -> f64 {
        self.nats_time() / z
    }

    /// Transmission energy as a function of `Z`, joules.
    pub fn tx_energy_of_z(&self, z: f64) -> f64 {
        self.model_bits * self.b() * (z.exp() + self.c()) / z
    }

    /// Smallest `Z` that leaves room for `j` iterations before the deadline.
    pub fn z_for_deadline(&self, j: f64) -> Option<f64> {
        let slack = self.deadline_s - j * self.profile.iteration_time();
        (slack > 0.0).then(|| self.nats_time() / slack)
    }

    /// Iterations that exactly fill the deadline at rate `Z` (continuous).
    pub fn j_for_deadline(&self, z: f64) -> f64 {
        (self.deadline_s - self.tx_time_of_z(z)) / self.profile.iteration_time()
    }

    fn scaled_energy(&self, j: f64, z: f64) -> (f64, f64) {
        let s = self.energy_scale;
        (s * j * self.profile.iteration_energy(), s * self.tx_energy_of_z(z))
    }

    /// `Z` minimizing transmission energy: the root of `(Z - 1) e^Z = c`.
    pub fn energy_minimizing_z(&self) -> f64 {
        let c = self.c();
        let f = |z: f64| (z - 1.0) * z.exp() - c;
        let mut hi = 1.0;
        while f(hi) < 0.0 {
            hi *= 2.0;
        }
        bisect(f, 0.0, hi).0
    }
}

/// Feasible box of the transformed problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyBounds {
    pub p_min: f64,
    pub p_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub j_min: usize,
    pub j_max: usize,
}

/// Transmit power needed to finish `j_min` iterations and the upload before
/// the deadline.
pub fn p_min(problem: &PolicyProblem, j_min: usize) -> Result<f64> {
    let z = problem
        .z_for_deadline(j_min as f64)
        .ok_or(PolicyError::Skip(SkipReason::DeadlineInfeasible))?;
    Ok(problem.p_of_z(z))
}

/// Upper bound on iterations at transmit power `p_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IterationBudget {
    pub iterations: usize,
    /// the upload alone exceeds the deadline
    pub no_compute_budget: bool,
}

pub fn j_max(problem: &PolicyProblem, p_max: f64) -> Result<IterationBudget> {
    let z = problem.z_of_p(p_max);
    if !(z > 0.0) {
        return Err(PolicyError::Skip(SkipReason::LinkDown));
    }
    let j = problem.j_for_deadline(z);
    if j < 0.0 {
        return Ok(IterationBudget { iterations: 0, no_compute_budget: true });
    }
    let j = ((j + 1e-9).floor() as usize).min(problem.profile.j_max_cap);
    Ok(IterationBudget { iterations: j, no_compute_budget: false })
}

pub fn bounds(problem: &PolicyProblem) -> Result<PolicyBounds> {
    let profile = problem.profile;
    let z_min = problem
        .z_for_deadline(profile.j_min as f64)
        .ok_or(PolicyError::Skip(SkipReason::DeadlineInfeasible))?;
    let z_max = problem.z_of_p(profile.max_power_w);
    if !(z_max > 0.0) {
        return Err(PolicyError::Skip(SkipReason::LinkDown));
    }
    if z_min > z_max {
        return Err(PolicyError::Skip(SkipReason::PowerInfeasible));
    }
    let budget = j_max(problem, profile.max_power_w)?;
    if budget.no_compute_budget || budget.iterations < profile.j_min {
        return Err(PolicyError::Skip(SkipReason::NoComputeBudget));
    }
    Ok(PolicyBounds {
        p_min: problem.p_of_z(z_min),
        p_max: profile.max_power_w,
        z_min,
        z_max,
        j_min: profile.j_min,
        j_max: budget.iterations,
    })
}

/// Device utility at a (possibly fractional) iteration count and rate
/// variable `Z`.
pub fn utility(fit: &DeviationModelFit, j: f64, z: f64, problem: &PolicyProblem) -> Result<f64> {
    if !(z > 0.0) {
        return Err(PolicyError::InvalidInput(format!("Z = {z} must be positive")));
    }
    let (e_cp, e_tx) = problem.scaled_energy(j, z);
    Ok(utility_from_energies(fit, e_cp, e_cp + e_tx, problem.energy_weight))
}

/// Utility from normalized computation and total energies.
pub fn utility_from_energies(fit: &DeviationModelFit, e_cp: f64, e_total: f64, energy_weight: f64) -> f64 {
    -expected_deviation(fit, e_cp) + fit.beta1 - e_total * (e_total - energy_weight)
}

/// Stationarity residual along the deadline `j d tau + T_tx(Z) = T`:
///
/// ```text
/// (2 E(Z) - rho) (B b ((Z-1)e^Z - c) / (P_cp ln 2) + 1) - (beta1/beta2) exp(-E_cp(Z)/beta2)
/// ```
///
/// with `E_cp(Z) = P_cp (T - V ln2 / (B Z))` and energies normalized. Its
/// sign is opposite to `dU/dZ` along the deadline curve.
pub fn zhat_residual(fit: &DeviationModelFit, z: f64, problem: &PolicyProblem) -> f64 {
    let p = problem.profile;
    let s = problem.energy_scale;
    let e_cp = s * p.cp_power_w * (problem.deadline_s - problem.tx_time_of_z(z));
    let e_tot = e_cp + s * problem.tx_energy_of_z(z);
    let ratio = p.bandwidth_hz * problem.b() * ((z - 1.0) * z.exp() - problem.c()) / (p.cp_power_w * LN_2);
    (2.0 * e_tot - problem.energy_weight) * (ratio + 1.0) - fit.beta1 / fit.beta2 * (-e_cp / fit.beta2).exp()
}

const BISECTION_MAX_ITER: usize = 200;

/// Bisection on a sign change of `f` over `[lo, hi]`; runs until the
/// bracket can no longer be split in floating point. Returns the point with
/// the smallest residual and that residual.
fn bisect<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64) -> (f64, f64) {
    let mut f_lo = f(lo);
    let mut best = if f_lo.abs() <= f(hi).abs() { (lo, f_lo) } else { (hi, f(hi)) };
    for _ in 0..BISECTION_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f_mid = f(mid);
        if f_mid.abs() < best.1.abs() {
            best = (mid, f_mid);
        }
        if f_mid == 0.0 {
            break;
        }
        if (f_mid < 0.0) == (f_lo < 0.0) {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    best
}

/// Interior stationary point of the utility along the deadline curve, found
/// by bisection on [`zhat_residual`] over `[max(Z_min, V ln2/(B T)), Z_max]`.
/// `None` when the residual does not change sign in the bracket.
pub fn solve_zhat(fit: &DeviationModelFit, problem: &PolicyProblem, bounds: &PolicyBounds) -> Result<Option<f64>> {
    let lo = bounds.z_min.max(problem.nats_time() / problem.deadline_s);
    let hi = bounds.z_max;
    if !(hi > lo) {
        return Ok(None);
    }
    let r_lo = zhat_residual(fit, lo, problem);
    let r_hi = zhat_residual(fit, hi, problem);
    for (z, r) in [(lo, r_lo), (hi, r_hi)] {
        if !r.is_finite() {
            return Err(PolicyError::NonFiniteResidual { z, lo, hi });
        }
    }
    if r_lo == 0.0 {
        return Ok(Some(lo));
    }
    if (r_lo < 0.0) == (r_hi < 0.0) && r_hi != 0.0 {
        return Ok(None);
    }
    let (z, r) = bisect(|z| zhat_residual(fit, z, problem), lo, hi);
    if !r.is_finite() {
        return Err(PolicyError::NonFiniteResidual { z, lo, hi });
    }
    Ok(Some(z))
}

/// A device's decision for one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyDecision {
    pub iterations: usize,
    pub z: f64,
    pub power_w: f64,
    pub rate_bps: f64,
    /// `q^j` bound on the local accuracy
    pub accuracy_bound: f64,
    /// utility under the device's model; `None` for policies that ignore it
    pub utility: Option<f64>,
    pub energy: RoundEnergy,
    pub cp_time_s: f64,
    pub tx_time_s: f64,
}

fn decide(problem: &PolicyProblem, j: usize, z: f64, power: f64, spec: &LossSpec, utility: Option<f64>) -> Result<PolicyDecision> {
    let energy = round_energy(j, power, problem.profile, problem.channel, problem.model_bits)?;
    let bound = accuracy_upper_bound(j, spec.step_size, spec.lipschitz)
        .map_err(|e| PolicyError::InvalidInput(e.to_string()))?;
    Ok(PolicyDecision {
        iterations: j,
        z,
        power_w: power,
        rate_bps: problem.rate_of_z(z),
        accuracy_bound: bound,
        utility,
        energy,
        cp_time_s: j as f64 * problem.profile.iteration_time(),
        tx_time_s: problem.tx_time_of_z(z),
    })
}

/// Feasible `Z` range for `j` iterations, or `None` if `j` does not fit.
fn z_range(problem: &PolicyProblem, bounds: &PolicyBounds, j: usize) -> Option<(f64, f64)> {
    if j < bounds.j_min || j > bounds.j_max {
        return None;
    }
    let z_dead = problem.z_for_deadline(j as f64)?;
    if z_dead > bounds.z_max * (1.0 + 1e-12) {
        return None;
    }
    let lo = bounds.z_min.max(z_dead).min(bounds.z_max);
    Some((lo, bounds.z_max))
}

/// Best `Z` for a fixed iteration count. Only the total energy depends on
/// `Z`, and the utility is maximized over total energy at `rho/2`, so the
/// choice is the feasible `Z` whose total energy is closest to that target.
fn best_z_for(problem: &PolicyProblem, bounds: &PolicyBounds, j: usize) -> Option<f64> {
    let (lo, hi) = z_range(problem, bounds, j)?;
    let target = 0.5 * problem.energy_weight;
    let total = |z: f64| {
        let (cp, tx) = problem.scaled_energy(j as f64, z);
        cp + tx
    };
    let z_e = problem.energy_minimizing_z().clamp(lo, hi);
    if total(z_e) >= target {
        return Some(z_e);
    }
    if total(hi) >= target {
        return Some(bisect(|z| total(z) - target, z_e, hi).0);
    }
    if total(lo) >= target {
        return Some(bisect(|z| total(z) - target, lo, z_e).0);
    }
    Some(if total(hi) >= total(lo) { hi } else { lo })
}

/// Continuous stationary iteration count when the deadline is slack and
/// `Z` sits at the transmission-energy minimizer.
fn slack_iterations(fit: &DeviationModelFit, problem: &PolicyProblem, bounds: &PolicyBounds) -> f64 {
    let z_e = problem.energy_minimizing_z().clamp(bounds.z_min, bounds.z_max);
    let s = problem.energy_scale;
    let a = s * problem.profile.iteration_energy();
    let e_tx = s * problem.tx_energy_of_z(z_e);
    let f = |j: f64| fit.beta1 / fit.beta2 * (-a * j / fit.beta2).exp() - (2.0 * (a * j + e_tx) - problem.energy_weight);
    let (lo, hi) = (bounds.j_min as f64, bounds.j_max as f64);
    if f(lo) <= 0.0 {
        lo
    } else if f(hi) >= 0.0 {
        hi
    } else {
        bisect(f, lo, hi).0
    }
}

/// Utility-maximizing computation and transmission policy.
///
/// The deadline-active stationary point comes from [`solve_zhat`]; it is
/// clamped to `[Z_min, Z_max]` and paired with the deadline-saturating
/// iteration count (capped at `j_max`). Because `j` is an integer and the
/// deadline need not bind at the optimum, the final choice is the best of
/// the floor/ceiling of that point, the deadline-slack stationary point and
/// the iteration bounds, each with its best feasible `Z`, followed by a
/// local search over neighbouring iteration counts.
pub fn optimal_policy(fit: &DeviationModelFit, problem: &PolicyProblem, spec: &LossSpec) -> Result<PolicyDecision> {
    let b = bounds(problem)?;
    let eval = |j: usize, z: f64| utility(fit, j as f64, z, problem);

    let mut continuous = Vec::with_capacity(4);
    match solve_zhat(fit, problem, &b)? {
        Some(z_hat) => {
            let z = if z_hat < b.z_max { b.z_min.max(z_hat) } else { b.z_max };
            continuous.push((problem.j_for_deadline(z).min(b.j_max as f64), Some(z)));
        }
        None => {
            for z in [b.z_min, b.z_max] {
                continuous.push((problem.j_for_deadline(z).min(b.j_max as f64), Some(z)));
            }
        }
    }
    continuous.push((slack_iterations(fit, problem, &b), None));
    continuous.push((b.j_min as f64, None));
    continuous.push((b.j_max as f64, None));

    let mut best: Option<(f64, usize, f64)> = None;
    let consider = |j: usize, z: f64, best: &mut Option<(f64, usize, f64)>| -> Result<()> {
        let Some((lo, hi)) = z_range(problem, &b, j) else { return Ok(()) };
        let z = z.clamp(lo, hi);
        let u = eval(j, z)?;
        if best.is_none_or(|(bu, _, _)| u > bu) {
            *best = Some((u, j, z));
        }
        Ok(())
    };

    for (j_cont, z_cont) in continuous {
        let j_cont = j_cont.clamp(b.j_min as f64, b.j_max as f64);
        for j in [j_cont.floor() as usize, j_cont.ceil() as usize] {
            if let Some(z) = z_cont {
                consider(j, z, &mut best)?;
                if let Some(z_dead) = problem.z_for_deadline(j as f64) {
                    consider(j, z_dead, &mut best)?;
                }
            }
            if let Some(z) = best_z_for(problem, &b, j) {
                consider(j, z, &mut best)?;
            }
        }
    }

    let (mut u_best, mut j_best, mut z_best) = best.ok_or(PolicyError::Skip(SkipReason::NoComputeBudget))?;
    // integer local search; the value of the best Z per iteration count is
    // unimodal in j when the utility is concave
    for dir in [1isize, -1] {
        loop {
            let next = j_best as isize + dir;
            if next < b.j_min as isize || next > b.j_max as isize {
                break;
            }
            let next = next as usize;
            let Some(z) = best_z_for(problem, &b, next) else { break };
            let u = eval(next, z)?;
            if u > u_best {
                (u_best, j_best, z_best) = (u, next, z);
            } else {
                break;
            }
        }
    }

    let decision = decide(problem, j_best, z_best, problem.p_of_z(z_best), spec, Some(u_best))?;
    debug_assert!(check_constraints(&decision, problem, &b).is_ok(), "{:?}", check_constraints(&decision, problem, &b));
    Ok(decision)
}

/// Grid resolution for [`brute_force_policy`]: `points` evenly spaced values
/// per axis, endpoints included.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridResolution {
    pub points: usize,
}

/// Exhaustive search over integer `j` and gridded `Z` within the feasible
/// box. When the iteration range is wider than the grid, iteration counts
/// are rounded from an even grid.
pub fn brute_force_policy(
    fit: &DeviationModelFit,
    problem: &PolicyProblem,
    spec: &LossSpec,
    grid: GridResolution,
) -> Result<PolicyDecision> {
    if grid.points < 2 {
        return Err(PolicyError::InvalidInput("grid needs at least 2 points per axis".into()));
    }
    let b = bounds(problem)?;
    let span = (b.j_max - b.j_min) as f64;
    let steps = (grid.points - 1) as f64;
    let mut js: Vec<usize> = if b.j_max - b.j_min < grid.points {
        (b.j_min..=b.j_max).collect()
    } else {
        (0..grid.points).map(|i| b.j_min + (span * i as f64 / steps).round() as usize).collect()
    };
    js.dedup();

    let deadline = problem.deadline_s * (1.0 + 1e-12);
    let mut best: Option<(f64, usize, f64)> = None;
    for &j in &js {
        let cp = j as f64 * problem.profile.iteration_time();
        for i in 0..grid.points {
            let z = b.z_min + (b.z_max - b.z_min) * i as f64 / steps;
            if z <= 0.0 || cp + problem.tx_time_of_z(z) > deadline {
                continue;
            }
            let u = utility(fit, j as f64, z, problem)?;
            if best.is_none_or(|(bu, _, _)| u > bu) {
                best = Some((u, j, z));
            }
        }
    }
    let (u, j, z) = best.ok_or(PolicyError::Skip(SkipReason::NoComputeBudget))?;
    decide(problem, j, z, problem.p_of_z(z), spec, Some(u))
}

/// Baseline policy: full power and as many iterations as the deadline
/// allows.
pub fn benchmark_policy(problem: &PolicyProblem, spec: &LossSpec) -> Result<PolicyDecision> {
    let b = bounds(problem)?;
    decide(problem, b.j_max, b.z_max, b.p_max, spec, None)
}

/// Verifies a decision against the box and deadline constraints.
pub fn check_constraints(d: &PolicyDecision, problem: &PolicyProblem, b: &PolicyBounds) -> std::result::Result<(), String> {
    let tol = 1e-9;
    if d.iterations < b.j_min || d.iterations > b.j_max {
        return Err(format!("j = {} outside [{}, {}]", d.iterations, b.j_min, b.j_max));
    }
    if d.z < b.z_min * (1.0 - tol) || d.z > b.z_max * (1.0 + tol) {
        return Err(format!("Z = {} outside [{}, {}]", d.z, b.z_min, b.z_max));
    }
    if d.power_w < b.p_min * (1.0 - 1e-6) || d.power_w > b.p_max * (1.0 + 1e-6) {
        return Err(format!("P = {} outside [{}, {}]", d.power_w, b.p_min, b.p_max));
    }
    if d.cp_time_s + d.tx_time_s > problem.deadline_s + tol {
        return Err(format!("time {} exceeds deadline {}", d.cp_time_s + d.tx_time_s, problem.deadline_s));
    }
    if !(0.0..=1.0).contains(&d.accuracy_bound) || d.rate_bps < 0.0 {
        return Err("accuracy bound or rate out of range".into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fl_core::LossKind;
    use crate::wireless::{path_loss_factor, rate, snr, tx_time};

    pub(crate) fn profile(distance: f64) -> MtdProfile {
        MtdProfile {
            samples: 200,
            sec_per_sample: 2.5e-5,
            cp_power_w: 0.096,
            circuit_power_w: 0.0825,
            drain_efficiency: 0.45,
            bandwidth_hz: 250e3,
            distance_m: distance,
            max_power_w: 1.0,
            j_min: 10,
            j_max_cap: 1000,
        }
    }

    pub(crate) fn channel(gain: f64) -> ChannelState {
        ChannelState {
            gain,
            kappa: path_loss_factor(32e6),
            path_loss_exponent: 4.0,
            noise_w: 3.981e-21 * 250e3,
            gap: 9.55,
        }
    }

    fn spec() -> LossSpec {
        LossSpec::new(LossKind::LeastSquaresRidge, 0.1, 0.5, 1.0, 1.0, 1.0).unwrap()
    }

    fn problem<'a>(p: &'a MtdProfile, ch: &'a ChannelState) -> PolicyProblem<'a> {
        PolicyProblem { profile: p, channel: ch, deadline_s: 0.75, model_bits: 875e3, energy_weight: 0.5, energy_scale: 1.0 }
    }

    #[test]
    fn expected_deviation_values() {
        let fit = DeviationModelFit::with_params(1.0, 0.2);
        assert_eq!(expected_deviation(&fit, 0.0), 1.0);
        assert!((expected_deviation(&fit, 0.1) - 0.6065306597).abs() < 1e-9);
        assert!(expected_deviation(&fit, 0.2) < expected_deviation(&fit, 0.1));
    }

    #[test]
    fn fit_recovers_exact_model() {
        let pts: Vec<(f64, f64)> = [0.1, 0.3].iter().map(|&x| (x, (-x / 0.2f64).exp())).collect();
        let (b1, b2) = fit_deviation_model(&pts).unwrap();
        assert!((b1 - 1.0).abs() < 1e-9 && (b2 - 0.2).abs() < 1e-9);
    }

    #[test]
    fn fit_defaults_and_degenerate_cases() {
        let mut fit = DeviationModelFit::new(1.0, 0.05, 2);
        assert_eq!((fit.beta1(), fit.beta2()), (1.0, 0.05));
        fit.observe(0.1, 0.0);
        assert_eq!((fit.beta1(), fit.beta2()), (1.0, 0.05));

        fit.observe(0.1, 0.5);
        fit.observe(0.2, 0.3);
        assert!(fit.beta2() > 0.0 && fit.beta1() <= 1.0);
        let fitted = (fit.beta1(), fit.beta2());

        // flat deviation, then equal energies, then increasing deviation:
        // all keep the previous fit
        fit.observe(0.3, 0.3);
        assert_eq!((fit.beta1(), fit.beta2()), fitted);
        fit.observe(0.3, 0.2);
        assert_eq!((fit.beta1(), fit.beta2()), fitted);
        fit.observe(0.4, 0.9);
        assert_eq!((fit.beta1(), fit.beta2()), fitted);
        assert_eq!(fit.history().count(), 2);

        // too few usable points falls back to the defaults
        fit.observe(0.5, 0.0);
        assert_eq!((fit.beta1(), fit.beta2()), (1.0, 0.05));
        assert!(fit_deviation_model(&[(0.2, 0.5), (0.2, 0.4)]).is_none());
    }

    #[test]
    fn z_and_p_are_inverse() {
        let (p, ch) = (profile(120.0), channel(0.7));
        let pr = problem(&p, &ch);
        assert_eq!(pr.z_of_p(0.0), 0.0);
        assert_eq!(pr.p_of_z(0.0), 0.0);
        let mut last = 0.0;
        for i in 1..=100 {
            let power = 1e-4 * 1.1f64.powi(i);
            let z = pr.z_of_p(power);
            assert!(z > last);
            last = z;
            assert!((pr.p_of_z(z) - power).abs() <= 1e-12 * power);
        }
    }

    #[test]
    fn rate_of_z_matches_shannon_rate() {
        let (p, ch) = (profile(80.0), channel(1.3));
        let pr = problem(&p, &ch);
        for power in [1e-3, 0.05, 0.7] {
            let r = rate(p.bandwidth_hz, snr(power, &ch, p.distance_m), ch.gap);
            assert!((pr.rate_of_z(pr.z_of_p(power)) - r).abs() <= 1e-9 * r);
        }
    }

    #[test]
    fn tx_energy_in_z_matches_direct_model() {
        let (p, ch) = (profile(150.0), channel(0.4));
        let pr = problem(&p, &ch);
        for power in [1e-3, 0.02, 0.5, 1.0] {
            let e = round_energy(0, power, &p, &ch, 875e3).unwrap();
            let ez = pr.tx_energy_of_z(pr.z_of_p(power));
            assert!((e.transmission - ez).abs() <= 1e-9 * ez);
        }
    }

    #[test]
    fn p_min_inverts_the_deadline() {
        let (p, ch) = (profile(100.0), channel(1.0));
        let pr = problem(&p, &ch);
        let pm = p_min(&pr, p.j_min).unwrap();
        let r = rate(p.bandwidth_hz, snr(pm, &ch, p.distance_m), ch.gap);
        let t = tx_time(875e3, r).unwrap();
        let residual = 0.75 - p.j_min as f64 * p.iteration_time();
        assert!((t - residual).abs() <= 1e-9 * residual);

        // hand evaluation of the closed form
        let g = ch.kappa * ch.gain / (ch.noise_w * 100f64.powi(4) * ch.gap);
        let expected = ((875e3 * LN_2 / (250e3 * residual)).exp() - 1.0) / g;
        assert!((pm - expected).abs() <= 1e-12 * expected);

        // a very long deadline needs almost no power
        let long = PolicyProblem { deadline_s: 1e9, ..pr };
        assert!(p_min(&long, p.j_min).unwrap() < 1e-12);

        let short = PolicyProblem { deadline_s: 0.04, ..pr };
        assert_eq!(p_min(&short, p.j_min).unwrap_err(), PolicyError::Skip(SkipReason::DeadlineInfeasible));
    }

    #[test]
    fn j_max_examples() {
        let mut p = profile(100.0);
        p.sec_per_sample = 0.01 / p.samples as f64;
        // choose the gain so that the upload takes 0.2 s at P_max = 1 W
        let z_needed = 875e3 * LN_2 / (250e3 * 0.2);
        let mut ch = channel(1.0);
        ch.gain = z_needed.exp_m1() * ch.noise_w * 100f64.powi(4) * ch.gap / ch.kappa;
        let pr = PolicyProblem { deadline_s: 1.0, ..problem(&p, &ch) };
        assert_eq!(j_max(&pr, 1.0).unwrap().iterations, 80);

        let at_boundary = PolicyProblem { deadline_s: 0.2, ..pr };
        assert_eq!(j_max(&at_boundary, 1.0).unwrap().iterations, 0);
        let below = PolicyProblem { deadline_s: 0.1, ..pr };
        assert!(j_max(&below, 1.0).unwrap().no_compute_budget);

        let mut prev = 0;
        for pm in [0.01, 0.1, 0.5, 1.0, 2.0] {
            let j = j_max(&pr, pm).unwrap().iterations;
            assert!(j >= prev);
            prev = j;
        }
    }

    #[test]
    fn utility_zero_energy_limit() {
        let fit = DeviationModelFit::with_params(0.7, 0.1);
        assert_eq!(utility_from_energies(&fit, 0.0, 0.0, 0.5), 0.0);
        let (p, ch) = (profile(100.0), channel(1.0));
        assert!(utility(&fit, 10.0, 0.0, &problem(&p, &ch)).is_err());
    }

    #[test]
    fn residual_matches_printed_form_at_unit_scale() {
        let (p, ch) = (profile(140.0), channel(0.8));
        let pr = problem(&p, &ch);
        let fit = DeviationModelFit::with_params(0.9, 0.03);
        let g = ch.kappa * ch.gain / (ch.noise_w * 140f64.powf(4.0) * ch.gap);
        let b = ch.noise_w * 140f64.powf(4.0) * ch.gap * LN_2 / (p.drain_efficiency * ch.kappa * p.bandwidth_hz * ch.gain);
        let c = p.drain_efficiency * p.circuit_power_w * g - 1.0;
        let (v, t, bw, pcp) = (875e3, 0.75, p.bandwidth_hz, p.cp_power_w);
        for z in [3.0, 6.5, 9.0] {
            let lhs = (2.0 * pcp * (t - v * LN_2 / (bw * z)) + 2.0 * v * b / z * (z.exp() + c) - 0.5)
                * (bw * b / (pcp * LN_2) * ((z - 1.0) * z.exp() - c) + 1.0);
            let rhs = 0.9 / 0.03 * (pcp / 0.03 * (v * LN_2 / (bw * z) - t)).exp();
            let r = zhat_residual(&fit, z, &pr);
            assert!((r - (lhs - rhs)).abs() <= 1e-9 * (lhs.abs() + rhs.abs()));
        }
    }

    #[test]
    fn degenerate_box_returns_the_single_point() {
        let mut p = profile(100.0);
        let ch = channel(1.0);
        let pr0 = problem(&p, &ch);
        // deadline such that j_max = j_min = 10 at P_max exactly
        let t = p.j_min as f64 * p.iteration_time() + pr0.tx_time_of_z(pr0.z_of_p(p.max_power_w));
        p.j_max_cap = 10;
        let pr = PolicyProblem { deadline_s: t, ..problem(&p, &ch) };
        let b = bounds(&pr).unwrap();
        assert_eq!((b.j_min, b.j_max), (10, 10));
        assert!((b.p_min - b.p_max).abs() <= 1e-9);
        let d = optimal_policy(&DeviationModelFit::with_params(1.0, 0.05), &pr, &spec()).unwrap();
        assert_eq!(d.iterations, 10);
        assert!((d.power_w - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn benchmark_uses_full_power_and_budget() {
        let (p, ch) = (profile(180.0), channel(0.5));
        let pr = problem(&p, &ch);
        let d = benchmark_policy(&pr, &spec()).unwrap();
        assert_eq!(d.iterations, j_max(&pr, p.max_power_w).unwrap().iterations);
        assert_eq!(d.power_w, p.max_power_w);
        assert!(d.cp_time_s + d.tx_time_s <= 0.75 + 1e-12);
        assert!(d.utility.is_none());
    }

    #[test]
    fn hopeless_channel_skips() {
        let (p, ch) = (profile(200.0), channel(1e-7));
        let pr = problem(&p, &ch);
        assert_eq!(bounds(&pr).unwrap_err(), PolicyError::Skip(SkipReason::PowerInfeasible));
        assert!(matches!(optimal_policy(&DeviationModelFit::with_params(1.0, 0.1), &pr, &spec()), Err(PolicyError::Skip(_))));
        assert!(matches!(benchmark_policy(&pr, &spec()), Err(PolicyError::Skip(_))));
    }

    #[test]
    fn brute_force_refines_with_denser_grid() {
        let (p, ch) = (profile(90.0), channel(0.9));
        let pr = problem(&p, &ch);
        let fit = DeviationModelFit::with_params(0.8, 0.02);
        let mut prev = f64::NEG_INFINITY;
        for points in [5, 9, 17, 33, 65] {
            let u = brute_force_policy(&fit, &pr, &spec(), GridResolution { points }).unwrap().utility.unwrap();
            assert!(u >= prev - 1e-15);
            prev = u;
        }
        assert!(brute_force_policy(&fit, &pr, &spec(), GridResolution { points: 1 }).is_err());
    }
}

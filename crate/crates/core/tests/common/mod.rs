#![allow(dead_code)]

use fairfl::fl_core::{Dataset, LossKind, LossSpec};
use fairfl::policy::{bounds, DeviationModelFit, PolicyProblem};
use fairfl::wireless::{path_loss_factor, ChannelState, MtdProfile};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

/// A randomly drawn, feasible single-device policy problem.
pub struct PolicyInstance {
    pub profile: MtdProfile,
    pub channel: ChannelState,
    pub deadline_s: f64,
    pub model_bits: f64,
    pub energy_weight: f64,
    pub energy_scale: f64,
    pub fit: DeviationModelFit,
}

impl PolicyInstance {
    pub fn problem(&self) -> PolicyProblem<'_> {
        PolicyProblem {
            profile: &self.profile,
            channel: &self.channel,
            deadline_s: self.deadline_s,
            model_bits: self.model_bits,
            energy_weight: self.energy_weight,
            energy_scale: self.energy_scale,
        }
    }
}

pub fn random_policy_instance<R: Rng>(rng: &mut R) -> PolicyInstance {
    loop {
        let samples = 200;
        let profile = MtdProfile {
            samples,
            sec_per_sample: rng.random_range(0.002..0.01) / samples as f64,
            cp_power_w: 0.096,
            circuit_power_w: 0.0825,
            drain_efficiency: 0.45,
            bandwidth_hz: 250e3,
            distance_m: rng.random_range(50.0..200.0),
            max_power_w: 1.0,
            j_min: 10,
            j_max_cap: 1000,
        };
        let gain: f64 = Exp1.sample(rng);
        let channel = ChannelState {
            gain: gain.max(f64::MIN_POSITIVE),
            kappa: path_loss_factor(32e6),
            path_loss_exponent: 4.0,
            noise_w: 10f64.powf(-17.4) * 1e-3 * 250e3,
            gap: 10f64.powf(0.98),
        };
        let inst = PolicyInstance {
            profile,
            channel,
            deadline_s: rng.random_range(0.5..1.5),
            model_bits: 875e3,
            energy_weight: 0.5,
            energy_scale: rng.random_range(0.5..5.0),
            fit: DeviationModelFit::with_params(rng.random_range(0.3..1.0), rng.random_range(0.02..0.5)),
        };
        if bounds(&inst.problem()).is_ok() {
            return inst;
        }
    }
}

pub fn policy_loss_spec() -> LossSpec {
    LossSpec::new(LossKind::LeastSquaresRidge, 0.1, 0.5, 1.0, 1.0, 1.0).unwrap()
}

/// Least-squares data with a Gram spectrum spread by per-column scales.
pub fn random_regression<R: Rng>(rng: &mut R, n: usize, dim: usize, col_scale: &[f64]) -> Dataset {
    let truth: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..dim).map(|c| col_scale[c] * rng.sample::<f64, _>(StandardNormal)).collect();
        let y = row.iter().zip(&truth).map(|(x, t)| x * t).sum::<f64>() + 0.1 * rng.sample::<f64, _>(StandardNormal);
        rows.push(row);
        labels.push(y);
    }
    Dataset::new(rows, labels).unwrap()
}

/// A local surrogate problem: data, loss constants, current model and
/// global gradient.
pub struct SurrogateInstance {
    pub data: Dataset,
    pub spec: LossSpec,
    pub w: fairfl::fl_core::ModelVector,
    pub global_grad: fairfl::fl_core::ModelVector,
}

/// Random strongly convex surrogate problems, least squares or logistic,
/// with per-column feature scales in [0.2, 2), ridge weight in [0.01, 0.5)
/// and `eta L` uniform in [0.1, 1.9).
pub fn random_surrogate_instance<R: Rng>(rng: &mut R) -> SurrogateInstance {
    let dim = 5;
    let scales: Vec<f64> = (0..dim).map(|_| rng.random_range(0.2..2.0)).collect();
    let mut data = random_regression(rng, 60, dim, &scales);
    let kind = if rng.random_bool(0.5) { LossKind::LeastSquaresRidge } else { LossKind::LogisticRidge };
    if kind == LossKind::LogisticRidge {
        let labels = data.labels().iter().map(|y| if *y >= 0.0 { 1.0 } else { -1.0 }).collect();
        data = Dataset::new((0..data.len()).map(|i| data.row(i).to_vec()).collect(), labels).unwrap();
    }
    let lambda = rng.random_range(0.01..0.5);
    let step_scale = rng.random_range(0.1..1.9);
    let spec = LossSpec::from_datasets(kind, lambda, step_scale, 1.0, std::slice::from_ref(&data)).unwrap();
    let vec = |rng: &mut R| fairfl::fl_core::ModelVector::from_vec((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
    let w = vec(rng);
    let global_grad = vec(rng);
    SurrogateInstance { data, spec, w, global_grad }
}

/// A random feasible `(j, Z)` point of a policy instance, `j` continuous.
pub fn random_feasible_point<R: Rng>(rng: &mut R, inst: &PolicyInstance) -> (f64, f64) {
    let pr = inst.problem();
    let b = bounds(&pr).unwrap();
    loop {
        let j = rng.random_range(b.j_min as f64..=b.j_max as f64);
        let z = rng.random_range(b.z_min..=b.z_max);
        if j * pr.profile.iteration_time() + pr.tx_time_of_z(z) <= pr.deadline_s {
            return (j, z);
        }
    }
}

/// Normalized total energy at `(j, Z)`.
pub fn scaled_total_energy(inst: &PolicyInstance, j: f64, z: f64) -> f64 {
    let pr = inst.problem();
    pr.energy_scale * (j * pr.profile.iteration_energy() + pr.tx_energy_of_z(z))
}

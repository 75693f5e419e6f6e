//! Round loop: policies, local training, clipping and noise, aggregation,
//! deviation factors and per-device noisy broadcasts.
//!
//! Randomness comes from independent ChaCha8 streams keyed by
//! `(purpose, device, round)`, so channel draws and datasets are identical
//! across schemes for the same seed, and per-device work can run on any
//! number of threads without changing a single draw.

use rand::SeedableRng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::config::{Scheme, SimConfig};
use crate::config::ConfigError;
use crate::fl_core::{
    aggregate, average_gradient, local_gradient, local_loss, run_local_iterations, Dataset, FlError, LossKind, LossSpec,
    ModelVector,
};
use crate::policy::{benchmark_policy, optimal_policy, DeviationModelFit, PolicyDecision, PolicyError, PolicyProblem};
use crate::privacy::{
    adaptive_sigma, clip_to_sensitivity, deviation_factors, gaussian_perturb, min_sigma, DeviationFactor, PrivacyError,
    PrivacyLedger, Sensitivity,
};
use crate::wireless::{draw_channel, ChannelState, MtdProfile, WirelessError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("round {round}: {source}")]
    Learning { round: usize, source: FlError },
    #[error("round {round}: {source}")]
    Privacy { round: usize, source: PrivacyError },
    #[error("round {round}, device {device}: {source}")]
    Policy { round: usize, device: usize, source: PolicyError },
    #[error("round {round}, device {device}: {source}")]
    Channel { round: usize, device: usize, source: WirelessError },
    #[error("setup: {0}")]
    Setup(String),
    #[error("record sink: {0}")]
    Sink(String),
}

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Clone, Copy)]
#[repr(u64)]
enum Stream {
    Truth = 1,
    Data = 2,
    Channel = 3,
    LocalNoise = 4,
    GlobalNoise = 5,
}

/// device index used for draws shared by all devices
const SHARED: u64 = (1 << 24) - 1;

fn stream(seed: u64, purpose: Stream, device: u64, round: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 56) | (device << 32) | round);
    rng
}

/// Per-device state carried across rounds.
#[derive(Debug, Clone)]
pub struct MtdState {
    pub index: usize,
    pub profile: MtdProfile,
    pub dataset: Dataset,
    /// the (noisy) global model this device last received
    pub model: ModelVector,
    pub fit: DeviationModelFit,
    pub ledger: PrivacyLedger,
    pub energy_cp_j: f64,
    pub energy_tx_j: f64,
}

/// The access point keeps the exact aggregate; devices only ever see noisy
/// copies of it.
#[derive(Debug, Clone)]
pub struct ApState {
    pub global: ModelVector,
}

/// One device in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub device: usize,
    pub scheme: Scheme,
    /// local loss at the model the device holds after the round
    pub loss: f64,
    pub deviation: Option<f64>,
    pub iterations: Option<usize>,
    pub tx_power_w: Option<f64>,
    pub rate_bps: Option<f64>,
    pub e_cp_j: Option<f64>,
    pub e_tx_j: Option<f64>,
    pub e_tot_j: Option<f64>,
    /// noise multiplier applied to the device's copy of the global model
    pub sigma_g: Option<f64>,
    pub utility: Option<f64>,
    pub skipped: bool,
}

pub struct Simulation {
    config: SimConfig,
    scheme: Scheme,
    spec: LossSpec,
    devices: Vec<MtdState>,
    ap: ApState,
    pool: rayon::ThreadPool,
}

/// Ground-truth model, datasets and initial states.
pub fn setup(config: &SimConfig, scheme: Scheme) -> Result<Simulation> {
    config.validate()?;
    let seed = config.run.seed;
    let t = &config.task;
    let truth: Vec<f64> = {
        let mut rng = stream(seed, Stream::Truth, 0, 0);
        (0..t.dim).map(|_| t.truth_scale * rng.sample::<f64, _>(StandardNormal)).collect()
    };
    let datasets: Vec<Dataset> = (0..config.run.devices)
        .map(|k| synthetic_dataset(config, &truth, k))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| SimError::Setup(e.to_string()))?;
    let spec = LossSpec::from_datasets(t.kind, t.lambda, t.step_scale, t.xi, &datasets).map_err(|e| SimError::Setup(e.to_string()))?;
    let local = config.privacy_local();
    let devices = datasets
        .into_iter()
        .enumerate()
        .map(|(k, dataset)| MtdState {
            index: k,
            profile: config.profile(k),
            dataset,
            model: ModelVector::zeros(t.dim),
            fit: DeviationModelFit::new(config.utility.beta1_default, config.utility.beta2_default, config.utility.fit_window),
            ledger: PrivacyLedger::new(local),
            energy_cp_j: 0.0,
            energy_tx_j: 0.0,
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.run.threads)
        .build()
        .map_err(|e| SimError::Setup(e.to_string()))?;
    Ok(Simulation { config: config.clone(), scheme, spec, devices, ap: ApState { global: ModelVector::zeros(t.dim) }, pool })
}

fn synthetic_dataset(config: &SimConfig, truth: &[f64], device: usize) -> std::result::Result<Dataset, FlError> {
    let t = &config.task;
    let mut rng = stream(config.run.seed, Stream::Data, device as u64, 0);
    let n = config.samples(device);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..t.dim).map(|_| t.feature_scale * rng.sample::<f64, _>(StandardNormal)).collect();
        let score: f64 = x.iter().zip(truth).map(|(a, b)| a * b).sum();
        let y = match t.kind {
            LossKind::LeastSquaresRidge => score + t.label_noise * rng.sample::<f64, _>(StandardNormal),
            LossKind::LogisticRidge => {
                let y = if score >= 0.0 { 1.0 } else { -1.0 };
                if rng.random::<f64>() < t.label_noise {
                    -y
                } else {
                    y
                }
            }
        };
        rows.push(x);
        labels.push(y);
    }
    Dataset::new(rows, labels)
}

impl Simulation {
    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn spec(&self) -> &LossSpec {
        &self.spec
    }

    pub fn devices(&self) -> &[MtdState] {
        &self.devices
    }

    pub fn ap(&self) -> &ApState {
        &self.ap
    }

    /// The channel device `k` sees in `round`; identical across schemes.
    pub fn channel(&self, round: usize, device: usize) -> Result<ChannelState> {
        let mut rng = stream(self.config.run.seed, Stream::Channel, device as u64, round as u64);
        draw_channel(&mut rng, &self.config.channel_constants(), self.devices[device].profile.bandwidth_hz)
            .map_err(|source| SimError::Channel { round, device, source })
    }

    fn plan(&self, round: usize) -> Result<Vec<Option<PolicyDecision>>> {
        let cfg = &self.config;
        let scheme = self.scheme;
        let spec = &self.spec;
        self.pool.install(|| {
            self.devices
                .par_iter()
                .map(|dev| {
                    let k = dev.index;
                    let channel = self.channel(round, k)?;
                    let problem = PolicyProblem {
                        profile: &dev.profile,
                        channel: &channel,
                        deadline_s: cfg.round.deadline_s,
                        model_bits: cfg.round.model_bits,
                        energy_weight: cfg.utility.energy_weight,
                        energy_scale: cfg.utility.energy_scale,
                    };
                    let decision = match scheme {
                        Scheme::Proposed => optimal_policy(&dev.fit, &problem, spec),
                        Scheme::Benchmark => benchmark_policy(&problem, spec),
                    };
                    match decision {
                        Ok(d) => Ok(Some(d)),
                        Err(PolicyError::Skip(_)) => Ok(None),
                        Err(source) => Err(SimError::Policy { round, device: k, source }),
                    }
                })
                .collect()
        })
    }

    /// Executes one communication round and returns one record per device,
    /// in device order.
    pub fn run_round(&mut self, round: usize) -> Result<Vec<RoundRecord>> {
        let cfg = self.config.clone();
        let seed = cfg.run.seed;
        let noiseless = cfg.privacy.noiseless;
        let clip = cfg.privacy.clip;
        let spec = self.spec;
        let fl = |source| SimError::Learning { round, source };
        let dp = |source| SimError::Privacy { round, source };

        let plans = self.plan(round)?;
        let active: Vec<usize> = (0..self.devices.len()).filter(|&k| plans[k].is_some()).collect();

        // gradient exchange at the models devices currently hold
        let grads: Vec<ModelVector> = self.pool.install(|| {
            active
                .par_iter()
                .map(|&k| local_gradient(&self.devices[k].model, &self.devices[k].dataset, &spec))
                .collect::<std::result::Result<_, _>>()
        }).map_err(fl)?;

        let mut deviations: Vec<Option<DeviationFactor>> = vec![None; self.devices.len()];
        if !active.is_empty() {
            let global_grad = average_gradient(&grads).map_err(fl)?;
            let local_sigma = min_sigma(cfg.privacy_local()).map_err(dp)?;
            let updates: Vec<ModelVector> = self.pool.install(|| {
                active
                    .par_iter()
                    .map(|&k| {
                        let dev = &self.devices[k];
                        let j = plans[k].as_ref().map_or(0, |d| d.iterations);
                        let h = run_local_iterations(&dev.model, &dev.dataset, &global_grad, &spec, j)?;
                        if noiseless {
                            return Ok(h);
                        }
                        let (clipped, sens) = clip_to_sensitivity(&h, clip);
                        let mut rng = stream(seed, Stream::LocalNoise, k as u64, round as u64);
                        Ok(gaussian_perturb(&clipped, sens, local_sigma, &mut rng))
                    })
                    .collect::<std::result::Result<_, FlError>>()
            }).map_err(fl)?;

            self.ap.global = aggregate(&self.ap.global, &updates).map_err(fl)?;
            let factors = deviation_factors(&self.ap.global, &updates).map_err(dp)?;
            for (&k, e) in active.iter().zip(factors) {
                deviations[k] = Some(e);
            }
        }

        // noisy copies of the new global model
        let global_params = cfg.privacy_global();
        let sens = Sensitivity(clip);
        let received: Vec<Option<(ModelVector, f64)>> = if noiseless {
            deviations.iter().map(|e| e.map(|_| (self.ap.global.clone(), 0.0))).collect()
        } else {
            match self.scheme {
                Scheme::Benchmark => {
                    let sigma = min_sigma(global_params).map_err(dp)?;
                    let mut rng = stream(seed, Stream::GlobalNoise, SHARED, round as u64);
                    let copy = gaussian_perturb(&self.ap.global, sens, sigma, &mut rng);
                    deviations.iter().map(|e| e.map(|_| (copy.clone(), sigma))).collect()
                }
                Scheme::Proposed => {
                    let global = &self.ap.global;
                    let theta = cfg.privacy.theta;
                    self.pool.install(|| {
                        deviations
                            .par_iter()
                            .enumerate()
                            .map(|(k, e)| {
                                e.map(|e| {
                                    let sigma = adaptive_sigma(global_params, e, theta)?;
                                    let mut rng = stream(seed, Stream::GlobalNoise, k as u64, round as u64);
                                    Ok((gaussian_perturb(global, sens, sigma, &mut rng), sigma))
                                })
                                .transpose()
                            })
                            .collect::<std::result::Result<_, PrivacyError>>()
                    })
                    .map_err(dp)?
                }
            }
        };

        let scale = cfg.utility.energy_scale;
        let mut records = Vec::with_capacity(self.devices.len());
        for (k, (dev, copy)) in self.devices.iter_mut().zip(received).enumerate() {
            let decision = plans[k];
            let mut sigma_g = None;
            if let (Some(d), Some((model, sigma))) = (decision, copy) {
                dev.model = model;
                sigma_g = Some(sigma);
                dev.ledger.record_release();
                dev.energy_cp_j += d.energy.computation;
                dev.energy_tx_j += d.energy.transmission;
                if self.scheme == Scheme::Proposed {
                    let e = deviations[k].map_or(0.0, |e| e.value());
                    dev.fit.observe(scale * d.energy.computation, e);
                }
            }
            let loss = local_loss(&dev.model, &dev.dataset, &spec).map_err(fl)?;
            records.push(RoundRecord {
                round,
                device: k,
                scheme: self.scheme,
                loss,
                deviation: deviations[k].map(|e| e.value()),
                iterations: decision.map(|d| d.iterations),
                tx_power_w: decision.map(|d| d.power_w),
                rate_bps: decision.map(|d| d.rate_bps),
                e_cp_j: decision.map(|d| d.energy.computation),
                e_tx_j: decision.map(|d| d.energy.transmission),
                e_tot_j: decision.map(|d| d.energy.total),
                sigma_g,
                utility: decision.and_then(|d| d.utility),
                skipped: decision.is_none(),
            });
        }
        Ok(records)
    }

    /// Runs all configured rounds, handing each round's records to `sink`.
    pub fn run<F>(&mut self, mut sink: F) -> Result<()>
    where
        F: FnMut(&[RoundRecord]) -> std::result::Result<(), String>,
    {
        for m in 0..self.config.run.rounds {
            let records = self.run_round(m)?;
            sink(&records).map_err(SimError::Sink)?;
        }
        Ok(())
    }
}

/// Runs a full simulation of `scheme` and collects every record.
pub fn run_simulation(config: &SimConfig, scheme: Scheme) -> Result<Vec<RoundRecord>> {
    let mut sim = setup(config, scheme)?;
    let mut out = Vec::with_capacity(config.run.rounds * config.run.devices);
    sim.run(|r| {
        out.extend_from_slice(r);
        Ok(())
    })?;
    Ok(out)
}

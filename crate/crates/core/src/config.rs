//! Simulation configuration: a flat `section.key = value` document.
//!
//! Every key is optional; missing keys take the defaults below. Power and
//! noise levels are given in dB units and converted on access.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fl_core::LossKind;
use crate::privacy::PrivacyParams;
use crate::wireless::{db_to_linear, dbm_to_watts, ChannelConstants, MtdProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// utility-driven policies with deviation-adaptive noise
    Proposed,
    /// maximum effort at full power with fixed noise
    Benchmark,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Proposed => "proposed",
            Scheme::Benchmark => "benchmark",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "proposed" => Ok(Scheme::Proposed),
            "benchmark" => Ok(Scheme::Benchmark),
            other => Err(format!("unknown scheme `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub devices: usize,
    pub rounds: usize,
    pub scheme: Scheme,
    pub seed: u64,
    /// worker threads for per-device work; 0 uses all cores
    pub threads: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { devices: 10, rounds: 200, scheme: Scheme::Proposed, seed: 1, threads: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub kind: LossKind,
    pub dim: usize,
    /// samples per device
    pub samples: usize,
    /// relative spread of sample counts across devices, in [0, 1)
    pub samples_spread: f64,
    pub feature_scale: f64,
    pub truth_scale: f64,
    /// label noise std (least squares) or flip probability (logistic)
    pub label_noise: f64,
    pub lambda: f64,
    /// product `eta L` of the local step size and smoothness
    pub step_scale: f64,
    pub xi: f64,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            kind: LossKind::LogisticRidge,
            dim: 20,
            samples: 200,
            samples_spread: 0.0,
            feature_scale: 1.0,
            truth_scale: 1.0,
            label_noise: 0.1,
            lambda: 0.01,
            step_scale: 1.0,
            xi: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrivacySection {
    pub epsilon_g: f64,
    pub delta_g: f64,
    pub epsilon_k: f64,
    pub delta_k: f64,
    pub theta: f64,
    /// clipping bound on local updates, also used as the sensitivity
    pub clip: f64,
    /// disables clipping and all noise
    pub noiseless: bool,
}

impl Default for PrivacySection {
    fn default() -> Self {
        Self { epsilon_g: 0.95, delta_g: 1e-5, epsilon_k: 0.95, delta_k: 1e-5, theta: 0.6, clip: 0.01, noiseless: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceSection {
    pub sec_per_sample: f64,
    pub cp_power_w: f64,
    pub circuit_power_w: f64,
    pub drain_efficiency: f64,
    pub bandwidth_hz: f64,
    pub max_power_dbw: f64,
    pub j_min: usize,
    pub j_max_cap: usize,
    pub distance_min_m: f64,
    pub distance_max_m: f64,
}

impl Default for DeviceSection {
    fn default() -> Self {
        Self {
            sec_per_sample: 2.5e-5,
            cp_power_w: 0.096,
            circuit_power_w: 0.0825,
            drain_efficiency: 0.45,
            bandwidth_hz: 250e3,
            max_power_dbw: 0.0,
            j_min: 10,
            j_max_cap: 1000,
            distance_min_m: 50.0,
            distance_max_m: 200.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSection {
    pub path_loss_exponent: f64,
    pub carrier_hz: f64,
    pub fading_scale: f64,
    pub gap_db: f64,
    pub noise_dbm_per_hz: f64,
}

impl Default for ChannelSection {
    fn default() -> Self {
        Self { path_loss_exponent: 4.0, carrier_hz: 32e6, fading_scale: 1.0, gap_db: 9.8, noise_dbm_per_hz: -174.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundSection {
    pub deadline_s: f64,
    pub model_bits: f64,
}

impl Default for RoundSection {
    fn default() -> Self {
        Self { deadline_s: 0.75, model_bits: 875e3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UtilitySection {
    pub energy_weight: f64,
    /// multiplier applied to joules before they enter the utility
    pub energy_scale: f64,
    pub beta1_default: f64,
    pub beta2_default: f64,
    pub fit_window: usize,
}

impl Default for UtilitySection {
    fn default() -> Self {
        // beta2: normalized computation energy of computing for half the deadline
        let energy_scale = 6.0;
        let beta2 = energy_scale * DeviceSection::default().cp_power_w * RoundSection::default().deadline_s / 2.0;
        Self { energy_weight: 0.5, energy_scale, beta1_default: 1.0, beta2_default: beta2, fit_window: 8 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub run: RunSection,
    pub task: TaskSection,
    pub privacy: PrivacySection,
    pub device: DeviceSection,
    pub channel: ChannelSection,
    pub round: RoundSection,
    pub utility: UtilitySection,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub key: &'static str,
    pub constraint: &'static str,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: must satisfy {}", self.key, self.constraint)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config:\n{}", .0.iter().map(|v| format!("  {v}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Violation>),
}

impl SimConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// All constraint violations, or `Ok` if there are none.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut v = Vec::new();
        let mut check = |ok: bool, key: &'static str, constraint: &'static str| {
            if !ok {
                v.push(Violation { key, constraint });
            }
        };
        let pos = |x: f64| x.is_finite() && x > 0.0;
        let unit_open = |x: f64| x > 0.0 && x < 1.0;

        let r = &self.run;
        check(r.devices >= 1 && r.devices < 1 << 24, "run.devices", "1 <= devices < 2^24");
        check(r.rounds >= 1 && r.rounds < 1 << 32, "run.rounds", "1 <= rounds < 2^32");

        let t = &self.task;
        check(t.dim >= 1, "task.dim", "dim >= 1");
        check(t.samples >= 1, "task.samples", "samples >= 1");
        check((0.0..1.0).contains(&t.samples_spread), "task.samples_spread", "0 <= spread < 1");
        check(pos(t.feature_scale), "task.feature_scale", "> 0");
        check(t.truth_scale.is_finite() && t.truth_scale >= 0.0, "task.truth_scale", ">= 0");
        match t.kind {
            LossKind::LogisticRidge => check((0.0..=0.5).contains(&t.label_noise), "task.label_noise", "flip probability in [0, 0.5]"),
            LossKind::LeastSquaresRidge => check(t.label_noise.is_finite() && t.label_noise >= 0.0, "task.label_noise", ">= 0"),
        }
        check(pos(t.lambda), "task.lambda", "> 0");
        check(t.step_scale > 0.0 && t.step_scale < 2.0, "task.step_scale", "0 < eta L < 2");
        check(t.xi.is_finite(), "task.xi", "finite");

        let p = &self.privacy;
        check(unit_open(p.epsilon_g), "privacy.epsilon_g", "epsilon in (0, 1)");
        check(unit_open(p.delta_g), "privacy.delta_g", "delta in (0, 1)");
        check(unit_open(p.epsilon_k), "privacy.epsilon_k", "epsilon in (0, 1)");
        check(unit_open(p.delta_k), "privacy.delta_k", "delta in (0, 1)");
        check((0.0..1.0).contains(&p.theta), "privacy.theta", "0 <= theta < 1");
        check(pos(p.clip), "privacy.clip", "> 0");

        let d = &self.device;
        check(pos(d.sec_per_sample), "device.sec_per_sample", "> 0");
        check(pos(d.cp_power_w), "device.cp_power_w", "> 0");
        check(pos(d.circuit_power_w), "device.circuit_power_w", "> 0");
        check(d.drain_efficiency > 0.0 && d.drain_efficiency <= 1.0, "device.drain_efficiency", "0 < rho <= 1");
        check(pos(d.bandwidth_hz), "device.bandwidth_hz", "> 0");
        check(d.max_power_dbw.is_finite(), "device.max_power_dbw", "finite");
        check(d.j_min >= 1, "device.j_min", ">= 1");
        check(d.j_max_cap >= d.j_min, "device.j_max_cap", ">= j_min");
        check(pos(d.distance_min_m), "device.distance_min_m", "> 0");
        check(d.distance_max_m.is_finite() && d.distance_max_m >= d.distance_min_m, "device.distance_max_m", ">= distance_min_m");

        let c = &self.channel;
        check(pos(c.path_loss_exponent), "channel.path_loss_exponent", "> 0");
        check(pos(c.carrier_hz), "channel.carrier_hz", "> 0");
        check(pos(c.fading_scale), "channel.fading_scale", "> 0");
        check(c.gap_db.is_finite() && c.gap_db >= 0.0, "channel.gap_db", ">= 0 dB");
        check(c.noise_dbm_per_hz.is_finite(), "channel.noise_dbm_per_hz", "finite");

        check(pos(self.round.deadline_s), "round.deadline_s", "> 0");
        check(pos(self.round.model_bits), "round.model_bits", "> 0");

        let u = &self.utility;
        check(u.energy_weight.is_finite() && u.energy_weight >= 0.0, "utility.energy_weight", ">= 0");
        check(pos(u.energy_scale), "utility.energy_scale", "> 0");
        check(u.beta1_default > 0.0 && u.beta1_default <= 1.0, "utility.beta1_default", "0 < beta1 <= 1");
        check(pos(u.beta2_default), "utility.beta2_default", "> 0");
        check(u.fit_window >= 2, "utility.fit_window", ">= 2");

        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(v))
        }
    }

    /// Flat `section.key = value` rendering that [`SimConfig::from_toml_str`]
    /// reads back to an equal value.
    pub fn to_flat_string(&self) -> String {
        let value = toml::Value::try_from(self).expect("config serializes");
        let mut out = String::new();
        if let toml::Value::Table(sections) = value {
            for (section, body) in sections {
                if let toml::Value::Table(keys) = body {
                    for (key, v) in keys {
                        let _ = writeln!(out, "{section}.{key} = {}", render(&v));
                    }
                    out.push('\n');
                }
            }
        }
        out
    }

    pub fn privacy_global(&self) -> PrivacyParams {
        PrivacyParams { epsilon: self.privacy.epsilon_g, delta: self.privacy.delta_g }
    }

    pub fn privacy_local(&self) -> PrivacyParams {
        PrivacyParams { epsilon: self.privacy.epsilon_k, delta: self.privacy.delta_k }
    }

    pub fn channel_constants(&self) -> ChannelConstants {
        let c = &self.channel;
        ChannelConstants {
            path_loss_exponent: c.path_loss_exponent,
            carrier_hz: c.carrier_hz,
            fading_scale: c.fading_scale,
            gap: db_to_linear(c.gap_db),
            noise_psd: dbm_to_watts(c.noise_dbm_per_hz),
        }
    }

    pub fn max_power_w(&self) -> f64 {
        db_to_linear(self.device.max_power_dbw)
    }

    /// Distances are spread evenly over the configured range.
    pub fn distance(&self, device: usize) -> f64 {
        let d = &self.device;
        if self.run.devices == 1 {
            return 0.5 * (d.distance_min_m + d.distance_max_m);
        }
        let frac = device as f64 / (self.run.devices - 1) as f64;
        d.distance_min_m + frac * (d.distance_max_m - d.distance_min_m)
    }

    /// Sample counts are spread evenly over `samples (1 +/- spread)`.
    pub fn samples(&self, device: usize) -> usize {
        let t = &self.task;
        if self.run.devices == 1 || t.samples_spread == 0.0 {
            return t.samples;
        }
        let frac = device as f64 / (self.run.devices - 1) as f64;
        ((t.samples as f64 * (1.0 + t.samples_spread * (2.0 * frac - 1.0))).round() as usize).max(1)
    }

    pub fn profile(&self, device: usize) -> MtdProfile {
        let d = &self.device;
        MtdProfile {
            samples: self.samples(device),
            sec_per_sample: d.sec_per_sample,
            cp_power_w: d.cp_power_w,
            circuit_power_w: d.circuit_power_w,
            drain_efficiency: d.drain_efficiency,
            bandwidth_hz: d.bandwidth_hz,
            distance_m: self.distance(device),
            max_power_w: self.max_power_w(),
            j_min: d.j_min,
            j_max_cap: d.j_max_cap,
        }
    }
}

fn render(v: &toml::Value) -> String {
    match v {
        // shortest representation that parses back to the same bits
        toml::Value::Float(x) => {
            let s = format!("{x:?}");
            if s.contains(['.', 'e', 'E', 'n', 'i']) {
                s
            } else {
                format!("{s}.0")
            }
        }
        other => other.to_string(),
    }
}

pub fn load_config(path: &Path) -> Result<SimConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
    SimConfig::from_toml_str(&text)
}

pub fn save_config(config: &SimConfig, path: &Path) -> Result<(), ConfigError> {
    std::fs::write(path, config.to_flat_string()).map_err(|source| ConfigError::Io { path: path.to_owned(), source })
}

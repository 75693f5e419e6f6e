//! Record persistence, per-run summaries and scheme comparison.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Scheme, SimConfig};
use crate::simulator::RoundRecord;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("non-finite value in field `{field}` at round {round}, device {device}")]
    NonFinite { field: &'static str, round: usize, device: usize },
    #[error("no records")]
    Empty,
    #[error("record sets differ in shape: {0}")]
    ShapeMismatch(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ReportError>;

pub const CSV_HEADER: [&str; 14] = [
    "round", "device", "scheme", "loss", "deviation", "iterations", "tx_power_w", "rate_bps", "e_cp_j", "e_tx_j", "e_tot_j",
    "sigma_g", "utility", "skipped",
];

/// 17 significant digits, enough to read back the exact value.
fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn float_field(field: &'static str, v: Option<f64>, r: &RoundRecord) -> Result<String> {
    match v {
        None => Ok(String::new()),
        Some(x) if x.is_finite() => Ok(fmt_f64(x)),
        Some(_) => Err(ReportError::NonFinite { field, round: r.round, device: r.device }),
    }
}

pub fn write_records<W: Write>(records: &[RoundRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.round.to_string(),
            r.device.to_string(),
            r.scheme.as_str().to_string(),
            float_field("loss", Some(r.loss), r)?,
            float_field("deviation", r.deviation, r)?,
            r.iterations.map(|j| j.to_string()).unwrap_or_default(),
            float_field("tx_power_w", r.tx_power_w, r)?,
            float_field("rate_bps", r.rate_bps, r)?,
            float_field("e_cp_j", r.e_cp_j, r)?,
            float_field("e_tx_j", r.e_tx_j, r)?,
            float_field("e_tot_j", r.e_tot_j, r)?,
            float_field("sigma_g", r.sigma_g, r)?,
            float_field("utility", r.utility, r)?,
            r.skipped.to_string(),
        ])?;
    }
    w.flush().map_err(|source| ReportError::Io { path: PathBuf::from("<writer>"), source })?;
    Ok(())
}

/// Writes records as CSV, ordered by (round, device).
pub fn emit_records(records: &[RoundRecord], path: &Path) -> Result<()> {
    let mut sorted = records.to_vec();
    sorted.sort_by_key(|r| (r.round, r.device));
    let file = std::fs::File::create(path).map_err(|source| ReportError::Io { path: path.to_owned(), source })?;
    let mut buf = std::io::BufWriter::new(file);
    write_records(&sorted, &mut buf)?;
    buf.flush().map_err(|source| ReportError::Io { path: path.to_owned(), source })
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<RoundRecord>> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(ReportError::Parse { line: 1, msg: format!("unexpected header {header:?}") });
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let err = |msg: String| ReportError::Parse { line, msg };
        let get = |c: usize| row.get(c).unwrap_or("");
        let opt_f = |c: usize| -> Result<Option<f64>> {
            let s = get(c);
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|e| err(format!("{}: {e}", CSV_HEADER[c])))
            }
        };
        out.push(RoundRecord {
            round: get(0).parse().map_err(|e| err(format!("round: {e}")))?,
            device: get(1).parse().map_err(|e| err(format!("device: {e}")))?,
            scheme: get(2).parse().map_err(err)?,
            loss: opt_f(3)?.ok_or_else(|| err("loss is empty".into()))?,
            deviation: opt_f(4)?,
            iterations: match get(5) {
                "" => None,
                s => Some(s.parse().map_err(|e| err(format!("iterations: {e}")))?),
            },
            tx_power_w: opt_f(6)?,
            rate_bps: opt_f(7)?,
            e_cp_j: opt_f(8)?,
            e_tx_j: opt_f(9)?,
            e_tot_j: opt_f(10)?,
            sigma_g: opt_f(11)?,
            utility: opt_f(12)?,
            skipped: get(13).parse().map_err(|e| err(format!("skipped: {e}")))?,
        });
    }
    Ok(out)
}

pub fn load_records(path: &Path) -> Result<Vec<RoundRecord>> {
    let file = std::fs::File::open(path).map_err(|source| ReportError::Io { path: path.to_owned(), source })?;
    read_records(std::io::BufReader::new(file))
}

/// Fraction of the last rounds averaged into the final loss.
pub const FINAL_WINDOW_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSummary {
    pub device: usize,
    pub rounds: usize,
    pub skipped: usize,
    /// per participating round
    pub mean_e_cp_j: f64,
    pub mean_e_tx_j: f64,
    pub mean_e_tot_j: f64,
    pub mean_iterations: f64,
    pub mean_rate_bps: f64,
    pub mean_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub devices: Vec<DeviceSummary>,
    /// mean over devices of each device's mean total energy per round
    pub mean_energy_j: f64,
    /// standard deviation over devices of each device's mean total energy
    pub energy_std_j: f64,
    /// mean loss over all records
    pub mean_loss: f64,
    /// per-round standard deviation of loss across devices, averaged over rounds
    pub loss_std: f64,
    /// device-averaged loss over the final rounds
    pub final_loss: f64,
    pub mean_iterations: f64,
    pub mean_rate_bps: f64,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Population standard deviation.
fn std_dev(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs.iter().copied());
    mean(xs.iter().map(|x| (x - m) * (x - m))).sqrt()
}

fn rounds_of(records: &[RoundRecord]) -> usize {
    records.iter().map(|r| r.round + 1).max().unwrap_or(0)
}

pub fn summarize(records: &[RoundRecord]) -> Result<Summary> {
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    let n_dev = records.iter().map(|r| r.device + 1).max().unwrap_or(0);
    let n_rounds = rounds_of(records);
    let window = ((n_rounds as f64 * FINAL_WINDOW_FRACTION).round() as usize).max(1);
    let first_final = n_rounds.saturating_sub(window);

    let mut devices = Vec::with_capacity(n_dev);
    for k in 0..n_dev {
        let mine: Vec<&RoundRecord> = records.iter().filter(|r| r.device == k).collect();
        let part: Vec<&&RoundRecord> = mine.iter().filter(|r| !r.skipped).collect();
        devices.push(DeviceSummary {
            device: k,
            rounds: mine.len(),
            skipped: mine.len() - part.len(),
            mean_e_cp_j: mean(part.iter().filter_map(|r| r.e_cp_j)),
            mean_e_tx_j: mean(part.iter().filter_map(|r| r.e_tx_j)),
            mean_e_tot_j: mean(part.iter().filter_map(|r| r.e_tot_j)),
            mean_iterations: mean(part.iter().filter_map(|r| r.iterations.map(|j| j as f64))),
            mean_rate_bps: mean(part.iter().filter_map(|r| r.rate_bps)),
            mean_loss: mean(mine.iter().map(|r| r.loss)),
            final_loss: mean(mine.iter().filter(|r| r.round >= first_final).map(|r| r.loss)),
        });
    }
    let energies: Vec<f64> = devices.iter().map(|d| d.mean_e_tot_j).collect();
    let per_round_std = (0..n_rounds).map(|m| {
        let losses: Vec<f64> = records.iter().filter(|r| r.round == m).map(|r| r.loss).collect();
        std_dev(&losses)
    });
    Ok(Summary {
        mean_energy_j: mean(energies.iter().copied()),
        energy_std_j: std_dev(&energies),
        mean_loss: mean(records.iter().map(|r| r.loss)),
        loss_std: mean(per_round_std),
        final_loss: mean(devices.iter().map(|d| d.final_loss)),
        mean_iterations: mean(devices.iter().map(|d| d.mean_iterations)),
        mean_rate_bps: mean(devices.iter().map(|d| d.mean_rate_bps)),
        devices,
    })
}

/// Headline differences between the proposed scheme and the benchmark.
/// Reductions are positive when the proposed scheme is lower; gaps are
/// positive when it is higher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub energy_std_reduction_pct: f64,
    pub mean_energy_reduction_pct: f64,
    pub loss_std_proposed: f64,
    pub loss_std_benchmark: f64,
    pub mean_loss_gap_pct: f64,
    pub final_loss_gap_pct: f64,
    pub proposed: Summary,
    pub benchmark: Summary,
}

fn pct_reduction(proposed: f64, benchmark: f64) -> f64 {
    if benchmark == 0.0 {
        if proposed == 0.0 {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    } else {
        100.0 * (benchmark - proposed) / benchmark
    }
}

pub fn compare_schemes(proposed: &[RoundRecord], benchmark: &[RoundRecord]) -> Result<Comparison> {
    let shape = |rs: &[RoundRecord]| {
        let mut keys: Vec<(usize, usize)> = rs.iter().map(|r| (r.round, r.device)).collect();
        keys.sort_unstable();
        keys
    };
    if shape(proposed) != shape(benchmark) {
        return Err(ReportError::ShapeMismatch(format!("{} vs {} records", proposed.len(), benchmark.len())));
    }
    let p = summarize(proposed)?;
    let b = summarize(benchmark)?;
    Ok(Comparison {
        energy_std_reduction_pct: pct_reduction(p.energy_std_j, b.energy_std_j),
        mean_energy_reduction_pct: pct_reduction(p.mean_energy_j, b.mean_energy_j),
        loss_std_proposed: p.loss_std,
        loss_std_benchmark: b.loss_std,
        mean_loss_gap_pct: -pct_reduction(p.mean_loss, b.mean_loss),
        final_loss_gap_pct: -pct_reduction(p.final_loss, b.final_loss),
        proposed: p,
        benchmark: b,
    })
}

pub fn render_summary(scheme: Scheme, s: &Summary) -> String {
    let mut out = format!(
        "[{}] mean energy {:.6} J, energy std {:.6} J, mean loss {:.6}, loss std {:.6}, final loss {:.6}, mean iterations {:.2}, mean rate {:.1} bps\n",
        scheme.as_str(),
        s.mean_energy_j,
        s.energy_std_j,
        s.mean_loss,
        s.loss_std,
        s.final_loss,
        s.mean_iterations,
        s.mean_rate_bps
    );
    for d in &s.devices {
        out.push_str(&format!(
            "  device {:>3}: E_cp {:.6} J, E_tx {:.6} J, E_tot {:.6} J, iterations {:.2}, rate {:.1} bps, final loss {:.6}, skipped {}\n",
            d.device, d.mean_e_cp_j, d.mean_e_tx_j, d.mean_e_tot_j, d.mean_iterations, d.mean_rate_bps, d.final_loss, d.skipped
        ));
    }
    out
}

pub fn render_comparison(c: &Comparison) -> String {
    format!(
        "energy std reduction {:.2}%\nmean energy reduction {:.2}%\nloss std proposed {:.6}, benchmark {:.6}\nmean loss gap {:.2}%\nfinal loss gap {:.2}%\n",
        c.energy_std_reduction_pct,
        c.mean_energy_reduction_pct,
        c.loss_std_proposed,
        c.loss_std_benchmark,
        c.mean_loss_gap_pct,
        c.final_loss_gap_pct
    )
}

/// Provenance written next to the records before the first round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// flat config text as it would be loaded back
    pub config: String,
    pub seed: u64,
    pub schemes: Vec<Scheme>,
    pub started_unix_s: u64,
    pub finished_unix_s: Option<u64>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
}

impl RunManifest {
    pub fn new(config: &SimConfig, schemes: Vec<Scheme>, outputs: Vec<PathBuf>) -> Self {
        Self {
            config: config.to_flat_string(),
            seed: config.run.seed,
            schemes,
            started_unix_s: unix_now(),
            finished_unix_s: None,
            outputs,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn snapshot(&self) -> std::result::Result<SimConfig, crate::config::ConfigError> {
        SimConfig::from_toml_str(&self.config)
    }

    pub fn finish(&mut self) {
        self.finished_unix_s = Some(unix_now());
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|source| ReportError::Io { path: path.to_owned(), source })
    }
}

fn unix_now() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

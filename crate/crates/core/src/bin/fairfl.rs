use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use fairfl::config::{load_config, save_config, ConfigError, Scheme, SimConfig};
use fairfl::report::{compare_schemes, emit_records, render_comparison, render_summary, summarize, RunManifest};
use fairfl::simulator::{run_simulation, RoundRecord};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SchemeArg {
    Proposed,
    Benchmark,
    Both,
}

/// Simulate differentially-private federated learning over wireless links.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    /// flat `section.key = value` config; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// scheme to run; `both` runs the two schemes on identical randomness
    #[arg(long, value_enum)]
    scheme: Option<SchemeArg>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// output directory for records, manifest and summary
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// worker threads; 0 uses all cores
    #[arg(long)]
    threads: Option<usize>,
}

enum Failure {
    Config(String),
    Runtime(String),
}

fn resolve(cli: &Cli) -> Result<(SimConfig, Vec<Scheme>), ConfigError> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => SimConfig::default(),
    };
    if let Some(r) = cli.rounds {
        cfg.run.rounds = r;
    }
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.run.threads = t;
    }
    let schemes = match cli.scheme {
        Some(SchemeArg::Proposed) => vec![Scheme::Proposed],
        Some(SchemeArg::Benchmark) => vec![Scheme::Benchmark],
        Some(SchemeArg::Both) => vec![Scheme::Proposed, Scheme::Benchmark],
        None => vec![cfg.run.scheme],
    };
    if let [only] = schemes[..] {
        cfg.run.scheme = only;
    }
    cfg.validate()?;
    Ok((cfg, schemes))
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let (cfg, schemes) = resolve(cli).map_err(|e| Failure::Config(e.to_string()))?;
    let rt = |e: &dyn std::fmt::Display| Failure::Runtime(e.to_string());

    std::fs::create_dir_all(&cli.out).map_err(|e| rt(&format!("{}: {e}", cli.out.display())))?;
    let csv_path = |s: Scheme| cli.out.join(format!("records_{}.csv", s.as_str()));
    let mut outputs: Vec<PathBuf> = schemes.iter().map(|&s| csv_path(s)).collect();
    outputs.push(cli.out.join("config.toml"));
    outputs.push(cli.out.join("summary.txt"));
    let manifest_path = cli.out.join("manifest.json");
    let mut manifest = RunManifest::new(&cfg, schemes.clone(), outputs);
    manifest.write(&manifest_path).map_err(|e| rt(&e))?;
    save_config(&cfg, &cli.out.join("config.toml")).map_err(|e| rt(&e))?;

    let mut summary = String::new();
    let mut results: Vec<(Scheme, Vec<RoundRecord>)> = Vec::new();
    for &scheme in &schemes {
        let records = run_simulation(&cfg, scheme).map_err(|e| rt(&format!("{} scheme: {e}", scheme.as_str())))?;
        emit_records(&records, &csv_path(scheme)).map_err(|e| rt(&e))?;
        let s = summarize(&records).map_err(|e| rt(&e))?;
        summary.push_str(&render_summary(scheme, &s));
        results.push((scheme, records));
    }
    if let [(Scheme::Proposed, p), (Scheme::Benchmark, b)] = &results[..] {
        let c = compare_schemes(p, b).map_err(|e| rt(&e))?;
        summary.push_str(&render_comparison(&c));
    }
    print!("{summary}");
    std::fs::write(cli.out.join("summary.txt"), &summary).map_err(|e| rt(&e))?;
    manifest.finish();
    manifest.write(&manifest_path).map_err(|e| rt(&e))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

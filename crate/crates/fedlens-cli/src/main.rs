//! Operator entry point: experiments, servers, clients, partitioning, and
//! one-off analytics queries, driven by TOML configs and JSON query specs.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure. Logs are
//! line-delimited JSON on stderr; results go to stdout and files only.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind as ClapErrorKind;
use clap::{Parser, Subcommand};
use serde_json::json;

use fedlens_core::data::{dataset_as_pooled, gen_synthetic, write_csv};
use fedlens_core::model::ClientDataset;
use fedlens_core::pipeline::{
    load_report, materialize_data, replay, run_client_tcp, run_experiment_sim,
    serve_experiment_tcp, write_report, DataSource, ExperimentConfig, ExperimentReport,
};
use fedlens_core::query::{execute_query, LocalCohort, QuerySpec};

mod logger;

#[derive(Parser)]
#[command(
    name = "fedlens",
    version,
    about = "Federated analytics and FedAvg training over decentralized tabular data"
)]
struct Cli {
    /// Log verbosity: error, warn, info, debug, or trace. Overrides the
    /// config's log_level; defaults to info.
    #[arg(long, global = true)]
    log_level: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full experiment in-process over simulated links.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's experiment seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Host the federation server over TCP and run the experiment once all
    /// clients have registered.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Listen address; falls back to FEDLENS_BIND, then the config.
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Join a TCP federation as one client; the partition is derived from
    /// the shared config and the server-assigned id.
    Client {
        #[arg(long)]
        config: PathBuf,
        /// Server address, host:port; falls back to transport.connect.
        #[arg(long)]
        connect: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Partition a CSV source into per-client files plus a holdout.
    Partition {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Materialize the synthetic federation to per-client CSV files.
    GenSynth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Execute one analytics query from a JSON spec and print the result.
    Query {
        /// Path to the QuerySpec JSON.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-execute an experiment from its report and verify byte-identical
    /// curves.
    Replay {
        #[arg(long)]
        report: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                ClapErrorKind::DisplayHelp | ClapErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// Flag beats config; config beats the info default. The logger comes up
/// after the config is read so the config-file level can take effect.
fn install_logger(flag: &Option<String>, cfg_level: Option<&str>) {
    let level = flag.as_deref().or(cfg_level).unwrap_or("info");
    logger::install(level);
}

fn load_config(
    path: &Path,
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
) -> Result<ExperimentConfig, Box<dyn std::error::Error>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let mut cfg: ExperimentConfig =
        toml::from_str(&text).map_err(|e| format!("cannot parse config: {e}"))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(dir) = out_dir {
        cfg.out_dir = Some(dir);
    }
    Ok(cfg)
}

fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn emit_run_summary(report: &ExperimentReport, report_path: &Path) {
    let summary = json!({
        "report": report_path.to_string_lossy(),
        "selected": report.selected,
        "final_fa_assisted_mae": report.final_fa_assisted_mae,
        "final_baseline_mae": report.final_baseline_mae,
        "digest": report.digest,
    });
    println!("{}", serde_json::to_string_pretty(&summary).unwrap());
}

/// Writes one CSV per dataset plus a manifest; shared by partition and
/// gen-synth.
fn emit_datasets(
    seed: u64,
    clients: &[ClientDataset],
    holdout: &ClientDataset,
    out_dir: &Path,
) -> Result<(), Box<dyn std::error::Error>> {
    std::fs::create_dir_all(out_dir)?;
    let mut manifest = Vec::new();
    for ds in clients.iter().chain([holdout]) {
        let name = if ds.client_id == 0 {
            "holdout.csv".to_string()
        } else {
            format!("client_{:02}.csv", ds.client_id)
        };
        write_csv(out_dir.join(&name), &dataset_as_pooled(ds))?;
        manifest.push(json!({
            "file": name,
            "client_id": ds.client_id,
            "rows": ds.n_samples(),
        }));
    }
    let manifest = json!({ "seed": seed, "datasets": manifest });
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    println!("{}", serde_json::to_string_pretty(&manifest)?);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Run { config, seed, out_dir } => {
            let cfg = load_config(&config, seed, out_dir)?;
            install_logger(&cli.log_level, cfg.log_level.as_deref());
            log::info!("running experiment seed={} in sim mode", cfg.seed);
            let report = run_experiment_sim(&cfg)?;
            let dir = output_dir(&report.config);
            let path = write_report(&dir, &report)?;
            log::info!("report written to {}", path.display());
            emit_run_summary(&report, &path);
            Ok(())
        }
        Command::Serve { config, bind, seed, out_dir } => {
            let cfg = load_config(&config, seed, out_dir)?;
            install_logger(&cli.log_level, cfg.log_level.as_deref());
            let bind = bind
                .or_else(|| std::env::var("FEDLENS_BIND").ok())
                .or_else(|| cfg.transport.bind.clone())
                .ok_or("no bind address: pass --bind, set FEDLENS_BIND, or configure transport.bind")?;
            log::info!("serving experiment seed={} on {bind}", cfg.seed);
            let report = serve_experiment_tcp(&cfg, &bind)?;
            let dir = output_dir(&report.config);
            let path = write_report(&dir, &report)?;
            emit_run_summary(&report, &path);
            Ok(())
        }
        Command::Client { config, connect, seed } => {
            let cfg = load_config(&config, seed, None)?;
            install_logger(&cli.log_level, cfg.log_level.as_deref());
            let connect = connect
                .or_else(|| cfg.transport.connect.clone())
                .ok_or("no server address: pass --connect or configure transport.connect")?;
            log::info!("joining federation at {connect}");
            run_client_tcp(&cfg, &connect)?;
            log::info!("server said goodbye");
            Ok(())
        }
        Command::Partition { config, seed, out_dir } => {
            let cfg = load_config(&config, seed, None)?;
            install_logger(&cli.log_level, cfg.log_level.as_deref());
            if !matches!(cfg.data, DataSource::Csv { .. }) {
                return Err(
                    "partition needs a csv data source; use gen-synth for synthetic specs".into(),
                );
            }
            let resolved = cfg.clone().resolve()?;
            let (clients, holdout) = materialize_data(&resolved)?;
            emit_datasets(resolved.seed, &clients, &holdout, &out_dir)
        }
        Command::GenSynth { config, seed, out_dir } => {
            let cfg = load_config(&config, seed, None)?;
            install_logger(&cli.log_level, cfg.log_level.as_deref());
            let DataSource::Synthetic { spec } = &cfg.data else {
                return Err("gen-synth needs a synthetic data source".into());
            };
            let (clients, holdout) = gen_synthetic(spec, cfg.seed)?;
            emit_datasets(cfg.seed, &clients, &holdout, &out_dir)
        }
        Command::Query { spec, config, seed } => {
            let cfg = load_config(&config, seed, None)?;
            install_logger(&cli.log_level, cfg.log_level.as_deref());
            let text = std::fs::read_to_string(&spec)
                .map_err(|e| format!("cannot read query spec {}: {e}", spec.display()))?;
            let query: QuerySpec =
                serde_json::from_str(&text).map_err(|e| format!("bad query spec: {e}"))?;
            let (datasets, _) = materialize_data(&cfg.clone().resolve()?)?;
            let refs: Vec<&ClientDataset> = datasets.iter().collect();
            let mut cohort = LocalCohort::new(refs, cfg.seed);
            let result = execute_query(&query, &mut cohort)?;
            let value = serde_json::to_value(&result)?;
            println!("{}", serde_json::to_string_pretty(&value)?);
            Ok(())
        }
        Command::Replay { report } => {
            let loaded = load_report(&report)?;
            install_logger(&cli.log_level, loaded.config.log_level.as_deref());
            replay(&loaded)?;
            println!("{}", json!({ "replay": "ok", "digest": loaded.digest }));
            Ok(())
        }
    }
}

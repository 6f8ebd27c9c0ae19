//! `pairclust`: config-driven front end for the clustering experiments.
//!
//! Every subcommand reads one TOML config (or a checkpoint), runs
//! deterministically from the seeds inside it, and writes CSV or JSON.
//! Reruns with the same config and seed produce byte-identical payloads
//! apart from wall-clock fields.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use pairclust_core::error::Error as CoreError;
use pairclust_core::harness::{
    read_partition, run_cluster_experiment, run_grid, run_spn_experiment, run_transfer,
    write_csv_header, write_csv_row, write_partition, ClusterExperiment, DataFile, GridSpec,
    SpnExperiment, TransferSpec,
};
use pairclust_core::metrics;
use pairclust_core::spn::{load_spn, nway_test, save_spn};
use serde::Serialize;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "pairclust", version, about = "Pairwise-constraint clustering experiments")]
struct Cli {
    /// Override the base seed of the loaded config (for `nway`: the
    /// evaluation seed, default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker thread count for restarts and grid cells (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Log progress to stderr.
    #[arg(long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the recall x recall x density x cluster-count diagnostic grid.
    DiagnoseGrid {
        #[arg(long)]
        config: PathBuf,
        /// Destination CSV; rows land incrementally as cells finish.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a clustering network against the configured pair oracle.
    TrainCluster {
        #[arg(long)]
        config: PathBuf,
        /// Destination JSON report.
        #[arg(long)]
        out: PathBuf,
        /// Also write the best restart's assignments, one cluster id per line.
        #[arg(long)]
        partition: Option<PathBuf>,
    },
    /// Train a similarity prediction network on a labeled source dataset.
    TrainSpn {
        #[arg(long)]
        config: PathBuf,
        /// Destination checkpoint (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on source classes, cluster disjoint target classes, compare
    /// against clean and chance oracles.
    Transfer {
        #[arg(long)]
        config: PathBuf,
        /// Destination JSON report.
        #[arg(long)]
        out: PathBuf,
    },
    /// N-way reference-matching test of a similarity checkpoint; JSON to stdout.
    Nway {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        trials: usize,
        /// Dataset config; defaults to the evaluation data recorded in the
        /// checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// ACC/NMI between two stored partition files; JSON to stdout.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
}

fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, doc: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(doc)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_json(doc: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(doc)?);
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    env_logger::Builder::from_env(
        env_logger::Env::default().default_filter_or(if cli.verbose { "info" } else { "warn" }),
    )
    .init();
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring the worker pool")?;
    }

    match cli.command {
        Command::DiagnoseGrid { config, out } => {
            let mut spec: GridSpec = load_toml(&config)?;
            if let Some(seed) = cli.seed {
                spec.base_seed = seed;
            }
            let name = out.display().to_string();
            let file = fs::File::create(&out).with_context(|| format!("creating {name}"))?;
            let mut w = BufWriter::new(file);
            write_csv_header(&mut w).with_context(|| format!("writing {name}"))?;
            let rows = run_grid(&spec, |rows| {
                for row in rows {
                    write_csv_row(&mut w, row).map_err(|e| CoreError::io(&name, e))?;
                }
                // Flush per cell so an interrupted grid leaves usable rows.
                w.flush().map_err(|e| CoreError::io(&name, e))
            })?;
            log::info!("wrote {} rows to {name}", rows.len());
        }
        Command::TrainCluster { config, out, partition } => {
            let mut exp: ClusterExperiment = load_toml(&config)?;
            if let Some(seed) = cli.seed {
                exp.base_seed = seed;
            }
            let (result, report) = run_cluster_experiment(&exp)?;
            write_json(&out, &report)?;
            if let Some(path) = partition {
                write_partition(&result.best_assignments, &path)?;
            }
            let best = &result.restarts[result.best_index];
            log::info!(
                "best restart {}: nmi_train={:?} acc_train={:?}",
                best.restart,
                best.nmi_train,
                best.acc_train
            );
        }
        Command::TrainSpn { config, out } => {
            let mut exp: SpnExperiment = load_toml(&config)?;
            if let Some(seed) = cli.seed {
                exp.base_seed = seed;
            }
            let model = run_spn_experiment(&exp)?;
            save_spn(&model, &out)?;
            log::info!("saved checkpoint to {}", out.display());
        }
        Command::Transfer { config, out } => {
            let mut spec: TransferSpec = load_toml(&config)?;
            if let Some(seed) = cli.seed {
                spec.base_seed = seed;
            }
            let report = run_transfer(&spec)?;
            write_json(&out, &report)?;
            log::info!(
                "transfer nmi={:?} clean nmi={:?} chance nmi={:?}",
                report.transfer.nmi_train,
                report.clean.nmi_train,
                report.chance.nmi_train
            );
        }
        Command::Nway { checkpoint, n, trials, data } => {
            let model = load_spn::<f64>(&checkpoint)?;
            let ds = match data {
                Some(path) => {
                    let df: DataFile = load_toml(&path)?;
                    let raw = df.dataset.load::<f64>()?;
                    if df.normalize {
                        raw.normalize()?
                    } else {
                        raw
                    }
                }
                None => match &model.meta.eval_data {
                    Some(spec) => spec.load::<f64>()?,
                    None => bail!(
                        "{} records no evaluation dataset; pass --data",
                        checkpoint.display()
                    ),
                },
            };
            let accuracy = nway_test(&model, &ds, n, trials, cli.seed.unwrap_or(0))?;
            print_json(&serde_json::json!({
                "dataset": ds.name(),
                "n": n,
                "trials": trials,
                "accuracy": accuracy,
                "chance": 1.0 / n as f64,
            }))?;
        }
        Command::Eval { pred, truth } => {
            let pred = read_partition(&pred)?;
            let truth = read_partition(&truth)?;
            print_json(&serde_json::json!({
                "acc": metrics::acc(&pred, &truth)?,
                "nmi": metrics::nmi(&pred, &truth)?,
                "n": pred.assignments.len(),
            }))?;
        }
    }
    Ok(())
}

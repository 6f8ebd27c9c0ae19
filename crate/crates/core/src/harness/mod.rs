//! Experiment orchestration: diagnostic grids over oracle recall, pair
//! density, and cluster count; the source-to-target transfer experiment; and
//! the config/report plumbing shared by the command-line interface.
//!
//! Everything here runs at `f64`; the numeric core underneath stays generic.

pub mod csv;
pub mod grid;
pub mod transfer;

pub use csv::{emit_csv, parse_csv, write_csv_header, write_csv_row, ResultRow};
pub use grid::{run_grid, GridSpec};
pub use transfer::{run_transfer, SpnTemplate, TransferReport, TransferSpec};

use crate::data::{Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::metrics::Partition;
use crate::network::NetworkConfig;
use crate::pairs::{GroundTruthOracle, NoiseSpec, NoisyOracle, PairConstraint, SimilarityOracle};
use crate::seed;
use crate::spn::{load_spn, train_spn, SpnModel, SpnOracle};
use crate::trainer::{run_report, train_clusternet, ClusterRunConfig, ClusterRunResult};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

/// Network architecture selector for config files; concrete shapes come from
/// the dataset at instantiation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetworkTemplate {
    Mlp { hidden: usize },
    Conv,
}

impl NetworkTemplate {
    pub fn instantiate(&self, input_shape: (usize, usize, usize), output_dim: usize) -> NetworkConfig {
        match self {
            NetworkTemplate::Mlp { hidden } => {
                let (c, h, w) = input_shape;
                NetworkConfig::mlp(c * h * w, *hidden, output_dim, 0)
            }
            NetworkTemplate::Conv => NetworkConfig::conv_net(input_shape, output_dim, 0),
        }
    }
}

fn default_margin() -> f64 {
    2.0
}

/// Per-run hyperparameters shared by every grid cell (and reused for single
/// clustering runs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTemplate {
    pub network: NetworkTemplate,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub restarts: usize,
    #[serde(default = "default_margin")]
    pub margin: f64,
}

impl CellTemplate {
    pub fn to_run_config(
        &self,
        input_shape: (usize, usize, usize),
        clusters: usize,
        density: f64,
        base_seed: u64,
    ) -> ClusterRunConfig<f64> {
        ClusterRunConfig {
            network: self.network.instantiate(input_shape, clusters),
            loss: LossConfig { margin: self.margin },
            density,
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr: self.lr,
            momentum: self.momentum,
            restarts: self.restarts,
            base_seed,
        }
    }
}

/// Which similarity oracle a clustering run uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleSpec {
    /// Ground-truth labels, error-free.
    Clean,
    /// Ground truth flipped to the given recalls. The flip seed defaults to a
    /// value derived from the run's base seed.
    Noisy {
        recall_similar: f64,
        recall_dissimilar: f64,
        seed: Option<u64>,
    },
    /// A trained similarity network checkpoint.
    Spn { checkpoint: PathBuf },
}

/// An owned, ready-to-use oracle built from an [`OracleSpec`].
pub enum BuiltOracle {
    Clean(GroundTruthOracle),
    Noisy(NoisyOracle),
    Spn(Box<SpnModel<f64>>),
}

impl BuiltOracle {
    pub fn build(spec: &OracleSpec, base_seed: u64) -> Result<Self> {
        Ok(match spec {
            OracleSpec::Clean => BuiltOracle::Clean(GroundTruthOracle),
            OracleSpec::Noisy {
                recall_similar,
                recall_dissimilar,
                seed,
            } => BuiltOracle::Noisy(NoisyOracle::new(NoiseSpec {
                recall_similar: *recall_similar,
                recall_dissimilar: *recall_dissimilar,
                seed: seed.unwrap_or_else(|| seed::mix(base_seed, &[seed::tag("oracle-noise")])),
            })),
            OracleSpec::Spn { checkpoint } => BuiltOracle::Spn(Box::new(load_spn(checkpoint)?)),
        })
    }
}

impl SimilarityOracle<f64> for BuiltOracle {
    fn label_pairs(
        &self,
        batch: &crate::data::Batch<f64>,
        pairs: &[(usize, usize)],
    ) -> Result<Vec<PairConstraint>> {
        match self {
            BuiltOracle::Clean(o) => o.label_pairs(batch, pairs),
            BuiltOracle::Noisy(o) => o.label_pairs(batch, pairs),
            BuiltOracle::Spn(model) => SpnOracle { model }.label_pairs(batch, pairs),
        }
    }
}

fn default_density() -> f64 {
    1.0
}

/// One clustering run described by a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterExperiment {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub normalize: bool,
    /// Held-out data scored by feeding it through the trained network.
    pub eval: Option<DatasetSpec>,
    pub oracle: OracleSpec,
    pub clusters: usize,
    #[serde(default = "default_density")]
    pub density: f64,
    pub cell: CellTemplate,
    pub base_seed: u64,
    #[serde(default)]
    pub include_assignments: bool,
}

fn load_normalized(spec: &DatasetSpec, normalize: bool) -> Result<Dataset<f64>> {
    let ds = spec.load::<f64>()?;
    if normalize {
        ds.normalize()
    } else {
        Ok(ds)
    }
}

/// Run one configured clustering experiment. Returns the raw result plus the
/// JSON report (config echoed for provenance).
pub fn run_cluster_experiment(
    exp: &ClusterExperiment,
) -> Result<(ClusterRunResult<f64>, serde_json::Value)> {
    let ds = load_normalized(&exp.dataset, exp.normalize)?;
    let eval = match &exp.eval {
        Some(spec) => {
            let raw = spec.load::<f64>()?;
            Some(match ds.norm_stats() {
                Some(stats) => raw.normalize_with(stats),
                None => raw,
            })
        }
        None => None,
    };
    let oracle = BuiltOracle::build(&exp.oracle, exp.base_seed)?;
    let cfg = exp
        .cell
        .to_run_config(ds.shape(), exp.clusters, exp.density, exp.base_seed);
    let result = train_clusternet(&ds, eval.as_ref(), &oracle, &cfg)?;
    let mut report = run_report(&cfg, &result, exp.include_assignments);
    report["experiment"] = serde_json::json!(exp);
    report["dataset_name"] = serde_json::json!(ds.name());
    Ok((result, report))
}

/// One similarity-network training run described by a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpnExperiment {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub normalize: bool,
    /// Train on this class subset only (labels are re-densified).
    pub source_classes: Option<Vec<usize>>,
    pub spn: SpnTemplate,
    pub base_seed: u64,
    /// Recorded into the checkpoint so `nway` can run from it alone.
    pub eval_data: Option<DatasetSpec>,
}

pub fn run_spn_experiment(exp: &SpnExperiment) -> Result<SpnModel<f64>> {
    let mut ds = load_normalized(&exp.dataset, exp.normalize)?;
    if let Some(classes) = &exp.source_classes {
        ds = ds.subset_by_classes(classes)?;
    }
    let cfg = exp.spn.instantiate(ds.shape(), exp.base_seed);
    let mut model = train_spn(&ds, &cfg)?;
    model.meta.eval_data = exp.eval_data.clone();
    Ok(model)
}

/// Standalone dataset reference, e.g. for `nway --data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataFile {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub normalize: bool,
}

/// Write a partition as one cluster id per line.
pub fn write_partition(partition: &Partition, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let file = std::fs::File::create(path).map_err(|e| Error::io(&name, e))?;
    let mut out = BufWriter::new(file);
    for &a in &partition.assignments {
        writeln!(out, "{a}").map_err(|e| Error::io(&name, e))?;
    }
    out.flush().map_err(|e| Error::io(&name, e))
}

/// Read a partition file: one cluster id per line, blank lines ignored.
pub fn read_partition(path: impl AsRef<Path>) -> Result<Partition> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(&name, e))?;
    let mut assignments = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&name, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let id: usize = trimmed.parse().map_err(|e| {
            Error::InvalidConfig(format!("{name}:{}: bad cluster id {trimmed:?}: {e}", lineno + 1))
        })?;
        assignments.push(id);
    }
    Partition::new(assignments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BlobSpec;
    use crate::spn::save_spn;

    fn blob_spec(classes: usize, seed: u64) -> DatasetSpec {
        DatasetSpec::Blobs(BlobSpec {
            num_classes: classes,
            dim: 8,
            points_per_class: 40,
            class_std: 0.05,
            center_scale: 5.0,
            seed,
        })
    }

    fn quick_cell() -> CellTemplate {
        CellTemplate {
            network: NetworkTemplate::Mlp { hidden: 16 },
            batch_size: 32,
            epochs: 8,
            lr: 0.1,
            momentum: 0.9,
            restarts: 2,
            margin: 2.0,
        }
    }

    #[test]
    fn cluster_experiment_produces_report_with_echoed_config() {
        let exp = ClusterExperiment {
            dataset: blob_spec(3, 1),
            normalize: false,
            eval: Some(blob_spec(3, 2)),
            oracle: OracleSpec::Clean,
            clusters: 3,
            density: 1.0,
            cell: quick_cell(),
            base_seed: 7,
            include_assignments: true,
        };
        let (result, report) = run_cluster_experiment(&exp).unwrap();
        assert_eq!(result.restarts.len(), 2);
        assert!(result.restarts[result.best_index].nmi_train.unwrap() > 0.8);
        assert!(result.restarts[result.best_index].nmi_test.is_some());
        assert_eq!(report["experiment"]["clusters"], 3);
        assert_eq!(report["experiment"]["oracle"]["kind"], "clean");
        assert_eq!(
            report["best_assignments"].as_array().unwrap().len(),
            120
        );
    }

    #[test]
    fn noisy_oracle_spec_gets_a_derived_seed() {
        let spec = OracleSpec::Noisy {
            recall_similar: 0.9,
            recall_dissimilar: 0.8,
            seed: None,
        };
        let a = BuiltOracle::build(&spec, 5).unwrap();
        let b = BuiltOracle::build(&spec, 5).unwrap();
        match (a, b) {
            (BuiltOracle::Noisy(x), BuiltOracle::Noisy(y)) => assert_eq!(x.noise, y.noise),
            _ => panic!("expected noisy oracles"),
        }
    }

    #[test]
    fn spn_experiment_trains_on_a_class_subset_and_spn_oracle_loads() {
        let exp = SpnExperiment {
            dataset: blob_spec(4, 3),
            normalize: false,
            source_classes: Some(vec![0, 1]),
            spn: SpnTemplate {
                network: NetworkTemplate::Mlp { hidden: 16 },
                feature_dim: 8,
                head_hidden: 16,
                batch_size: 20,
                epochs: 2,
                lr: 0.05,
                momentum: 0.9,
            },
            base_seed: 9,
            eval_data: Some(blob_spec(4, 3)),
        };
        let model = run_spn_experiment(&exp).unwrap();
        assert_eq!(model.meta.epochs, 2);
        assert!(model.meta.source_name.contains("[2 classes]"));

        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("spn.json");
        save_spn(&model, &ckpt).unwrap();
        let oracle = BuiltOracle::build(
            &OracleSpec::Spn {
                checkpoint: ckpt.clone(),
            },
            0,
        )
        .unwrap();
        assert!(matches!(oracle, BuiltOracle::Spn(_)));
    }

    #[test]
    fn partition_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partition.txt");
        let partition = Partition::new(vec![0, 2, 1, 2, 0]).unwrap();
        write_partition(&partition, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "0\n2\n1\n2\n0\n");
        assert_eq!(read_partition(&path).unwrap(), partition);
    }

    #[test]
    fn garbage_partition_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partition.txt");
        std::fs::write(&path, "0\nnope\n1\n").unwrap();
        assert!(read_partition(&path).is_err());
    }
}

//! Cross-class transfer protocol: train the similarity network on one set of
//! classes, then cluster a disjoint set with it as the pairing oracle. Clean
//! and chance-level oracles run the same clustering config as controls.

use super::{CellTemplate, NetworkTemplate};
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::pairs::{GroundTruthOracle, NoiseSpec, NoisyOracle};
use crate::seed;
use crate::spn::{eval_pair_recall, train_spn, SpnConfig, SpnOracle};
use crate::trainer::{train_clusternet, ClusterRunResult};
use serde::{Deserialize, Serialize};

fn default_head_hidden() -> usize {
    256
}

/// Similarity-network hyperparameters for config files; the base network's
/// input shape and seeds are filled in at instantiation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpnTemplate {
    pub network: NetworkTemplate,
    /// Per-image feature width produced by the base network.
    pub feature_dim: usize,
    #[serde(default = "default_head_hidden")]
    pub head_hidden: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl SpnTemplate {
    pub fn instantiate(&self, input_shape: (usize, usize, usize), seed: u64) -> SpnConfig<f64> {
        SpnConfig {
            base: self.network.instantiate(input_shape, self.feature_dim),
            head_hidden: self.head_hidden,
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr: self.lr,
            momentum: self.momentum,
            seed,
        }
    }
}

fn default_density() -> f64 {
    1.0
}

fn default_eval_batches() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSpec {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub normalize: bool,
    /// Classes the similarity network trains on.
    pub source_classes: Vec<usize>,
    /// Disjoint classes the clustering runs on; their count sets K.
    pub target_classes: Vec<usize>,
    pub spn: SpnTemplate,
    pub cell: CellTemplate,
    /// Softmax width M for the clustering stage; defaults to the number of
    /// target classes. May exceed it (overclustering).
    #[serde(default)]
    pub clusters: Option<usize>,
    #[serde(default = "default_density")]
    pub density: f64,
    /// Held-out batches used to measure the network's recall on the target.
    #[serde(default = "default_eval_batches")]
    pub eval_batches: usize,
    pub base_seed: u64,
}

/// Best-restart clustering outcome under one oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferArm {
    pub oracle: String,
    pub nmi_train: Option<f64>,
    pub acc_train: Option<f64>,
    pub best_restart: usize,
    pub final_epoch_mean_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub dataset: String,
    pub source_name: String,
    pub target_name: String,
    pub source_classes: Vec<usize>,
    pub target_classes: Vec<usize>,
    /// Pair recall of the trained network measured on the target classes.
    pub spn_recall_similar: Option<f64>,
    pub spn_recall_dissimilar: Option<f64>,
    pub spn_source_epochs: usize,
    pub transfer: TransferArm,
    pub clean: TransferArm,
    pub chance: TransferArm,
}

fn arm(name: &str, result: &ClusterRunResult<f64>) -> TransferArm {
    // Restarts are compared by final loss, not NMI: the target domain is
    // unlabeled in this protocol, so model selection must stay unsupervised.
    let best = &result.restarts[result.best_by_loss_index];
    TransferArm {
        oracle: name.to_string(),
        nmi_train: best.nmi_train,
        acc_train: best.acc_train,
        best_restart: best.restart,
        final_epoch_mean_loss: best.final_epoch_mean_loss,
    }
}

pub fn run_transfer(spec: &TransferSpec) -> Result<TransferReport> {
    if let Some(shared) = spec
        .source_classes
        .iter()
        .find(|c| spec.target_classes.contains(c))
    {
        return Err(Error::InvalidConfig(format!(
            "class {shared} appears in both source and target sets"
        )));
    }
    if spec.source_classes.len() < 2 || spec.target_classes.len() < 2 {
        return Err(Error::InvalidConfig(
            "transfer needs >= 2 source and >= 2 target classes".into(),
        ));
    }
    // Normalization statistics come from the full dataset so source and
    // target share one input scale.
    let ds = super::load_normalized(&spec.dataset, spec.normalize)?;
    let source = ds.subset_by_classes(&spec.source_classes)?;
    let target = ds.subset_by_classes(&spec.target_classes)?;

    let spn_cfg = spec.spn.instantiate(
        source.shape(),
        seed::mix(spec.base_seed, &[seed::tag("transfer-spn")]),
    );
    let model = train_spn(&source, &spn_cfg)?;
    let (recall_s, recall_d) = eval_pair_recall(
        &model,
        &target,
        spec.eval_batches,
        spec.spn.batch_size,
        seed::mix(spec.base_seed, &[seed::tag("transfer-eval")]),
    )?;

    let clusters = spec.clusters.unwrap_or(spec.target_classes.len());
    let cfg = spec.cell.to_run_config(
        target.shape(),
        clusters,
        spec.density,
        seed::mix(spec.base_seed, &[seed::tag("transfer-cluster")]),
    );

    let transfer = arm(
        "spn",
        &train_clusternet(&target, None, &SpnOracle { model: &model }, &cfg)?,
    );
    let clean = arm("clean", &train_clusternet(&target, None, &GroundTruthOracle, &cfg)?);
    // Floor baseline: the recall profile of guessing one of K classes
    // uniformly at random. K is the class count, not the softmax width.
    let k = spec.target_classes.len();
    let chance_oracle = NoisyOracle::new(NoiseSpec {
        recall_similar: 1.0 / k as f64,
        recall_dissimilar: 1.0 - 1.0 / k as f64,
        seed: seed::mix(spec.base_seed, &[seed::tag("transfer-chance")]),
    });
    let chance = arm("chance", &train_clusternet(&target, None, &chance_oracle, &cfg)?);

    Ok(TransferReport {
        dataset: ds.name().to_string(),
        source_name: source.name().to_string(),
        target_name: target.name().to_string(),
        source_classes: spec.source_classes.clone(),
        target_classes: spec.target_classes.clone(),
        spn_recall_similar: recall_s,
        spn_recall_dissimilar: recall_d,
        spn_source_epochs: spec.spn.epochs,
        transfer,
        clean,
        chance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BlobSpec;

    fn spec() -> TransferSpec {
        // Overlapping blobs: with tight clusters the chance arm would also
        // score perfectly, because information-free pair pressure still
        // spreads coherent blobs into distinct argmax bins.
        TransferSpec {
            dataset: DatasetSpec::Blobs(BlobSpec {
                num_classes: 12,
                dim: 8,
                points_per_class: 40,
                class_std: 0.75,
                center_scale: 4.0,
                seed: 11,
            }),
            normalize: true,
            source_classes: (0..9).collect(),
            target_classes: vec![9, 10, 11],
            spn: SpnTemplate {
                network: NetworkTemplate::Mlp { hidden: 64 },
                feature_dim: 32,
                head_hidden: 64,
                batch_size: 24,
                epochs: 80,
                lr: 0.1,
                momentum: 0.9,
            },
            cell: CellTemplate {
                network: NetworkTemplate::Mlp { hidden: 16 },
                batch_size: 30,
                epochs: 8,
                lr: 0.1,
                momentum: 0.9,
                restarts: 2,
                margin: 2.0,
            },
            clusters: None,
            density: 1.0,
            eval_batches: 10,
            base_seed: 77,
        }
    }

    #[test]
    fn transferred_oracle_beats_chance_on_held_out_blobs() {
        let report = run_transfer(&spec()).unwrap();
        let transfer = report.transfer.nmi_train.unwrap();
        let clean = report.clean.nmi_train.unwrap();
        let chance = report.chance.nmi_train.unwrap();
        assert!(
            transfer > chance + 0.1,
            "transfer NMI {transfer} vs chance NMI {chance}"
        );
        assert!(clean >= 0.6, "clean NMI {clean}");
        // A binarized scorer is informative iff its two recalls sum above 1;
        // a sum of exactly 1 means the labels are independent of the truth.
        let rs = report.spn_recall_similar.unwrap();
        let rd = report.spn_recall_dissimilar.unwrap();
        assert!(rs > 0.5, "similar recall {rs}");
        assert!(rd > 0.5, "dissimilar recall {rd}");
        assert!(rs + rd > 1.3, "recall sum {}", rs + rd);
        assert_eq!(report.target_name, "blobs-k12-d8[3 classes]");
    }

    #[test]
    fn overlapping_class_sets_are_rejected() {
        let bad = TransferSpec {
            target_classes: vec![2, 3, 4],
            ..spec()
        };
        assert!(run_transfer(&bad).is_err());
    }

    #[test]
    fn undersized_class_sets_are_rejected() {
        let bad = TransferSpec {
            source_classes: vec![0],
            target_classes: vec![3, 4],
            ..spec()
        };
        assert!(run_transfer(&bad).is_err());
    }
}

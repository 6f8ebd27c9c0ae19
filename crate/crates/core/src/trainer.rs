//! End-to-end clustering loop: seeded batches, pair enumeration, oracle
//! labels, contrastive loss, SGD into the cluster network only, with
//! multi-restart selection and final hard assignment.

use crate::data::{batch_iter, Dataset};
use crate::error::{Error, Result};
use crate::loss::{contrastive_batch_loss, LossConfig};
use crate::metrics::{acc, nmi, Partition};
use crate::network::{init_params, softmax, NetworkConfig, NetworkParameters};
use crate::pairs::{enumerate_pairs, SimilarityOracle};
use crate::seed;
use crate::Float;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Rows processed per forward pass during hard assignment.
const ASSIGN_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRunConfig<F> {
    /// Cluster network; `output_dim` is the cluster count M. Its `init_seed`
    /// is overridden per restart.
    pub network: NetworkConfig,
    pub loss: LossConfig<F>,
    /// Fraction of in-batch pairs used per step, in `(0, 1]`.
    pub density: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: F,
    pub momentum: F,
    pub restarts: usize,
    pub base_seed: u64,
}

impl<F: Float> ClusterRunConfig<F> {
    fn validate(&self) -> Result<()> {
        if self.network.output_dim < 2 {
            return Err(Error::InvalidConfig(format!(
                "clustering needs >= 2 clusters, got {}",
                self.network.output_dim
            )));
        }
        if self.restarts < 1 {
            return Err(Error::InvalidConfig("need at least 1 restart".into()));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "pair density {} outside (0, 1]",
                self.density
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "pair training needs batch_size >= 2, got {}",
                self.batch_size
            )));
        }
        if !(self.lr > F::zero()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(self.momentum >= F::zero() && self.momentum < F::one()) {
            return Err(Error::InvalidConfig("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Everything observed during one restart. Wall time is informational and
/// excluded from the determinism contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartRecord {
    pub restart: usize,
    pub init_seed: u64,
    pub nmi_train: Option<f64>,
    pub acc_train: Option<f64>,
    pub nmi_test: Option<f64>,
    pub acc_test: Option<f64>,
    /// Mean per-batch loss of the final epoch; `None` when nothing trained.
    pub final_epoch_mean_loss: Option<f64>,
    /// One entry per training step.
    pub loss_curve: Vec<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct ClusterRunResult<F: Float> {
    pub restarts: Vec<RestartRecord>,
    /// Restart maximizing training NMI (ties to the lowest index); falls back
    /// to [`ClusterRunResult::best_by_loss_index`] when labels are absent.
    pub best_index: usize,
    /// Restart minimizing final-epoch mean loss, the unsupervised criterion.
    pub best_by_loss_index: usize,
    pub best_assignments: Partition,
    pub best_params: NetworkParameters<F>,
    pub wall_seconds: f64,
}

/// Argmax cluster per sample, ties toward the lowest cluster index.
pub fn assign_clusters<F: Float>(
    params: &NetworkParameters<F>,
    dataset: &Dataset<F>,
) -> Result<Partition> {
    let n = dataset.len();
    let mut assignments = Vec::with_capacity(n);
    let mut start = 0usize;
    while start < n {
        let stop = (start + ASSIGN_CHUNK).min(n);
        let rows: Vec<usize> = (start..stop).collect();
        let logits = params.infer(&dataset.images().select(ndarray::Axis(0), &rows))?;
        let sm = softmax(&logits.view());
        for row in sm.probs().rows() {
            let mut best = 0usize;
            for (k, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = k;
                }
            }
            assignments.push(best);
        }
        start = stop;
    }
    Partition::new(assignments)
}

fn partition_metrics<F: Float>(
    params: &NetworkParameters<F>,
    dataset: &Dataset<F>,
) -> Result<(Partition, Option<f64>, Option<f64>)> {
    let predicted = assign_clusters(params, dataset)?;
    match dataset.labels() {
        Some(labels) => {
            let truth = Partition::new(labels.to_vec())?;
            Ok((
                predicted.clone(),
                Some(nmi(&predicted, &truth)?),
                Some(acc(&predicted, &truth)?),
            ))
        }
        None => Ok((predicted, None, None)),
    }
}

/// One full training restart. Public so restart independence is observable:
/// running restart `r` alone reproduces its record from the full run.
pub fn run_single_restart<F: Float>(
    dataset: &Dataset<F>,
    eval: Option<&Dataset<F>>,
    oracle: &dyn SimilarityOracle<F>,
    cfg: &ClusterRunConfig<F>,
    restart: usize,
) -> Result<(RestartRecord, NetworkParameters<F>, Partition)> {
    cfg.validate()?;
    let started = Instant::now();
    let init_seed = cfg.base_seed.wrapping_add(restart as u64);
    let mut net_cfg = cfg.network.clone();
    net_cfg.init_seed = init_seed;
    let mut params = init_params::<F>(&net_cfg)?;

    let shuffle_seed = seed::mix(cfg.base_seed, &[seed::tag("restart-shuffle"), restart as u64]);
    let mut loss_curve = Vec::new();
    let mut final_epoch_mean_loss = None;
    for epoch in 0..cfg.epochs {
        let mut epoch_sum = 0.0f64;
        let mut epoch_batches = 0usize;
        for (batch_idx, batch) in
            batch_iter(dataset, cfg.batch_size, shuffle_seed, epoch as u64).enumerate()
        {
            if batch.len() < 2 {
                continue; // a trailing singleton batch has no pairs
            }
            let pair_seed = seed::mix(
                cfg.base_seed,
                &[
                    seed::tag("pairs"),
                    restart as u64,
                    epoch as u64,
                    batch_idx as u64,
                ],
            );
            let pairs = enumerate_pairs(batch.len(), cfg.density, pair_seed)?;
            let constraints = oracle.label_pairs(&batch, &pairs)?;

            let (logits, cache) = params.forward(&batch.images)?;
            let sm = softmax(&logits.view());
            let result = contrastive_batch_loss(&sm, &constraints, &cfg.loss)?;
            let loss = result.total_loss.to_f64c();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    restart,
                    epoch,
                    batch: batch_idx,
                });
            }
            loss_curve.push(loss);
            epoch_sum += loss;
            epoch_batches += 1;

            params.backward(&cache, &result.grad_wrt_logits.view())?;
            params.sgd_step(cfg.lr, cfg.momentum);
        }
        if epoch_batches > 0 {
            final_epoch_mean_loss = Some(epoch_sum / epoch_batches as f64);
        }
    }

    let (assignments, nmi_train, acc_train) = partition_metrics(&params, dataset)?;
    let (nmi_test, acc_test) = match eval {
        Some(ds) => {
            let (_, n, a) = partition_metrics(&params, ds)?;
            (n, a)
        }
        None => (None, None),
    };

    let record = RestartRecord {
        restart,
        init_seed,
        nmi_train,
        acc_train,
        nmi_test,
        acc_test,
        final_epoch_mean_loss,
        loss_curve,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((record, params, assignments))
}

/// Run every restart (in parallel when a thread pool is available), then pick
/// the best by training NMI, or by final loss when the data is unlabeled.
/// The oracle is read-only throughout; an SPN oracle is never updated.
pub fn train_clusternet<F: Float>(
    dataset: &Dataset<F>,
    eval: Option<&Dataset<F>>,
    oracle: &(dyn SimilarityOracle<F> + Sync),
    cfg: &ClusterRunConfig<F>,
) -> Result<ClusterRunResult<F>> {
    cfg.validate()?;
    let started = Instant::now();
    let runs: Vec<(RestartRecord, NetworkParameters<F>, Partition)> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| run_single_restart(dataset, eval, oracle, cfg, r))
        .collect::<Result<_>>()?;

    let labeled = runs.iter().any(|(rec, _, _)| rec.nmi_train.is_some());
    let best_by_loss_index = runs
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| {
            let fa = a.0.final_epoch_mean_loss.unwrap_or(f64::INFINITY);
            let fb = b.0.final_epoch_mean_loss.unwrap_or(f64::INFINITY);
            fa.total_cmp(&fb)
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    let best_index = if labeled {
        runs.iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| {
                let fa = a.0.nmi_train.unwrap_or(f64::NEG_INFINITY);
                let fb = b.0.nmi_train.unwrap_or(f64::NEG_INFINITY);
                fa.total_cmp(&fb).then(std::cmp::Ordering::Greater) // tie keeps the earlier restart
            })
            .map(|(i, _)| i)
            .unwrap_or(0)
    } else {
        best_by_loss_index
    };

    let mut records = Vec::with_capacity(runs.len());
    let mut best = None;
    for (i, (rec, params, assignments)) in runs.into_iter().enumerate() {
        records.push(rec);
        if i == best_index {
            best = Some((params, assignments));
        }
    }
    let (best_params, best_assignments) = best.expect("best index within range");

    Ok(ClusterRunResult {
        restarts: records,
        best_index,
        best_by_loss_index,
        best_assignments,
        best_params,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// JSON report: config echo, per-restart metrics, best indices, and
/// optionally the winning assignment vector.
pub fn run_report<F: Float>(
    cfg: &ClusterRunConfig<F>,
    result: &ClusterRunResult<F>,
    include_assignments: bool,
) -> serde_json::Value {
    let mut doc = serde_json::json!({
        "config": cfg,
        "restarts": result.restarts,
        "best_index": result.best_index,
        "best_by_loss_index": result.best_by_loss_index,
        "wall_seconds": result.wall_seconds,
    });
    if include_assignments {
        doc["best_assignments"] = serde_json::json!(result.best_assignments.assignments);
    }
    doc
}

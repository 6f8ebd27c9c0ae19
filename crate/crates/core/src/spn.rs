//! Similarity Prediction Network: a weight-shared feature extractor whose
//! concatenated pair features feed a small two-class head. Trained on a
//! labeled source dataset over dense in-batch pairs, then reused as a
//! similarity oracle on unlabeled targets.

use crate::data::{batch_iter, Batch, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::network::checkpoint::{from_doc, to_doc, write_json, NetworkDoc};
use crate::network::{init_params, softmax, NetworkConfig, NetworkParameters};
use crate::pairs::{
    enumerate_pairs, ground_truth_labels, PairConstraint, PairLabel, SimilarityOracle,
};
use crate::seed;
use crate::Float;
use ndarray::{Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

pub const SPN_FORMAT: &str = "pairclust-spn";
pub const SPN_FORMAT_VERSION: u32 = 1;
const KIND_BASE: &str = "spn-base";
const KIND_HEAD: &str = "spn-head";

/// Output unit 1 of the head is the "similar" class.
const SIMILAR_CLASS: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpnConfig<F> {
    /// Feature extractor shared by both branches; its output dim is the
    /// per-image feature size. Its `init_seed` is overridden from `seed`.
    pub base: NetworkConfig,
    /// Hidden width of the pair head `fc(2F -> H) -> relu -> fc(H -> 2)`.
    pub head_hidden: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: F,
    pub momentum: F,
    pub seed: u64,
}

impl<F: Float> SpnConfig<F> {
    pub fn new(base: NetworkConfig, seed: u64) -> Self {
        SpnConfig {
            base,
            head_hidden: 256,
            batch_size: 32,
            epochs: 5,
            lr: F::cast(0.01),
            momentum: F::cast(0.9),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.head_hidden == 0 {
            return Err(Error::InvalidConfig("head hidden width must be positive".into()));
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

    fn head_config(&self) -> NetworkConfig {
        let feat = self.base.output_dim;
        let mut cfg = NetworkConfig::mlp(2 * feat, self.head_hidden, 2, 0);
        cfg.init_seed = seed::mix(self.seed, &[seed::tag("spn-head")]);
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpnMeta {
    pub source_name: String,
    pub epochs: usize,
    /// Where the intended evaluation/transfer data lives, if recorded, so a
    /// checkpoint alone suffices to rerun the N-way test.
    pub eval_data: Option<DatasetSpec>,
}

/// A trained (or freshly initialized) similarity predictor. One base
/// parameter set serves both branch inputs.
#[derive(Debug, Clone)]
pub struct SpnModel<F: Float> {
    pub base: NetworkParameters<F>,
    pub head: NetworkParameters<F>,
    pub meta: SpnMeta,
}

/// Anything that can score unordered index pairs within a batch with a
/// similarity probability in `[0, 1]`.
pub trait SimilarityScorer<F: Float>: Sync {
    fn score_pairs(&self, batch: &Batch<F>, pairs: &[(usize, usize)]) -> Result<Vec<F>>;
}

fn concat_pair_rows<F: Float>(features: &Array2<F>, pairs: &[(usize, usize)]) -> Array2<F> {
    let feat = features.ncols();
    let mut x = Array2::zeros((pairs.len(), 2 * feat));
    for (row, &(i, j)) in pairs.iter().enumerate() {
        x.slice_mut(ndarray::s![row, ..feat]).assign(&features.row(i));
        x.slice_mut(ndarray::s![row, feat..]).assign(&features.row(j));
    }
    x
}

impl<F: Float> SpnModel<F> {
    /// Similarity probabilities for index pairs over a feature batch,
    /// averaged over both concatenation orders so the result is symmetric.
    pub fn score_index_pairs(&self, images: &Array2<F>, pairs: &[(usize, usize)]) -> Result<Vec<F>> {
        let features = self.base.infer(images)?;
        let forward = concat_pair_rows(&features, pairs);
        let swapped: Vec<(usize, usize)> = pairs.iter().map(|&(i, j)| (j, i)).collect();
        let backward = concat_pair_rows(&features, &swapped);
        let p_fwd = softmax(&self.head.infer(&forward)?.view());
        let p_bwd = softmax(&self.head.infer(&backward)?.view());
        let half = F::cast(0.5);
        Ok(pairs
            .iter()
            .enumerate()
            .map(|(r, _)| {
                (p_fwd.probs()[(r, SIMILAR_CLASS)] + p_bwd.probs()[(r, SIMILAR_CLASS)]) * half
            })
            .collect())
    }

    /// Probability that two images belong to the same class, symmetric in
    /// its arguments by construction.
    pub fn predict_similarity(&self, a: &ArrayView1<F>, b: &ArrayView1<F>) -> Result<F> {
        let dim = self.base.config().input_shape;
        let want = dim.0 * dim.1 * dim.2;
        if a.len() != want || b.len() != want {
            return Err(Error::ShapeMismatch(format!(
                "images of {} and {} pixels, network expects {want}",
                a.len(),
                b.len()
            )));
        }
        let mut images = Array2::zeros((2, want));
        images.row_mut(0).assign(a);
        images.row_mut(1).assign(b);
        Ok(self.score_index_pairs(&images, &[(0, 1)])?[0])
    }
}

impl<F: Float> SimilarityScorer<F> for SpnModel<F> {
    fn score_pairs(&self, batch: &Batch<F>, pairs: &[(usize, usize)]) -> Result<Vec<F>> {
        self.score_index_pairs(&batch.images, pairs)
    }
}

/// Train base and head jointly with two-class cross-entropy over all
/// unordered pairs of every mini-batch. Features are computed once per image
/// and shared by every pair touching it; both branches read literally the
/// same parameter set. Deterministic given `cfg.seed`.
pub fn train_spn<F: Float>(source: &Dataset<F>, cfg: &SpnConfig<F>) -> Result<SpnModel<F>> {
    cfg.validate()?;
    source
        .labels()
        .ok_or_else(|| Error::MissingLabels(source.name().to_string()))?;
    let classes = source.num_classes().unwrap_or(0);
    if classes < 2 {
        return Err(Error::InvalidConfig(format!(
            "SPN training needs >= 2 source classes, got {classes}"
        )));
    }

    let mut base_cfg = cfg.base.clone();
    base_cfg.init_seed = seed::mix(cfg.seed, &[seed::tag("spn-base")]);
    let mut base = init_params::<F>(&base_cfg)?;
    let mut head = init_params::<F>(&cfg.head_config())?;
    let feat = base_cfg.output_dim;

    let shuffle_seed = seed::mix(cfg.seed, &[seed::tag("spn-shuffle")]);
    for epoch in 0..cfg.epochs {
        for (batch_idx, batch) in
            batch_iter(source, cfg.batch_size, shuffle_seed, epoch as u64).enumerate()
        {
            if batch.len() < 2 {
                continue; // a trailing singleton batch has no pairs
            }
            let pairs = enumerate_pairs(batch.len(), 1.0, 0)?;
            let labels = batch.labels.as_ref().expect("labels checked above");
            let truth = ground_truth_labels(labels, &pairs)?;

            let (features, base_cache) = base.forward(&batch.images)?;
            let x_pairs = concat_pair_rows(&features, &pairs);
            let (logits, head_cache) = head.forward(&x_pairs)?;
            let sm = softmax(&logits.view());

            let n = pairs.len();
            let inv_n = F::one() / F::cast(n as f64);
            let mut loss = F::zero();
            let mut grad_probs = Array2::zeros((n, 2));
            for (row, c) in truth.iter().enumerate() {
                let target = match c.label {
                    PairLabel::Similar => SIMILAR_CLASS,
                    PairLabel::Dissimilar => 1 - SIMILAR_CLASS,
                };
                let p = sm.probs()[(row, target)];
                loss -= p.ln() * inv_n;
                grad_probs[(row, target)] = -inv_n / p;
            }
            if !loss.to_f64c().is_finite() {
                return Err(Error::NonFiniteLoss {
                    restart: 0,
                    epoch,
                    batch: batch_idx,
                });
            }

            let grad_logits = sm.backward(&grad_probs.view());
            let dx_pairs = head.backward(&head_cache, &grad_logits.view())?;
            let mut grad_features = Array2::zeros((batch.len(), feat));
            for (row, &(i, j)) in pairs.iter().enumerate() {
                let d = dx_pairs.row(row);
                grad_features
                    .row_mut(i)
                    .zip_mut_with(&d.slice(ndarray::s![..feat]), |g, &v| *g += v);
                grad_features
                    .row_mut(j)
                    .zip_mut_with(&d.slice(ndarray::s![feat..]), |g, &v| *g += v);
            }
            base.backward(&base_cache, &grad_features.view())?;
            head.sgd_step(cfg.lr, cfg.momentum);
            base.sgd_step(cfg.lr, cfg.momentum);
        }
    }

    Ok(SpnModel {
        base,
        head,
        meta: SpnMeta {
            source_name: source.name().to_string(),
            epochs: cfg.epochs,
            eval_data: None,
        },
    })
}

/// Measured recalls of binarized predictions (probability > 0.5 means
/// similar) over densely enumerated pairs of `num_batches` seeded batches.
/// Counts aggregate across batches before dividing.
pub fn eval_pair_recall<F: Float>(
    scorer: &dyn SimilarityScorer<F>,
    target: &Dataset<F>,
    num_batches: usize,
    batch_size: usize,
    eval_seed: u64,
) -> Result<(Option<f64>, Option<f64>)> {
    target
        .labels()
        .ok_or_else(|| Error::MissingLabels(target.name().to_string()))?;
    let shuffle_seed = seed::mix(eval_seed, &[seed::tag("spn-eval")]);
    let mut seen = 0usize;
    let mut hit_s = 0usize;
    let mut true_s = 0usize;
    let mut hit_d = 0usize;
    let mut true_d = 0usize;
    let mut epoch = 0u64;
    while seen < num_batches {
        for batch in batch_iter(target, batch_size, shuffle_seed, epoch) {
            if seen == num_batches {
                break;
            }
            if batch.len() < 2 {
                continue;
            }
            seen += 1;
            let pairs = enumerate_pairs(batch.len(), 1.0, 0)?;
            let truth = ground_truth_labels(batch.labels.as_ref().expect("checked"), &pairs)?;
            let scores = scorer.score_pairs(&batch, &pairs)?;
            for (score, t) in scores.iter().zip(truth.iter()) {
                let similar = score.to_f64c() > 0.5;
                match t.label {
                    PairLabel::Similar => {
                        true_s += 1;
                        if similar {
                            hit_s += 1;
                        }
                    }
                    PairLabel::Dissimilar => {
                        true_d += 1;
                        if !similar {
                            hit_d += 1;
                        }
                    }
                }
            }
        }
        epoch += 1;
    }
    let frac = |hit: usize, total: usize| (total > 0).then(|| hit as f64 / total as f64);
    Ok((frac(hit_s, true_s), frac(hit_d, true_d)))
}

/// N-way recognition: per trial, draw `n` distinct classes, one reference
/// image each, and one query from one of those classes; predict the class of
/// the highest-scoring reference. Ties go to the lowest class index.
pub fn nway_test<F: Float>(
    scorer: &dyn SimilarityScorer<F>,
    dataset: &Dataset<F>,
    n: usize,
    trials: usize,
    eval_seed: u64,
) -> Result<f64> {
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::MissingLabels(dataset.name().to_string()))?;
    let classes = dataset.num_classes().unwrap_or(0);
    if n < 2 || n > classes {
        return Err(Error::InvalidConfig(format!(
            "n-way test needs 2 <= n <= {classes} classes, got n = {n}"
        )));
    }
    if trials == 0 {
        return Err(Error::InvalidConfig("n-way test needs at least one trial".into()));
    }
    let mut rows_by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (row, &c) in labels.iter().enumerate() {
        rows_by_class[c].push(row);
    }

    let pixels = dataset.images().ncols();
    let mut correct = 0usize;
    for trial in 0..trials as u64 {
        let mut rng = seed::rng(seed::mix(eval_seed, &[seed::tag("nway"), trial]));
        let chosen: Vec<usize> =
            rand::seq::index::sample(&mut rng, classes, n).into_iter().collect();
        let refs: Vec<usize> = chosen
            .iter()
            .map(|&c| rows_by_class[c][rng.random_range(0..rows_by_class[c].len())])
            .collect();
        let query_slot = rng.random_range(0..n);
        let query_class = chosen[query_slot];
        let members = &rows_by_class[query_class];
        // Keep the query row distinct from its reference when the class has
        // more than one image.
        let query_row = if members.len() == 1 {
            members[0]
        } else {
            let ref_pos = members
                .iter()
                .position(|&r| r == refs[query_slot])
                .expect("reference drawn from this class");
            let k = rng.random_range(0..members.len() - 1);
            members[if k >= ref_pos { k + 1 } else { k }]
        };

        let mut images = Array2::zeros((n + 1, pixels));
        for (slot, &row) in refs.iter().enumerate() {
            images.row_mut(slot).assign(&dataset.images().row(row));
        }
        images.row_mut(n).assign(&dataset.images().row(query_row));
        let batch = Batch {
            indices: refs.iter().copied().chain([query_row]).collect(),
            images,
            labels: Some(chosen.iter().copied().chain([query_class]).collect()),
        };
        let pairs: Vec<(usize, usize)> = (0..n).map(|slot| (slot, n)).collect();
        let scores = scorer.score_pairs(&batch, &pairs)?;

        let mut best_slot = 0usize;
        for slot in 1..n {
            let better = scores[slot] > scores[best_slot];
            let tie_lower = scores[slot] == scores[best_slot] && chosen[slot] < chosen[best_slot];
            if better || tie_lower {
                best_slot = slot;
            }
        }
        if chosen[best_slot] == query_class {
            correct += 1;
        }
    }
    Ok(correct as f64 / trials as f64)
}

/// Thresholded SPN predictions as a constraint oracle for clustering.
#[derive(Debug, Clone, Copy)]
pub struct SpnOracle<'a, F: Float> {
    pub model: &'a SpnModel<F>,
}

impl<F: Float> SimilarityOracle<F> for SpnOracle<'_, F> {
    fn label_pairs(&self, batch: &Batch<F>, pairs: &[(usize, usize)]) -> Result<Vec<PairConstraint>> {
        let scores = self.model.score_index_pairs(&batch.images, pairs)?;
        pairs
            .iter()
            .zip(scores.iter())
            .map(|(&(i, j), score)| {
                let label = if score.to_f64c() > 0.5 {
                    PairLabel::Similar
                } else {
                    PairLabel::Dissimilar
                };
                PairConstraint::new(i, j, label)
            })
            .collect()
    }
}

/// Test stub: reads the ground-truth labels it is supposed to predict.
#[derive(Debug, Clone, Copy, Default)]
pub struct GroundTruthScorer;

impl<F: Float> SimilarityScorer<F> for GroundTruthScorer {
    fn score_pairs(&self, batch: &Batch<F>, pairs: &[(usize, usize)]) -> Result<Vec<F>> {
        let labels = batch
            .labels
            .as_ref()
            .ok_or_else(|| Error::MissingLabels("mini-batch".into()))?;
        let truth = ground_truth_labels(labels, pairs)?;
        Ok(truth
            .iter()
            .map(|c| match c.label {
                PairLabel::Similar => F::one(),
                PairLabel::Dissimilar => F::zero(),
            })
            .collect())
    }
}

/// Test stub: one fixed probability for every pair.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer<F> {
    pub probability: F,
}

impl<F: Float> SimilarityScorer<F> for ConstantScorer<F> {
    fn score_pairs(&self, _batch: &Batch<F>, pairs: &[(usize, usize)]) -> Result<Vec<F>> {
        Ok(vec![self.probability; pairs.len()])
    }
}

/// Test stub: uniform random probabilities, reseeded per batch.
#[derive(Debug, Clone, Copy)]
pub struct RandomScorer {
    pub seed: u64,
}

impl<F: Float> SimilarityScorer<F> for RandomScorer {
    fn score_pairs(&self, batch: &Batch<F>, pairs: &[(usize, usize)]) -> Result<Vec<F>> {
        let mut rng = seed::rng(seed::mix(self.seed, &[seed::tag("random-scorer"), batch.fingerprint()]));
        Ok(pairs
            .iter()
            .map(|_| F::cast(rng.random_range(0.0..1.0)))
            .collect())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SpnDoc {
    format: String,
    format_version: u32,
    meta: SpnMeta,
    base: NetworkDoc,
    head: NetworkDoc,
}

pub fn save_spn<F: Float>(model: &SpnModel<F>, path: impl AsRef<Path>) -> Result<()> {
    let doc = SpnDoc {
        format: SPN_FORMAT.to_string(),
        format_version: SPN_FORMAT_VERSION,
        meta: model.meta.clone(),
        base: to_doc(&model.base, KIND_BASE),
        head: to_doc(&model.head, KIND_HEAD),
    };
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    write_json(BufWriter::new(file), &doc, path)
}

pub fn load_spn<F: Float>(path: impl AsRef<Path>) -> Result<SpnModel<F>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let doc: SpnDoc = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if doc.format != SPN_FORMAT {
        return Err(Error::Checkpoint(format!(
            "expected format {SPN_FORMAT:?}, found {:?}",
            doc.format
        )));
    }
    if doc.format_version != SPN_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            doc.format_version
        )));
    }
    Ok(SpnModel {
        base: from_doc(&doc.base, Some(KIND_BASE))?,
        head: from_doc(&doc.head, Some(KIND_HEAD))?,
        meta: doc.meta,
    })
}

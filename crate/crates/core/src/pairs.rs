//! Pairwise constraints within a mini-batch: enumeration, density
//! subsampling, and the similarity oracles that label them.
//!
//! All pairs are unordered with `i < j` and no self-pairs; the symmetric loss
//! makes ordered duplicates redundant and an `(i, i)` pair contributes zero
//! gradient.

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::seed;
use crate::Float;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairLabel {
    Similar,
    Dissimilar,
}

impl PairLabel {
    pub fn flipped(self) -> Self {
        match self {
            PairLabel::Similar => PairLabel::Dissimilar,
            PairLabel::Dissimilar => PairLabel::Similar,
        }
    }
}

/// A labeled unordered pair of batch-local indices, stored with `i < j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairConstraint {
    pub i: usize,
    pub j: usize,
    pub label: PairLabel,
}

impl PairConstraint {
    pub fn new(a: usize, b: usize, label: PairLabel) -> Result<Self> {
        if a == b {
            return Err(Error::InvalidConfig(format!("self-pair ({a}, {a})")));
        }
        Ok(PairConstraint {
            i: a.min(b),
            j: a.max(b),
            label,
        })
    }
}

/// Recall targets for label corruption, applied with exact per-batch counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub recall_similar: f64,
    pub recall_dissimilar: f64,
    pub seed: u64,
}

impl NoiseSpec {
    fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("recall_similar", self.recall_similar),
            ("recall_dissimilar", self.recall_dissimilar),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidConfig(format!("{name} = {r} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Labels index pairs within one batch. Implementations are deterministic
/// given their own seed/state and the batch contents.
pub trait SimilarityOracle<F: Float>: Sync {
    fn label_pairs(&self, batch: &Batch<F>, pairs: &[(usize, usize)]) -> Result<Vec<PairConstraint>>;
}

/// All unordered pairs at density 1, or a seeded uniform sample without
/// replacement of `round(density · B(B−1)/2)` pairs (at least one). The
/// result is sorted lexicographically either way.
pub fn enumerate_pairs(batch_size: usize, density: f64, seed: u64) -> Result<Vec<(usize, usize)>> {
    if batch_size < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 samples to form pairs, got {batch_size}"
        )));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "pair density {density} outside (0, 1]"
        )));
    }
    let total = batch_size * (batch_size - 1) / 2;
    if density == 1.0 {
        let mut pairs = Vec::with_capacity(total);
        for i in 0..batch_size {
            for j in (i + 1)..batch_size {
                pairs.push((i, j));
            }
        }
        return Ok(pairs);
    }
    let count = ((density * total as f64).round() as usize).clamp(1, total);
    let mut rng = seed::rng(seed);
    let mut ranks = sample(&mut rng, total, count).into_vec();
    ranks.sort_unstable();
    Ok(unrank_pairs(batch_size, &ranks))
}

/// Map sorted lexicographic ranks back to `(i, j)` pairs by sweeping rows:
/// row `i` owns the `batch_size − 1 − i` ranks starting at its offset.
fn unrank_pairs(batch_size: usize, sorted_ranks: &[usize]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(sorted_ranks.len());
    let mut row = 0usize;
    let mut row_start = 0usize;
    for &rank in sorted_ranks {
        while rank >= row_start + (batch_size - 1 - row) {
            row_start += batch_size - 1 - row;
            row += 1;
        }
        pairs.push((row, row + 1 + rank - row_start));
    }
    pairs
}

/// Similar iff the two samples share a class label.
pub fn ground_truth_labels(labels: &[usize], pairs: &[(usize, usize)]) -> Result<Vec<PairConstraint>> {
    pairs
        .iter()
        .map(|&(i, j)| {
            if i >= labels.len() || j >= labels.len() {
                return Err(Error::InvalidConfig(format!(
                    "pair ({i}, {j}) exceeds batch size {}",
                    labels.len()
                )));
            }
            let label = if labels[i] == labels[j] {
                PairLabel::Similar
            } else {
                PairLabel::Dissimilar
            };
            PairConstraint::new(i, j, label)
        })
        .collect()
}

/// Flip exactly `round((1−r_s)·n_s)` similar labels to dissimilar and
/// `round((1−r_d)·n_d)` dissimilar labels to similar, chosen uniformly by the
/// spec's seed. Counts are exact per call, not independent coin flips.
pub fn flip_for_recall(constraints: &[PairConstraint], noise: &NoiseSpec) -> Result<Vec<PairConstraint>> {
    noise.validate()?;
    let mut out = constraints.to_vec();
    let mut rng = seed::rng(noise.seed);
    for (target_label, recall) in [
        (PairLabel::Similar, noise.recall_similar),
        (PairLabel::Dissimilar, noise.recall_dissimilar),
    ] {
        // Membership comes from the input labels; the two passes must not
        // see each other's flips.
        let members: Vec<usize> = constraints
            .iter()
            .enumerate()
            .filter(|(_, c)| c.label == target_label)
            .map(|(idx, _)| idx)
            .collect();
        let flips = ((1.0 - recall) * members.len() as f64).round() as usize;
        for pick in sample(&mut rng, members.len(), flips) {
            let idx = members[pick];
            out[idx].label = out[idx].label.flipped();
        }
    }
    Ok(out)
}

/// Delegate labelling to an oracle.
pub fn oracle_labels<F: Float>(
    oracle: &dyn SimilarityOracle<F>,
    batch: &Batch<F>,
    pairs: &[(usize, usize)],
) -> Result<Vec<PairConstraint>> {
    oracle.label_pairs(batch, pairs)
}

/// Per-class recall of `predicted` against `truth` over identical pair lists.
/// A class absent from the truth yields `None` for its recall.
pub fn measure_recall(
    predicted: &[PairConstraint],
    truth: &[PairConstraint],
) -> Result<(Option<f64>, Option<f64>)> {
    if predicted.len() != truth.len() {
        return Err(Error::MismatchedPairs(format!(
            "{} predicted vs {} truth pairs",
            predicted.len(),
            truth.len()
        )));
    }
    if let Some((p, t)) = predicted
        .iter()
        .zip(truth.iter())
        .find(|(p, t)| (p.i, p.j) != (t.i, t.j))
    {
        return Err(Error::MismatchedPairs(format!(
            "({}, {}) vs ({}, {})",
            p.i, p.j, t.i, t.j
        )));
    }
    let mut true_s = 0usize;
    let mut hit_s = 0usize;
    let mut true_d = 0usize;
    let mut hit_d = 0usize;
    for (p, t) in predicted.iter().zip(truth.iter()) {
        match t.label {
            PairLabel::Similar => {
                true_s += 1;
                if p.label == PairLabel::Similar {
                    hit_s += 1;
                }
            }
            PairLabel::Dissimilar => {
                true_d += 1;
                if p.label == PairLabel::Dissimilar {
                    hit_d += 1;
                }
            }
        }
    }
    let frac = |hit: usize, total: usize| (total > 0).then(|| hit as f64 / total as f64);
    Ok((frac(hit_s, true_s), frac(hit_d, true_d)))
}

/// Labels pairs from the batch's class labels, error-free.
#[derive(Debug, Clone, Copy, Default)]
pub struct GroundTruthOracle;

impl<F: Float> SimilarityOracle<F> for GroundTruthOracle {
    fn label_pairs(&self, batch: &Batch<F>, pairs: &[(usize, usize)]) -> Result<Vec<PairConstraint>> {
        let labels = batch.labels.as_ref().ok_or_else(|| Error::MissingLabels("mini-batch".into()))?;
        ground_truth_labels(labels, pairs)
    }
}

/// Ground-truth labels corrupted to the spec's recalls. The flip seed is
/// re-derived from the batch fingerprint so every batch (and re-shuffled
/// epoch) draws fresh flips while staying reproducible.
#[derive(Debug, Clone, Copy)]
pub struct NoisyOracle {
    pub noise: NoiseSpec,
}

impl NoisyOracle {
    pub fn new(noise: NoiseSpec) -> Self {
        NoisyOracle { noise }
    }
}

impl<F: Float> SimilarityOracle<F> for NoisyOracle {
    fn label_pairs(&self, batch: &Batch<F>, pairs: &[(usize, usize)]) -> Result<Vec<PairConstraint>> {
        let labels = batch.labels.as_ref().ok_or_else(|| Error::MissingLabels("mini-batch".into()))?;
        let truth = ground_truth_labels(labels, pairs)?;
        let per_batch = NoiseSpec {
            seed: seed::mix(self.noise.seed, &[batch.fingerprint()]),
            ..self.noise
        };
        flip_for_recall(&truth, &per_batch)
    }
}

/// Labels every pair with one fixed value.
#[derive(Debug, Clone, Copy)]
pub struct ConstantOracle {
    pub label: PairLabel,
}

impl<F: Float> SimilarityOracle<F> for ConstantOracle {
    fn label_pairs(&self, _batch: &Batch<F>, pairs: &[(usize, usize)]) -> Result<Vec<PairConstraint>> {
        pairs
            .iter()
            .map(|&(i, j)| PairConstraint::new(i, j, self.label))
            .collect()
    }
}

/// Assigns each batch sample a uniformly random class and labels pairs from
/// those guesses. Chance-level baseline: on balanced K-class data it recalls
/// dissimilar pairs at about 1 − 1/K.
#[derive(Debug, Clone, Copy)]
pub struct RandomGuessOracle {
    pub num_classes: usize,
    pub seed: u64,
}

impl<F: Float> SimilarityOracle<F> for RandomGuessOracle {
    fn label_pairs(&self, batch: &Batch<F>, pairs: &[(usize, usize)]) -> Result<Vec<PairConstraint>> {
        if self.num_classes == 0 {
            return Err(Error::InvalidConfig("random oracle needs at least 1 class".into()));
        }
        let mut rng = seed::rng(seed::mix(self.seed, &[seed::tag("random-guess"), batch.fingerprint()]));
        let guesses: Vec<usize> = (0..batch.len())
            .map(|_| rand::Rng::random_range(&mut rng, 0..self.num_classes))
            .collect();
        ground_truth_labels(&guesses, pairs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn batch_with_labels(labels: Vec<usize>) -> Batch<f64> {
        let n = labels.len();
        Batch {
            indices: (0..n).collect(),
            images: Array2::zeros((n, 1)),
            labels: Some(labels),
        }
    }

    #[test]
    fn constraint_normalizes_order_and_rejects_self_pairs() {
        let c = PairConstraint::new(5, 2, PairLabel::Similar).unwrap();
        assert_eq!((c.i, c.j), (2, 5));
        assert!(PairConstraint::new(3, 3, PairLabel::Similar).is_err());
    }

    #[test]
    fn dense_enumeration_counts() {
        assert_eq!(enumerate_pairs(2, 1.0, 0).unwrap(), vec![(0, 1)]);
        assert_eq!(enumerate_pairs(256, 1.0, 0).unwrap().len(), 32640);
        assert_eq!(enumerate_pairs(256, 0.1, 7).unwrap().len(), 3264);
    }

    #[test]
    fn dense_enumeration_is_lexicographic_and_complete() {
        let pairs = enumerate_pairs(9, 1.0, 0).unwrap();
        let mut want = Vec::new();
        for i in 0..9 {
            for j in (i + 1)..9 {
                want.push((i, j));
            }
        }
        assert_eq!(pairs, want);
    }

    #[test]
    fn unranking_covers_every_pair() {
        for b in 2..12usize {
            let total = b * (b - 1) / 2;
            let all: Vec<usize> = (0..total).collect();
            assert_eq!(unrank_pairs(b, &all), enumerate_pairs(b, 1.0, 0).unwrap());
        }
    }

    #[test]
    fn subsample_is_sorted_unique_and_seeded() {
        let a = enumerate_pairs(40, 0.25, 11).unwrap();
        let b = enumerate_pairs(40, 0.25, 11).unwrap();
        let c = enumerate_pairs(40, 0.25, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 195); // round(0.25 · 780)
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(a.iter().all(|&(i, j)| i < j && j < 40));
    }

    #[test]
    fn subsample_keeps_at_least_one_pair() {
        assert_eq!(enumerate_pairs(3, 0.01, 0).unwrap().len(), 1);
    }

    #[test]
    fn degenerate_enumeration_inputs_are_rejected() {
        assert!(enumerate_pairs(1, 1.0, 0).is_err());
        assert!(enumerate_pairs(8, 0.0, 0).is_err());
        assert!(enumerate_pairs(8, 1.5, 0).is_err());
    }

    #[test]
    fn ground_truth_examples() {
        let cons = ground_truth_labels(&[0, 0, 1], &[(0, 1), (0, 2), (1, 2)]).unwrap();
        assert_eq!(cons[0].label, PairLabel::Similar);
        assert_eq!(cons[1].label, PairLabel::Dissimilar);
        assert_eq!(cons[2].label, PairLabel::Dissimilar);

        let all_same = ground_truth_labels(&[4, 4, 4], &[(0, 1), (0, 2), (1, 2)]).unwrap();
        assert!(all_same.iter().all(|c| c.label == PairLabel::Similar));
        let all_diff = ground_truth_labels(&[0, 1, 2], &[(0, 1), (0, 2), (1, 2)]).unwrap();
        assert!(all_diff.iter().all(|c| c.label == PairLabel::Dissimilar));
    }

    fn constraints_with_counts(n_s: usize, n_d: usize) -> Vec<PairConstraint> {
        // Distinct index pairs; labels set directly.
        (0..n_s + n_d)
            .map(|k| PairConstraint {
                i: 2 * k,
                j: 2 * k + 1,
                label: if k < n_s {
                    PairLabel::Similar
                } else {
                    PairLabel::Dissimilar
                },
            })
            .collect()
    }

    #[test]
    fn flip_counts_are_exact() {
        let cons = constraints_with_counts(10, 5);
        let noise = NoiseSpec {
            recall_similar: 0.9,
            recall_dissimilar: 1.0,
            seed: 3,
        };
        let flipped = flip_for_recall(&cons, &noise).unwrap();
        let still_similar = flipped
            .iter()
            .take(10)
            .filter(|c| c.label == PairLabel::Similar)
            .count();
        assert_eq!(still_similar, 9);
        assert!(flipped[10..].iter().all(|c| c.label == PairLabel::Dissimilar));
    }

    #[test]
    fn full_recall_is_identity_and_zero_recall_inverts() {
        let cons = constraints_with_counts(7, 6);
        let identity = flip_for_recall(
            &cons,
            &NoiseSpec {
                recall_similar: 1.0,
                recall_dissimilar: 1.0,
                seed: 0,
            },
        )
        .unwrap();
        assert_eq!(identity, cons);

        let inverted = flip_for_recall(
            &cons,
            &NoiseSpec {
                recall_similar: 0.0,
                recall_dissimilar: 0.0,
                seed: 0,
            },
        )
        .unwrap();
        assert!(inverted
            .iter()
            .zip(cons.iter())
            .all(|(f, c)| f.label == c.label.flipped()));
        let (rs, rd) = measure_recall(&inverted, &cons).unwrap();
        assert_eq!(rs, Some(0.0));
        assert_eq!(rd, Some(0.0));
    }

    #[test]
    fn flipping_is_deterministic_per_seed() {
        let cons = constraints_with_counts(20, 20);
        let noise = NoiseSpec {
            recall_similar: 0.5,
            recall_dissimilar: 0.7,
            seed: 9,
        };
        let a = flip_for_recall(&cons, &noise).unwrap();
        let b = flip_for_recall(&cons, &noise).unwrap();
        assert_eq!(a, b);
        let c = flip_for_recall(&cons, &NoiseSpec { seed: 10, ..noise }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn out_of_range_recall_is_rejected() {
        let cons = constraints_with_counts(2, 2);
        let bad = NoiseSpec {
            recall_similar: 1.2,
            recall_dissimilar: 1.0,
            seed: 0,
        };
        assert!(flip_for_recall(&cons, &bad).is_err());
    }

    #[test]
    fn recall_measurement_examples() {
        let truth = constraints_with_counts(3, 7);
        let (rs, rd) = measure_recall(&truth, &truth).unwrap();
        assert_eq!((rs, rd), (Some(1.0), Some(1.0)));

        let all_dis: Vec<PairConstraint> = truth
            .iter()
            .map(|c| PairConstraint {
                label: PairLabel::Dissimilar,
                ..*c
            })
            .collect();
        let (rs, rd) = measure_recall(&all_dis, &truth).unwrap();
        assert_eq!((rs, rd), (Some(0.0), Some(1.0)));

        let all_sim_truth = constraints_with_counts(4, 0);
        let (rs, rd) = measure_recall(&all_sim_truth, &all_sim_truth).unwrap();
        assert_eq!(rs, Some(1.0));
        assert_eq!(rd, None);
    }

    #[test]
    fn mismatched_pair_lists_are_rejected() {
        let truth = constraints_with_counts(2, 2);
        let mut other = truth.clone();
        other[0].i += 100;
        assert!(matches!(
            measure_recall(&other, &truth),
            Err(Error::MismatchedPairs(_))
        ));
        assert!(matches!(
            measure_recall(&truth[..3], &truth),
            Err(Error::MismatchedPairs(_))
        ));
    }

    #[test]
    fn ground_truth_oracle_matches_free_function() {
        let batch = batch_with_labels(vec![0, 1, 0, 2]);
        let pairs = enumerate_pairs(4, 1.0, 0).unwrap();
        let via_oracle = GroundTruthOracle.label_pairs(&batch, &pairs).unwrap();
        let direct = ground_truth_labels(batch.labels.as_ref().unwrap(), &pairs).unwrap();
        assert_eq!(via_oracle, direct);
    }

    #[test]
    fn oracles_require_labels() {
        let batch = Batch::<f64> {
            indices: vec![0, 1],
            images: Array2::zeros((2, 1)),
            labels: None,
        };
        assert!(matches!(
            GroundTruthOracle.label_pairs(&batch, &[(0, 1)]),
            Err(Error::MissingLabels(_))
        ));
    }

    #[test]
    fn noiseless_noisy_oracle_equals_ground_truth() {
        let batch = batch_with_labels(vec![0, 0, 1, 1, 2]);
        let pairs = enumerate_pairs(5, 1.0, 0).unwrap();
        let noisy = NoisyOracle::new(NoiseSpec {
            recall_similar: 1.0,
            recall_dissimilar: 1.0,
            seed: 5,
        });
        assert_eq!(
            noisy.label_pairs(&batch, &pairs).unwrap(),
            GroundTruthOracle.label_pairs(&batch, &pairs).unwrap()
        );
    }

    #[test]
    fn noisy_oracle_varies_by_batch_but_not_by_call() {
        let noisy = NoisyOracle::new(NoiseSpec {
            recall_similar: 0.5,
            recall_dissimilar: 0.5,
            seed: 13,
        });
        let batch_a = batch_with_labels(vec![0, 0, 1, 1]);
        let mut batch_b = batch_with_labels(vec![0, 0, 1, 1]);
        batch_b.indices = vec![9, 8, 7, 6];
        let pairs = enumerate_pairs(4, 1.0, 0).unwrap();
        let a1 = noisy.label_pairs(&batch_a, &pairs).unwrap();
        let a2 = noisy.label_pairs(&batch_a, &pairs).unwrap();
        let b = noisy.label_pairs(&batch_b, &pairs).unwrap();
        assert_eq!(a1, a2);
        assert_ne!(a1, b); // fingerprints differ, so the flip draws differ
    }

    #[test]
    fn constant_oracle_labels_everything_alike() {
        let batch = batch_with_labels(vec![0, 1, 2]);
        let pairs = enumerate_pairs(3, 1.0, 0).unwrap();
        let cons = ConstantOracle {
            label: PairLabel::Similar,
        }
        .label_pairs(&batch, &pairs)
        .unwrap();
        assert!(cons.iter().all(|c| c.label == PairLabel::Similar));
    }

    #[test]
    fn random_guessing_recalls_dissimilar_pairs_near_chance() {
        // Balanced 10-class truth: a random 10-way guess keeps a dissimilar
        // pair dissimilar with probability 0.9.
        let oracle = RandomGuessOracle {
            num_classes: 10,
            seed: 21,
        };
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let pairs = enumerate_pairs(100, 1.0, 0).unwrap();
        let mut hit = 0usize;
        let mut total = 0usize;
        for rep in 0..20u64 {
            let mut batch = batch_with_labels(labels.clone());
            batch.indices = (0..100).map(|i| i + 1000 * rep as usize).collect();
            let guessed = oracle.label_pairs(&batch, &pairs).unwrap();
            let truth = ground_truth_labels(&labels, &pairs).unwrap();
            for (g, t) in guessed.iter().zip(truth.iter()) {
                if t.label == PairLabel::Dissimilar {
                    total += 1;
                    if g.label == PairLabel::Dissimilar {
                        hit += 1;
                    }
                }
            }
        }
        let recall_d = hit as f64 / total as f64;
        assert!(
            (recall_d - 0.9).abs() < 0.02,
            "chance recall_dissimilar {recall_d}"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn remeasured_recall_is_within_rounding(
            n_s in 1usize..40,
            n_d in 1usize..40,
            rs_pct in 0u32..=100,
            rd_pct in 0u32..=100,
            seed in 0u64..500,
        ) {
            let cons = constraints_with_counts(n_s, n_d);
            let noise = NoiseSpec {
                recall_similar: rs_pct as f64 / 100.0,
                recall_dissimilar: rd_pct as f64 / 100.0,
                seed,
            };
            let flipped = flip_for_recall(&cons, &noise).unwrap();
            let (rs, rd) = measure_recall(&flipped, &cons).unwrap();
            prop_assert!((rs.unwrap() - noise.recall_similar).abs() <= 0.5 / n_s as f64 + 1e-12);
            prop_assert!((rd.unwrap() - noise.recall_dissimilar).abs() <= 0.5 / n_d as f64 + 1e-12);
        }

        #[test]
        fn subsampled_pairs_are_a_subset_of_the_dense_set(
            b in 2usize..30,
            density_pct in 1u32..100,
            seed in 0u64..100,
        ) {
            let density = density_pct as f64 / 100.0;
            let sampled = enumerate_pairs(b, density, seed)?;
            let total = b * (b - 1) / 2;
            let want = ((density * total as f64).round() as usize).clamp(1, total);
            prop_assert_eq!(sampled.len(), want);
            prop_assert!(sampled.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(sampled.iter().all(|&(i, j)| i < j && j < b));
        }
    }
}

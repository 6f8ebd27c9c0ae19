//! Clustering by dense pairwise constraints.
//!
//! The library trains a small "ClusterNet" that maps each sample to a softmax
//! distribution over `M` clusters. Training never sees class labels directly:
//! every mini-batch is expanded into (a density-controlled fraction of) its
//! unordered sample pairs, a similarity oracle labels each pair
//! similar/dissimilar, and a contrastive KL-divergence loss pulls similar
//! output distributions together while pushing dissimilar ones apart up to a
//! hinge margin. Oracles range from ground truth with exact recall-controlled
//! label flipping (for noise-robustness diagnostics) to a Siamese similarity
//! prediction network (SPN) trained on a disjoint source task and transferred.
//!
//! Modules mirror the pipeline:
//!
//! * [`data`] — IDX ingestion, synthetic Gaussian blobs, normalization,
//!   seeded mini-batch iteration.
//! * [`network`] — feedforward conv/pool/relu/fc stack with analytic
//!   backpropagation, SGD with momentum, softmax head, gradient checking,
//!   and checkpoint I/O.
//! * [`loss`] — the hinged contrastive KL loss over pairs of distributions,
//!   with stop-gradient semantics.
//! * [`pairs`] — dense pair enumeration, ground-truth labeling, recall
//!   flipping, and the [`pairs::SimilarityOracle`] abstraction.
//! * [`spn`] — Siamese similarity prediction network: training on dense
//!   pairs, symmetrized prediction, recall evaluation, N-way testing.
//! * [`metrics`] — Hungarian assignment, unsupervised clustering accuracy,
//!   normalized mutual information.
//! * [`trainer`] — the end-to-end multi-restart clustering loop.
//! * [`harness`] — recall/density/cluster-count diagnostic grids, the
//!   source→target transfer experiment, and CSV/JSON emission.
//!
//! All numeric code is generic over the scalar type through [`Float`];
//! concrete `f64` aliases for the main types live at the crate root
//! (`f64` is the default used by the CLI and the experiment harness).

pub mod data;
pub mod error;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod pairs;
pub mod seed;
pub mod spn;
pub mod trainer;

pub use error::{Error, Result};

use ndarray::ScalarOperand;
use num_traits::{FromPrimitive, NumAssignOps, ToPrimitive};
use serde::{de::DeserializeOwned, Serialize};

/// Scalar type the numeric core is generic over.
///
/// Implemented for `f32` and `f64`. Random draws are always made in `f64`
/// and cast down, so an `f32` run follows the same sample path as the
/// matching `f64` run.
pub trait Float:
    num_traits::Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + ScalarOperand
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Lossy cast from `f64`, for constants and RNG draws.
    fn cast(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Float")
    }

    /// Widen to `f64` for reporting and file formats.
    fn to_f64c(self) -> f64 {
        self.to_f64().expect("Float widens to f64")
    }
}

impl Float for f32 {}
impl Float for f64 {}

/// Probabilities are clamped to at least this value before any logarithm.
pub const PROB_EPSILON: f64 = 1e-7;

pub type Dataset64 = data::Dataset<f64>;
pub type Batch64 = data::Batch<f64>;
pub type NetworkParameters64 = network::NetworkParameters<f64>;
pub type Softmax64 = network::Softmax<f64>;
pub type Distribution64 = loss::Distribution<f64>;
pub type LossConfig64 = loss::LossConfig<f64>;
pub type SpnModel64 = spn::SpnModel<f64>;
pub type ClusterRunConfig64 = trainer::ClusterRunConfig<f64>;
pub type ClusterRunResult64 = trainer::ClusterRunResult<f64>;

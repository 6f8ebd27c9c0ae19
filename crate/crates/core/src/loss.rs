//! Contrastive KL loss over in-batch pairs.
//!
//! Each pair of output distributions contributes either a pull term (both
//! KL directions) or a hinged push term (margin minus each KL direction,
//! floored at zero). One side of every KL term is "starred": treated as a
//! constant, so the term drives only the other distribution. Reduction over
//! pairs is the mean, keeping gradient scale stable across batch size and
//! pair density.

use crate::error::{Error, Result};
use crate::network::{softmax_row_backward, Softmax};
use crate::pairs::{PairConstraint, PairLabel};
use crate::seed::TokenHasher;
use crate::{Float, PROB_EPSILON};
use ndarray::{Array1, Array2};

/// One clamped output distribution together with the pre-clamp softmax values
/// needed to route gradients back to its logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution<F: Float> {
    probs: Array1<F>,
    pre_clamp: Array1<F>,
}

impl<F: Float> Distribution<F> {
    /// Extract row `row` of a batch softmax.
    pub fn from_softmax(sm: &Softmax<F>, row: usize) -> Self {
        Distribution {
            probs: sm.probs().row(row).to_owned(),
            pre_clamp: sm.pre_clamp().row(row).to_owned(),
        }
    }

    /// Wrap an explicit probability vector (tests, hand examples). The vector
    /// must already satisfy the distribution invariants; it is treated as its
    /// own pre-clamp softmax output.
    pub fn from_probs(probs: Array1<F>) -> Result<Self> {
        let sum = probs.iter().copied().sum::<F>();
        if (sum - F::one()).abs() > F::cast(1e-9) {
            return Err(Error::InvalidConfig(format!(
                "distribution sums to {sum}, expected 1"
            )));
        }
        // Renormalization can pull entries slightly below the clamp floor.
        let floor = F::cast(PROB_EPSILON * (1.0 - 1e-6))
            / (F::one() + F::cast(PROB_EPSILON) * F::cast(probs.len() as f64));
        if probs.iter().any(|&p| p < floor) {
            return Err(Error::InvalidConfig(
                "distribution entry below the clamp floor".into(),
            ));
        }
        Ok(Distribution {
            pre_clamp: probs.clone(),
            probs,
        })
    }

    pub fn probs(&self) -> &Array1<F> {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// `KL(p ‖ q) = Σ p·ln(p/q)` in nats. Clamped inputs keep it finite.
pub fn kl<F: Float>(p: &Distribution<F>, q: &Distribution<F>) -> F {
    assert_eq!(p.len(), q.len(), "distribution lengths differ");
    p.probs
        .iter()
        .zip(q.probs.iter())
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig<F> {
    /// Hinge margin σ for dissimilar pairs.
    pub margin: F,
}

impl<F: Float> Default for LossConfig<F> {
    fn default() -> Self {
        LossConfig {
            margin: F::cast(2.0),
        }
    }
}

impl<F: Float> LossConfig<F> {
    fn validated(&self) -> Result<F> {
        if self.margin > F::zero() {
            Ok(self.margin)
        } else {
            Err(Error::InvalidConfig(format!(
                "hinge margin must be positive, got {}",
                self.margin
            )))
        }
    }
}

/// Pull loss for a similar pair: `KL(P*‖Q) + KL(Q*‖P)`, each term driving
/// only its non-starred side. Returns `(loss, grad_p_logits, grad_q_logits)`.
pub fn similar_pair_loss<F: Float>(
    p: &Distribution<F>,
    q: &Distribution<F>,
) -> (F, Array1<F>, Array1<F>) {
    let loss = kl(p, q) + kl(q, p);
    // d/dq of KL(P*‖Q) is -p/q; d/dp of KL(Q*‖P) is -q/p.
    let gq_probs: Array1<F> = p
        .probs
        .iter()
        .zip(q.probs.iter())
        .map(|(&pi, &qi)| -(pi / qi))
        .collect();
    let gp_probs: Array1<F> = q
        .probs
        .iter()
        .zip(p.probs.iter())
        .map(|(&qi, &pi)| -(qi / pi))
        .collect();
    let gp = softmax_row_backward(&p.pre_clamp.view(), &gp_probs.view());
    let gq = softmax_row_backward(&q.pre_clamp.view(), &gq_probs.view());
    (loss, gp, gq)
}

/// Push loss for a dissimilar pair: `max(0, σ−KL(P*‖Q)) + max(0, σ−KL(Q*‖P))`.
/// A hinge term past the margin contributes nothing — its gradient is exactly
/// zero. Returns `(loss, grad_p_logits, grad_q_logits)`.
pub fn dissimilar_pair_loss<F: Float>(
    p: &Distribution<F>,
    q: &Distribution<F>,
    margin: F,
) -> (F, Array1<F>, Array1<F>) {
    let m = p.len();
    let mut loss = F::zero();
    let mut gp = Array1::zeros(m);
    let mut gq = Array1::zeros(m);
    let t_q = margin - kl(p, q);
    if t_q > F::zero() {
        loss += t_q;
        let gq_probs: Array1<F> = p
            .probs
            .iter()
            .zip(q.probs.iter())
            .map(|(&pi, &qi)| pi / qi)
            .collect();
        gq = softmax_row_backward(&q.pre_clamp.view(), &gq_probs.view());
    }
    let t_p = margin - kl(q, p);
    if t_p > F::zero() {
        loss += t_p;
        let gp_probs: Array1<F> = q
            .probs
            .iter()
            .zip(p.probs.iter())
            .map(|(&qi, &pi)| qi / pi)
            .collect();
        gp = softmax_row_backward(&p.pre_clamp.view(), &gp_probs.view());
    }
    (loss, gp, gq)
}

#[derive(Debug, Clone)]
pub struct PairLossResult<F: Float> {
    /// Mean per-pair loss.
    pub total_loss: F,
    /// `B × M` gradient with respect to the producing logits.
    pub grad_wrt_logits: Array2<F>,
    pub pair_count_similar: usize,
    pub pair_count_dissimilar: usize,
}

/// Mean contrastive loss over a constraint set, with gradients for the whole
/// batch of logits.
///
/// The per-pair KL values all come from one Gram-style product
/// `G = P·ln(P)ᵀ` (`KL(P_i‖P_j) = G_ii − G_ij`), and the probability-space
/// gradients collapse into a second matrix product, so cost scales with
/// `B²·M` rather than `pairs × M` scalar work.
pub fn contrastive_batch_loss<F: Float>(
    sm: &Softmax<F>,
    constraints: &[PairConstraint],
    cfg: &LossConfig<F>,
) -> Result<PairLossResult<F>> {
    contrastive_batch_loss_traced(sm, constraints, cfg).map(|(r, _)| r)
}

/// As [`contrastive_batch_loss`], additionally returning a hash of the hinge
/// branch decisions for finite-difference kink detection.
pub fn contrastive_batch_loss_traced<F: Float>(
    sm: &Softmax<F>,
    constraints: &[PairConstraint],
    cfg: &LossConfig<F>,
) -> Result<(PairLossResult<F>, u64)> {
    let margin = cfg.validated()?;
    if constraints.is_empty() {
        return Err(Error::EmptyConstraints);
    }
    let probs = sm.probs();
    let b = probs.nrows();
    for c in constraints {
        if c.j >= b {
            return Err(Error::InvalidConfig(format!(
                "constraint ({}, {}) exceeds batch size {b}",
                c.i, c.j
            )));
        }
    }

    let ln_p = probs.mapv(F::ln);
    let gram = probs.dot(&ln_p.t());
    let kl_of = |i: usize, j: usize| gram[(i, i)] - gram[(i, j)];

    // coef[(i, j)] scales p_i's contribution to sample j's probability
    // gradient: -1 per pulling term, +1 per active pushing term.
    let mut coef = Array2::<F>::zeros((b, b));
    let mut hinges = TokenHasher::new();
    let mut loss = F::zero();
    let mut n_sim = 0usize;
    let mut n_dis = 0usize;
    for c in constraints {
        let (i, j) = (c.i, c.j);
        match c.label {
            PairLabel::Similar => {
                n_sim += 1;
                loss += kl_of(i, j) + kl_of(j, i);
                coef[(i, j)] -= F::one();
                coef[(j, i)] -= F::one();
            }
            PairLabel::Dissimilar => {
                n_dis += 1;
                let t_j = margin - kl_of(i, j);
                let active_j = t_j > F::zero();
                hinges.push_bit(active_j);
                if active_j {
                    loss += t_j;
                    coef[(i, j)] += F::one();
                }
                let t_i = margin - kl_of(j, i);
                let active_i = t_i > F::zero();
                hinges.push_bit(active_i);
                if active_i {
                    loss += t_i;
                    coef[(j, i)] += F::one();
                }
            }
        }
    }

    let inv_n = F::one() / F::cast(constraints.len() as f64);
    let mut grad_probs = coef.t().dot(probs);
    grad_probs.zip_mut_with(probs, |g, &p| *g = *g / p * inv_n);
    let grad_wrt_logits = sm.backward(&grad_probs.view());

    Ok((
        PairLossResult {
            total_loss: loss * inv_n,
            grad_wrt_logits,
            pair_count_similar: n_sim,
            pair_count_dissimilar: n_dis,
        },
        hinges.finish(),
    ))
}

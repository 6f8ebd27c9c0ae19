//! Central-difference gradient verification.
//!
//! The checker perturbs individual parameters of an f64 network and compares
//! finite-difference slopes against the analytic gradients a caller-supplied
//! evaluation closure leaves in the gradient buffers. Coordinates whose
//! perturbed evaluations cross a nondifferentiable branch (ReLU sign, pool
//! argmax, clamp mask, hinge activity) are skipped and resampled: a central
//! difference across a kink measures nothing about the analytic gradient.

use crate::error::{Error, Result};
use crate::network::{NetworkParameters, ParamCoord};
use crate::seed;
use rand::seq::SliceRandom;

/// Loss value plus a hash of every branch decision made while computing it.
#[derive(Debug, Clone, Copy)]
pub struct BranchedLoss {
    pub loss: f64,
    pub token: u64,
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step h.
    pub step: f64,
    /// Maximum acceptable relative error.
    pub tolerance: f64,
    /// Number of parameter coordinates to verify (all, if the network is
    /// smaller).
    pub coords: usize,
    /// Seed for the coordinate subsample.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            coords: 200,
            seed: 0,
        }
    }
}

/// One verified coordinate.
#[derive(Debug, Clone, Copy)]
pub struct CoordResult {
    pub coord: ParamCoord,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Coordinates actually compared.
    pub checked: usize,
    /// Coordinates skipped because a perturbation crossed a branch.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: Option<CoordResult>,
    /// Coordinates exceeding the tolerance.
    pub failures: Vec<CoordResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.failures.is_empty()
    }
}

/// Relative error with a dead zone: slopes that are both below 1e-7 in
/// magnitude count as exact agreement.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    if analytic.abs() < 1e-7 && numeric.abs() < 1e-7 {
        0.0
    } else {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs())
    }
}

/// Verify analytic gradients against central differences.
///
/// `eval` must run its forward pass and loss on the current parameters, run
/// backward so the parameter gradient buffers hold d(loss)/dθ, and return the
/// loss value plus a branch token. Gradient buffers are zeroed before every
/// call; they are left zeroed on return.
///
/// The parameter count must be in `1..=10_000` (finite differencing a larger
/// network is pointlessly slow, and an all-activation network has nothing to
/// check).
pub fn gradient_check<F>(
    params: &mut NetworkParameters<f64>,
    mut eval: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut NetworkParameters<f64>) -> Result<BranchedLoss>,
{
    let total = params.param_count();
    if total == 0 || total > 10_000 {
        return Err(Error::GradCheckSize(total));
    }

    params.zero_grads();
    let base = eval(params)?;
    let coords = params.param_coords();
    let analytic: Vec<f64> = coords.iter().map(|&c| params.get_grad(c)).collect();

    let mut order: Vec<usize> = (0..coords.len()).collect();
    let mut rng = seed::rng(seed::mix(opts.seed, &[seed::tag("gradcheck")]));
    order.shuffle(&mut rng);

    let target = opts.coords.min(coords.len());
    let h = opts.step;
    let mut report = GradCheckReport {
        checked: 0,
        skipped: 0,
        max_rel_err: 0.0,
        worst: None,
        failures: Vec::new(),
    };

    for &k in &order {
        if report.checked >= target {
            break;
        }
        let coord = coords[k];
        let orig = params.get_param(coord);

        params.set_param(coord, orig + h);
        params.zero_grads();
        let plus = eval(params)?;
        params.set_param(coord, orig - h);
        params.zero_grads();
        let minus = eval(params)?;
        params.set_param(coord, orig);

        if plus.token != base.token || minus.token != base.token {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * h);
        let result = CoordResult {
            coord,
            analytic: analytic[k],
            numeric,
            rel_err: rel_err(analytic[k], numeric),
        };
        report.checked += 1;
        if result.rel_err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = result.rel_err;
            report.worst = Some(result);
        }
        if result.rel_err > opts.tolerance {
            report.failures.push(result);
        }
    }
    params.zero_grads();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, NetworkConfig};
    use ndarray::Array2;

    /// Smooth quadratic readout: loss = 0.5 * sum(logits^2). Its logit
    /// gradient is the logits themselves, so `eval` exercises the full
    /// forward/backward plumbing with no loss-side branches.
    fn quadratic_eval(
        x: Array2<f64>,
    ) -> impl FnMut(&mut NetworkParameters<f64>) -> crate::Result<BranchedLoss> {
        move |params| {
            let (logits, cache) = params.forward(&x)?;
            let loss = 0.5 * logits.iter().map(|v| v * v).sum::<f64>();
            let token = params.branch_token(&cache);
            params.backward(&cache, &logits.view())?;
            Ok(BranchedLoss { loss, token })
        }
    }

    #[test]
    fn correct_network_passes() {
        let cfg = NetworkConfig {
            input_shape: (1, 6, 6),
            layers: vec![
                crate::network::LayerSpec::Conv {
                    kernel: 3,
                    in_channels: 1,
                    out_channels: 3,
                    same_pad: true,
                },
                crate::network::LayerSpec::Relu,
                crate::network::LayerSpec::MaxPool,
                crate::network::LayerSpec::Flatten,
                crate::network::LayerSpec::Fc {
                    inputs: 27,
                    outputs: 5,
                },
            ],
            output_dim: 5,
            init_seed: 21,
        };
        let mut params = init_params::<f64>(&cfg).unwrap();
        let x = Array2::from_shape_fn((4, 36), |(i, j)| ((i * 37 + j) as f64 * 0.23).sin());
        let report = gradient_check(
            &mut params,
            quadratic_eval(x),
            &GradCheckOptions {
                coords: 120,
                seed: 5,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
        assert!(report.checked >= 100);
        assert!(report.max_rel_err <= 1e-4);
    }

    #[test]
    fn corrupted_bias_gradient_is_caught() {
        let cfg = NetworkConfig::mlp(4, 8, 3, 9);
        let mut params = init_params::<f64>(&cfg).unwrap();
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64) - 0.4 * (j as f64));
        let mut inner = quadratic_eval(x);
        // Sabotage: double the largest bias gradient after the honest
        // backward pass.
        let bad = move |params: &mut NetworkParameters<f64>| -> crate::Result<BranchedLoss> {
            let out = inner(params)?;
            let coord = params
                .param_coords()
                .into_iter()
                .filter(|c| c.bias)
                .max_by(|&a, &b| {
                    params
                        .get_grad(a)
                        .abs()
                        .total_cmp(&params.get_grad(b).abs())
                })
                .expect("mlp has biases");
            let g = params.get_grad(coord);
            params.set_grad(coord, 2.0 * g);
            Ok(out)
        };
        let report = gradient_check(
            &mut params,
            bad,
            &GradCheckOptions {
                coords: usize::MAX,
                seed: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_err > 1e-2);
    }

    #[test]
    fn zero_parameter_network_is_rejected() {
        let cfg = NetworkConfig {
            input_shape: (1, 1, 4),
            layers: vec![crate::network::LayerSpec::Flatten, crate::network::LayerSpec::Relu],
            output_dim: 4,
            init_seed: 0,
        };
        let mut params = init_params::<f64>(&cfg).unwrap();
        let x = Array2::zeros((1, 4));
        let err = gradient_check(&mut params, quadratic_eval(x), &GradCheckOptions::default());
        assert!(matches!(err, Err(Error::GradCheckSize(0))));
    }

    #[test]
    fn oversized_network_is_rejected() {
        let cfg = NetworkConfig::mlp(200, 100, 10, 0);
        assert!(cfg.param_count() > 10_000);
        let mut params = init_params::<f64>(&cfg).unwrap();
        let x = Array2::zeros((1, 200));
        let err = gradient_check(&mut params, quadratic_eval(x), &GradCheckOptions::default());
        assert!(matches!(err, Err(Error::GradCheckSize(_))));
    }
}

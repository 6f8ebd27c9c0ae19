//! Feedforward networks with exact analytic backpropagation.
//!
//! A network is a layer list (conv / maxpool / relu / flatten / fc) applied to
//! batch-major activations, ending in `output_dim` logits. Parameters carry
//! their own gradient and momentum buffers; a version counter ties every
//! [`ForwardCache`] to the parameter state that produced it.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;

use crate::error::{Error, Result};
use crate::seed::{self, TokenHasher};
use crate::{Float, PROB_EPSILON};
use layers::ConvGeom;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

/// One layer of the stack. Convolution is stride 1 with either no padding or
/// same-padding (odd kernels only); pooling is fixed 2×2 stride 2.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        same_pad: bool,
    },
    MaxPool,
    Relu,
    Flatten,
    Fc {
        inputs: usize,
        outputs: usize,
    },
}

/// Activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Spatial(usize, usize, usize),
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Spatial(c, h, w) => c * h * w,
            Shape::Flat(d) => d,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Per-sample input shape `(C, H, W)`; flat data uses `(1, 1, d)`.
    pub input_shape: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    /// Logit count M; must equal the final layer's output size.
    pub output_dim: usize,
    pub init_seed: u64,
}

impl NetworkConfig {
    /// Walk the layer list, checking that consecutive shapes compose and the
    /// final shape is `Flat(output_dim)`. Returns the shape *entering* each
    /// layer plus the output shape (length `layers.len() + 1`).
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let (c, h, w) = self.input_shape;
        if c * h * w == 0 {
            return Err(Error::InvalidConfig("zero-sized input shape".into()));
        }
        let mut shapes = vec![Shape::Spatial(c, h, w)];
        for (idx, layer) in self.layers.iter().enumerate() {
            let cur = *shapes.last().expect("non-empty by construction");
            let bad = |msg: String| Error::InvalidConfig(format!("layer {idx}: {msg}"));
            let next = match (layer, cur) {
                (
                    LayerSpec::Conv {
                        kernel,
                        in_channels,
                        out_channels,
                        same_pad,
                    },
                    Shape::Spatial(c, h, w),
                ) => {
                    if *kernel == 0 || *in_channels == 0 || *out_channels == 0 {
                        return Err(bad("conv dimensions must be positive".into()));
                    }
                    if *in_channels != c {
                        return Err(bad(format!(
                            "conv expects {in_channels} channels, input has {c}"
                        )));
                    }
                    if *same_pad {
                        if kernel % 2 == 0 {
                            return Err(bad("same-padding requires an odd kernel".into()));
                        }
                        Shape::Spatial(*out_channels, h, w)
                    } else {
                        if h < *kernel || w < *kernel {
                            return Err(bad(format!(
                                "kernel {kernel} exceeds {h}x{w} input"
                            )));
                        }
                        Shape::Spatial(*out_channels, h - kernel + 1, w - kernel + 1)
                    }
                }
                (LayerSpec::Conv { .. }, Shape::Flat(_)) => {
                    return Err(bad("conv needs spatial input".into()))
                }
                (LayerSpec::MaxPool, Shape::Spatial(c, h, w)) => {
                    if h < 2 || w < 2 {
                        return Err(bad(format!("cannot pool a {h}x{w} map")));
                    }
                    Shape::Spatial(c, h / 2, w / 2)
                }
                (LayerSpec::MaxPool, Shape::Flat(_)) => {
                    return Err(bad("maxpool needs spatial input".into()))
                }
                (LayerSpec::Relu, any) => any,
                (LayerSpec::Flatten, Shape::Spatial(c, h, w)) => Shape::Flat(c * h * w),
                (LayerSpec::Flatten, Shape::Flat(_)) => {
                    return Err(bad("input is already flat".into()))
                }
                (LayerSpec::Fc { inputs, outputs }, Shape::Flat(d)) => {
                    if *inputs != d {
                        return Err(bad(format!("fc expects {inputs} inputs, got {d}")));
                    }
                    if *outputs == 0 {
                        return Err(bad("fc output dim must be positive".into()));
                    }
                    Shape::Flat(*outputs)
                }
                (LayerSpec::Fc { .. }, Shape::Spatial(..)) => {
                    return Err(bad("fc needs flat input (insert flatten)".into()))
                }
            };
            shapes.push(next);
        }
        match shapes.last() {
            Some(Shape::Flat(d)) if *d == self.output_dim => Ok(shapes),
            other => Err(Error::InvalidConfig(format!(
                "network must end in Flat({}), got {:?}",
                self.output_dim, other
            ))),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv {
                    kernel,
                    in_channels,
                    out_channels,
                    ..
                } => out_channels * (in_channels * kernel * kernel) + out_channels,
                LayerSpec::Fc { inputs, outputs } => inputs * outputs + outputs,
                _ => 0,
            })
            .sum()
    }

    /// The default image clustering network: two valid 5×5 convolutions with
    /// pooling, then two fully connected layers.
    pub fn conv_net(input_shape: (usize, usize, usize), output_dim: usize, init_seed: u64) -> Self {
        let (c, h, w) = input_shape;
        // Saturate on undersized inputs; `shapes()` turns the degenerate
        // geometry into a config error instead of a panic here.
        let h1 = h.saturating_sub(4) / 2;
        let w1 = w.saturating_sub(4) / 2;
        let h2 = h1.saturating_sub(4) / 2;
        let w2 = w1.saturating_sub(4) / 2;
        NetworkConfig {
            input_shape,
            layers: vec![
                LayerSpec::Conv {
                    kernel: 5,
                    in_channels: c,
                    out_channels: 16,
                    same_pad: false,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool,
                LayerSpec::Conv {
                    kernel: 5,
                    in_channels: 16,
                    out_channels: 32,
                    same_pad: false,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool,
                LayerSpec::Flatten,
                LayerSpec::Fc {
                    inputs: 32 * h2 * w2,
                    outputs: 128,
                },
                LayerSpec::Relu,
                LayerSpec::Fc {
                    inputs: 128,
                    outputs: output_dim,
                },
            ],
            output_dim,
            init_seed,
        }
    }

    /// Small two-layer perceptron for flat (blob) data.
    pub fn mlp(input_dim: usize, hidden: usize, output_dim: usize, init_seed: u64) -> Self {
        NetworkConfig {
            input_shape: (1, 1, input_dim),
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::Fc {
                    inputs: input_dim,
                    outputs: hidden,
                },
                LayerSpec::Relu,
                LayerSpec::Fc {
                    inputs: hidden,
                    outputs: output_dim,
                },
            ],
            output_dim,
            init_seed,
        }
    }
}

/// Weights plus parallel gradient and momentum-velocity buffers for one
/// parametric layer. Conv weights are `out_ch × (in_ch·K·K)`, fc weights
/// `inputs × outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F: Float> {
    pub w: Array2<F>,
    pub b: Array1<F>,
    pub gw: Array2<F>,
    pub gb: Array1<F>,
    pub vw: Array2<F>,
    pub vb: Array1<F>,
}

impl<F: Float> LayerParams<F> {
    fn new(w: Array2<F>, outputs: usize) -> Self {
        let dim = w.dim();
        LayerParams {
            w,
            b: Array1::zeros(outputs),
            gw: Array2::zeros(dim),
            gb: Array1::zeros(outputs),
            vw: Array2::zeros(dim),
            vb: Array1::zeros(outputs),
        }
    }
}

/// Address of one scalar parameter, used by the gradient checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCoord {
    pub layer: usize,
    pub bias: bool,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct NetworkParameters<F: Float> {
    config: NetworkConfig,
    shapes: Vec<Shape>,
    layers: Vec<Option<LayerParams<F>>>,
    version: u64,
}

/// Draw parameters uniformly in `[−s, s]`, `s = sqrt(1/fan_in)`, biases zero.
/// Deterministic given `cfg.init_seed`; draws happen in f64 and are then cast.
pub fn init_params<F: Float>(cfg: &NetworkConfig) -> Result<NetworkParameters<F>> {
    let shapes = cfg.shapes()?;
    let mut rng = seed::rng(seed::mix(cfg.init_seed, &[seed::tag("net-init")]));
    let mut draw = |rows: usize, cols: usize, fan_in: usize| -> Array2<F> {
        let s = (1.0 / fan_in as f64).sqrt();
        let mut w = Array2::zeros((rows, cols));
        for v in w.iter_mut() {
            *v = F::cast(rand::Rng::random_range(&mut rng, -s..s));
        }
        w
    };
    let layers = cfg
        .layers
        .iter()
        .map(|l| match *l {
            LayerSpec::Conv {
                kernel,
                in_channels,
                out_channels,
                ..
            } => {
                let fan_in = in_channels * kernel * kernel;
                Some(LayerParams::new(
                    draw(out_channels, fan_in, fan_in),
                    out_channels,
                ))
            }
            LayerSpec::Fc { inputs, outputs } => {
                Some(LayerParams::new(draw(inputs, outputs, inputs), outputs))
            }
            _ => None,
        })
        .collect();
    Ok(NetworkParameters {
        config: cfg.clone(),
        shapes,
        layers,
        version: 0,
    })
}

/// Per-layer saved inputs (plus pool argmaxes) for one batch's backward pass.
/// Valid only while the parameter version is unchanged.
#[derive(Debug, Clone)]
pub struct ForwardCache<F: Float> {
    version: u64,
    batch: usize,
    layer_inputs: Vec<Array2<F>>,
    pool_argmax: Vec<Option<Vec<usize>>>,
}

impl<F: Float> NetworkParameters<F> {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    pub fn layer_params(&self, layer: usize) -> Option<&LayerParams<F>> {
        self.layers.get(layer).and_then(|l| l.as_ref())
    }

    pub fn layer_params_mut(&mut self, layer: usize) -> Option<&mut LayerParams<F>> {
        self.layers.get_mut(layer).and_then(|l| l.as_mut())
    }

    fn conv_geom(&self, layer: usize) -> ConvGeom {
        let (kernel, out_channels, same_pad) = match self.config.layers[layer] {
            LayerSpec::Conv {
                kernel,
                out_channels,
                same_pad,
                ..
            } => (kernel, out_channels, same_pad),
            _ => unreachable!("caller dispatched on layer kind"),
        };
        let (c, h, w) = match self.shapes[layer] {
            Shape::Spatial(c, h, w) => (c, h, w),
            Shape::Flat(_) => unreachable!("conv shapes validated as spatial"),
        };
        let pad = if same_pad { (kernel - 1) / 2 } else { 0 };
        ConvGeom::new(c, h, w, out_channels, kernel, pad)
    }

    /// Run the batch through all layers, returning logits and the cache the
    /// backward pass needs.
    pub fn forward(&self, x: &Array2<F>) -> Result<(Array2<F>, ForwardCache<F>)> {
        if x.ncols() != self.shapes[0].len() {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} input features, batch has {}",
                self.shapes[0].len(),
                x.ncols()
            )));
        }
        let batch = x.nrows();
        let mut cache = ForwardCache {
            version: self.version,
            batch,
            layer_inputs: Vec::with_capacity(self.config.layers.len()),
            pool_argmax: vec![None; self.config.layers.len()],
        };
        let mut act = x.clone();
        for (idx, layer) in self.config.layers.iter().enumerate() {
            let next = match layer {
                LayerSpec::Conv { .. } => {
                    let p = self.layers[idx].as_ref().expect("conv has params");
                    layers::conv_forward(&act.view(), &p.w, &p.b, &self.conv_geom(idx))
                }
                LayerSpec::MaxPool => {
                    let (c, h, w) = match self.shapes[idx] {
                        Shape::Spatial(c, h, w) => (c, h, w),
                        Shape::Flat(_) => unreachable!("pool shapes validated as spatial"),
                    };
                    let (out, arg) = layers::maxpool_forward(&act.view(), c, h, w);
                    cache.pool_argmax[idx] = Some(arg);
                    out
                }
                LayerSpec::Relu => layers::relu_forward(&act.view()),
                LayerSpec::Flatten => act.clone(),
                LayerSpec::Fc { .. } => {
                    let p = self.layers[idx].as_ref().expect("fc has params");
                    layers::fc_forward(&act.view(), &p.w, &p.b)
                }
            };
            cache.layer_inputs.push(act);
            act = next;
        }
        Ok((act, cache))
    }

    /// Forward without retaining a cache (evaluation mode).
    pub fn infer(&self, x: &Array2<F>) -> Result<Array2<F>> {
        self.forward(x).map(|(logits, _)| logits)
    }

    /// Backpropagate `grad_logits`, accumulating into the gradient buffers
    /// (weights untouched). Returns the gradient with respect to the input
    /// batch. Errors if the cache predates a parameter update.
    pub fn backward(
        &mut self,
        cache: &ForwardCache<F>,
        grad_logits: &ArrayView2<F>,
    ) -> Result<Array2<F>> {
        if cache.version != self.version {
            return Err(Error::StaleCache(format!(
                "cache from parameter version {}, current {}",
                cache.version, self.version
            )));
        }
        if grad_logits.nrows() != cache.batch || grad_logits.ncols() != self.config.output_dim {
            return Err(Error::ShapeMismatch(format!(
                "upstream gradient is {}x{}, expected {}x{}",
                grad_logits.nrows(),
                grad_logits.ncols(),
                cache.batch,
                self.config.output_dim
            )));
        }
        let mut grad = grad_logits.to_owned();
        for idx in (0..self.config.layers.len()).rev() {
            let input = &cache.layer_inputs[idx];
            grad = match self.config.layers[idx] {
                LayerSpec::Conv { .. } => {
                    let geom = self.conv_geom(idx);
                    let p = self.layers[idx].as_mut().expect("conv has params");
                    let (dx, dw, db) =
                        layers::conv_backward(&input.view(), &p.w, &grad.view(), &geom);
                    p.gw += &dw;
                    p.gb += &db;
                    dx
                }
                LayerSpec::MaxPool => {
                    let arg = cache.pool_argmax[idx].as_ref().expect("pool cached argmax");
                    layers::maxpool_backward(&grad.view(), arg, input.ncols())
                }
                LayerSpec::Relu => layers::relu_backward(&input.view(), &grad.view()),
                LayerSpec::Flatten => grad,
                LayerSpec::Fc { .. } => {
                    let p = self.layers[idx].as_mut().expect("fc has params");
                    let (dx, dw, db) = layers::fc_backward(&input.view(), &p.w, &grad.view());
                    p.gw += &dw;
                    p.gb += &db;
                    dx
                }
            };
        }
        Ok(grad)
    }

    /// `v ← momentum·v + g; w ← w − lr·v`; gradient buffers are zeroed and
    /// the parameter version advances (invalidating existing caches).
    pub fn sgd_step(&mut self, lr: F, momentum: F) {
        for layer in self.layers.iter_mut().flatten() {
            layer.vw.zip_mut_with(&layer.gw, |v, &g| *v = momentum * *v + g);
            layer.vb.zip_mut_with(&layer.gb, |v, &g| *v = momentum * *v + g);
            layer.w.zip_mut_with(&layer.vw, |w, &v| *w = *w - lr * v);
            layer.b.zip_mut_with(&layer.vb, |b, &v| *b = *b - lr * v);
            layer.gw.fill(F::zero());
            layer.gb.fill(F::zero());
        }
        self.version += 1;
    }

    pub fn zero_grads(&mut self) {
        for layer in self.layers.iter_mut().flatten() {
            layer.gw.fill(F::zero());
            layer.gb.fill(F::zero());
        }
    }

    /// Hash of every sign/argmax decision the cached forward pass made.
    /// Finite differencing skips coordinates whose perturbed passes disagree.
    pub fn branch_token(&self, cache: &ForwardCache<F>) -> u64 {
        let mut hasher = TokenHasher::new();
        for (idx, layer) in self.config.layers.iter().enumerate() {
            match layer {
                LayerSpec::Relu => {
                    for &v in &cache.layer_inputs[idx] {
                        hasher.push_bit(v > F::zero());
                    }
                }
                LayerSpec::MaxPool => {
                    let arg = cache.pool_argmax[idx].as_ref().expect("pool cached argmax");
                    for &a in arg {
                        hasher.push_u64(a as u64);
                    }
                }
                _ => {}
            }
        }
        hasher.finish()
    }

    /// All scalar parameter addresses, in a fixed deterministic order.
    pub fn param_coords(&self) -> Vec<ParamCoord> {
        let mut coords = Vec::with_capacity(self.param_count());
        for (layer, params) in self.layers.iter().enumerate() {
            if let Some(p) = params {
                for index in 0..p.w.len() {
                    coords.push(ParamCoord {
                        layer,
                        bias: false,
                        index,
                    });
                }
                for index in 0..p.b.len() {
                    coords.push(ParamCoord {
                        layer,
                        bias: true,
                        index,
                    });
                }
            }
        }
        coords
    }

    pub fn get_param(&self, c: ParamCoord) -> F {
        let p = self.layers[c.layer].as_ref().expect("coord addresses a parametric layer");
        if c.bias {
            p.b[c.index]
        } else {
            *p.w.as_slice().expect("weights are contiguous").get(c.index).expect("index in range")
        }
    }

    pub fn set_param(&mut self, c: ParamCoord, value: F) {
        let p = self.layers[c.layer].as_mut().expect("coord addresses a parametric layer");
        if c.bias {
            p.b[c.index] = value;
        } else {
            p.w.as_slice_mut().expect("weights are contiguous")[c.index] = value;
        }
    }

    pub fn get_grad(&self, c: ParamCoord) -> F {
        let p = self.layers[c.layer].as_ref().expect("coord addresses a parametric layer");
        if c.bias {
            p.gb[c.index]
        } else {
            p.gw.as_slice().expect("gradients are contiguous")[c.index]
        }
    }

    pub fn set_grad(&mut self, c: ParamCoord, value: F) {
        let p = self.layers[c.layer].as_mut().expect("coord addresses a parametric layer");
        if c.bias {
            p.gb[c.index] = value;
        } else {
            p.gw.as_slice_mut().expect("gradients are contiguous")[c.index] = value;
        }
    }
}

/// Softmax output for a batch: clamped, renormalized probabilities plus the
/// raw pre-clamp softmax needed to route gradients back to logits.
#[derive(Debug, Clone)]
pub struct Softmax<F: Float> {
    probs: Array2<F>,
    pre_clamp: Array2<F>,
}

/// Row-wise softmax with max subtraction, then clamp to `[ε, 1]` and
/// renormalize so rows sum to 1 with every entry bounded away from 0.
pub fn softmax<F: Float>(logits: &ArrayView2<F>) -> Softmax<F> {
    let eps = F::cast(PROB_EPSILON);
    let mut pre_clamp = logits.to_owned();
    for mut row in pre_clamp.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.iter().copied().sum::<F>();
        row.mapv_inplace(|e| e / sum);
    }
    let mut probs = pre_clamp.clone();
    for mut row in probs.rows_mut() {
        row.mapv_inplace(|s| s.max(eps).min(F::one()));
        let sum = row.iter().copied().sum::<F>();
        row.mapv_inplace(|c| c / sum);
    }
    Softmax { probs, pre_clamp }
}

/// Gradient chain from clamped-renormalized probabilities back to logits for
/// one row. The clamp is a constant region: entries that were clamped pass no
/// gradient.
pub(crate) fn softmax_row_backward<F: Float>(
    pre_clamp: &ArrayView1<F>,
    grad_probs: &ArrayView1<F>,
) -> Array1<F> {
    let eps = F::cast(PROB_EPSILON);
    let m = pre_clamp.len();
    let clamped: Array1<F> = pre_clamp.mapv(|s| s.max(eps).min(F::one()));
    let total = clamped.iter().copied().sum::<F>();
    let probs = clamped.mapv(|c| c / total);
    let gp_dot_p = grad_probs
        .iter()
        .zip(probs.iter())
        .map(|(&g, &p)| g * p)
        .sum::<F>();
    let mut gs = Array1::zeros(m);
    for i in 0..m {
        if pre_clamp[i] > eps {
            gs[i] = (grad_probs[i] - gp_dot_p) / total;
        }
    }
    let gs_dot_s = gs
        .iter()
        .zip(pre_clamp.iter())
        .map(|(&g, &s)| g * s)
        .sum::<F>();
    let mut gz = Array1::zeros(m);
    for i in 0..m {
        gz[i] = pre_clamp[i] * (gs[i] - gs_dot_s);
    }
    gz
}

impl<F: Float> Softmax<F> {
    pub fn probs(&self) -> &Array2<F> {
        &self.probs
    }

    pub(crate) fn pre_clamp(&self) -> &Array2<F> {
        &self.pre_clamp
    }

    /// Map a gradient with respect to the clamped probabilities back to a
    /// gradient with respect to the logits.
    pub fn backward(&self, grad_probs: &ArrayView2<F>) -> Array2<F> {
        assert_eq!(grad_probs.dim(), self.probs.dim(), "gradient shape mismatch");
        let mut out = Array2::zeros(self.probs.dim());
        for (i, (pre, gp)) in self
            .pre_clamp
            .rows()
            .into_iter()
            .zip(grad_probs.rows())
            .enumerate()
        {
            out.row_mut(i).assign(&softmax_row_backward(&pre, &gp));
        }
        out
    }

    /// Hash of the clamp mask (which entries sat at ε).
    pub fn branch_token(&self) -> u64 {
        let eps = F::cast(PROB_EPSILON);
        let mut hasher = TokenHasher::new();
        for &s in &self.pre_clamp {
            hasher.push_bit(s > eps);
        }
        hasher.finish()
    }
}

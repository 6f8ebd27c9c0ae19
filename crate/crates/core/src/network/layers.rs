//! Layer primitives over batch-major activation matrices.
//!
//! Activations are `B × features` with each sample's feature vector laid out
//! channel-major `(C, H, W)` row-major. Convolution runs as im2col plus one
//! matrix product in both directions.

use crate::Float;
use ndarray::{Array1, Array2, ArrayView2, Axis};

/// Static geometry of one convolution: stride 1, square kernel, zero padding
/// of `pad` on every side (`pad = 0` is a valid convolution).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        out_channels: usize,
        kernel: usize,
        pad: usize,
    ) -> Self {
        let out_h = in_h + 2 * pad - kernel + 1;
        let out_w = in_w + 2 * pad - kernel + 1;
        ConvGeom {
            in_channels,
            in_h,
            in_w,
            out_channels,
            kernel,
            pad,
            out_h,
            out_w,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_h * self.out_w
    }
}

/// Unfold every receptive field into a row: `(B·OH·OW) × (C·K·K)`.
/// Out-of-bounds taps stay zero.
fn im2col<F: Float>(x: &ArrayView2<F>, g: &ConvGeom) -> Array2<F> {
    let batch = x.nrows();
    let mut col = Array2::zeros((batch * g.out_h * g.out_w, g.patch_len()));
    for bi in 0..batch {
        let row = x.row(bi);
        let xs = row.as_slice().expect("activations are standard layout");
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let r = (bi * g.out_h + oy) * g.out_w + ox;
                let mut col_row = col.row_mut(r);
                let cr = col_row.as_slice_mut().expect("fresh array is contiguous");
                let mut idx = 0;
                for c in 0..g.in_channels {
                    let base = c * g.in_h * g.in_w;
                    for ky in 0..g.kernel {
                        let iy = (oy + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            idx += g.kernel;
                            continue;
                        }
                        let row_base = base + iy as usize * g.in_w;
                        for kx in 0..g.kernel {
                            let ix = (ox + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                cr[idx] = xs[row_base + ix as usize];
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    col
}

/// Fold patch-gradient rows back onto the input grid (adjoint of im2col).
fn col2im<F: Float>(dcol: &ArrayView2<F>, g: &ConvGeom, batch: usize) -> Array2<F> {
    let mut dx = Array2::zeros((batch, g.in_len()));
    for bi in 0..batch {
        let mut dx_row = dx.row_mut(bi);
        let ds = dx_row.as_slice_mut().expect("fresh array is contiguous");
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let r = (bi * g.out_h + oy) * g.out_w + ox;
                let row = dcol.row(r);
                let cr = row.as_slice().expect("gradient columns are contiguous");
                let mut idx = 0;
                for c in 0..g.in_channels {
                    let base = c * g.in_h * g.in_w;
                    for ky in 0..g.kernel {
                        let iy = (oy + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            idx += g.kernel;
                            continue;
                        }
                        let row_base = base + iy as usize * g.in_w;
                        for kx in 0..g.kernel {
                            let ix = (ox + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                ds[row_base + ix as usize] += cr[idx];
                            }
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Weights are `out_channels × (in_channels·K·K)`; output is
/// `B × (out_channels·OH·OW)`.
pub fn conv_forward<F: Float>(
    x: &ArrayView2<F>,
    w: &Array2<F>,
    b: &Array1<F>,
    g: &ConvGeom,
) -> Array2<F> {
    let batch = x.nrows();
    let col = im2col(x, g);
    let mut y_col = col.dot(&w.t());
    y_col += b;
    let y = y_col
        .into_shape_with_order((batch, g.out_h, g.out_w, g.out_channels))
        .expect("row count matches geometry")
        .permuted_axes([0, 3, 1, 2]);
    y.as_standard_layout()
        .into_owned()
        .into_shape_with_order((batch, g.out_len()))
        .expect("contiguous after permute")
}

/// Returns `(grad_input, grad_w, grad_b)`.
pub fn conv_backward<F: Float>(
    x: &ArrayView2<F>,
    w: &Array2<F>,
    grad_out: &ArrayView2<F>,
    g: &ConvGeom,
) -> (Array2<F>, Array2<F>, Array1<F>) {
    let batch = x.nrows();
    let dy = grad_out
        .to_owned()
        .into_shape_with_order((batch, g.out_channels, g.out_h, g.out_w))
        .expect("grad matches output geometry")
        .permuted_axes([0, 2, 3, 1]);
    let dy_col = dy
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((batch * g.out_h * g.out_w, g.out_channels))
        .expect("contiguous after permute");
    let col = im2col(x, g);
    let dw = dy_col.t().dot(&col);
    let db = dy_col.sum_axis(Axis(0));
    let dcol = dy_col.dot(w);
    let dx = col2im(&dcol.view(), g, batch);
    (dx, dw, db)
}

/// 2×2 max pooling, stride 2, floor output dims (a trailing odd row/column is
/// dropped). Returns per-output flat input offsets of the max; ties resolve
/// to the lowest offset.
pub fn maxpool_forward<F: Float>(
    x: &ArrayView2<F>,
    channels: usize,
    in_h: usize,
    in_w: usize,
) -> (Array2<F>, Vec<usize>) {
    let (oh, ow) = (in_h / 2, in_w / 2);
    let batch = x.nrows();
    let out_len = channels * oh * ow;
    let mut out = Array2::zeros((batch, out_len));
    let mut argmax = vec![0usize; batch * out_len];
    for bi in 0..batch {
        let row = x.row(bi);
        let xs = row.as_slice().expect("activations are standard layout");
        let mut out_row = out.row_mut(bi);
        let os = out_row.as_slice_mut().expect("fresh array is contiguous");
        for c in 0..channels {
            let base = c * in_h * in_w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = base + (2 * oy) * in_w + 2 * ox;
                    let mut best = xs[best_idx];
                    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * in_w + 2 * ox + dx;
                        if xs[idx] > best {
                            best = xs[idx];
                            best_idx = idx;
                        }
                    }
                    let o = c * oh * ow + oy * ow + ox;
                    os[o] = best;
                    argmax[bi * out_len + o] = best_idx;
                }
            }
        }
    }
    (out, argmax)
}

pub fn maxpool_backward<F: Float>(
    grad_out: &ArrayView2<F>,
    argmax: &[usize],
    in_len: usize,
) -> Array2<F> {
    let batch = grad_out.nrows();
    let out_len = grad_out.ncols();
    let mut dx = Array2::zeros((batch, in_len));
    for bi in 0..batch {
        for o in 0..out_len {
            dx[(bi, argmax[bi * out_len + o])] += grad_out[(bi, o)];
        }
    }
    dx
}

pub fn relu_forward<F: Float>(x: &ArrayView2<F>) -> Array2<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

/// Derivative at exactly 0 is taken as 0 (mask is `input > 0`).
pub fn relu_backward<F: Float>(x: &ArrayView2<F>, grad_out: &ArrayView2<F>) -> Array2<F> {
    let mut dx = grad_out.to_owned();
    dx.zip_mut_with(x, |g, &v| {
        if v <= F::zero() {
            *g = F::zero();
        }
    });
    dx
}

/// Weights are `inputs × outputs`.
pub fn fc_forward<F: Float>(x: &ArrayView2<F>, w: &Array2<F>, b: &Array1<F>) -> Array2<F> {
    let mut y = x.dot(w);
    y += b;
    y
}

/// Returns `(grad_input, grad_w, grad_b)`.
pub fn fc_backward<F: Float>(
    x: &ArrayView2<F>,
    w: &Array2<F>,
    grad_out: &ArrayView2<F>,
) -> (Array2<F>, Array2<F>, Array1<F>) {
    let dw = x.t().dot(grad_out);
    let db = grad_out.sum_axis(Axis(0));
    let dx = grad_out.dot(&w.t());
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn conv_valid_hand_example() {
        // 3x3 single-channel input, 2x2 kernel [[1,0],[0,1]]:
        // out[y][x] = in[y][x] + in[y+1][x+1].
        let x = Array2::from_shape_vec(
            (1, 9),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let w = Array2::from_shape_vec((1, 4), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Array1::zeros(1);
        let g = ConvGeom::new(1, 3, 3, 1, 2, 0);
        let y = conv_forward(&x.view(), &w, &b, &g);
        assert_eq!(
            y,
            Array2::from_shape_vec((1, 4), vec![6.0, 8.0, 12.0, 14.0]).unwrap()
        );
    }

    #[test]
    fn conv_same_pad_center_kernel_is_identity() {
        let x = Array2::from_shape_vec((2, 16), (0..32).map(f64::from).collect()).unwrap();
        let mut w = Array2::zeros((1, 9));
        w[(0, 4)] = 1.0; // center tap of a 3x3 kernel
        let b = Array1::zeros(1);
        let g = ConvGeom::new(1, 4, 4, 1, 3, 1);
        let y = conv_forward(&x.view(), &w, &b, &g);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_bias_broadcasts_per_channel() {
        let x = Array2::zeros((1, 9));
        let w = Array2::zeros((2, 4));
        let b = array![1.5, -2.0];
        let g = ConvGeom::new(1, 3, 3, 2, 2, 0);
        let y = conv_forward(&x.view(), &w, &b, &g);
        // Channel-major output: first 4 entries channel 0, next 4 channel 1.
        for i in 0..4 {
            assert_eq!(y[(0, i)], 1.5);
            assert_eq!(y[(0, 4 + i)], -2.0);
        }
    }

    #[test]
    fn pool_picks_max_and_lowest_index_on_ties() {
        // 4x4 input: one distinct-max window, one all-equal window.
        let x = Array2::from_shape_vec(
            (1, 16),
            vec![
                1.0, 2.0, 7.0, 7.0, //
                3.0, 4.0, 7.0, 7.0, //
                0.0, 0.0, 5.0, 6.0, //
                0.0, 0.0, 8.0, 6.0,
            ],
        )
        .unwrap();
        let (y, arg) = maxpool_forward(&x.view(), 1, 4, 4);
        assert_eq!(y, Array2::from_shape_vec((1, 4), vec![4.0, 7.0, 0.0, 8.0]).unwrap());
        // All-equal window (value 7) keeps the lowest flat offset, 2.
        assert_eq!(arg[1], 2);
        // All-zero window keeps its top-left offset, 8.
        assert_eq!(arg[2], 8);
        assert_eq!(arg[3], 14);
    }

    #[test]
    fn pool_drops_trailing_odd_row_col() {
        let x = Array2::from_shape_vec((1, 9), (1..=9).map(f64::from).collect()).unwrap();
        let (y, _) = maxpool_forward(&x.view(), 1, 3, 3);
        // Only the single full 2x2 window survives: max(1,2,4,5) = 5.
        assert_eq!(y, Array2::from_shape_vec((1, 1), vec![5.0]).unwrap());
    }

    #[test]
    fn pool_backward_routes_to_argmax_only() {
        let x = Array2::from_shape_vec((1, 4), vec![1.0, 9.0, 3.0, 4.0]).unwrap();
        let (_, arg) = maxpool_forward(&x.view(), 1, 2, 2);
        let gy = Array2::from_shape_vec((1, 1), vec![2.5]).unwrap();
        let dx = maxpool_backward(&gy.view(), &arg, 4);
        assert_eq!(dx, Array2::from_shape_vec((1, 4), vec![0.0, 2.5, 0.0, 0.0]).unwrap());
    }

    #[test]
    fn relu_masks_forward_and_backward() {
        let x = array![[-1.0, 0.0, 2.0]];
        let y = relu_forward(&x.view());
        assert_eq!(y, array![[0.0, 0.0, 2.0]]);
        let g = array![[5.0, 5.0, 5.0]];
        let dx = relu_backward(&x.view(), &g.view());
        // Gradient at exactly 0 is 0.
        assert_eq!(dx, array![[0.0, 0.0, 5.0]]);
    }

    #[test]
    fn fc_identity_passthrough() {
        let x = array![[1.0, -2.0], [0.5, 3.0]];
        let w = array![[1.0, 0.0], [0.0, 1.0]];
        let b = Array1::zeros(2);
        assert_eq!(fc_forward(&x.view(), &w, &b), x);
    }

    #[test]
    fn fc_backward_hand_example() {
        // y = x·w, x = [[1, 2]], w = [[3], [4]], upstream dy = [[10]].
        let x = array![[1.0, 2.0]];
        let w = array![[3.0], [4.0]];
        let dy = array![[10.0]];
        let (dx, dw, db) = fc_backward(&x.view(), &w, &dy.view());
        assert_eq!(dx, array![[30.0, 40.0]]);
        assert_eq!(dw, array![[10.0], [20.0]]);
        assert_eq!(db, array![10.0]);
    }

    #[test]
    fn conv_backward_matches_finite_difference() {
        // Elementwise FD on a tiny conv with a quadratic readout.
        let g = ConvGeom::new(2, 3, 3, 2, 2, 1);
        let x0 = Array2::from_shape_vec(
            (2, 18),
            (0..36).map(|i| f64::from(i) * 0.07 - 1.1).collect(),
        )
        .unwrap();
        let w0 = Array2::from_shape_vec(
            (2, 8),
            (0..16).map(|i| f64::from(i) * 0.11 - 0.8).collect(),
        )
        .unwrap();
        let b0 = array![0.3, -0.2];
        let loss = |x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>| -> f64 {
            let y = conv_forward(&x.view(), w, b, &g);
            0.5 * y.iter().map(|v| v * v).sum::<f64>()
        };
        let y = conv_forward(&x0.view(), &w0, &b0, &g);
        let (dx, dw, db) = conv_backward(&x0.view(), &w0, &y.view(), &g);
        let h = 1e-6;
        let check = |analytic: f64, numeric: f64| {
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(
                ((analytic - numeric) / denom).abs() < 1e-5,
                "analytic {analytic} vs numeric {numeric}"
            );
        };
        for idx in [(0, 0), (0, 7), (1, 11)] {
            let mut xp = x0.clone();
            xp[idx] += h;
            let mut xm = x0.clone();
            xm[idx] -= h;
            check(dx[idx], (loss(&xp, &w0, &b0) - loss(&xm, &w0, &b0)) / (2.0 * h));
        }
        for idx in [(0, 0), (1, 3), (1, 7)] {
            let mut wp = w0.clone();
            wp[idx] += h;
            let mut wm = w0.clone();
            wm[idx] -= h;
            check(dw[idx], (loss(&x0, &wp, &b0) - loss(&x0, &wm, &b0)) / (2.0 * h));
        }
        for i in 0..2 {
            let mut bp = b0.clone();
            bp[i] += h;
            let mut bm = b0.clone();
            bm[i] -= h;
            check(db[i], (loss(&x0, &w0, &bp) - loss(&x0, &w0, &bm)) / (2.0 * h));
        }
    }
}

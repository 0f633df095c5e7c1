//! Convolution, pooling, and resampling graph ops.
//!
//! Feature maps are channel-last `[H, W, C]`. Convolutions run as im2col
//! followed by a matrix product so the inner loops hit the fast matmul path.

use super::{Graph, Var};
use ndarray::{Array2, ArrayD, Ix2, Ix3, IxDyn};

/// Unfold 3x3 (or kxk) patches of `input` into rows of a matrix.
///
/// Output row (oy*out_w + ox) holds the patch centered on the stride-mapped
/// input location, flattened as (ky, kx, c). Out-of-bounds taps read zero.
fn im2col(input: &ArrayD<f64>, k: usize, stride: usize, pad: usize) -> (Array2<f64>, usize, usize) {
    let v = input.view().into_dimensionality::<Ix3>().unwrap();
    let (h, w, c) = (v.shape()[0], v.shape()[1], v.shape()[2]);
    let out_h = (h + 2 * pad - k) / stride + 1;
    let out_w = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::<f64>::zeros((out_h * out_w, k * k * c));
    let src = v.as_slice().expect("im2col: non-contiguous input");
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row = oy * out_w + ox;
            let mut dst = cols.row_mut(row);
            let dst = dst.as_slice_mut().unwrap();
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let s = (iy as usize * w + ix as usize) * c;
                    let d = (ky * k + kx) * c;
                    dst[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
    }
    (cols, out_h, out_w)
}

/// Adjoint of [`im2col`]: scatter patch-row gradients back onto the input.
fn col2im(
    cols_grad: &Array2<f64>,
    in_shape: &[usize],
    k: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<f64> {
    let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
    let out_h = (h + 2 * pad - k) / stride + 1;
    let out_w = (w + 2 * pad - k) / stride + 1;
    let mut grad = ArrayD::<f64>::zeros(IxDyn(in_shape));
    let dst = grad.as_slice_mut().unwrap();
    let cols_grad = cols_grad.as_standard_layout();
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row = cols_grad.row(oy * out_w + ox);
            let row = row.as_slice().unwrap();
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let d = (iy as usize * w + ix as usize) * c;
                    let s = (ky * k + kx) * c;
                    for ch in 0..c {
                        dst[d + ch] += row[s + ch];
                    }
                }
            }
        }
    }
    grad
}

impl Graph {
    /// 2-D convolution. `input` is `[H, W, Cin]`, `weight` is
    /// `[k*k*Cin, Cout]` (patch-major), output `[H', W', Cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, k: usize, stride: usize, pad: usize) -> Var {
        let vi = self.rc_value(input);
        let vw = self.rc_value(weight);
        let in_shape: Vec<usize> = vi.shape().to_vec();
        assert_eq!(in_shape.len(), 3, "conv2d input must be [H,W,C]");
        let cin = in_shape[2];
        let wm = vw.view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(wm.nrows(), k * k * cin, "conv2d weight rows mismatch");
        let cout = wm.ncols();
        let (cols, out_h, out_w) = im2col(&vi, k, stride, pad);
        let out_mat = cols.dot(&wm);
        let out = out_mat
            .into_shape_with_order((out_h, out_w, cout))
            .unwrap()
            .into_dyn();
        self.push(
            out,
            vec![input, weight],
            Box::new(move |g| {
                let gm = g
                    .view()
                    .into_shape_with_order((out_h * out_w, cout))
                    .unwrap();
                let wm = vw.view().into_dimensionality::<Ix2>().unwrap();
                // Recompute the unfolded input; cheaper than caching it for
                // every conv node at these sizes.
                let (cols, _, _) = im2col(&vi, k, stride, pad);
                let d_weight = cols.t().dot(&gm).into_dyn();
                let d_cols = gm.dot(&wm.t());
                let d_input = col2im(&d_cols, &in_shape, k, stride, pad);
                vec![d_input, d_weight]
            }),
        )
    }

    /// Add a per-channel bias `[C]` to a `[H, W, C]` map.
    pub fn bias_add(&mut self, map: Var, bias: Var) -> Var {
        let vm = self.rc_value(map);
        let vb = self.rc_value(bias);
        let c = *vm.shape().last().unwrap();
        assert_eq!(vb.len(), c, "bias_add: channel mismatch");
        let mut out = (*vm).clone();
        {
            let flat = out.as_slice_mut().unwrap();
            let b = vb.as_slice().unwrap();
            for (i, v) in flat.iter_mut().enumerate() {
                *v += b[i % c];
            }
        }
        self.push(
            out,
            vec![map, bias],
            Box::new(move |g| {
                let mut d_bias = vec![0.0; c];
                for (i, &gv) in g.as_slice().unwrap().iter().enumerate() {
                    d_bias[i % c] += gv;
                }
                vec![
                    g.clone(),
                    ArrayD::from_shape_vec(IxDyn(&[c]), d_bias).unwrap(),
                ]
            }),
        )
    }

    /// Nearest-neighbor 2x upsampling of a `[H, W, C]` map.
    pub fn upsample_nearest2(&mut self, input: Var) -> Var {
        let vi = self.rc_value(input);
        let (h, w, c) = {
            let s = vi.shape();
            (s[0], s[1], s[2])
        };
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[2 * h, 2 * w, c]));
        {
            let src = vi.as_slice().unwrap();
            let dst = out.as_slice_mut().unwrap();
            for y in 0..2 * h {
                for x in 0..2 * w {
                    let s = ((y / 2) * w + x / 2) * c;
                    let d = (y * 2 * w + x) * c;
                    dst[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
        self.push(
            out,
            vec![input],
            Box::new(move |g| {
                let mut dg = ArrayD::<f64>::zeros(IxDyn(&[h, w, c]));
                let dst = dg.as_slice_mut().unwrap();
                let src = g.as_slice().unwrap();
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        let d = ((y / 2) * w + x / 2) * c;
                        let s = (y * 2 * w + x) * c;
                        for ch in 0..c {
                            dst[d + ch] += src[s + ch];
                        }
                    }
                }
                vec![dg]
            }),
        )
    }

    /// Zero-insertion 2x upsampling of a `[H, W, C]` map: input pixels land
    /// on even coordinates, the rest is zero. Followed by a convolution this
    /// realizes a stride-2 transposed convolution.
    pub fn upsample_zeros2(&mut self, input: Var) -> Var {
        let vi = self.rc_value(input);
        let (h, w, c) = {
            let s = vi.shape();
            (s[0], s[1], s[2])
        };
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[2 * h, 2 * w, c]));
        {
            let src = vi.as_slice().unwrap();
            let dst = out.as_slice_mut().unwrap();
            for y in 0..h {
                for x in 0..w {
                    let s = (y * w + x) * c;
                    let d = (2 * y * 2 * w + 2 * x) * c;
                    dst[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
        self.push(
            out,
            vec![input],
            Box::new(move |g| {
                let mut dg = ArrayD::<f64>::zeros(IxDyn(&[h, w, c]));
                let dst = dg.as_slice_mut().unwrap();
                let src = g.as_slice().unwrap();
                for y in 0..h {
                    for x in 0..w {
                        let d = (y * w + x) * c;
                        let s = (2 * y * 2 * w + 2 * x) * c;
                        dst[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
                vec![dg]
            }),
        )
    }

    /// Mean-pool non-overlapping `f x f` blocks of a `[H, W]` array.
    /// This is the differentiable resize used to bring masks down to the
    /// feature resolution.
    pub fn avg_pool2(&mut self, input: Var, f: usize) -> Var {
        let vi = self.rc_value(input);
        let s = vi.shape();
        assert_eq!(s.len(), 2, "avg_pool2 expects [H,W]");
        let (h, w) = (s[0], s[1]);
        assert!(h % f == 0 && w % f == 0, "avg_pool2: size not divisible");
        let (oh, ow) = (h / f, w / f);
        let inv = 1.0 / (f * f) as f64;
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[oh, ow]));
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..f {
                    for dx in 0..f {
                        acc += vi[[oy * f + dy, ox * f + dx]];
                    }
                }
                out[[oy, ox]] = acc * inv;
            }
        }
        self.push(
            out,
            vec![input],
            Box::new(move |g| {
                let mut dg = ArrayD::<f64>::zeros(IxDyn(&[h, w]));
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g[[oy, ox]] * inv;
                        for dy in 0..f {
                            for dx in 0..f {
                                dg[[oy * f + dy, ox * f + dx]] += gv;
                            }
                        }
                    }
                }
                vec![dg]
            }),
        )
    }

    /// Mean over the spatial axes of a `[H, W, C]` map, yielding `[C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Var {
        let vi = self.rc_value(input);
        let s = vi.shape();
        assert_eq!(s.len(), 3, "global_avg_pool expects [H,W,C]");
        let (h, w, c) = (s[0], s[1], s[2]);
        let inv = 1.0 / (h * w) as f64;
        let mut out = vec![0.0; c];
        for (i, &v) in vi.as_slice().unwrap().iter().enumerate() {
            out[i % c] += v * inv;
        }
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[c]), out).unwrap(),
            vec![input],
            Box::new(move |g| {
                let gs = g.as_slice().unwrap();
                let mut dg = ArrayD::<f64>::zeros(IxDyn(&[h, w, c]));
                for (i, v) in dg.as_slice_mut().unwrap().iter_mut().enumerate() {
                    *v = gs[i % c] * inv;
                }
                vec![dg]
            }),
        )
    }
}

//! Coordinate-based graph ops: bilinear sampling, pairwise distances, and
//! the thin-plate radial kernel.

use super::{Graph, Var};
use ndarray::{ArrayD, IxDyn};

/// Plain bilinear lookup with zero padding. `coords` are normalized
/// `[-1, 1]` (x, y) pairs; `(-1,-1)` is the center of the top-left pixel and
/// `(1,1)` the center of the bottom-right one. Shared by the graph op and the
/// eager warp in `geometry`.
pub fn bilinear_sample(field: &ArrayD<f64>, coords: &[(f64, f64)]) -> Vec<f64> {
    let s = field.shape();
    let (h, w, c) = if s.len() == 3 {
        (s[0], s[1], s[2])
    } else {
        (s[0], s[1], 1)
    };
    let src = field.as_slice().expect("bilinear_sample: non-contiguous");
    let mut out = vec![0.0; coords.len() * c];
    for (n, &(xn, yn)) in coords.iter().enumerate() {
        let xp = (xn + 1.0) * 0.5 * (w - 1) as f64;
        let yp = (yn + 1.0) * 0.5 * (h - 1) as f64;
        let x0 = xp.floor() as isize;
        let y0 = yp.floor() as isize;
        let wx = xp - x0 as f64;
        let wy = yp - y0 as f64;
        for (dy, dx, wgt) in [
            (0, 0, (1.0 - wy) * (1.0 - wx)),
            (0, 1, (1.0 - wy) * wx),
            (1, 0, wy * (1.0 - wx)),
            (1, 1, wy * wx),
        ] {
            let yy = y0 + dy;
            let xx = x0 + dx;
            if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                continue;
            }
            let base = (yy as usize * w + xx as usize) * c;
            for ch in 0..c {
                out[n * c + ch] += wgt * src[base + ch];
            }
        }
    }
    out
}

impl Graph {
    /// Differentiable bilinear sampling with zero padding.
    ///
    /// `field` is `[H, W]` or `[H, W, C]`; `coords` is `[N, 2]` normalized
    /// (x, y). Output is `[N]` or `[N, C]`. Gradients flow to both the field
    /// values and the sample coordinates.
    pub fn grid_sample(&mut self, field: Var, coords: Var) -> Var {
        let vf = self.rc_value(field);
        let vc = self.rc_value(coords);
        let fs = vf.shape().to_vec();
        assert!(fs.len() == 2 || fs.len() == 3, "grid_sample: field rank");
        assert_eq!(vc.shape()[1], 2, "grid_sample: coords must be [N,2]");
        let n = vc.shape()[0];
        let (h, w, c) = if fs.len() == 3 {
            (fs[0], fs[1], fs[2])
        } else {
            (fs[0], fs[1], 1)
        };
        let pts: Vec<(f64, f64)> = (0..n).map(|i| (vc[[i, 0]], vc[[i, 1]])).collect();
        let flat = bilinear_sample(&vf, &pts);
        let out_shape: Vec<usize> = if fs.len() == 3 { vec![n, c] } else { vec![n] };
        let out = ArrayD::from_shape_vec(IxDyn(&out_shape), flat).unwrap();
        self.push(
            out,
            vec![field, coords],
            Box::new(move |g| {
                let gsl = g.as_slice().unwrap();
                let src = vf.as_slice().unwrap();
                let mut d_field = vec![0.0; h * w * c];
                let mut d_coords = ArrayD::<f64>::zeros(IxDyn(&[n, 2]));
                let sx = 0.5 * (w - 1) as f64;
                let sy = 0.5 * (h - 1) as f64;
                for i in 0..n {
                    let xp = (vc[[i, 0]] + 1.0) * sx;
                    let yp = (vc[[i, 1]] + 1.0) * sy;
                    let x0 = xp.floor() as isize;
                    let y0 = yp.floor() as isize;
                    let wx = xp - x0 as f64;
                    let wy = yp - y0 as f64;
                    // Corner values with zero padding, for the coordinate
                    // derivative of the bilinear surface.
                    let at = |yy: isize, xx: isize, ch: usize| -> f64 {
                        if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                            0.0
                        } else {
                            src[(yy as usize * w + xx as usize) * c + ch]
                        }
                    };
                    for ch in 0..c {
                        let gv = gsl[i * c + ch];
                        if gv == 0.0 {
                            continue;
                        }
                        let f00 = at(y0, x0, ch);
                        let f01 = at(y0, x0 + 1, ch);
                        let f10 = at(y0 + 1, x0, ch);
                        let f11 = at(y0 + 1, x0 + 1, ch);
                        // Scatter onto in-bounds corners.
                        for (dy, dx, wgt) in [
                            (0, 0, (1.0 - wy) * (1.0 - wx)),
                            (0, 1, (1.0 - wy) * wx),
                            (1, 0, wy * (1.0 - wx)),
                            (1, 1, wy * wx),
                        ] {
                            let yy = y0 + dy;
                            let xx = x0 + dx;
                            if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                                d_field[(yy as usize * w + xx as usize) * c + ch] += gv * wgt;
                            }
                        }
                        let dval_dxp = (1.0 - wy) * (f01 - f00) + wy * (f11 - f10);
                        let dval_dyp = (1.0 - wx) * (f10 - f00) + wx * (f11 - f01);
                        d_coords[[i, 0]] += gv * dval_dxp * sx;
                        d_coords[[i, 1]] += gv * dval_dyp * sy;
                    }
                }
                let fshape: Vec<usize> = if c == 1 && fs.len() == 2 {
                    vec![h, w]
                } else {
                    vec![h, w, c]
                };
                vec![
                    ArrayD::from_shape_vec(IxDyn(&fshape), d_field).unwrap(),
                    d_coords,
                ]
            }),
        )
    }

    /// Anisotropically scaled pairwise squared distances between `points`
    /// (`[N, 2]`, differentiable) and fixed `targets` (`[M, 2]`):
    /// `out[i,j] = (sx*(xi-xj))^2 + (sy*(yi-yj))^2`.
    pub fn pairwise_sqdist(&mut self, points: Var, targets: Vec<(f64, f64)>, scale: (f64, f64)) -> Var {
        let vp = self.rc_value(points);
        assert_eq!(vp.shape()[1], 2);
        let n = vp.shape()[0];
        let m = targets.len();
        let (sx, sy) = scale;
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, m]));
        for i in 0..n {
            for (j, &(tx, ty)) in targets.iter().enumerate() {
                let dx = sx * (vp[[i, 0]] - tx);
                let dy = sy * (vp[[i, 1]] - ty);
                out[[i, j]] = dx * dx + dy * dy;
            }
        }
        self.push(
            out,
            vec![points],
            Box::new(move |g| {
                let mut dp = ArrayD::<f64>::zeros(IxDyn(&[n, 2]));
                for i in 0..n {
                    for (j, &(tx, ty)) in targets.iter().enumerate() {
                        let gv = g[[i, j]];
                        if gv == 0.0 {
                            continue;
                        }
                        dp[[i, 0]] += gv * 2.0 * sx * sx * (vp[[i, 0]] - tx);
                        dp[[i, 1]] += gv * 2.0 * sy * sy * (vp[[i, 1]] - ty);
                    }
                }
                vec![dp]
            }),
        )
    }

    /// Thin-plate radial basis `U(r) = r^2 * ln(r^2)` between `points`
    /// (`[N, 2]`, differentiable) and the fixed control lattice (`[K, 2]`).
    pub fn tps_kernel(&mut self, points: Var, centers: Vec<(f64, f64)>) -> Var {
        let vp = self.rc_value(points);
        assert_eq!(vp.shape()[1], 2);
        let n = vp.shape()[0];
        let k = centers.len();
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, k]));
        for i in 0..n {
            for (j, &(cx, cy)) in centers.iter().enumerate() {
                let r2 = (vp[[i, 0]] - cx).powi(2) + (vp[[i, 1]] - cy).powi(2);
                out[[i, j]] = tps_u(r2);
            }
        }
        self.push(
            out,
            vec![points],
            Box::new(move |g| {
                let mut dp = ArrayD::<f64>::zeros(IxDyn(&[n, 2]));
                for i in 0..n {
                    for (j, &(cx, cy)) in centers.iter().enumerate() {
                        let gv = g[[i, j]];
                        if gv == 0.0 {
                            continue;
                        }
                        let dx = vp[[i, 0]] - cx;
                        let dy = vp[[i, 1]] - cy;
                        let r2 = dx * dx + dy * dy;
                        // dU/dx = 2x (ln r^2 + 1); tends to 0 as r -> 0.
                        if r2 > 1e-300 {
                            let f = 2.0 * (r2.ln() + 1.0);
                            dp[[i, 0]] += gv * f * dx;
                            dp[[i, 1]] += gv * f * dy;
                        }
                    }
                }
                vec![dp]
            }),
        )
    }
}

/// `U(r) = r^2 ln(r^2)` expressed in terms of the squared radius, with the
/// removable singularity at zero patched.
pub fn tps_u(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

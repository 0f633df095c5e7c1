//! Dense normalized inner-product correlation between two feature maps.

use crate::autodiff::{Graph, Var};
use crate::{Error, Result};
use ndarray::{ArrayD, IxDyn};

/// Stabilizer added to the norm product; correlation against a zero vector
/// comes out near zero instead of undefined.
pub const CORRELATION_EPS: f64 = 1e-8;

/// A feature map `[h, w, d]`.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub values: ArrayD<f64>,
}

impl FeatureMap {
    pub fn new(values: ArrayD<f64>) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "feature map must be [h,w,d], got {s:?}"
            )));
        }
        if s[0] < 2 || s[1] < 2 {
            return Err(Error::ShapeMismatch(format!(
                "feature map spatial size must be >= 2, got {}x{}",
                s[0], s[1]
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteParams);
        }
        Ok(Self { values })
    }

    pub fn h(&self) -> usize {
        self.values.shape()[0]
    }
    pub fn w(&self) -> usize {
        self.values.shape()[1]
    }
    pub fn d(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Shape metadata of a correlation volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorrelationShape {
    pub h_a: usize,
    pub w_a: usize,
    pub h_b: usize,
    pub w_b: usize,
}

/// Correlation scores stored as `[h_A, w_A, h_B*w_B]`, the flattened axis
/// running row-major over B positions. The 4-D view `(p, q)` and this 3-D
/// view share the same storage order.
#[derive(Clone, Debug)]
pub struct CorrelationMap {
    pub values: ArrayD<f64>,
    pub shape: CorrelationShape,
}

/// Normalized inner product between every pair of feature positions:
/// `S(p, q) = <f_A(p), f_B(q)> / (|f_A(p)| * |f_B(q)| + eps)`.
pub fn correlate(f_a: &FeatureMap, f_b: &FeatureMap) -> Result<CorrelationMap> {
    if f_a.d() != f_b.d() {
        return Err(Error::ChannelMismatch(f_a.d(), f_b.d()));
    }
    let shape = CorrelationShape {
        h_a: f_a.h(),
        w_a: f_a.w(),
        h_b: f_b.h(),
        w_b: f_b.w(),
    };
    let values = correlate_values(&f_a.values, &f_b.values);
    Ok(CorrelationMap { values, shape })
}

fn correlate_values(a: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    let (ha, wa, d) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (hb, wb) = (b.shape()[0], b.shape()[1]);
    let n = ha * wa;
    let m = hb * wb;
    let av = a.as_slice().unwrap();
    let bv = b.as_slice().unwrap();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let na: Vec<f64> = (0..n).map(|i| norm(&av[i * d..(i + 1) * d])).collect();
    let nb: Vec<f64> = (0..m).map(|j| norm(&bv[j * d..(j + 1) * d])).collect();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let ai = &av[i * d..(i + 1) * d];
        for j in 0..m {
            let bj = &bv[j * d..(j + 1) * d];
            let dot: f64 = ai.iter().zip(bj).map(|(x, y)| x * y).sum();
            out[i * m + j] = dot / (na[i] * nb[j] + CORRELATION_EPS);
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[ha, wa, m]), out).unwrap()
}

impl Graph {
    /// Differentiable correlation of two `[h, w, d]` feature-map nodes,
    /// yielding `[h_A, w_A, h_B*w_B]`.
    pub fn correlate(&mut self, f_a: Var, f_b: Var) -> Var {
        let va = self.rc_value(f_a);
        let vb = self.rc_value(f_b);
        assert_eq!(
            va.shape()[2],
            vb.shape()[2],
            "correlate: channel mismatch"
        );
        let out = correlate_values(&va, &vb);
        let (ha, wa, d) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let (hb, wb) = (vb.shape()[0], vb.shape()[1]);
        self.push(
            out,
            vec![f_a, f_b],
            Box::new(move |g| {
                let n = ha * wa;
                let m = hb * wb;
                let av = va.as_slice().unwrap();
                let bv = vb.as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
                let na: Vec<f64> = (0..n).map(|i| norm(&av[i * d..(i + 1) * d])).collect();
                let nb: Vec<f64> = (0..m).map(|j| norm(&bv[j * d..(j + 1) * d])).collect();
                let mut da = vec![0.0; n * d];
                let mut db = vec![0.0; m * d];
                for i in 0..n {
                    let ai = &av[i * d..(i + 1) * d];
                    for j in 0..m {
                        let gv = gs[i * m + j];
                        if gv == 0.0 {
                            continue;
                        }
                        let bj = &bv[j * d..(j + 1) * d];
                        let dot: f64 = ai.iter().zip(bj).map(|(x, y)| x * y).sum();
                        let den = na[i] * nb[j] + CORRELATION_EPS;
                        let s = dot / den;
                        // dS/da = b/den - S * nb * a / (na * den); the second
                        // term vanishes in the zero-vector limit.
                        let ca = if na[i] > 1e-12 {
                            s * nb[j] / (na[i] * den)
                        } else {
                            0.0
                        };
                        let cb = if nb[j] > 1e-12 {
                            s * na[i] / (nb[j] * den)
                        } else {
                            0.0
                        };
                        for ch in 0..d {
                            da[i * d + ch] += gv * (bj[ch] / den - ca * ai[ch]);
                            db[j * d + ch] += gv * (ai[ch] / den - cb * bj[ch]);
                        }
                    }
                }
                vec![
                    ArrayD::from_shape_vec(IxDyn(&[ha, wa, d]), da).unwrap(),
                    ArrayD::from_shape_vec(IxDyn(&[hb, wb, d]), db).unwrap(),
                ]
            }),
        )
    }
}

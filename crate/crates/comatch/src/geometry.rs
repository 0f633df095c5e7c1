//! Affine and thin-plate-spline transformations over normalized coordinates.
//!
//! All transforms act on `[-1, 1]^2`, decoupled from pixel resolution:
//! `(-1,-1)` is the center of the top-left pixel, `(1,1)` the bottom-right.
//! Every transform exists in two forms with identical math: an eager form
//! over [`TransformParams`] for data generation and evaluation, and a graph
//! form over [`TransformVars`] for differentiable training.
//!
//! Warping a field follows backward sampling: to carry a field attached to
//! image A into image B's frame, each output pixel `q` reads the field at
//! `T_BA(q)` — the reverse-direction transform of the pair is the sampling
//! map. Coordinate-space operations (projection errors, cycle residuals)
//! use forward application.

use crate::autodiff::{bilinear_sample, tps_u, Graph, Var};
use crate::{Error, Result};
use ndarray::{Array2, ArrayD, IxDyn};
use std::collections::HashMap;
use std::str::FromStr;
use std::sync::{Mutex, OnceLock};

/// Default control lattice side for TPS transforms (K = 3x3 = 9 points).
pub const DEFAULT_TPS_K: usize = 3;
/// Ridge term added to the TPS system diagonal.
pub const TPS_REGULARIZATION: f64 = 1e-6;

/// A point in normalized `[-1, 1]^2` coordinates. Transform outputs may
/// leave the range; such points are flagged out of bounds when sampled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Self) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// A regular, row-major grid of points spanning `[-1, 1]^2` inclusive.
#[derive(Clone, Debug)]
pub struct CoordGrid {
    pub points: Vec<Point2>,
    pub rows: usize,
    pub cols: usize,
}

impl CoordGrid {
    /// Regular grid with the given dimensions, endpoints included.
    pub fn regular(rows: usize, cols: usize) -> Self {
        assert!(rows >= 2 && cols >= 2, "CoordGrid::regular needs >= 2 per axis");
        let mut points = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let y = -1.0 + 2.0 * r as f64 / (rows - 1) as f64;
            for c in 0..cols {
                let x = -1.0 + 2.0 * c as f64 / (cols - 1) as f64;
                points.push(Point2::new(x, y));
            }
        }
        Self { points, rows, cols }
    }

    /// Points as an `[N, 2]` array of (x, y) rows.
    pub fn to_array(&self) -> ArrayD<f64> {
        let mut a = ArrayD::zeros(IxDyn(&[self.points.len(), 2]));
        for (i, p) in self.points.iter().enumerate() {
            a[[i, 0]] = p.x;
            a[[i, 1]] = p.y;
        }
        a
    }

    /// Distance between adjacent grid positions, in normalized units,
    /// per axis (x, y). This is the cell size used to express thresholds
    /// in feature-grid cell units.
    pub fn cell_size(&self) -> (f64, f64) {
        (2.0 / (self.cols - 1) as f64, 2.0 / (self.rows - 1) as f64)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// The three supported transform families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformKind {
    Affine,
    Tps,
    Cascade,
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "affine" => Ok(Self::Affine),
            "tps" => Ok(Self::Tps),
            "cascade" => Ok(Self::Cascade),
            other => Err(Error::UnknownTransformKind(other.to_string())),
        }
    }
}

/// Coefficients of a 2x3 affine map, row-major:
/// `x' = c0*x + c1*y + c2`, `y' = c3*x + c4*y + c5`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineCoeffs(pub [f64; 6]);

impl AffineCoeffs {
    pub fn identity() -> Self {
        Self([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self([1.0, 0.0, tx, 0.0, 1.0, ty])
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        let [a, b, c, d, e, f] = self.0;
        Point2::new(a * p.x + b * p.y + c, d * p.x + e * p.y + f)
    }

    pub fn determinant(&self) -> f64 {
        let [a, b, _, d, e, _] = self.0;
        a * e - b * d
    }

    /// Analytic inverse. Fails on a singular linear part.
    pub fn inverse(&self) -> Option<Self> {
        let [a, b, c, d, e, f] = self.0;
        let det = a * e - b * d;
        if det.abs() < 1e-12 {
            return None;
        }
        let (ia, ib, id, ie) = (e / det, -b / det, -d / det, a / det);
        Some(Self([ia, ib, -(ia * c + ib * f), id, ie, -(id * c + ie * f)]))
    }

    /// Composition `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let [a1, b1, c1, d1, e1, f1] = self.0;
        let [a2, b2, c2, d2, e2, f2] = other.0;
        Self([
            a1 * a2 + b1 * d2,
            a1 * b2 + b1 * e2,
            a1 * c2 + b1 * f2 + c1,
            d1 * a2 + e1 * d2,
            d1 * b2 + e1 * e2,
            d1 * c2 + e1 * f2 + f1,
        ])
    }
}

/// Displacements of the K = k*k TPS control points, stored row-major as
/// (dx, dy) per control point (length 2K). All-zero offsets are the
/// identity.
#[derive(Clone, Debug, PartialEq)]
pub struct TpsOffsets {
    pub offsets: Vec<f64>,
    pub k: usize,
}

impl TpsOffsets {
    pub fn identity(k: usize) -> Self {
        Self {
            offsets: vec![0.0; 2 * k * k],
            k,
        }
    }
}

/// Parameters of one transform. A cascade applies its affine stage first,
/// then the TPS stage: `T(p) = tps(affine(p))`.
#[derive(Clone, Debug, PartialEq)]
pub enum TransformParams {
    Affine(AffineCoeffs),
    Tps(TpsOffsets),
    Cascade(AffineCoeffs, TpsOffsets),
}

impl TransformParams {
    pub fn kind(&self) -> TransformKind {
        match self {
            Self::Affine(_) => TransformKind::Affine,
            Self::Tps(_) => TransformKind::Tps,
            Self::Cascade(..) => TransformKind::Cascade,
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Self::Affine(a) => a.0.iter().all(|v| v.is_finite()),
            Self::Tps(t) => t.offsets.iter().all(|v| v.is_finite()),
            Self::Cascade(a, t) => {
                a.0.iter().all(|v| v.is_finite()) && t.offsets.iter().all(|v| v.is_finite())
            }
        }
    }
}

/// The identity transform of the requested kind.
pub fn identity_params(kind: TransformKind) -> TransformParams {
    match kind {
        TransformKind::Affine => TransformParams::Affine(AffineCoeffs::identity()),
        TransformKind::Tps => TransformParams::Tps(TpsOffsets::identity(DEFAULT_TPS_K)),
        TransformKind::Cascade => TransformParams::Cascade(
            AffineCoeffs::identity(),
            TpsOffsets::identity(DEFAULT_TPS_K),
        ),
    }
}

/// Precomputed TPS interpolation system for a k x k control lattice over
/// `[-1, 1]^2`. The lattice is fixed, so the bordered system matrix and its
/// inverse depend only on `k` and are computed once.
#[derive(Clone, Debug)]
pub struct TpsSystem {
    pub k: usize,
    pub lattice: Vec<(f64, f64)>,
    /// Inverse of the (K+3) x (K+3) bordered kernel matrix.
    pub l_inv: Array2<f64>,
}

impl TpsSystem {
    pub fn new(k: usize) -> Self {
        assert!(k >= 2, "TPS lattice needs k >= 2");
        let grid = CoordGrid::regular(k, k);
        let lattice: Vec<(f64, f64)> = grid.points.iter().map(|p| (p.x, p.y)).collect();
        let n = lattice.len();
        let m = n + 3;
        let mut l = nalgebra::DMatrix::<f64>::zeros(m, m);
        for i in 0..n {
            for j in 0..n {
                let r2 = (lattice[i].0 - lattice[j].0).powi(2)
                    + (lattice[i].1 - lattice[j].1).powi(2);
                l[(i, j)] = tps_u(r2);
            }
            l[(i, i)] += TPS_REGULARIZATION;
            l[(i, n)] = 1.0;
            l[(i, n + 1)] = lattice[i].0;
            l[(i, n + 2)] = lattice[i].1;
            l[(n, i)] = 1.0;
            l[(n + 1, i)] = lattice[i].0;
            l[(n + 2, i)] = lattice[i].1;
        }
        let inv = l
            .try_inverse()
            .expect("regularized TPS system is invertible");
        let mut l_inv = Array2::zeros((m, m));
        for i in 0..m {
            for j in 0..m {
                l_inv[[i, j]] = inv[(i, j)];
            }
        }
        Self { k, lattice, l_inv }
    }

    /// Shared instance per lattice size.
    pub fn cached(k: usize) -> std::sync::Arc<TpsSystem> {
        static CACHE: OnceLock<Mutex<HashMap<usize, std::sync::Arc<TpsSystem>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut map = cache.lock().unwrap();
        map.entry(k)
            .or_insert_with(|| std::sync::Arc::new(TpsSystem::new(k)))
            .clone()
    }

    /// Interpolation weights `[K+3, 2]` mapping the lattice onto
    /// `lattice + offsets`: the first K rows are the radial weights, the
    /// last three the affine part.
    fn weights(&self, offsets: &TpsOffsets) -> Array2<f64> {
        let n = self.lattice.len();
        assert_eq!(offsets.offsets.len(), 2 * n, "TPS offsets length");
        let mut rhs = Array2::zeros((n + 3, 2));
        for i in 0..n {
            rhs[[i, 0]] = self.lattice[i].0 + offsets.offsets[2 * i];
            rhs[[i, 1]] = self.lattice[i].1 + offsets.offsets[2 * i + 1];
        }
        self.l_inv.dot(&rhs)
    }

    /// Evaluate the interpolant at one point.
    fn eval(&self, w: &Array2<f64>, p: Point2) -> Point2 {
        let n = self.lattice.len();
        let mut out = [0.0; 2];
        for dim in 0..2 {
            let mut acc =
                w[[n, dim]] + w[[n + 1, dim]] * p.x + w[[n + 2, dim]] * p.y;
            for (i, &(cx, cy)) in self.lattice.iter().enumerate() {
                let r2 = (p.x - cx).powi(2) + (p.y - cy).powi(2);
                acc += w[[i, dim]] * tps_u(r2);
            }
            out[dim] = acc;
        }
        Point2::new(out[0], out[1])
    }
}

/// Apply a transform to a single point (eager form).
pub fn apply_point(params: &TransformParams, p: Point2) -> Point2 {
    match params {
        TransformParams::Affine(a) => a.apply(p),
        TransformParams::Tps(t) => {
            let sys = TpsSystem::cached(t.k);
            let w = sys.weights(t);
            sys.eval(&w, p)
        }
        TransformParams::Cascade(a, t) => {
            let sys = TpsSystem::cached(t.k);
            let w = sys.weights(t);
            sys.eval(&w, a.apply(p))
        }
    }
}

/// Apply a transform to every point of a grid. Grid metadata is preserved.
pub fn apply_transform(params: &TransformParams, grid: &CoordGrid) -> Result<CoordGrid> {
    if !params.is_finite() {
        return Err(Error::NonFiniteParams);
    }
    // The interpolation weights are shared across points.
    let mapped: Vec<Point2> = match params {
        TransformParams::Affine(a) => grid.points.iter().map(|&p| a.apply(p)).collect(),
        TransformParams::Tps(t) => {
            let sys = TpsSystem::cached(t.k);
            let w = sys.weights(t);
            grid.points.iter().map(|&p| sys.eval(&w, p)).collect()
        }
        TransformParams::Cascade(a, t) => {
            let sys = TpsSystem::cached(t.k);
            let w = sys.weights(t);
            grid.points.iter().map(|&p| sys.eval(&w, a.apply(p))).collect()
        }
    };
    Ok(CoordGrid {
        points: mapped,
        rows: grid.rows,
        cols: grid.cols,
    })
}

/// Euclidean distance between `apply(params, p)` and `q`.
pub fn projection_error(params: &TransformParams, p: Point2, q: Point2) -> f64 {
    apply_point(params, p).dist(q)
}

/// Jacobian `[[dx'/dx, dx'/dy], [dy'/dx, dy'/dy]]` of a transform at `p`.
pub fn jacobian(params: &TransformParams, p: Point2) -> [[f64; 2]; 2] {
    match params {
        TransformParams::Affine(a) => [[a.0[0], a.0[1]], [a.0[3], a.0[4]]],
        TransformParams::Tps(t) => {
            let sys = TpsSystem::cached(t.k);
            let w = sys.weights(t);
            tps_jacobian(&sys, &w, p)
        }
        TransformParams::Cascade(a, t) => {
            let sys = TpsSystem::cached(t.k);
            let w = sys.weights(t);
            let mid = a.apply(p);
            let jt = tps_jacobian(&sys, &w, mid);
            let ja = [[a.0[0], a.0[1]], [a.0[3], a.0[4]]];
            [
                [
                    jt[0][0] * ja[0][0] + jt[0][1] * ja[1][0],
                    jt[0][0] * ja[0][1] + jt[0][1] * ja[1][1],
                ],
                [
                    jt[1][0] * ja[0][0] + jt[1][1] * ja[1][0],
                    jt[1][0] * ja[0][1] + jt[1][1] * ja[1][1],
                ],
            ]
        }
    }
}

fn tps_jacobian(sys: &TpsSystem, w: &Array2<f64>, p: Point2) -> [[f64; 2]; 2] {
    let n = sys.lattice.len();
    let mut j = [[0.0; 2]; 2];
    for dim in 0..2 {
        j[dim][0] = w[[n + 1, dim]];
        j[dim][1] = w[[n + 2, dim]];
        for (i, &(cx, cy)) in sys.lattice.iter().enumerate() {
            let dx = p.x - cx;
            let dy = p.y - cy;
            let r2 = dx * dx + dy * dy;
            if r2 > 1e-300 {
                // dU/dx = 2x (ln r^2 + 1)
                let f = 2.0 * (r2.ln() + 1.0) * w[[i, dim]];
                j[dim][0] += f * dx;
                j[dim][1] += f * dy;
            }
        }
    }
    j
}

/// Numerically invert a transform at one target point with Newton's method.
/// Returns `None` when the iteration fails to reach `tol`, which happens for
/// folds (non-injective TPS) or singular affine parts.
pub fn invert_point(params: &TransformParams, q: Point2, tol: f64) -> Option<Point2> {
    // An affine inverse seeds the iteration; pure TPS starts at the target.
    let mut p = match params {
        TransformParams::Affine(a) => return a.inverse().map(|inv| inv.apply(q)),
        TransformParams::Cascade(a, _) => a.inverse()?.apply(q),
        TransformParams::Tps(_) => q,
    };
    for _ in 0..25 {
        let fwd = apply_point(params, p);
        let rx = fwd.x - q.x;
        let ry = fwd.y - q.y;
        if rx.abs().max(ry.abs()) < tol {
            return Some(p);
        }
        let j = jacobian(params, p);
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det.abs() < 1e-12 {
            return None;
        }
        p = Point2::new(
            p.x - (j[1][1] * rx - j[0][1] * ry) / det,
            p.y - (-j[1][0] * rx + j[0][0] * ry) / det,
        );
    }
    None
}

/// Warp a field by backward bilinear sampling: each output pixel reads the
/// field at `sampling(pixel)`. To move a field from A's frame to B's, pass
/// the reverse transform `T_BA`. Out-of-bounds samples read zero.
pub fn warp(field: &ArrayD<f64>, sampling: &TransformParams) -> Result<ArrayD<f64>> {
    if !sampling.is_finite() {
        return Err(Error::NonFiniteParams);
    }
    if !field.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteParams);
    }
    let s = field.shape();
    let (h, w) = (s[0], s[1]);
    let grid = CoordGrid::regular(h, w);
    let mapped = apply_transform(sampling, &grid)?;
    let coords: Vec<(f64, f64)> = mapped.points.iter().map(|p| (p.x, p.y)).collect();
    let flat = bilinear_sample(field, &coords);
    Ok(ArrayD::from_shape_vec(IxDyn(s), flat).unwrap())
}

/// Transform parameters living on a tape.
#[derive(Clone, Copy, Debug)]
pub enum TransformVars {
    /// `[6]` affine coefficients.
    Affine(Var),
    /// `[2K]` control-point displacements, (dx, dy) row-major.
    Tps(Var),
    /// Affine stage followed by a TPS stage.
    Cascade { affine: Var, tps: Var },
}

impl TransformVars {
    /// Snapshot current values into eager parameters.
    pub fn to_params(&self, g: &Graph, k: usize) -> TransformParams {
        match *self {
            TransformVars::Affine(v) => {
                let a = g.value(v);
                let mut c = [0.0; 6];
                for i in 0..6 {
                    c[i] = a[[i]];
                }
                TransformParams::Affine(AffineCoeffs(c))
            }
            TransformVars::Tps(v) => TransformParams::Tps(TpsOffsets {
                offsets: g.value(v).iter().copied().collect(),
                k,
            }),
            TransformVars::Cascade { affine, tps } => {
                let a = g.value(affine);
                let mut c = [0.0; 6];
                for i in 0..6 {
                    c[i] = a[[i]];
                }
                TransformParams::Cascade(
                    AffineCoeffs(c),
                    TpsOffsets {
                        offsets: g.value(tps).iter().copied().collect(),
                        k,
                    },
                )
            }
        }
    }

    /// Lift eager parameters onto a tape as leaves.
    pub fn from_params(g: &mut Graph, params: &TransformParams) -> Self {
        match params {
            TransformParams::Affine(a) => {
                TransformVars::Affine(g.leaf(ArrayD::from_shape_vec(IxDyn(&[6]), a.0.to_vec()).unwrap()))
            }
            TransformParams::Tps(t) => TransformVars::Tps(
                g.leaf(ArrayD::from_shape_vec(IxDyn(&[t.offsets.len()]), t.offsets.clone()).unwrap()),
            ),
            TransformParams::Cascade(a, t) => TransformVars::Cascade {
                affine: g.leaf(ArrayD::from_shape_vec(IxDyn(&[6]), a.0.to_vec()).unwrap()),
                tps: g.leaf(
                    ArrayD::from_shape_vec(IxDyn(&[t.offsets.len()]), t.offsets.clone()).unwrap(),
                ),
            },
        }
    }
}

/// Apply an affine `[6]` node to points `[N, 2]` on the tape.
fn apply_affine_var(g: &mut Graph, coeffs: Var, points: Var) -> Var {
    let n = g.value(points).shape()[0];
    let ones = g.leaf(ArrayD::ones(IxDyn(&[n, 1])));
    let homog = g.concat(1, &[points, ones]); // [N, 3] rows (x, y, 1)
    let m23 = g.reshape(coeffs, &[2, 3]);
    let m32 = g.transpose2(m23);
    g.matmul(homog, m32)
}

/// Apply a TPS offsets `[2K]` node to points `[N, 2]` on the tape.
fn apply_tps_var(g: &mut Graph, sys: &TpsSystem, offsets: Var, points: Var) -> Var {
    let kpts = sys.lattice.len();
    let n = g.value(points).shape()[0];
    // Basis matrix B = [U(p, c_1..K) | 1 | x | y], shape [N, K+3].
    let kernel = g.tps_kernel(points, sys.lattice.clone());
    let ones = g.leaf(ArrayD::ones(IxDyn(&[n, 1])));
    let basis = g.concat(1, &[kernel, ones, points]);
    // Targets = lattice + offsets, bordered with the three zero rows.
    let lattice = g.leaf(
        ArrayD::from_shape_vec(
            IxDyn(&[kpts, 2]),
            sys.lattice.iter().flat_map(|&(x, y)| [x, y]).collect(),
        )
        .unwrap(),
    );
    let offs = g.reshape(offsets, &[kpts, 2]);
    let targets = g.add(lattice, offs);
    let zeros = g.leaf(ArrayD::zeros(IxDyn(&[3, 2])));
    let rhs = g.concat(0, &[targets, zeros]);
    let l_inv = g.leaf(sys.l_inv.clone().into_dyn());
    let weights = g.matmul(l_inv, rhs); // [K+3, 2]
    g.matmul(basis, weights)
}

/// Apply a transform node to points `[N, 2]`, differentiable with respect
/// to both the parameters and the points.
pub fn apply_var(g: &mut Graph, t: &TransformVars, sys: &TpsSystem, points: Var) -> Var {
    match *t {
        TransformVars::Affine(coeffs) => apply_affine_var(g, coeffs, points),
        TransformVars::Tps(offsets) => apply_tps_var(g, sys, offsets, points),
        TransformVars::Cascade { affine, tps } => {
            let mid = apply_affine_var(g, affine, points);
            apply_tps_var(g, sys, tps, mid)
        }
    }
}

/// Differentiable warp of a `[H, W]` or `[H, W, C]` field node: output pixel
/// grid coordinates are pushed through `sampling` and bilinearly sampled.
pub fn warp_var(g: &mut Graph, field: Var, sampling: &TransformVars, sys: &TpsSystem) -> Var {
    let shape = g.value(field).shape().to_vec();
    let (h, w) = (shape[0], shape[1]);
    let grid = CoordGrid::regular(h, w);
    let pts = g.leaf(grid.to_array());
    let coords = apply_var(g, sampling, sys, pts);
    let sampled = g.grid_sample(field, coords);
    g.reshape(sampled, &shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_scalar_fn, CheckInput};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_affine(rng: &mut ChaCha8Rng) -> AffineCoeffs {
        AffineCoeffs([
            1.0 + rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.4..0.4),
            rng.gen_range(-0.3..0.3),
            1.0 + rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.4..0.4),
        ])
    }

    #[test]
    fn identity_of_every_kind_is_exact() {
        let grid = CoordGrid::regular(5, 5);
        for kind in [TransformKind::Affine, TransformKind::Tps, TransformKind::Cascade] {
            let id = identity_params(kind);
            let mapped = apply_transform(&id, &grid).unwrap();
            for (a, b) in grid.points.iter().zip(&mapped.points) {
                assert!(a.dist(*b) < 1e-10, "{kind:?} moved a point by {}", a.dist(*b));
            }
        }
    }

    #[test]
    fn affine_matches_explicit_matrix_multiply() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let a = random_affine(&mut rng);
            let p = Point2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let got = a.apply(p);
            let want_x = a.0[0] * p.x + a.0[1] * p.y + a.0[2];
            let want_y = a.0[3] * p.x + a.0[4] * p.y + a.0[5];
            assert!((got.x - want_x).abs() < 1e-12);
            assert!((got.y - want_y).abs() < 1e-12);
        }
    }

    #[test]
    fn translation_moves_origin() {
        let t = TransformParams::Affine(AffineCoeffs([1.0, 0.0, 0.2, 0.0, 1.0, 0.0]));
        let p = apply_point(&t, Point2::new(0.0, 0.0));
        assert!((p.x - 0.2).abs() < 1e-12 && p.y.abs() < 1e-12);
    }

    #[test]
    fn projection_error_cases() {
        let id = identity_params(TransformKind::Affine);
        let p = Point2::new(0.3, -0.4);
        assert_eq!(projection_error(&id, p, p), 0.0);
        let t = TransformParams::Affine(AffineCoeffs::translation(0.3, 0.0));
        let z = Point2::new(0.0, 0.0);
        assert!((projection_error(&t, z, z) - 0.3).abs() < 1e-12);
        // Independent re-computation for a random affine.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let a = random_affine(&mut rng);
            let p = Point2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let q = Point2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let mx = a.0[0] * p.x + a.0[1] * p.y + a.0[2];
            let my = a.0[3] * p.x + a.0[4] * p.y + a.0[5];
            let want = ((mx - q.x).powi(2) + (my - q.y).powi(2)).sqrt();
            let got = projection_error(&TransformParams::Affine(a), p, q);
            assert!((got - want).abs() < 1e-12);
        }
    }

    /// Independent oracle: assemble and solve the TPS interpolation system
    /// by hand with Gaussian elimination, then evaluate directly.
    fn tps_oracle(k: usize, offsets: &[f64], probe: Point2) -> Point2 {
        let grid = CoordGrid::regular(k, k);
        let lat: Vec<(f64, f64)> = grid.points.iter().map(|p| (p.x, p.y)).collect();
        let n = lat.len();
        let m = n + 3;
        let mut a = vec![vec![0.0f64; m]; m];
        for i in 0..n {
            for j in 0..n {
                let r2 = (lat[i].0 - lat[j].0).powi(2) + (lat[i].1 - lat[j].1).powi(2);
                a[i][j] = if r2 > 0.0 { r2 * r2.ln() } else { 0.0 };
            }
            a[i][i] += TPS_REGULARIZATION;
            a[i][n] = 1.0;
            a[i][n + 1] = lat[i].0;
            a[i][n + 2] = lat[i].1;
            a[n][i] = 1.0;
            a[n + 1][i] = lat[i].0;
            a[n + 2][i] = lat[i].1;
        }
        let mut out = [0.0f64; 2];
        for dim in 0..2 {
            let mut aug: Vec<Vec<f64>> = a.iter().cloned().collect();
            let mut rhs = vec![0.0f64; m];
            for i in 0..n {
                rhs[i] = if dim == 0 { lat[i].0 + offsets[2 * i] } else { lat[i].1 + offsets[2 * i + 1] };
            }
            // Gaussian elimination with partial pivoting.
            for col in 0..m {
                let mut piv = col;
                for r in col + 1..m {
                    if aug[r][col].abs() > aug[piv][col].abs() {
                        piv = r;
                    }
                }
                aug.swap(col, piv);
                rhs.swap(col, piv);
                let d = aug[col][col];
                for r in col + 1..m {
                    let f = aug[r][col] / d;
                    for c2 in col..m {
                        aug[r][c2] -= f * aug[col][c2];
                    }
                    rhs[r] -= f * rhs[col];
                }
            }
            let mut w = vec![0.0f64; m];
            for r in (0..m).rev() {
                let mut acc = rhs[r];
                for c2 in r + 1..m {
                    acc -= aug[r][c2] * w[c2];
                }
                w[r] = acc / aug[r][r];
            }
            let mut val = w[n] + w[n + 1] * probe.x + w[n + 2] * probe.y;
            for i in 0..n {
                let r2 = (probe.x - lat[i].0).powi(2) + (probe.y - lat[i].1).powi(2);
                val += w[i] * if r2 > 0.0 { r2 * r2.ln() } else { 0.0 };
            }
            out[dim] = val;
        }
        Point2::new(out[0], out[1])
    }

    #[test]
    fn tps_apply_matches_direct_system_solution() {
        let k = DEFAULT_TPS_K;
        let mut offsets = vec![0.0; 2 * k * k];
        offsets[8] = 0.15; // one displaced control point (x of point 4)
        offsets[9] = -0.1;
        let t = TransformParams::Tps(TpsOffsets { offsets: offsets.clone(), k });
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..25 {
            let probe = Point2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let got = apply_point(&t, probe);
            let want = tps_oracle(k, &offsets, probe);
            assert!(got.dist(want) < 1e-9, "got {got:?} want {want:?}");
        }
    }

    #[test]
    fn tps_zero_offsets_is_identity_everywhere() {
        let t = identity_params(TransformKind::Tps);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p = Point2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            assert!(apply_point(&t, p).dist(p) < 1e-10);
        }
    }

    #[test]
    fn warp_constant_field_is_constant_inbounds() {
        let field = ArrayD::from_elem(IxDyn(&[8, 8]), 0.7);
        // Small transform: every sample stays strictly in bounds.
        let t = TransformParams::Affine(AffineCoeffs([0.9, 0.0, 0.0, 0.0, 0.9, 0.0]));
        let out = warp(&field, &t).unwrap();
        for &v in out.iter() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn warp_identity_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let field = ArrayD::from_shape_fn(IxDyn(&[6, 7, 3]), |_| rng.gen_range(0.0..1.0));
        let out = warp(&field, &identity_params(TransformKind::Cascade)).unwrap();
        for (a, b) in field.iter().zip(out.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn warp_one_cell_shift_matches_index_shift() {
        // 8x8 step mask; translate the sampling map by exactly one cell in x.
        let mut field = ArrayD::zeros(IxDyn(&[8, 8]));
        for y in 0..8 {
            for x in 0..4 {
                field[[y, x]] = 1.0;
            }
        }
        // Sampling transform reads source at x+1 cell: output(x) = field(x+1).
        let cell = 2.0 / 7.0;
        let t = TransformParams::Affine(AffineCoeffs::translation(cell, 0.0));
        let out = warp(&field, &t).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let want = if x + 1 < 8 { field[[y, x + 1]] } else { 0.0 };
                assert!(
                    (out[[y, x]] - want).abs() < 1e-9,
                    "({y},{x}): {} vs {want}",
                    out[[y, x]]
                );
            }
        }
    }

    #[test]
    fn graph_apply_agrees_with_eager_apply() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let sys = TpsSystem::new(DEFAULT_TPS_K);
        let affine = random_affine(&mut rng);
        let offsets: Vec<f64> = (0..2 * sys.lattice.len())
            .map(|_| rng.gen_range(-0.2..0.2))
            .collect();
        let params = TransformParams::Cascade(
            affine,
            TpsOffsets { offsets, k: DEFAULT_TPS_K },
        );
        let grid = CoordGrid::regular(4, 4);
        let eager = apply_transform(&params, &grid).unwrap();

        let mut g = Graph::new();
        let tv = TransformVars::from_params(&mut g, &params);
        let pts = g.leaf(grid.to_array());
        let out = apply_var(&mut g, &tv, &sys, pts);
        for (i, p) in eager.points.iter().enumerate() {
            assert!((g.value(out)[[i, 0]] - p.x).abs() < 1e-9);
            assert!((g.value(out)[[i, 1]] - p.y).abs() < 1e-9);
        }
    }

    #[test]
    fn apply_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let sys = TpsSystem::new(DEFAULT_TPS_K);
        let grid = CoordGrid::regular(6, 6);
        let affine0 = ArrayD::from_shape_vec(
            IxDyn(&[6]),
            vec![1.1, 0.05, 0.1, -0.04, 0.95, -0.08],
        )
        .unwrap();
        let tps0 = ArrayD::from_shape_fn(IxDyn(&[2 * sys.lattice.len()]), |_| {
            rng.gen_range(-0.15..0.15)
        });
        let pts0 = grid.to_array();
        let sys2 = sys.clone();
        let results = check_scalar_fn(
            "apply_cascade",
            &[
                CheckInput { name: "affine", value: affine0 },
                CheckInput { name: "tps", value: tps0 },
                CheckInput { name: "points", value: pts0 },
            ],
            64,
            3,
            &move |g, vars| {
                let tv = TransformVars::Cascade { affine: vars[0], tps: vars[1] };
                let out = apply_var(g, &tv, &sys2, vars[2]);
                let sq = g.mul(out, out);
                g.sum(sq)
            },
        );
        for r in results {
            assert!(r.passed, "{}/{}: rel err {}", r.target, r.wrt, r.max_rel_err);
        }
    }

    #[test]
    fn warp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let field0 = ArrayD::from_shape_fn(IxDyn(&[6, 6]), |_| rng.gen_range(0.0..1.0));
        let affine0 = ArrayD::from_shape_vec(
            IxDyn(&[6]),
            vec![1.03, 0.02, 0.07, -0.03, 0.97, -0.05],
        )
        .unwrap();
        let sys = TpsSystem::new(DEFAULT_TPS_K);
        let results = check_scalar_fn(
            "warp_affine",
            &[
                CheckInput { name: "field", value: field0 },
                CheckInput { name: "affine", value: affine0 },
            ],
            64,
            4,
            &move |g, vars| {
                let tv = TransformVars::Affine(vars[1]);
                let out = warp_var(g, vars[0], &tv, &sys);
                let sq = g.mul(out, out);
                g.sum(sq)
            },
        );
        for r in results {
            assert!(r.passed, "{}/{}: rel err {}", r.target, r.wrt, r.max_rel_err);
        }
    }

    #[test]
    fn invert_point_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..20 {
            let a = random_affine(&mut rng);
            let offsets: Vec<f64> = (0..18).map(|_| rng.gen_range(-0.1..0.1)).collect();
            let t = TransformParams::Cascade(a, TpsOffsets { offsets, k: 3 });
            let q = Point2::new(rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8));
            let p = invert_point(&t, q, 1e-10).expect("invertible");
            let back = apply_point(&t, p);
            assert!(back.dist(q) < 1e-8);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let offsets: Vec<f64> = (0..18).map(|_| rng.gen_range(-0.15..0.15)).collect();
        let t = TransformParams::Cascade(random_affine(&mut rng), TpsOffsets { offsets, k: 3 });
        let p = Point2::new(0.21, -0.37);
        let j = jacobian(&t, p);
        let h = 1e-6;
        let fx1 = apply_point(&t, Point2::new(p.x + h, p.y));
        let fx0 = apply_point(&t, Point2::new(p.x - h, p.y));
        let fy1 = apply_point(&t, Point2::new(p.x, p.y + h));
        let fy0 = apply_point(&t, Point2::new(p.x, p.y - h));
        assert!((j[0][0] - (fx1.x - fx0.x) / (2.0 * h)).abs() < 1e-6);
        assert!((j[1][0] - (fx1.y - fx0.y) / (2.0 * h)).abs() < 1e-6);
        assert!((j[0][1] - (fy1.x - fy0.x) / (2.0 * h)).abs() < 1e-6);
        assert!((j[1][1] - (fy1.y - fy0.y) / (2.0 * h)).abs() < 1e-6);
    }

    #[test]
    fn unknown_kind_string_is_rejected() {
        assert!(matches!(
            "projective".parse::<TransformKind>(),
            Err(Error::UnknownTransformKind(_))
        ));
        assert_eq!("tps".parse::<TransformKind>().unwrap(), TransformKind::Tps);
    }
}

//! Foreground-guided matching loss and the two cycle-consistency losses.
//!
//! The correspondence mask keeps only feature pairs whose projection error
//! under the current transform is within `phi`, measured in feature-grid
//! cell units (adjacent positions are one cell apart); a threshold of one
//! cell would be meaningless in normalized coordinates. The hard mask is
//! recomputed every step from the current transform but is excluded from
//! gradient flow; an optional soft mask `exp(-d^2/sigma^2)` with
//! `sigma = phi / sqrt(ln 2)` routes gradients through the transform as
//! well (its value at distance `phi` is exactly one half).

use crate::autodiff::{Graph, Var};
use crate::geometry::{
    apply_transform, apply_var, CoordGrid, TpsSystem, TransformParams, TransformVars,
};
use crate::{Error, Result};
use ndarray::{ArrayD, IxDyn};

/// Gradient policy for the correspondence mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorrMaskMode {
    /// Binary threshold, treated as a constant with respect to gradients.
    Hard,
    /// Gaussian falloff, differentiable in the transform parameters.
    Soft,
}

/// Binary correspondence indicator, `[h_A, w_A, h_B*w_B]`.
#[derive(Clone, Debug)]
pub struct CorrespondenceMask {
    pub values: ArrayD<f64>,
}

/// Per-position matching scores, `[h_A, w_A]`.
#[derive(Clone, Debug)]
pub struct MatchScoreMap {
    pub values: ArrayD<f64>,
}

/// Cells-per-normalized-unit scaling of a feature grid.
fn cell_scale(grid: &CoordGrid) -> (f64, f64) {
    (
        (grid.cols - 1) as f64 / 2.0,
        (grid.rows - 1) as f64 / 2.0,
    )
}

/// Hard correspondence mask: entry (p, q) is 1 iff the projection error of
/// p under `t`, measured in B-grid cell units, is at most `phi` (boundary
/// inclusive).
pub fn correspondence_mask(
    t: &TransformParams,
    grid_a: &CoordGrid,
    grid_b: &CoordGrid,
    phi: f64,
) -> Result<CorrespondenceMask> {
    assert!(phi > 0.0, "phi must be positive");
    let mapped = apply_transform(t, grid_a)?;
    let (sx, sy) = cell_scale(grid_b);
    let mut values = ArrayD::zeros(IxDyn(&[grid_a.rows, grid_a.cols, grid_b.len()]));
    for (i, p) in mapped.points.iter().enumerate() {
        for (j, q) in grid_b.points.iter().enumerate() {
            let dx = (p.x - q.x) * sx;
            let dy = (p.y - q.y) * sy;
            // Inclusive boundary; the slack keeps exactly-phi distances
            // inside despite rounding of the grid coordinates.
            if (dx * dx + dy * dy).sqrt() <= phi + 1e-9 {
                values[[i / grid_a.cols, i % grid_a.cols, j]] = 1.0;
            }
        }
    }
    Ok(CorrespondenceMask { values })
}

/// Soft correspondence weights on the tape, `[N_A, N_B]`, differentiable in
/// the transform parameters.
pub fn soft_correspondence_var(
    g: &mut Graph,
    t: &TransformVars,
    sys: &TpsSystem,
    grid_a: &CoordGrid,
    grid_b: &CoordGrid,
    phi: f64,
) -> Var {
    let pts = g.leaf(grid_a.to_array());
    let mapped = apply_var(g, t, sys, pts);
    let targets: Vec<(f64, f64)> = grid_b.points.iter().map(|p| (p.x, p.y)).collect();
    let d2 = g.pairwise_sqdist(mapped, targets, cell_scale(grid_b));
    let sigma2 = phi * phi / std::f64::consts::LN_2;
    let scaled = g.scale(d2, -1.0 / sigma2);
    g.exp(scaled)
}

/// Matching score `s(p) = sum_q m(p,q) * S(p,q)` (eager form).
pub fn match_score(s: &crate::correlation::CorrelationMap, m: &CorrespondenceMask) -> Result<MatchScoreMap> {
    if s.values.shape() != m.values.shape() {
        return Err(Error::ShapeMismatch(format!(
            "correlation {:?} vs mask {:?}",
            s.values.shape(),
            m.values.shape()
        )));
    }
    let weighted = &s.values * &m.values;
    Ok(MatchScoreMap {
        values: weighted.sum_axis(ndarray::Axis(2)).into_dyn(),
    })
}

/// Matching score on the tape: `corr` and `mask` are `[N_A, N_B]`; output
/// `[N_A]`.
pub fn match_score_var(g: &mut Graph, corr: Var, mask: Var) -> Var {
    let weighted = g.mul(corr, mask);
    g.sum_axis(weighted, 1)
}

/// Foreground-guided matching loss
/// `-(sum_p s_A(p) M_A(p) + sum_q s_B(q) M_B(q))`.
///
/// Scores and masks are flat `[N]` nodes at feature resolution. With
/// `detach_masks` the soft masks contribute values but no gradients, so the
/// loss cannot shrink the masks toward zero to satisfy itself.
pub fn matching_loss_var(
    g: &mut Graph,
    s_a: Var,
    m_a: Var,
    s_b: Var,
    m_b: Var,
    detach_masks: bool,
) -> Var {
    let (m_a, m_b) = if detach_masks {
        (g.detach(m_a), g.detach(m_b))
    } else {
        (m_a, m_b)
    };
    let wa = g.mul(s_a, m_a);
    let wb = g.mul(s_b, m_b);
    let ta = g.sum(wa);
    let tb = g.sum(wb);
    let tot = g.add(ta, tb);
    g.neg(tot)
}

/// Mean re-projection error of composing two transforms on a point set:
/// `mean_p |t2(t1(p)) - p|`.
fn reprojection_var(
    g: &mut Graph,
    t1: &TransformVars,
    t2: &TransformVars,
    sys: &TpsSystem,
    grid: &CoordGrid,
) -> Var {
    let pts = g.leaf(grid.to_array());
    let fwd = apply_var(g, t1, sys, pts);
    let back = apply_var(g, t2, sys, fwd);
    let diff = g.sub(back, pts);
    let sq = g.mul(diff, diff);
    let d2 = g.sum_axis(sq, 1);
    let d = g.sqrt_guarded(d2, 1e-24);
    g.mean(d)
}

/// Forward-backward consistency loss on the tape:
/// `mean_p |T_BA(T_AB(p)) - p| + mean_q |T_AB(T_BA(q)) - q|`.
pub fn cycle_loss_var(
    g: &mut Graph,
    t_ab: &TransformVars,
    t_ba: &TransformVars,
    sys: &TpsSystem,
    grid_a: &CoordGrid,
    grid_b: &CoordGrid,
) -> Var {
    let fwd = reprojection_var(g, t_ab, t_ba, sys, grid_a);
    let bwd = reprojection_var(g, t_ba, t_ab, sys, grid_b);
    g.add(fwd, bwd)
}

/// Transitivity consistency loss on the tape:
/// `mean_p |T_CA(T_BC(T_AB(p))) - p|`.
pub fn trans_loss_var(
    g: &mut Graph,
    t_ab: &TransformVars,
    t_bc: &TransformVars,
    t_ca: &TransformVars,
    sys: &TpsSystem,
    grid_a: &CoordGrid,
) -> Var {
    let pts = g.leaf(grid_a.to_array());
    let p1 = apply_var(g, t_ab, sys, pts);
    let p2 = apply_var(g, t_bc, sys, p1);
    let p3 = apply_var(g, t_ca, sys, p2);
    let diff = g.sub(p3, pts);
    let sq = g.mul(diff, diff);
    let d2 = g.sum_axis(sq, 1);
    let d = g.sqrt_guarded(d2, 1e-24);
    g.mean(d)
}

fn params_tps_k(ts: &[&TransformParams]) -> usize {
    for t in ts {
        match t {
            TransformParams::Tps(o) | TransformParams::Cascade(_, o) => return o.k,
            TransformParams::Affine(_) => {}
        }
    }
    crate::geometry::DEFAULT_TPS_K
}

/// Eager forward-backward consistency loss.
pub fn cycle_loss(
    t_ab: &TransformParams,
    t_ba: &TransformParams,
    grid_a: &CoordGrid,
    grid_b: &CoordGrid,
) -> f64 {
    let sys = TpsSystem::cached(params_tps_k(&[t_ab, t_ba]));
    let mut g = Graph::new();
    let va = TransformVars::from_params(&mut g, t_ab);
    let vb = TransformVars::from_params(&mut g, t_ba);
    let loss = cycle_loss_var(&mut g, &va, &vb, &sys, grid_a, grid_b);
    g.scalar_value(loss)
}

/// Eager transitivity consistency loss.
pub fn trans_loss(
    t_ab: &TransformParams,
    t_bc: &TransformParams,
    t_ca: &TransformParams,
    grid_a: &CoordGrid,
) -> f64 {
    let sys = TpsSystem::cached(params_tps_k(&[t_ab, t_bc, t_ca]));
    let mut g = Graph::new();
    let vab = TransformVars::from_params(&mut g, t_ab);
    let vbc = TransformVars::from_params(&mut g, t_bc);
    let vca = TransformVars::from_params(&mut g, t_ca);
    let loss = trans_loss_var(&mut g, &vab, &vbc, &vca, &sys, grid_a);
    g.scalar_value(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::{CorrelationMap, CorrelationShape};
    use crate::geometry::{identity_params, AffineCoeffs, TransformKind};
    use crate::gradcheck::{check_scalar_fn, CheckInput};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn translation(tx: f64, ty: f64) -> TransformParams {
        TransformParams::Affine(AffineCoeffs::translation(tx, ty))
    }

    #[test]
    fn identity_mask_is_the_one_cell_neighborhood() {
        let grid = CoordGrid::regular(6, 6);
        let id = identity_params(TransformKind::Affine);
        let mask = correspondence_mask(&id, &grid, &grid, 1.0).unwrap();
        // Brute-force distance table oracle.
        for i in 0..6 {
            for j in 0..6 {
                for s in 0..6 {
                    for t in 0..6 {
                        let d = (((i as f64 - s as f64).powi(2)
                            + (j as f64 - t as f64).powi(2)) as f64)
                            .sqrt();
                        let want = if d <= 1.0 { 1.0 } else { 0.0 };
                        assert_eq!(
                            mask.values[[i, j, s * 6 + t]],
                            want,
                            "p=({i},{j}) q=({s},{t})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn far_translation_empties_the_mask() {
        let grid = CoordGrid::regular(4, 4);
        let t = translation(10.0, 0.0);
        let mask = correspondence_mask(&t, &grid, &grid, 1.0).unwrap();
        assert!(mask.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn exact_projection_is_inside_the_boundary() {
        // phi = 1 and p lands exactly on q: included because the test is <=.
        let grid = CoordGrid::regular(3, 3);
        let id = identity_params(TransformKind::Affine);
        let mask = correspondence_mask(&id, &grid, &grid, 1.0).unwrap();
        for i in 0..9 {
            assert_eq!(mask.values[[i / 3, i % 3, i]], 1.0);
        }
    }

    #[test]
    fn match_score_cases_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = CorrelationShape { h_a: 4, w_a: 4, h_b: 4, w_b: 4 };
        let s = CorrelationMap {
            values: ArrayD::from_shape_fn(IxDyn(&[4, 4, 16]), |_| rng.gen_range(-1.0..1.0)),
            shape,
        };
        // All-zero mask.
        let zero = CorrespondenceMask { values: ArrayD::zeros(IxDyn(&[4, 4, 16])) };
        let sc = match_score(&s, &zero).unwrap();
        assert!(sc.values.iter().all(|&v| v == 0.0));
        // Random binary mask against an explicit double loop.
        let m = CorrespondenceMask {
            values: ArrayD::from_shape_fn(IxDyn(&[4, 4, 16]), |_| {
                if rng.gen_bool(0.3) { 1.0 } else { 0.0 }
            }),
        };
        let sc = match_score(&s, &m).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut want = 0.0;
                for q in 0..16 {
                    want += m.values[[i, j, q]] * s.values[[i, j, q]];
                }
                assert!((sc.values[[i, j]] - want).abs() < 1e-12);
            }
        }
        // Bounded by the number of B positions.
        assert!(sc.values.iter().all(|&v| v.abs() <= 16.0));
    }

    #[test]
    fn single_assignment_mask_selects_one_score() {
        let shape = CorrelationShape { h_a: 2, w_a: 2, h_b: 2, w_b: 2 };
        let mut vals = ArrayD::zeros(IxDyn(&[2, 2, 4]));
        for i in 0..4 {
            for q in 0..4 {
                vals[[i / 2, i % 2, q]] = (i * 4 + q) as f64 * 0.1;
            }
        }
        let s = CorrelationMap { values: vals.clone(), shape };
        let mut mv = ArrayD::zeros(IxDyn(&[2, 2, 4]));
        for i in 0..4 {
            mv[[i / 2, i % 2, (i + 1) % 4]] = 1.0;
        }
        let m = CorrespondenceMask { values: mv };
        let sc = match_score(&s, &m).unwrap();
        for i in 0..4 {
            assert!((sc.values[[i / 2, i % 2]] - vals[[i / 2, i % 2, (i + 1) % 4]]).abs() < 1e-12);
        }
    }

    #[test]
    fn matching_loss_trivial_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 36;
        let s_a: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let s_b: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let m_a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let m_b: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let eval = |ma: &[f64], mb: &[f64]| {
            let mut g = Graph::new();
            let sa = g.leaf(ArrayD::from_shape_vec(IxDyn(&[n]), s_a.clone()).unwrap());
            let sb = g.leaf(ArrayD::from_shape_vec(IxDyn(&[n]), s_b.clone()).unwrap());
            let va = g.leaf(ArrayD::from_shape_vec(IxDyn(&[n]), ma.to_vec()).unwrap());
            let vb = g.leaf(ArrayD::from_shape_vec(IxDyn(&[n]), mb.to_vec()).unwrap());
            let l = matching_loss_var(&mut g, sa, va, sb, vb, true);
            g.scalar_value(l)
        };
        // Zero masks -> zero loss.
        assert_eq!(eval(&vec![0.0; n], &vec![0.0; n]), 0.0);
        // All-one masks -> negative unmasked sum.
        let want = -(s_a.iter().sum::<f64>() + s_b.iter().sum::<f64>());
        assert!((eval(&vec![1.0; n], &vec![1.0; n]) - want).abs() < 1e-12);
        // Nested-loop oracle on random inputs.
        let mut want = 0.0;
        for i in 0..n {
            want -= s_a[i] * m_a[i] + s_b[i] * m_b[i];
        }
        assert!((eval(&m_a, &m_b) - want).abs() < 1e-8);
    }

    #[test]
    fn matching_loss_is_monotone_in_masked_scores() {
        // Raising S(p,q) where m=1 and M(p)>0 strictly decreases the loss.
        let grid = CoordGrid::regular(3, 3);
        let id = identity_params(TransformKind::Affine);
        let mask = correspondence_mask(&id, &grid, &grid, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut s = ArrayD::from_shape_fn(IxDyn(&[3, 3, 9]), |_| rng.gen_range(-1.0..1.0));
        let msk: Vec<f64> = (0..9).map(|_| rng.gen_range(0.1..1.0)).collect();
        let loss_of = |s: &ArrayD<f64>| {
            let flat = s.to_shape(IxDyn(&[9, 9])).unwrap().to_owned();
            let mflat = mask.values.to_shape(IxDyn(&[9, 9])).unwrap().to_owned();
            let mut g = Graph::new();
            let sv = g.leaf(flat);
            let mv = g.leaf(mflat);
            let sc = match_score_var(&mut g, sv, mv);
            let mk = g.leaf(ArrayD::from_shape_vec(IxDyn(&[9]), msk.clone()).unwrap());
            let l = matching_loss_var(&mut g, sc, mk, sc, mk, true);
            g.scalar_value(l)
        };
        let before = loss_of(&s);
        assert_eq!(mask.values[[1, 1, 4]], 1.0); // self-match of center point
        s[[1, 1, 4]] += 0.5;
        let after = loss_of(&s);
        assert!(after < before);
    }

    #[test]
    fn cycle_loss_identities() {
        let grid = CoordGrid::regular(10, 10);
        let id = identity_params(TransformKind::Affine);
        assert_eq!(cycle_loss(&id, &id, &grid, &grid), 0.0);
        // Exact inverses cancel.
        let t1 = translation(0.2, 0.0);
        let t2 = translation(-0.2, 0.0);
        assert!(cycle_loss(&t1, &t2, &grid, &grid) < 1e-12);
        // Identity backward leaves the forward displacement in both terms.
        let l = cycle_loss(&t1, &id, &grid, &grid);
        assert!((l - 0.4).abs() < 1e-10, "{l}");
    }

    #[test]
    fn cycle_loss_zero_for_analytic_inverse_of_random_affines() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let grid = CoordGrid::regular(10, 10);
        for _ in 0..100 {
            let a = AffineCoeffs([
                1.0 + rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.3..0.3),
                1.0 + rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.5..0.5),
            ]);
            let Some(inv) = a.inverse() else { continue };
            let l = cycle_loss(
                &TransformParams::Affine(a),
                &TransformParams::Affine(inv),
                &grid,
                &grid,
            );
            assert!(l < 1e-10, "cycle residual {l}");
        }
    }

    #[test]
    fn trans_loss_closed_and_open_loops() {
        let grid = CoordGrid::regular(10, 10);
        let id = identity_params(TransformKind::Affine);
        assert_eq!(trans_loss(&id, &id, &id, &grid), 0.0);
        // Translations summing to zero close the loop.
        let l = trans_loss(
            &translation(0.1, 0.05),
            &translation(-0.3, 0.1),
            &translation(0.2, -0.15),
            &grid,
        );
        assert!(l < 1e-12);
        // A net translation of 0.1 leaves a 0.1 residual.
        let l = trans_loss(
            &translation(0.1, 0.0),
            &id,
            &id,
            &grid,
        );
        assert!((l - 0.1).abs() < 1e-12);
    }

    #[test]
    fn losses_are_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let grid = CoordGrid::regular(5, 5);
        for _ in 0..20 {
            let t1 = translation(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            let t2 = translation(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            let t3 = translation(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
            assert!(cycle_loss(&t1, &t2, &grid, &grid) >= 0.0);
            assert!(trans_loss(&t1, &t2, &t3, &grid) >= 0.0);
        }
    }

    #[test]
    fn cycle_and_trans_gradients_match_finite_differences() {
        let sys = TpsSystem::cached(crate::geometry::DEFAULT_TPS_K);
        let grid = CoordGrid::regular(6, 6);
        let a1 = ArrayD::from_shape_vec(IxDyn(&[6]), vec![1.05, 0.1, 0.2, -0.07, 0.93, -0.1]).unwrap();
        let a2 = ArrayD::from_shape_vec(IxDyn(&[6]), vec![0.96, -0.05, -0.15, 0.04, 1.08, 0.12]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let tps1 = ArrayD::from_shape_fn(IxDyn(&[18]), |_| rng.gen_range(-0.1..0.1));
        let g1 = grid.clone();
        let g2 = grid.clone();
        let sys1 = sys.clone();
        let results = check_scalar_fn(
            "cycle_loss",
            &[
                CheckInput { name: "t_ab.affine", value: a1.clone() },
                CheckInput { name: "t_ab.tps", value: tps1.clone() },
                CheckInput { name: "t_ba.affine", value: a2.clone() },
            ],
            40,
            60,
            &move |g, vars| {
                let t_ab = TransformVars::Cascade { affine: vars[0], tps: vars[1] };
                let t_ba = TransformVars::Affine(vars[2]);
                cycle_loss_var(g, &t_ab, &t_ba, &sys1, &g1, &g2)
            },
        );
        for r in results {
            assert!(r.passed, "{}/{}: {}", r.target, r.wrt, r.max_rel_err);
        }

        let g1 = grid.clone();
        let sys2 = sys.clone();
        let results = check_scalar_fn(
            "trans_loss",
            &[
                CheckInput { name: "t_ab", value: a1 },
                CheckInput { name: "t_bc", value: a2 },
                CheckInput { name: "t_ca.tps", value: tps1 },
            ],
            40,
            61,
            &move |g, vars| {
                let t_ab = TransformVars::Affine(vars[0]);
                let t_bc = TransformVars::Affine(vars[1]);
                let t_ca = TransformVars::Tps(vars[2]);
                trans_loss_var(g, &t_ab, &t_bc, &t_ca, &sys2, &g1)
            },
        );
        for r in results {
            assert!(r.passed, "{}/{}: {}", r.target, r.wrt, r.max_rel_err);
        }
    }

    #[test]
    fn soft_mask_is_half_at_phi_and_differentiable() {
        let sys = TpsSystem::cached(crate::geometry::DEFAULT_TPS_K);
        let grid = CoordGrid::regular(4, 4);
        // Translate by exactly one cell: the nearest neighbor sits at
        // distance phi = 1, so its soft weight is 0.5.
        let cell = 2.0 / 3.0;
        let mut g = Graph::new();
        let t = TransformVars::from_params(
            &mut g,
            &translation(cell, 0.0),
        );
        let m = soft_correspondence_var(&mut g, &t, &sys, &grid, &grid, 1.0);
        // Point 0 maps onto point 1's position: weight 1 there, 0.5 at 0.
        assert!((g.value(m)[[0, 1]] - 1.0).abs() < 1e-9);
        assert!((g.value(m)[[0, 0]] - 0.5).abs() < 1e-9);

        let grid2 = grid.clone();
        let sys2 = sys.clone();
        let a0 = ArrayD::from_shape_vec(IxDyn(&[6]), vec![1.02, 0.05, 0.17, -0.04, 0.95, -0.09]).unwrap();
        let results = check_scalar_fn(
            "soft_correspondence",
            &[CheckInput { name: "affine", value: a0 }],
            20,
            62,
            &move |g, vars| {
                let t = TransformVars::Affine(vars[0]);
                let m = soft_correspondence_var(g, &t, &sys2, &grid2, &grid2, 1.0);
                let sq = g.mul(m, m);
                g.sum(sq)
            },
        );
        for r in results {
            assert!(r.passed, "{}/{}: {}", r.target, r.wrt, r.max_rel_err);
        }
    }
}

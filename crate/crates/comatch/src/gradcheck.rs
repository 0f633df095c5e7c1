//! Finite-difference verification of analytic gradients.
//!
//! Central differences at step 1e-5 in double precision, compared with the
//! relative error `|a - n| / max(|a|, |n|, 1)`; the floor of 1 turns the
//! comparison absolute for near-zero gradients.

use crate::autodiff::{Gradients, Graph, Var};
use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Default pass tolerance on the relative error.
pub const FD_TOL: f64 = 1e-4;

/// Central finite differences of `f` at `x`, one entry at a time.
pub fn finite_diff(f: &dyn Fn(&ArrayD<f64>) -> f64, x: &ArrayD<f64>, step: f64) -> ArrayD<f64> {
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let slot = probe.as_slice_mut().unwrap();
        let orig = slot[idx];
        slot[idx] = orig + step;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - step;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * step);
    }
    grad
}

/// Relative error between two equally shaped gradient arrays.
pub fn max_rel_err(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// One named differentiable input of a scalar-valued computation.
pub struct CheckInput {
    pub name: &'static str,
    pub value: ArrayD<f64>,
}

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct CheckResult {
    /// What was checked, e.g. `"matching_loss"`.
    pub target: String,
    /// Which input the gradient was taken with respect to.
    pub wrt: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Check the gradients of a scalar graph builder against central finite
/// differences on every (or a sampled subset of) input entries.
///
/// `build` receives one leaf per input, in order, and returns the scalar
/// root. Entries are subsampled deterministically when an input has more
/// than `max_entries` elements so big masks stay affordable.
pub fn check_scalar_fn(
    target: &str,
    inputs: &[CheckInput],
    max_entries: usize,
    seed: u64,
    build: &dyn Fn(&mut Graph, &[Var]) -> Var,
) -> Vec<CheckResult> {
    let eval = |values: &[ArrayD<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|v| g.leaf(v.clone())).collect();
        let root = build(&mut g, &vars);
        g.scalar_value(root)
    };

    // Analytic gradients from one tape.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|i| g.leaf(i.value.clone())).collect();
    let root = build(&mut g, &vars);
    assert_eq!(g.value(root).len(), 1, "check_scalar_fn: root must be scalar");
    let grads = g.backward(root);

    let base: Vec<ArrayD<f64>> = inputs.iter().map(|i| i.value.clone()).collect();
    let mut results = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = match grads.get(vars[k]) {
            Some(a) => a.clone(),
            None => ArrayD::zeros(input.value.raw_dim()),
        };
        let n = input.value.len();
        let mut entries: Vec<usize> = (0..n).collect();
        if n > max_entries {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64) << 32);
            for i in 0..max_entries {
                let j = rng.gen_range(i..n);
                entries.swap(i, j);
            }
            entries.truncate(max_entries);
        }
        let mut worst = 0.0f64;
        let mut probe = base.clone();
        for &idx in &entries {
            let orig = probe[k].as_slice().unwrap()[idx];
            probe[k].as_slice_mut().unwrap()[idx] = orig + FD_STEP;
            let fp = eval(&probe);
            probe[k].as_slice_mut().unwrap()[idx] = orig - FD_STEP;
            let fm = eval(&probe);
            probe[k].as_slice_mut().unwrap()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let a = analytic.as_slice().unwrap()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(rel);
        }
        results.push(CheckResult {
            target: target.to_string(),
            wrt: input.name.to_string(),
            max_rel_err: worst,
            passed: worst < FD_TOL,
        });
    }
    results
}

/// Convenience: analytic gradients for ad-hoc comparisons in tests.
pub fn analytic_grads(
    inputs: &[ArrayD<f64>],
    build: &dyn Fn(&mut Graph, &[Var]) -> Var,
) -> (Vec<ArrayD<f64>>, f64) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|v| g.leaf(v.clone())).collect();
    let root = build(&mut g, &vars);
    let value = g.scalar_value(root);
    let grads: Gradients = g.backward(root);
    let out = vars
        .iter()
        .zip(inputs)
        .map(|(&v, i)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(i.raw_dim()))
        })
        .collect();
    (out, value)
}

/// The full verification suite: every training loss plus the transform
/// apply and warp operations, against central finite differences on random
/// small inputs. Entry subsampling keeps the whole run well under a minute.
pub fn run_suite(seed: u64) -> Vec<CheckResult> {
    use crate::geometry::{CoordGrid, TpsSystem, TransformVars, DEFAULT_TPS_K};
    use crate::losses::{
        contrastive_loss_var, correspondence_mask, cycle_loss_var, match_score_var,
        matching_loss_var, soft_correspondence_var, task_consistency_loss_var, trans_loss_var,
    };
    use crate::networks::{Model, NetConfig};
    use ndarray::IxDyn;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let sys = TpsSystem::cached(DEFAULT_TPS_K);
    let grid6 = CoordGrid::regular(6, 6);
    let n6 = grid6.len();
    let max_entries = 28;

    fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(lo..hi))
    }
    fn gen_affine(rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        let mut a = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        for (i, v) in a.iter_mut().enumerate() {
            *v += rng.gen_range(-0.12..0.12) * if i == 2 || i == 5 { 2.0 } else { 1.0 };
        }
        ArrayD::from_shape_vec(IxDyn(&[6]), a).unwrap()
    }

    // Affine and TPS apply.
    let points = grid6.to_array();
    let a0 = gen_affine(&mut rng);
    let t0 = rand_arr(&mut rng, &[2 * sys.lattice.len()], -0.12, 0.12);
    {
        let sys = sys.clone();
        results.extend(check_scalar_fn(
            "apply_affine",
            &[
                CheckInput { name: "params", value: a0.clone() },
                CheckInput { name: "points", value: points.clone() },
            ],
            max_entries,
            seed ^ 1,
            &move |g, vars| {
                let tv = TransformVars::Affine(vars[0]);
                let out = crate::geometry::apply_var(g, &tv, &sys, vars[1]);
                let sq = g.mul(out, out);
                g.sum(sq)
            },
        ));
    }
    {
        let sys = sys.clone();
        results.extend(check_scalar_fn(
            "apply_tps",
            &[
                CheckInput { name: "offsets", value: t0.clone() },
                CheckInput { name: "points", value: points.clone() },
            ],
            max_entries,
            seed ^ 2,
            &move |g, vars| {
                let tv = TransformVars::Tps(vars[0]);
                let out = crate::geometry::apply_var(g, &tv, &sys, vars[1]);
                let sq = g.mul(out, out);
                g.sum(sq)
            },
        ));
    }

    // Warp through a cascade.
    {
        let sys = sys.clone();
        let field = rand_arr(&mut rng, &[6, 6], 0.0, 1.0);
        results.extend(check_scalar_fn(
            "warp",
            &[
                CheckInput { name: "field", value: field },
                CheckInput { name: "affine", value: gen_affine(&mut rng) },
                CheckInput { name: "tps", value: rand_arr(&mut rng, &[2 * sys.lattice.len()], -0.08, 0.08) },
            ],
            max_entries,
            seed ^ 3,
            &move |g, vars| {
                let tv = TransformVars::Cascade { affine: vars[1], tps: vars[2] };
                let out = crate::geometry::warp_var(g, vars[0], &tv, &sys);
                let sq = g.mul(out, out);
                g.sum(sq)
            },
        ));
    }

    // Matching loss with the correspondence mask held fixed, gradients with
    // respect to the correlation scores and the soft masks.
    {
        let hard = correspondence_mask(
            &crate::geometry::TransformParams::Affine(crate::geometry::AffineCoeffs([
                1.05, 0.03, 0.1, -0.02, 0.96, -0.06,
            ])),
            &grid6,
            &grid6,
            1.0,
        )
        .unwrap();
        let mask_flat = hard.values.to_shape(IxDyn(&[n6, n6])).unwrap().to_owned();
        results.extend(check_scalar_fn(
            "matching_loss",
            &[
                CheckInput { name: "scores", value: rand_arr(&mut rng, &[n6, n6], -1.0, 1.0) },
                CheckInput { name: "mask_a", value: rand_arr(&mut rng, &[n6], 0.05, 0.95) },
                CheckInput { name: "mask_b", value: rand_arr(&mut rng, &[n6], 0.05, 0.95) },
            ],
            max_entries,
            seed ^ 4,
            &move |g, vars| {
                let m = g.leaf(mask_flat.clone());
                let s_a = match_score_var(g, vars[0], m);
                let s_b = match_score_var(g, vars[0], m);
                matching_loss_var(g, s_a, vars[1], s_b, vars[2], false)
            },
        ));
    }

    // Matching with the soft correspondence: gradient reaches the transform.
    {
        let sys = sys.clone();
        let grid = grid6.clone();
        let scores = rand_arr(&mut rng, &[n6, n6], -1.0, 1.0);
        results.extend(check_scalar_fn(
            "matching_loss_soft_mask",
            &[CheckInput { name: "t_ab", value: gen_affine(&mut rng) }],
            max_entries,
            seed ^ 5,
            &move |g, vars| {
                let tv = TransformVars::Affine(vars[0]);
                let w = soft_correspondence_var(g, &tv, &sys, &grid, &grid, 1.0);
                let sv = g.leaf(scores.clone());
                let s = match_score_var(g, sv, w);
                let ones = g.leaf(ArrayD::ones(IxDyn(&[n6])));
                matching_loss_var(g, s, ones, s, ones, true)
            },
        ));
    }

    // Cycle and transitivity.
    {
        let sys2 = sys.clone();
        let grid = grid6.clone();
        results.extend(check_scalar_fn(
            "cycle_loss",
            &[
                CheckInput { name: "t_ab.affine", value: gen_affine(&mut rng) },
                CheckInput { name: "t_ab.tps", value: rand_arr(&mut rng, &[2 * sys.lattice.len()], -0.1, 0.1) },
                CheckInput { name: "t_ba.affine", value: gen_affine(&mut rng) },
            ],
            max_entries,
            seed ^ 6,
            &move |g, vars| {
                let t_ab = TransformVars::Cascade { affine: vars[0], tps: vars[1] };
                let t_ba = TransformVars::Affine(vars[2]);
                cycle_loss_var(g, &t_ab, &t_ba, &sys2, &grid, &grid)
            },
        ));
    }
    {
        let sys2 = sys.clone();
        let grid = grid6.clone();
        results.extend(check_scalar_fn(
            "trans_loss",
            &[
                CheckInput { name: "t_ab", value: gen_affine(&mut rng) },
                CheckInput { name: "t_bc", value: gen_affine(&mut rng) },
                CheckInput { name: "t_ca", value: rand_arr(&mut rng, &[2 * sys.lattice.len()], -0.1, 0.1) },
            ],
            max_entries,
            seed ^ 7,
            &move |g, vars| {
                let t_ab = TransformVars::Affine(vars[0]);
                let t_bc = TransformVars::Affine(vars[1]);
                let t_ca = TransformVars::Tps(vars[2]);
                trans_loss_var(g, &t_ab, &t_bc, &t_ca, &sys2, &grid)
            },
        ));
    }

    // Perceptual contrast through the frozen extractor, with respect to the
    // masks.
    {
        let model = Model::new(
            NetConfig {
                resolution: 16,
                enc_channels: vec![8, 16],
                dec_channels: vec![16, 8, 4],
                ext_channels: vec![4, 8],
                semantic_dim: 24,
                ..NetConfig::default()
            },
            seed ^ 0xabc,
        )
        .expect("valid config");
        let i_a = rand_arr(&mut rng, &[16, 16, 3], 0.0, 1.0);
        let i_b = rand_arr(&mut rng, &[16, 16, 3], 0.0, 1.0);
        results.extend(check_scalar_fn(
            "contrast_loss",
            &[
                CheckInput { name: "mask_a", value: rand_arr(&mut rng, &[16, 16], 0.05, 0.95) },
                CheckInput { name: "mask_b", value: rand_arr(&mut rng, &[16, 16], 0.05, 0.95) },
            ],
            max_entries,
            seed ^ 8,
            &move |g, vars| {
                let ext = model.bind_extractor(g);
                let ia = g.leaf(i_a.clone());
                let ib = g.leaf(i_b.clone());
                contrastive_loss_var(g, &ext, &model.cfg, ia, ib, vars[0], vars[1], 2.0)
                    .expect("dims agree")
            },
        ));
    }

    // Cross-network consistency with respect to masks and both transforms.
    {
        let sys2 = sys.clone();
        results.extend(check_scalar_fn(
            "task_consistency_loss",
            &[
                CheckInput { name: "mask_a", value: rand_arr(&mut rng, &[12, 12], 0.05, 0.95) },
                CheckInput { name: "mask_b", value: rand_arr(&mut rng, &[12, 12], 0.05, 0.95) },
                CheckInput { name: "t_ab", value: gen_affine(&mut rng) },
                CheckInput { name: "t_ba", value: gen_affine(&mut rng) },
            ],
            max_entries,
            seed ^ 9,
            &move |g, vars| {
                let t_ab = TransformVars::Affine(vars[2]);
                let t_ba = TransformVars::Affine(vars[3]);
                task_consistency_loss_var(g, vars[0], vars[1], &t_ab, &t_ba, &sys2)
            },
        ));
    }

    results
}

/// Render suite results as an aligned text table.
pub fn render_table(results: &[CheckResult]) -> String {
    let mut out = String::from("target                     wrt           max rel err  status\n");
    for r in results {
        out.push_str(&format!(
            "{:<26} {:<13} {:<12.3e} {}\n",
            r.target,
            r.wrt,
            r.max_rel_err,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    out
}

//! Perceptual contrastive loss and cross-network mask consistency.
//!
//! The contrastive loss splits each image into an object image `M (x) I` and
//! a background image `(1-M) (x) I`, embeds all four through the frozen
//! extractor, then pulls the two object embeddings together while pushing
//! each image's object and background embeddings apart — but only up to the
//! cutoff margin `m`, past which the hinge saturates and the model stops
//! maximizing figure-ground discrepancy.
//!
//! The mask consistency loss warps each soft mask across the pair with the
//! predicted transforms and scores the overlap with a symmetric binary
//! cross-entropy; the warped mask sits in the target slot of each term,
//! soft values included, and predicted masks are clamped before the
//! logarithms.

use crate::autodiff::{Graph, Var};
use crate::geometry::{warp_var, TpsSystem, TransformVars};
use crate::networks::{extract_semantic, Bound, NetConfig};
use crate::{Error, Result};
use ndarray::ArrayD;

/// Clamp applied to BCE predictions before the logarithms.
pub const BCE_EPS: f64 = 1e-6;

/// Object/background decomposition of an image: the two parts sum back to
/// the original exactly.
pub struct FigureGroundPair {
    pub object: ArrayD<f64>,
    pub background: ArrayD<f64>,
}

/// Eager split `I^o = M (x) I`, `I^b = (1-M) (x) I` for an `[H, W, 3]`
/// image and `[H, W]` mask.
pub fn figure_ground_split(image: &ArrayD<f64>, mask: &ArrayD<f64>) -> Result<FigureGroundPair> {
    let (is_, ms) = (image.shape(), mask.shape());
    if is_.len() != 3 || ms.len() != 2 || is_[0] != ms[0] || is_[1] != ms[1] {
        return Err(Error::ShapeMismatch(format!(
            "figure_ground_split: image {is_:?} vs mask {ms:?}"
        )));
    }
    let mut object = image.clone();
    let mut background = image.clone();
    let c = is_[2];
    let mv = mask.as_slice().unwrap();
    for (i, (o, b)) in object
        .as_slice_mut()
        .unwrap()
        .iter_mut()
        .zip(background.as_slice_mut().unwrap())
        .enumerate()
    {
        let m = mv[i / c];
        *o *= m;
        *b *= 1.0 - m;
    }
    Ok(FigureGroundPair { object, background })
}

/// Broadcast-multiply an `[H, W]` mask over the channels of `[H, W, 3]`.
fn mask_times_image(g: &mut Graph, mask: Var, image: Var) -> Var {
    let s = g.value(mask).shape().to_vec();
    let m1 = g.reshape(mask, &[s[0], s[1], 1]);
    let m3 = g.concat(2, &[m1, m1, m1]);
    g.mul(m3, image)
}

/// Graph form of the figure-ground split.
pub fn figure_ground_split_var(g: &mut Graph, image: Var, mask: Var) -> (Var, Var) {
    let object = mask_times_image(g, mask, image);
    let background = g.sub(image, object);
    (object, background)
}

/// Squared L2 distance between two `[c]` embeddings, scaled by `1/c`.
fn mean_sq_dist(g: &mut Graph, a: Var, b: Var, c: usize) -> Var {
    let d = g.sub(a, b);
    let sq = g.mul(d, d);
    let s = g.sum(sq);
    g.scale(s, 1.0 / c as f64)
}

/// Perceptual contrastive loss `d+ + d-` with
/// `d+ = (1/c) |F(I_A^o) - F(I_B^o)|^2` and
/// `d- = max(0, m - (1/2c)(|F(I_A^o) - F(I_A^b)|^2 + |F(I_B^o) - F(I_B^b)|^2))`.
pub fn contrastive_loss_var(
    g: &mut Graph,
    ext: &Bound,
    cfg: &NetConfig,
    i_a: Var,
    i_b: Var,
    m_a: Var,
    m_b: Var,
    margin: f64,
) -> Result<Var> {
    let c = cfg.semantic_dim;
    let (ao, ab) = figure_ground_split_var(g, i_a, m_a);
    let (bo, bb) = figure_ground_split_var(g, i_b, m_b);
    let e_ao = extract_semantic(g, ext, cfg, ao);
    if g.value(e_ao).len() != c {
        return Err(Error::ShapeMismatch(format!(
            "extractor produced {} dims, expected c = {c}",
            g.value(e_ao).len()
        )));
    }
    let e_ab = extract_semantic(g, ext, cfg, ab);
    let e_bo = extract_semantic(g, ext, cfg, bo);
    let e_bb = extract_semantic(g, ext, cfg, bb);

    let d_pos = mean_sq_dist(g, e_ao, e_bo, c);

    let sep_a = mean_sq_dist(g, e_ao, e_ab, c);
    let sep_b = mean_sq_dist(g, e_bo, e_bb, c);
    let sep = g.add(sep_a, sep_b);
    let sep = g.scale(sep, 0.5);
    let neg_sep = g.neg(sep);
    let gap = g.add_scalar(neg_sep, margin);
    let d_neg = g.relu(gap);

    Ok(g.add(d_pos, d_neg))
}

/// Binary cross-entropy, mean over pixels, warped mask as target:
/// `-(1/HW) sum[ t*ln(p) + (1-t)*ln(1-p) ]`; `p` clamped to
/// `[BCE_EPS, 1-BCE_EPS]`.
fn bce_var(g: &mut Graph, target: Var, pred: Var) -> Var {
    let n = g.value(pred).len() as f64;
    let p = g.clamp(pred, BCE_EPS, 1.0 - BCE_EPS);
    let ln_p = g.ln(p);
    let ones = g.leaf(ArrayD::ones(g.value(p).raw_dim()));
    let one_minus_p = g.sub(ones, p);
    let ln_q = g.ln(one_minus_p);
    let ones_t = g.leaf(ArrayD::ones(g.value(target).raw_dim()));
    let one_minus_t = g.sub(ones_t, target);
    let pos = g.mul(target, ln_p);
    let neg = g.mul(one_minus_t, ln_q);
    let terms = g.add(pos, neg);
    let total = g.sum(terms);
    g.scale(total, -1.0 / n)
}

/// Cross-network consistency `L_bce(~M_A, M_B) + L_bce(~M_B, M_A)`, where
/// `~M_A = warp(M_A)` into B's frame (sampled through `T_BA`) and vice
/// versa. Differentiable in the masks and both transforms.
pub fn task_consistency_loss_var(
    g: &mut Graph,
    m_a: Var,
    m_b: Var,
    t_ab: &TransformVars,
    t_ba: &TransformVars,
    sys: &TpsSystem,
) -> Var {
    let warped_a = warp_var(g, m_a, t_ba, sys);
    let warped_b = warp_var(g, m_b, t_ab, sys);
    let l_ab = bce_var(g, warped_a, m_b);
    let l_ba = bce_var(g, warped_b, m_a);
    g.add(l_ab, l_ba)
}

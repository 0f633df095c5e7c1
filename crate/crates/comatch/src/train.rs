//! Total objective, optimizer, and the training loop.
//!
//! Each step runs every pair of the batch on its own tape (in parallel),
//! averages the per-pair gradients in batch order, and applies one adaptive
//! moment update to the encoder, predictor, and decoder. The extractor is
//! never among the optimized parameters. Everything downstream of the seed
//! is deterministic: batch order, triplet draws, augmentation, and the
//! gradient reduction are all fixed by it.

use crate::autodiff::{Graph, Var};
use crate::data::{augment, AugmentConfig, PairSample};
use crate::geometry::CoordGrid;
use crate::losses::matching::CorrMaskMode;
use crate::losses::{
    contrastive_loss_var, correspondence_mask, cycle_loss_var, match_score_var, matching_loss_var,
    soft_correspondence_var, task_consistency_loss_var, trans_loss_var,
};
use crate::networks::{decode_masks, encode, predict_transform, Bound, Model, ParamSet};
use crate::{Error, Result};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Per-loss on/off switches, the ablation surface.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct LossToggles {
    pub matching: bool,
    pub cycle: bool,
    pub trans: bool,
    pub contrast: bool,
    pub task: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            matching: true,
            cycle: true,
            trans: true,
            contrast: true,
            task: true,
        }
    }
}

impl LossToggles {
    pub fn without(mut self, name: &str) -> Result<Self> {
        match name {
            "matching" => self.matching = false,
            "cycle" => self.cycle = false,
            "trans" => self.trans = false,
            "contrast" => self.contrast = false,
            "task" => self.task = false,
            other => return Err(Error::Config(format!("unknown loss toggle `{other}`"))),
        }
        Ok(self)
    }

    pub const NAMES: [&'static str; 5] = ["matching", "cycle", "trans", "contrast", "task"];
}

/// All scalar training knobs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HyperParams {
    pub lambda_cycle: f64,
    pub lambda_trans: f64,
    pub lambda_contrast: f64,
    pub lambda_task: f64,
    /// Correspondence threshold in feature-grid cell units.
    pub phi: f64,
    /// Contrastive cutoff margin.
    pub margin: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Side of the coordinate grid for the consistency losses.
    pub grid_k: usize,
    pub seed: u64,
    pub toggles: LossToggles,
    /// Soft correspondence weights route matching-loss gradients through
    /// the transform; the hard mask is recomputed each step but constant
    /// under differentiation.
    pub soft_corr_mask: bool,
    /// Let the matching loss backpropagate into the masks instead of
    /// treating them as constants.
    pub mask_flow_in_matching: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub checkpoint_every: usize,
    pub augment: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lambda_cycle: 1.0,
            lambda_trans: 0.5,
            lambda_contrast: 1.0,
            lambda_task: 1.0,
            phi: 1.0,
            margin: 1.0,
            learning_rate: 1e-4,
            batch_size: 8,
            steps: 2000,
            grid_k: 10,
            seed: 0,
            toggles: LossToggles::default(),
            soft_corr_mask: false,
            mask_flow_in_matching: false,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 500,
            augment: false,
        }
    }
}

impl HyperParams {
    pub fn corr_mask_mode(&self) -> CorrMaskMode {
        if self.soft_corr_mask {
            CorrMaskMode::Soft
        } else {
            CorrMaskMode::Hard
        }
    }

    /// Loss weights used in the paper's per-dataset experiments, with the
    /// paper's learning rate and margin. Desk-scale values stay default
    /// elsewhere.
    pub fn preset(name: &str) -> Result<Self> {
        let (lc, lt, lco, lta) = match name {
            "tss" => (5.0, 5.0, 10.0, 10.0),
            "internet" => (5.0, 5.0, 20.0, 10.0),
            "pf-pascal" => (20.0, 10.0, 2.5, 2.5),
            "spair" => (20.0, 20.0, 1.0, 1.0),
            other => return Err(Error::Config(format!("unknown preset `{other}`"))),
        };
        Ok(Self {
            lambda_cycle: lc,
            lambda_trans: lt,
            lambda_contrast: lco,
            lambda_task: lta,
            margin: 2.0,
            learning_rate: 5e-8,
            ..Self::default()
        })
    }
}

/// Per-term values of one evaluation of the objective.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub matching: f64,
    pub cycle: f64,
    pub trans: f64,
    pub contrast: f64,
    pub task: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,total,matching,cycle,trans,contrast,task";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{}",
            self.total, self.matching, self.cycle, self.trans, self.contrast, self.task
        )
    }

    fn check_finite(&self, step: usize) -> Result<()> {
        for (name, v) in [
            ("matching", self.matching),
            ("cycle", self.cycle),
            ("trans", self.trans),
            ("contrast", self.contrast),
            ("task", self.task),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    term: name.to_string(),
                    step,
                });
            }
        }
        Ok(())
    }
}

/// Regular k x k coordinate grid over `[-1, 1]^2`, endpoints included.
pub fn sample_coord_grid(k: usize) -> CoordGrid {
    assert!(k >= 2, "coordinate grid needs k >= 2");
    CoordGrid::regular(k, k)
}

/// Three distinct indices drawn uniformly from `0..n` (ordered uniformly
/// over all distinct triples) by a partial shuffle.
pub fn sample_triplet(n: usize, rng: &mut ChaCha8Rng) -> Result<(usize, usize, usize)> {
    if n < 3 {
        return Err(Error::BatchTooSmall { got: n, need: 3 });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..3 {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    Ok((idx[0], idx[1], idx[2]))
}

struct PairLossVars {
    total: Var,
    breakdown: LossBreakdown,
}

/// Build the full objective for one pair (and a third image for the
/// transitivity term) on the given tape. Toggled-off terms are skipped and
/// contribute exactly zero.
fn pair_loss_graph(
    g: &mut Graph,
    model: &Model,
    bound: &Bound,
    ext_bound: &Bound,
    pair: &PairSample,
    third_image: Option<&ArrayD<f64>>,
    hp: &HyperParams,
) -> Result<PairLossVars> {
    let cfg = &model.cfg;
    let tog = hp.toggles;
    let ia = g.leaf(pair.image_a.clone());
    let ib = g.leaf(pair.image_b.clone());
    let enc_a = encode(g, bound, cfg, ia)?;
    let enc_b = encode(g, bound, cfg, ib)?;
    let s_ab = g.correlate(enc_a.features, enc_b.features);
    let s_ba = g.correlate(enc_b.features, enc_a.features);

    let need_transforms = tog.matching || tog.cycle || tog.trans || tog.task;
    let need_masks = tog.matching || tog.contrast || tog.task;

    let transforms = if need_transforms {
        let t_ab = predict_transform(g, bound, cfg, &model.tps, enc_a.features, enc_b.features, s_ab);
        let t_ba = predict_transform(g, bound, cfg, &model.tps, enc_b.features, enc_a.features, s_ba);
        Some((t_ab, t_ba))
    } else {
        None
    };
    let masks = if need_masks {
        Some(decode_masks(g, bound, cfg, &enc_a, &enc_b, s_ab, s_ba)?)
    } else {
        None
    };

    let mut breakdown = LossBreakdown::default();
    let mut total: Option<Var> = None;
    let add_term = |g: &mut Graph, total: &mut Option<Var>, term: Var, lambda: f64| {
        let scaled = if lambda == 1.0 { term } else { g.scale(term, lambda) };
        *total = Some(match *total {
            Some(t) => g.add(t, scaled),
            None => scaled,
        });
    };

    if tog.matching {
        let (t_ab, t_ba) = transforms.as_ref().unwrap();
        let (m_a, m_b) = masks.as_ref().unwrap();
        let hw = cfg.feature_hw();
        let feat_grid = CoordGrid::regular(hw, hw);
        let n = hw * hw;
        let corr_a = g.reshape(s_ab, &[n, n]);
        let corr_b = g.reshape(s_ba, &[n, n]);
        let (w_a, w_b) = match hp.corr_mask_mode() {
            CorrMaskMode::Hard => {
                let p_ab = t_ab.to_params(g, cfg.tps_k);
                let p_ba = t_ba.to_params(g, cfg.tps_k);
                let m1 = correspondence_mask(&p_ab, &feat_grid, &feat_grid, hp.phi)?;
                let m2 = correspondence_mask(&p_ba, &feat_grid, &feat_grid, hp.phi)?;
                (
                    g.leaf(m1.values.to_shape(IxDyn(&[n, n])).unwrap().to_owned()),
                    g.leaf(m2.values.to_shape(IxDyn(&[n, n])).unwrap().to_owned()),
                )
            }
            CorrMaskMode::Soft => (
                soft_correspondence_var(g, t_ab, &model.tps, &feat_grid, &feat_grid, hp.phi),
                soft_correspondence_var(g, t_ba, &model.tps, &feat_grid, &feat_grid, hp.phi),
            ),
        };
        let score_a = match_score_var(g, corr_a, w_a);
        let score_b = match_score_var(g, corr_b, w_b);
        let s = cfg.downsample();
        let ma_feat = g.avg_pool2(*m_a, s);
        let mb_feat = g.avg_pool2(*m_b, s);
        let ma_flat = g.reshape(ma_feat, &[n]);
        let mb_flat = g.reshape(mb_feat, &[n]);
        let l = matching_loss_var(g, score_a, ma_flat, score_b, mb_flat, !hp.mask_flow_in_matching);
        breakdown.matching = g.scalar_value(l);
        add_term(g, &mut total, l, 1.0);
    }

    if tog.cycle {
        let (t_ab, t_ba) = transforms.as_ref().unwrap();
        let grid = sample_coord_grid(hp.grid_k);
        let l = cycle_loss_var(g, t_ab, t_ba, &model.tps, &grid, &grid);
        breakdown.cycle = g.scalar_value(l);
        add_term(g, &mut total, l, hp.lambda_cycle);
    }

    if tog.trans {
        let third = third_image.ok_or(Error::BatchTooSmall { got: 0, need: 3 })?;
        let (t_ab, _) = transforms.as_ref().unwrap();
        let ic = g.leaf(third.clone());
        let enc_c = encode(g, bound, cfg, ic)?;
        let s_bc = g.correlate(enc_b.features, enc_c.features);
        let t_bc = predict_transform(g, bound, cfg, &model.tps, enc_b.features, enc_c.features, s_bc);
        let s_ca = g.correlate(enc_c.features, enc_a.features);
        let t_ca = predict_transform(g, bound, cfg, &model.tps, enc_c.features, enc_a.features, s_ca);
        let grid = sample_coord_grid(hp.grid_k);
        let l = trans_loss_var(g, t_ab, &t_bc, &t_ca, &model.tps, &grid);
        breakdown.trans = g.scalar_value(l);
        add_term(g, &mut total, l, hp.lambda_trans);
    }

    if tog.contrast {
        let (m_a, m_b) = masks.as_ref().unwrap();
        let l = contrastive_loss_var(g, ext_bound, cfg, ia, ib, *m_a, *m_b, hp.margin)?;
        breakdown.contrast = g.scalar_value(l);
        add_term(g, &mut total, l, hp.lambda_contrast);
    }

    if tog.task {
        let (t_ab, t_ba) = transforms.as_ref().unwrap();
        let (m_a, m_b) = masks.as_ref().unwrap();
        let l = task_consistency_loss_var(g, *m_a, *m_b, t_ab, t_ba, &model.tps);
        breakdown.task = g.scalar_value(l);
        add_term(g, &mut total, l, hp.lambda_task);
    }

    let total = match total {
        Some(t) => t,
        None => g.scalar(0.0),
    };
    breakdown.total = g.scalar_value(total);
    Ok(PairLossVars { total, breakdown })
}

/// Evaluate the objective for one pair without updating anything.
pub fn total_loss(
    model: &Model,
    pair: &PairSample,
    third_image: Option<&ArrayD<f64>>,
    hp: &HyperParams,
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let ext_bound = model.bind_extractor(&mut g);
    let vars = pair_loss_graph(&mut g, model, &bound, &ext_bound, pair, third_image, hp)?;
    Ok(vars.breakdown)
}

/// Moment-based adaptive optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    m: IndexMap<String, ArrayD<f64>>,
    v: IndexMap<String, ArrayD<f64>>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(hp: &HyperParams) -> Self {
        Self {
            m: IndexMap::new(),
            v: IndexMap::new(),
            t: 0,
            beta1: hp.adam_beta1,
            beta2: hp.adam_beta2,
            eps: hp.adam_eps,
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &IndexMap<String, ArrayD<f64>>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (key, grad) in grads {
            let w = params
                .entries
                .get_mut(key)
                .unwrap_or_else(|| panic!("optimizer saw unknown parameter `{key}`"));
            let m = self
                .m
                .entry(key.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(key.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            ndarray::Zip::from(w)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|w, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *w -= lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}

/// Mutable training state.
pub struct TrainState {
    pub model: Model,
    pub opt: Adam,
    pub hp: HyperParams,
    pub step: usize,
    rng: ChaCha8Rng,
    deck: Vec<usize>,
}

impl TrainState {
    pub fn new(model: Model, hp: HyperParams) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(hp.seed);
        let opt = Adam::new(&hp);
        Self {
            model,
            opt,
            hp,
            step: 0,
            rng,
            deck: Vec::new(),
        }
    }

    /// Draw the next batch (indices into the dataset), reshuffling the deck
    /// when it runs out.
    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.hp.batch_size);
        while batch.len() < self.hp.batch_size {
            if self.deck.is_empty() {
                self.deck = (0..n).collect();
                for i in (1..n).rev() {
                    let j = self.rng.gen_range(0..=i);
                    self.deck.swap(i, j);
                }
            }
            batch.push(self.deck.pop().unwrap());
        }
        batch
    }
}

/// One optimizer step over a batch of pairs. Gradients are averaged over
/// pairs in batch order; a learning rate of zero leaves the weights
/// bit-identical.
pub fn train_step(state: &mut TrainState, batch: &[PairSample]) -> Result<LossBreakdown> {
    let hp = state.hp.clone();
    if hp.toggles.trans && batch.len() < 3 {
        return Err(Error::BatchTooSmall {
            got: batch.len(),
            need: 3,
        });
    }
    // Assign every pair a third image for the transitivity term before any
    // parallel work, keeping the rng stream deterministic.
    let mut thirds: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(batch.len());
    for b in 0..batch.len() {
        if hp.toggles.trans {
            let (_, j, k) = sample_triplet(batch.len(), &mut state.rng)?;
            let pick = if k != b { k } else { j };
            thirds.push(Some(batch[pick].image_a.clone()));
        } else {
            thirds.push(None);
        }
    }

    let model = &state.model;
    let results: Vec<Result<(LossBreakdown, Vec<(String, ArrayD<f64>)>)>> = batch
        .par_iter()
        .zip(thirds.par_iter())
        .map(|(pair, third)| {
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let ext_bound = model.bind_extractor(&mut g);
            let vars = pair_loss_graph(&mut g, model, &bound, &ext_bound, pair, third.as_ref(), &hp)?;
            vars.breakdown.check_finite(state.step)?;
            let grads = g.backward(vars.total);
            let collected: Vec<(String, ArrayD<f64>)> = bound
                .iter()
                .filter_map(|(k, &v)| grads.get(v).map(|gr| (k.clone(), gr.clone())))
                .collect();
            Ok((vars.breakdown, collected))
        })
        .collect();

    let mut mean = LossBreakdown::default();
    let mut acc: IndexMap<String, ArrayD<f64>> = IndexMap::new();
    let n = batch.len() as f64;
    for r in results {
        let (bd, grads) = r?;
        mean.total += bd.total / n;
        mean.matching += bd.matching / n;
        mean.cycle += bd.cycle / n;
        mean.trans += bd.trans / n;
        mean.contrast += bd.contrast / n;
        mean.task += bd.task / n;
        for (k, g) in grads {
            match acc.get_mut(&k) {
                Some(a) => *a += &g,
                None => {
                    acc.insert(k, g);
                }
            }
        }
    }
    for (_, g) in acc.iter_mut() {
        *g /= n;
    }
    state
        .opt
        .update(&mut state.model.learnable, &acc, hp.learning_rate);
    state.step += 1;
    Ok(mean)
}

/// Artifacts produced by [`train`].
pub struct TrainOutcome {
    pub history: Vec<LossBreakdown>,
}

/// Run the full loop: assemble batches, step, log a CSV row per step, and
/// checkpoint periodically when an output directory is given.
pub fn train(
    state: &mut TrainState,
    dataset: &[PairSample],
    aug: Option<&AugmentConfig>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Config("empty training dataset".into()));
    }
    let mut log: Option<std::fs::File> = None;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
        let mut f = std::fs::File::create(dir.join("loss.csv"))?;
        writeln!(f, "{}", LossBreakdown::CSV_HEADER)?;
        log = Some(f);
    }
    let mut history = Vec::with_capacity(state.hp.steps);
    for _ in 0..state.hp.steps {
        let idx = state.next_batch(dataset.len());
        let batch: Vec<PairSample> = idx
            .iter()
            .map(|&i| {
                if state.hp.augment {
                    if let Some(cfg) = aug {
                        return augment(&dataset[i], &mut state.rng, cfg);
                    }
                }
                dataset[i].clone()
            })
            .collect();
        let bd = train_step(state, &batch)?;
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", bd.csv_row(state.step))?;
        }
        history.push(bd);
        if let Some(dir) = out_dir {
            let every = state.hp.checkpoint_every;
            if every > 0 && state.step % every == 0 {
                let path = dir.join(format!("checkpoints/step_{:06}.json", state.step));
                crate::checkpoint::save(&path, &state.model, &state.hp)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        crate::checkpoint::save(&dir.join("checkpoints/final.json"), &state.model, &state.hp)?;
    }
    Ok(TrainOutcome { history })
}

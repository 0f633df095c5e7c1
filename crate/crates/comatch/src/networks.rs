//! The four sub-networks: encoder, transformation predictor, mask decoder,
//! and the fixed semantic extractor.
//!
//! Desk-scale stand-ins for the pretrained backbones: small seeded
//! convolutional stacks. The encoder downsamples by 8 with three stride-2
//! blocks; the predictor regresses an affine stage from the correlation map,
//! aligns the features, re-correlates, and regresses a TPS stage; the
//! decoder is siamese over `concat(features, correlation)` with skip
//! connections from the encoder stages; the extractor is a frozen random
//! stack with global average pooling.
//!
//! The predictor heads start with zero weights and identity biases, so the
//! cascade is exactly the identity before the first optimizer step — the
//! guard against the degenerate always-identity optimum collapsing training
//! at the start.

use crate::autodiff::{Graph, Var};
use crate::geometry::{TpsSystem, TransformVars};
use crate::{Error, Result};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// How the decoder undoes the encoder's downsampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    /// Nearest-neighbor upsampling followed by convolution (default; no
    /// checkerboard artifacts on tiny masks).
    Nearest,
    /// Zero-insertion upsampling followed by convolution, i.e. a stride-2
    /// transposed convolution.
    Deconv,
}

/// Architecture knobs. `enc_channels` lists the output channels of the
/// stride-2 encoder blocks; the last entry is the feature dimension `d` and
/// the length fixes the downsample factor `s = 2^len`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetConfig {
    pub resolution: usize,
    pub enc_channels: Vec<usize>,
    pub pred_channels: (usize, usize),
    pub dec_channels: Vec<usize>,
    pub ext_channels: Vec<usize>,
    pub semantic_dim: usize,
    pub tps_k: usize,
    pub upsample: UpsampleMode,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            resolution: 48,
            enc_channels: vec![16, 32, 64],
            pred_channels: (32, 16),
            dec_channels: vec![48, 24, 12, 6],
            ext_channels: vec![8, 16, 32],
            semantic_dim: 128,
            tps_k: crate::geometry::DEFAULT_TPS_K,
            upsample: UpsampleMode::Nearest,
        }
    }
}

impl NetConfig {
    pub fn downsample(&self) -> usize {
        1 << self.enc_channels.len()
    }

    pub fn feature_hw(&self) -> usize {
        self.resolution / self.downsample()
    }

    pub fn feature_dim(&self) -> usize {
        *self.enc_channels.last().unwrap()
    }

    /// Flattened correlation axis length `h*w` at feature resolution.
    pub fn corr_dim(&self) -> usize {
        self.feature_hw() * self.feature_hw()
    }
}

/// Named weight arrays with a stable iteration order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    pub entries: IndexMap<String, ArrayD<f64>>,
}

impl ParamSet {
    pub fn insert(&mut self, key: &str, value: ArrayD<f64>) {
        self.entries.insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> &ArrayD<f64> {
        self.entries
            .get(key)
            .unwrap_or_else(|| panic!("missing parameter `{key}`"))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }

    /// FNV-1a over names and raw f64 bits; stable across runs and platforms
    /// with identical values.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (k, v) in &self.entries {
            eat(k.as_bytes());
            for x in v.iter() {
                eat(&x.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Parameters bound onto a tape as leaves for one forward pass.
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, key: &str) -> Var {
        *self
            .vars
            .get(key)
            .unwrap_or_else(|| panic!("unbound parameter `{key}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Encoder output: the feature map plus the intermediate activations used
/// as decoder skip connections (finest first).
pub struct Encoded {
    pub features: Var,
    pub skips: Vec<Var>,
}

/// The full model: learnable weights (encoder, predictor, decoder), the
/// frozen extractor, and the shared TPS system.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: NetConfig,
    pub learnable: ParamSet,
    pub extractor: ParamSet,
    pub tps: Arc<TpsSystem>,
}

fn he_conv(
    rng: &mut ChaCha8Rng,
    k: usize,
    cin: usize,
    cout: usize,
    scale: f64,
) -> (ArrayD<f64>, ArrayD<f64>) {
    let fan_in = (k * k * cin) as f64;
    let std = scale * (2.0 / fan_in).sqrt();
    let w = ArrayD::from_shape_fn(IxDyn(&[k * k * cin, cout]), |_| {
        // Box-Muller keeps us off rand_distr for one distribution.
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    });
    let b = ArrayD::zeros(IxDyn(&[cout]));
    (w, b)
}

impl Model {
    /// Build and seed a fresh model. The extractor uses an independent
    /// stream of the same seed so that optimizing the rest never perturbs
    /// its values.
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        if cfg.resolution % cfg.downsample() != 0 {
            return Err(Error::BadResolution {
                h: cfg.resolution,
                w: cfg.resolution,
                s: cfg.downsample(),
            });
        }
        let mut p = ParamSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        // Encoder: stride-2 conv blocks.
        let mut cin = 3;
        for (i, &cout) in cfg.enc_channels.iter().enumerate() {
            let (w, b) = he_conv(&mut rng, 3, cin, cout, 1.0);
            p.insert(&format!("enc.c{i}.w"), w);
            p.insert(&format!("enc.c{i}.b"), b);
            cin = cout;
        }

        // Predictor: per stage, two convs over the correlation map and a
        // zero-initialized regression head with an identity bias.
        let corr = cfg.corr_dim();
        let hw = cfg.feature_hw();
        let (pc1, pc2) = cfg.pred_channels;
        for (stage, out_dim, ident) in [
            ("affine", 6, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            ("tps", 2 * cfg.tps_k * cfg.tps_k, vec![0.0; 2 * cfg.tps_k * cfg.tps_k]),
        ] {
            let (w, b) = he_conv(&mut rng, 3, corr, pc1, 1.0);
            p.insert(&format!("pred.{stage}.c0.w"), w);
            p.insert(&format!("pred.{stage}.c0.b"), b);
            let (w, b) = he_conv(&mut rng, 3, pc1, pc2, 1.0);
            p.insert(&format!("pred.{stage}.c1.w"), w);
            p.insert(&format!("pred.{stage}.c1.b"), b);
            p.insert(
                &format!("pred.{stage}.fc.w"),
                ArrayD::zeros(IxDyn(&[hw * hw * pc2, out_dim])),
            );
            p.insert(
                &format!("pred.{stage}.fc.b"),
                ArrayD::from_shape_vec(IxDyn(&[out_dim]), ident).unwrap(),
            );
        }

        // Decoder: pre-conv at feature resolution, then one up-block per
        // encoder block. Skip channels join after each upsample while a
        // matching encoder activation exists.
        let d = cfg.feature_dim();
        let mut cin = d + corr;
        let n_blocks = cfg.enc_channels.len();
        let mut dec_ch = cfg.dec_channels.clone();
        assert_eq!(
            dec_ch.len(),
            n_blocks + 1,
            "dec_channels must list pre-conv plus one width per block"
        );
        let pre = dec_ch.remove(0);
        let (w, b) = he_conv(&mut rng, 3, cin, pre, 1.0);
        p.insert("dec.pre.w", w);
        p.insert("dec.pre.b", b);
        cin = pre;
        for (i, &cout) in dec_ch.iter().enumerate() {
            // After upsample i the resolution matches encoder activation
            // n_blocks-2-i (when it exists; the last block has no skip).
            let skip_ch = if i + 2 <= n_blocks {
                cfg.enc_channels[n_blocks - 2 - i]
            } else {
                0
            };
            let (w, b) = he_conv(&mut rng, 3, cin + skip_ch, cout, 1.0);
            p.insert(&format!("dec.b{i}.c0.w"), w);
            p.insert(&format!("dec.b{i}.c0.b"), b);
            let (w, b) = he_conv(&mut rng, 3, cout, cout, 1.0);
            p.insert(&format!("dec.b{i}.c1.w"), w);
            p.insert(&format!("dec.b{i}.c1.b"), b);
            cin = cout;
        }
        // Small (not zero) final weights: masks start near 0.5 with enough
        // variation that the contrastive hinge is active from step one.
        let (w, b) = he_conv(&mut rng, 1, cin, 1, 0.1);
        p.insert("dec.out.w", w);
        p.insert("dec.out.b", b);

        // Frozen extractor on its own stream.
        let mut ext = ParamSet::default();
        let mut ext_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d_u64);
        let mut cin = 3;
        for (i, &cout) in cfg.ext_channels.iter().enumerate() {
            let (w, b) = he_conv(&mut ext_rng, 3, cin, cout, 1.0);
            ext.insert(&format!("ext.c{i}.w"), w);
            ext.insert(&format!("ext.c{i}.b"), b);
            cin = cout;
        }
        let (w, b) = he_conv(&mut ext_rng, 1, cin, cfg.semantic_dim, 1.0);
        ext.insert("ext.proj.w", w);
        ext.insert("ext.proj.b", b);

        let tps = TpsSystem::cached(cfg.tps_k);
        Ok(Self {
            cfg,
            learnable: p,
            extractor: ext,
            tps,
        })
    }

    /// Bind every learnable parameter onto a tape.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        let vars = self
            .learnable
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), g.leaf(v.clone())))
            .collect();
        Bound { vars }
    }

    /// Bind the frozen extractor. Gradients may flow *through* these nodes
    /// to the input image, but the optimizer never reads them.
    pub fn bind_extractor(&self, g: &mut Graph) -> Bound {
        let vars = self
            .extractor
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), g.leaf(v.clone())))
            .collect();
        Bound { vars }
    }
}

fn conv_relu(g: &mut Graph, bound: &Bound, key: &str, x: Var, stride: usize) -> Var {
    let c = g.conv2d(x, bound.var(&format!("{key}.w")), 3, stride, 1);
    let c = g.bias_add(c, bound.var(&format!("{key}.b")));
    g.relu(c)
}

/// Encode an image `[H, W, 3]` into features `[H/s, W/s, d]` plus the skip
/// activations.
pub fn encode(g: &mut Graph, bound: &Bound, cfg: &NetConfig, image: Var) -> Result<Encoded> {
    let shape = g.value(image).shape().to_vec();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::ShapeMismatch(format!(
            "encode expects [H,W,3], got {shape:?}"
        )));
    }
    let s = cfg.downsample();
    if shape[0] % s != 0 || shape[1] % s != 0 {
        return Err(Error::BadResolution {
            h: shape[0],
            w: shape[1],
            s,
        });
    }
    let mut x = image;
    let mut skips = Vec::new();
    for i in 0..cfg.enc_channels.len() {
        x = conv_relu(g, bound, &format!("enc.c{i}"), x, 2);
        skips.push(x);
    }
    let features = skips.pop().unwrap();
    Ok(Encoded { features, skips })
}

/// Differentiable inverse of an affine `[6]` node, via the closed-form
/// 2x2 adjugate. The determinant is nudged away from zero.
pub fn affine_inverse_var(g: &mut Graph, coeffs: Var) -> Var {
    let a = g.slice_1d(coeffs, 0, 1);
    let b = g.slice_1d(coeffs, 1, 1);
    let c = g.slice_1d(coeffs, 2, 1);
    let d = g.slice_1d(coeffs, 3, 1);
    let e = g.slice_1d(coeffs, 4, 1);
    let f = g.slice_1d(coeffs, 5, 1);
    let ae = g.mul(a, e);
    let bd = g.mul(b, d);
    let det = g.sub(ae, bd);
    let det = g.sign_offset(det, 1e-9);
    let ia = g.div(e, det);
    let nb = g.neg(b);
    let ib = g.div(nb, det);
    let nd = g.neg(d);
    let id = g.div(nd, det);
    let ie = g.div(a, det);
    let iac = g.mul(ia, c);
    let ibf = g.mul(ib, f);
    let s1 = g.add(iac, ibf);
    let ic = g.neg(s1);
    let idc = g.mul(id, c);
    let ief = g.mul(ie, f);
    let s2 = g.add(idc, ief);
    let if_ = g.neg(s2);
    g.concat(0, &[ia, ib, ic, id, ie, if_])
}

fn predictor_stage(g: &mut Graph, bound: &Bound, cfg: &NetConfig, stage: &str, corr: Var) -> Var {
    let c0 = conv_relu(g, bound, &format!("pred.{stage}.c0"), corr, 1);
    let c1 = conv_relu(g, bound, &format!("pred.{stage}.c1"), c0, 1);
    let hw = cfg.feature_hw();
    let flat = g.reshape(c1, &[1, hw * hw * cfg.pred_channels.1]);
    let fc = g.matmul(flat, bound.var(&format!("pred.{stage}.fc.w")));
    let n_out = g.value(fc).shape()[1];
    let fc = g.reshape(fc, &[n_out]);
    let bias = bound.var(&format!("pred.{stage}.fc.b"));
    g.add(fc, bias)
}

/// Predict the cascaded transform aligning A to B. Stage one regresses an
/// affine from the first-stage correlation; the features of A are then
/// warped into alignment (backward sampling through the affine's inverse),
/// correlation is recomputed, and stage two regresses TPS offsets.
pub fn predict_transform(
    g: &mut Graph,
    bound: &Bound,
    cfg: &NetConfig,
    sys: &TpsSystem,
    f_a: Var,
    f_b: Var,
    s_ab: Var,
) -> TransformVars {
    let affine = predictor_stage(g, bound, cfg, "affine", s_ab);
    let inv = affine_inverse_var(g, affine);
    let aligned = crate::geometry::warp_var(g, f_a, &TransformVars::Affine(inv), sys);
    let s2 = g.correlate(aligned, f_b);
    let tps = predictor_stage(g, bound, cfg, "tps", s2);
    TransformVars::Cascade { affine, tps }
}

fn decode_stream(g: &mut Graph, bound: &Bound, cfg: &NetConfig, enc: &Encoded, s: Var) -> Var {
    let hw = cfg.feature_hw();
    let s3 = g.reshape(s, &[hw, hw, cfg.corr_dim()]);
    let mut x = g.concat(2, &[enc.features, s3]);
    x = conv_relu(g, bound, "dec.pre", x, 1);
    let n_blocks = cfg.enc_channels.len();
    for i in 0..n_blocks {
        x = match cfg.upsample {
            UpsampleMode::Nearest => g.upsample_nearest2(x),
            UpsampleMode::Deconv => g.upsample_zeros2(x),
        };
        if i + 2 <= n_blocks {
            let skip = enc.skips[n_blocks - 2 - i];
            x = g.concat(2, &[x, skip]);
        }
        x = conv_relu(g, bound, &format!("dec.b{i}.c0"), x, 1);
        x = conv_relu(g, bound, &format!("dec.b{i}.c1"), x, 1);
    }
    let logits = g.conv2d(x, bound.var("dec.out.w"), 1, 1, 0);
    let logits = g.bias_add(logits, bound.var("dec.out.b"));
    let res = g.value(logits).shape()[0];
    let flat = g.reshape(logits, &[res, res]);
    g.sigmoid(flat)
}

/// Produce both soft masks with the shared (siamese) decoder weights.
/// Swapping the inputs swaps the outputs exactly.
pub fn decode_masks(
    g: &mut Graph,
    bound: &Bound,
    cfg: &NetConfig,
    enc_a: &Encoded,
    enc_b: &Encoded,
    s_ab: Var,
    s_ba: Var,
) -> Result<(Var, Var)> {
    let hw = cfg.feature_hw();
    for (name, s) in [("S_AB", s_ab), ("S_BA", s_ba)] {
        let shape = g.value(s).shape().to_vec();
        if shape != [hw, hw, cfg.corr_dim()] {
            return Err(Error::ShapeMismatch(format!(
                "{name} has shape {shape:?}, expected [{hw},{hw},{}]",
                cfg.corr_dim()
            )));
        }
    }
    let m_a = decode_stream(g, bound, cfg, enc_a, s_ab);
    let m_b = decode_stream(g, bound, cfg, enc_b, s_ba);
    Ok((m_a, m_b))
}

/// Fixed semantic embedding of an image: frozen conv stack, 1x1 projection,
/// global average pooling to `[c]`.
pub fn extract_semantic(g: &mut Graph, ext: &Bound, cfg: &NetConfig, image: Var) -> Var {
    let mut x = image;
    for i in 0..cfg.ext_channels.len() {
        x = conv_relu(g, ext, &format!("ext.c{i}"), x, 2);
    }
    let proj = g.conv2d(x, ext.var("ext.proj.w"), 1, 1, 0);
    let proj = g.bias_add(proj, ext.var("ext.proj.b"));
    g.global_avg_pool(proj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_transform, CoordGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(res: usize, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(&[res, res, 3]), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let cfg = NetConfig::default();
        let model = Model::new(cfg.clone(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = rand_image(48, &mut rng);
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let iv = g.leaf(img.clone());
        let enc = encode(&mut g, &bound, &cfg, iv).unwrap();
        assert_eq!(g.value(enc.features).shape(), &[6, 6, 64]);
        let iv2 = g.leaf(img);
        let enc2 = encode(&mut g, &bound, &cfg, iv2).unwrap();
        assert_eq!(
            g.value(enc.features).as_slice().unwrap(),
            g.value(enc2.features).as_slice().unwrap()
        );
    }

    #[test]
    fn encode_rejects_odd_resolution() {
        let cfg = NetConfig::default();
        let model = Model::new(cfg.clone(), 1).unwrap();
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let iv = g.leaf(ArrayD::zeros(IxDyn(&[50, 50, 3])));
        assert!(matches!(
            encode(&mut g, &bound, &cfg, iv),
            Err(Error::BadResolution { .. })
        ));
    }

    #[test]
    fn zero_image_through_zero_bias_encoder_is_zero() {
        let cfg = NetConfig::default();
        let model = Model::new(cfg.clone(), 5).unwrap();
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let iv = g.leaf(ArrayD::zeros(IxDyn(&[48, 48, 3])));
        let enc = encode(&mut g, &bound, &cfg, iv).unwrap();
        assert!(g.value(enc.features).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fresh_predictor_returns_identity_cascade() {
        let cfg = NetConfig::default();
        let model = Model::new(cfg.clone(), 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let ia = g.leaf(rand_image(48, &mut rng));
        let ib = g.leaf(rand_image(48, &mut rng));
        let ea = encode(&mut g, &bound, &cfg, ia).unwrap();
        let eb = encode(&mut g, &bound, &cfg, ib).unwrap();
        let s_ab = g.correlate(ea.features, eb.features);
        let t = predict_transform(&mut g, &bound, &cfg, &model.tps, ea.features, eb.features, s_ab);
        let params = t.to_params(&g, cfg.tps_k);
        let grid = CoordGrid::regular(10, 10);
        let mapped = apply_transform(&params, &grid).unwrap();
        for (p, q) in grid.points.iter().zip(&mapped.points) {
            assert!(p.dist(*q) < 1e-10, "displaced by {}", p.dist(*q));
        }
    }

    #[test]
    fn siamese_decoder_swaps_outputs_exactly() {
        let cfg = NetConfig::default();
        let model = Model::new(cfg.clone(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let ia = g.leaf(rand_image(48, &mut rng));
        let ib = g.leaf(rand_image(48, &mut rng));
        let ea = encode(&mut g, &bound, &cfg, ia).unwrap();
        let eb = encode(&mut g, &bound, &cfg, ib).unwrap();
        let s_ab = g.correlate(ea.features, eb.features);
        let s_ba = g.correlate(eb.features, ea.features);
        let (m_a, m_b) = decode_masks(&mut g, &bound, &cfg, &ea, &eb, s_ab, s_ba).unwrap();
        let (m_b2, m_a2) = decode_masks(&mut g, &bound, &cfg, &eb, &ea, s_ba, s_ab).unwrap();
        assert_eq!(
            g.value(m_a).as_slice().unwrap(),
            g.value(m_a2).as_slice().unwrap()
        );
        assert_eq!(
            g.value(m_b).as_slice().unwrap(),
            g.value(m_b2).as_slice().unwrap()
        );
        // Bounded strictly inside (0,1) and full resolution.
        assert_eq!(g.value(m_a).shape(), &[48, 48]);
        for &v in g.value(m_a).iter() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn extractor_is_deterministic_and_sensitive() {
        let cfg = NetConfig::default();
        let model = Model::new(cfg.clone(), 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let img = rand_image(48, &mut rng);
        let mut g = Graph::new();
        let ext = model.bind_extractor(&mut g);
        let v1 = g.leaf(img.clone());
        let e1 = extract_semantic(&mut g, &ext, &cfg, v1);
        let v2 = g.leaf(img.clone());
        let e2 = extract_semantic(&mut g, &ext, &cfg, v2);
        assert_eq!(g.value(e1).len(), cfg.semantic_dim);
        assert_eq!(
            g.value(e1).as_slice().unwrap(),
            g.value(e2).as_slice().unwrap()
        );
        // One-pixel change must move the embedding.
        let mut img2 = img;
        img2[[20, 20, 0]] = (img2[[20, 20, 0]] + 0.5) % 1.0;
        let v3 = g.leaf(img2);
        let e3 = extract_semantic(&mut g, &ext, &cfg, v3);
        let diff: f64 = g
            .value(e1)
            .iter()
            .zip(g.value(e3).iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn affine_inverse_var_matches_eager_inverse() {
        use crate::geometry::AffineCoeffs;
        let a = AffineCoeffs([1.2, 0.1, -0.3, -0.05, 0.9, 0.2]);
        let inv = a.inverse().unwrap();
        let mut g = Graph::new();
        let v = g.leaf(ArrayD::from_shape_vec(IxDyn(&[6]), a.0.to_vec()).unwrap());
        let iv = affine_inverse_var(&mut g, v);
        for i in 0..6 {
            assert!((g.value(iv)[[i]] - inv.0[i]).abs() < 1e-7);
        }
    }
}

//! Synthetic pair generation with known ground truth, manifest-backed pair
//! loading, and augmentation.
//!
//! A synthetic pair shares one textured foreground shape: image A renders it
//! at its sampled pose on a cluttered background, image B renders the same
//! shape pushed through a sampled ground-truth transform onto an independent
//! background. Pixels of B are produced by inverse-mapping through the
//! transform, so foreground texture corresponds exactly across the pair and
//! masks and keypoints are consistent by construction.
//!
//! On disk a dataset is a directory of PNGs plus `manifest.csv` with columns
//! `image_a, image_b, mask_a, mask_b, keypoints_a, keypoints_b, bbox` and a
//! `provenance.json` recording the generating config and seed. Keypoints are
//! semicolon-separated `x,y` pixel pairs; masks are 8-bit single-channel
//! with >127 meaning foreground; `bbox` is `h,w` in pixels.

use crate::geometry::{
    apply_point, invert_point, AffineCoeffs, Point2, TransformParams, TpsOffsets,
};
use crate::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// An image pair with whatever ground truth is available.
#[derive(Clone, Debug)]
pub struct PairSample {
    /// `[H, W, 3]`, values in [0, 1].
    pub image_a: ArrayD<f64>,
    pub image_b: ArrayD<f64>,
    /// Ground-truth coordinate map A -> B, when known.
    pub gt_transform: Option<TransformParams>,
    /// `[H, W]` with values in {0, 1}.
    pub gt_mask_a: Option<ArrayD<f64>>,
    pub gt_mask_b: Option<ArrayD<f64>>,
    /// Corresponding normalized points (p_A, p_B); empty when unannotated.
    pub keypoints: Vec<(Point2, Point2)>,
    /// (height, width) of the object box in B, pixels; used by PCK.
    pub bbox_b: Option<(usize, usize)>,
    pub class: Option<String>,
}

impl PairSample {
    pub fn resolution(&self) -> (usize, usize) {
        let s = self.image_a.shape();
        (s[0], s[1])
    }
}

/// Foreground shape family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Ellipse,
    Rectangle,
    Blob,
}

impl std::str::FromStr for ShapeFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ellipse" => Ok(Self::Ellipse),
            "rectangle" => Ok(Self::Rectangle),
            "blob" => Ok(Self::Blob),
            other => Err(Error::Config(format!("unknown shape family `{other}`"))),
        }
    }
}

/// Generation knobs. Transform ranges must keep at least 60% of the
/// foreground in bounds after warping; [`gen_synthetic_pair`] enforces this
/// per sample by resampling the transform.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub resolution: usize,
    pub shape: ShapeFamily,
    /// Shape radius range in normalized units.
    pub radius_range: (f64, f64),
    /// Rotation jitter of the pair transform, radians.
    pub max_rotation: f64,
    pub scale_range: (f64, f64),
    /// Translation jitter of the pair transform, normalized units.
    pub max_translation: f64,
    /// Shear jitter of the pair transform.
    pub max_shear: f64,
    /// Magnitude of TPS control-point jitter in the ground-truth transform;
    /// zero keeps the ground truth purely affine.
    pub tps_jitter: f64,
    /// Number of clutter blobs per background.
    pub clutter: usize,
    /// Keypoints recorded per pair.
    pub keypoints: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            resolution: 48,
            shape: ShapeFamily::Blob,
            radius_range: (0.38, 0.55),
            max_rotation: 0.35,
            scale_range: (0.85, 1.15),
            max_translation: 0.22,
            max_shear: 0.08,
            tps_jitter: 0.0,
            clutter: 5,
            keypoints: 6,
        }
    }
}

/// Minimum fraction of foreground that must stay in-bounds after warping.
const MIN_FOREGROUND_RETENTION: f64 = 0.6;

struct Shape {
    center: (f64, f64),
    radii: (f64, f64),
    rot: f64,
    family: ShapeFamily,
    /// Radial harmonics (amplitude, phase) for blobs.
    harmonics: Vec<(f64, f64)>,
}

impl Shape {
    fn sample(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Self {
        let harmonics = (2..5)
            .map(|_| (rng.gen_range(0.04..0.14), rng.gen_range(0.0..std::f64::consts::TAU)))
            .collect();
        Self {
            center: (rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)),
            radii: (
                rng.gen_range(cfg.radius_range.0..cfg.radius_range.1),
                rng.gen_range(cfg.radius_range.0..cfg.radius_range.1),
            ),
            rot: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            family: cfg.shape,
            harmonics,
        }
    }

    /// Shape-local coordinates: translate, rotate, scale to the unit frame.
    fn local(&self, p: Point2) -> (f64, f64) {
        let dx = p.x - self.center.0;
        let dy = p.y - self.center.1;
        let (s, c) = self.rot.sin_cos();
        let lx = (c * dx + s * dy) / self.radii.0;
        let ly = (-s * dx + c * dy) / self.radii.1;
        (lx, ly)
    }

    fn member(&self, p: Point2) -> bool {
        let (lx, ly) = self.local(p);
        match self.family {
            ShapeFamily::Ellipse => lx * lx + ly * ly <= 1.0,
            ShapeFamily::Rectangle => lx.abs() <= 0.9 && ly.abs() <= 0.9,
            ShapeFamily::Blob => {
                let r = (lx * lx + ly * ly).sqrt();
                let phi = ly.atan2(lx);
                let mut bound = 1.0;
                for (i, &(a, ph)) in self.harmonics.iter().enumerate() {
                    bound += a * ((i as f64 + 2.0) * phi + ph).sin();
                }
                r <= bound
            }
        }
    }
}

struct Texture {
    base: [f64; 3],
    amp: [f64; 3],
    freq: (f64, f64),
    phase: (f64, f64),
}

impl Texture {
    fn foreground(rng: &mut ChaCha8Rng) -> Self {
        Self {
            base: [
                rng.gen_range(0.6..0.9),
                rng.gen_range(0.3..0.55),
                rng.gen_range(0.08..0.3),
            ],
            amp: [
                rng.gen_range(0.08..0.2),
                rng.gen_range(0.08..0.2),
                rng.gen_range(0.03..0.1),
            ],
            freq: (rng.gen_range(4.0..9.0), rng.gen_range(4.0..9.0)),
            phase: (rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28)),
        }
    }

    fn background(rng: &mut ChaCha8Rng) -> Self {
        Self {
            base: [
                rng.gen_range(0.06..0.25),
                rng.gen_range(0.15..0.4),
                rng.gen_range(0.45..0.8),
            ],
            amp: [
                rng.gen_range(0.02..0.08),
                rng.gen_range(0.02..0.08),
                rng.gen_range(0.02..0.08),
            ],
            freq: (rng.gen_range(1.5..4.0), rng.gen_range(1.5..4.0)),
            phase: (rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28)),
        }
    }

    fn color(&self, u: (f64, f64)) -> [f64; 3] {
        let wave = ((self.freq.0 * u.0 + self.phase.0).sin()
            + (self.freq.1 * u.1 + self.phase.1).sin())
            * 0.5;
        let mut c = [0.0; 3];
        for ch in 0..3 {
            c[ch] = (self.base[ch] + self.amp[ch] * wave).clamp(0.0, 1.0);
        }
        c
    }
}

struct Background {
    texture: Texture,
    clutter: Vec<(Shape, [f64; 3])>,
}

impl Background {
    fn sample(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Self {
        let texture = Texture::background(rng);
        let clutter = (0..cfg.clutter)
            .map(|_| {
                let shape = Shape {
                    center: (rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9)),
                    radii: (rng.gen_range(0.06..0.18), rng.gen_range(0.06..0.18)),
                    rot: rng.gen_range(-3.14..3.14),
                    family: ShapeFamily::Ellipse,
                    harmonics: Vec::new(),
                };
                let color = [
                    rng.gen_range(0.1..0.4),
                    rng.gen_range(0.3..0.6),
                    rng.gen_range(0.3..0.7),
                ];
                (shape, color)
            })
            .collect();
        Self { texture, clutter }
    }

    fn color(&self, p: Point2) -> [f64; 3] {
        for (shape, color) in &self.clutter {
            if shape.member(p) {
                return *color;
            }
        }
        self.texture.color((p.x, p.y))
    }
}

fn pixel_to_norm(px: usize, py: usize, w: usize, h: usize) -> Point2 {
    Point2::new(
        -1.0 + 2.0 * px as f64 / (w - 1) as f64,
        -1.0 + 2.0 * py as f64 / (h - 1) as f64,
    )
}

fn sample_gt_transform(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> TransformParams {
    let rot = rng.gen_range(-cfg.max_rotation..cfg.max_rotation);
    let scale = rng.gen_range(cfg.scale_range.0..cfg.scale_range.1);
    let tx = rng.gen_range(-cfg.max_translation..cfg.max_translation);
    let ty = rng.gen_range(-cfg.max_translation..cfg.max_translation);
    let shear = rng.gen_range(-cfg.max_shear.max(1e-12)..cfg.max_shear.max(1e-12));
    let (s, c) = rot.sin_cos();
    let affine = AffineCoeffs([
        scale * c,
        scale * (-s + shear),
        tx,
        scale * s,
        scale * (c + shear * s),
        ty,
    ]);
    if cfg.tps_jitter > 0.0 {
        let k = crate::geometry::DEFAULT_TPS_K;
        let offsets = (0..2 * k * k)
            .map(|_| rng.gen_range(-cfg.tps_jitter..cfg.tps_jitter))
            .collect();
        TransformParams::Cascade(affine, TpsOffsets { offsets, k })
    } else {
        TransformParams::Affine(affine)
    }
}

/// Fraction of the shape's area that lands inside `[-1,1]^2` under `t`,
/// estimated on a coarse pixel grid.
fn foreground_retention(shape: &Shape, t: &TransformParams, res: usize) -> f64 {
    let mut total = 0usize;
    let mut kept = 0usize;
    for py in 0..res {
        for px in 0..res {
            let p = pixel_to_norm(px, py, res, res);
            if shape.member(p) {
                total += 1;
                let q = apply_point(t, p);
                if q.x.abs() <= 1.0 && q.y.abs() <= 1.0 {
                    kept += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        kept as f64 / total as f64
    }
}

/// Generate one synthetic pair. Deterministic given (cfg, rng state).
pub fn gen_synthetic_pair(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> PairSample {
    let res = cfg.resolution;
    let shape = Shape::sample(cfg, rng);
    let fg = Texture::foreground(rng);
    let bg_a = Background::sample(cfg, rng);
    let bg_b = Background::sample(cfg, rng);

    // Resample the transform until enough foreground stays visible.
    let mut gt = sample_gt_transform(cfg, rng);
    for _ in 0..50 {
        if foreground_retention(&shape, &gt, 24) >= MIN_FOREGROUND_RETENTION {
            break;
        }
        gt = sample_gt_transform(cfg, rng);
    }

    let mut image_a = ArrayD::zeros(IxDyn(&[res, res, 3]));
    let mut mask_a = ArrayD::zeros(IxDyn(&[res, res]));
    for py in 0..res {
        for px in 0..res {
            let p = pixel_to_norm(px, py, res, res);
            let color = if shape.member(p) {
                mask_a[[py, px]] = 1.0;
                fg.color(shape.local(p))
            } else {
                bg_a.color(p)
            };
            for ch in 0..3 {
                image_a[[py, px, ch]] = color[ch];
            }
        }
    }

    let mut image_b = ArrayD::zeros(IxDyn(&[res, res, 3]));
    let mut mask_b = ArrayD::zeros(IxDyn(&[res, res]));
    for py in 0..res {
        for px in 0..res {
            let q = pixel_to_norm(px, py, res, res);
            let pre = invert_point(&gt, q, 1e-9);
            let color = match pre {
                Some(p) if shape.member(p) => {
                    mask_b[[py, px]] = 1.0;
                    fg.color(shape.local(p))
                }
                _ => bg_b.color(q),
            };
            for ch in 0..3 {
                image_b[[py, px, ch]] = color[ch];
            }
        }
    }

    // Keypoints: rejection-sample points on the shape whose images stay
    // comfortably inside B.
    let mut keypoints = Vec::new();
    let mut attempts = 0;
    while keypoints.len() < cfg.keypoints && attempts < 4000 {
        attempts += 1;
        let p = Point2::new(rng.gen_range(-0.95..0.95), rng.gen_range(-0.95..0.95));
        if !shape.member(p) {
            continue;
        }
        let q = apply_point(&gt, p);
        if q.x.abs() <= 0.97 && q.y.abs() <= 0.97 {
            keypoints.push((p, q));
        }
    }

    let bbox_b = mask_bbox(&mask_b);

    PairSample {
        image_a,
        image_b,
        gt_transform: Some(gt),
        gt_mask_a: Some(mask_a),
        gt_mask_b: Some(mask_b),
        keypoints,
        bbox_b,
        class: Some(format!("{:?}", cfg.shape).to_lowercase()),
    }
}

/// (height, width) of the tight foreground bounding box, in pixels.
pub fn mask_bbox(mask: &ArrayD<f64>) -> Option<(usize, usize)> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0usize, w, 0usize);
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] > 0.5 {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    if y0 > y1 {
        None
    } else {
        Some((y1 - y0 + 1, x1 - x0 + 1))
    }
}

/// Generate a dataset of independent pairs from one seed.
pub fn gen_dataset(cfg: &SyntheticConfig, seed: u64, count: usize) -> Vec<PairSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| gen_synthetic_pair(cfg, &mut rng)).collect()
}

// ---- disk format ----

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save_image(path: &Path, img: &ArrayD<f64>) -> Result<()> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    to_u8(img[[y, x, 0]]),
                    to_u8(img[[y, x, 1]]),
                    to_u8(img[[y, x, 2]]),
                ]),
            );
        }
    }
    buf.save(path)?;
    Ok(())
}

fn save_mask(path: &Path, mask: &ArrayD<f64>) -> Result<()> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Luma([if mask[[y, x]] > 0.5 { 255 } else { 0 }]),
            );
        }
    }
    buf.save(path)?;
    Ok(())
}

fn norm_to_pixel(p: Point2, w: usize, h: usize) -> (f64, f64) {
    (
        (p.x + 1.0) * 0.5 * (w - 1) as f64,
        (p.y + 1.0) * 0.5 * (h - 1) as f64,
    )
}

fn format_keypoints(kps: &[Point2], w: usize, h: usize) -> String {
    kps.iter()
        .map(|&p| {
            let (x, y) = norm_to_pixel(p, w, h);
            format!("{x:.4},{y:.4}")
        })
        .collect::<Vec<_>>()
        .join(";")
}

/// Dataset provenance written next to the manifest.
#[derive(Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub seed: u64,
    pub count: usize,
    pub config: SyntheticConfig,
}

/// Write a dataset directory: PNGs, `manifest.csv`, `provenance.json`.
pub fn save_dataset(
    dir: &Path,
    samples: &[PairSample],
    cfg: &SyntheticConfig,
    seed: u64,
) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut writer = csv::Writer::from_path(dir.join("manifest.csv"))?;
    writer.write_record([
        "image_a",
        "image_b",
        "mask_a",
        "mask_b",
        "keypoints_a",
        "keypoints_b",
        "bbox",
    ])?;
    for (i, s) in samples.iter().enumerate() {
        let (h, w) = s.resolution();
        let ia = format!("images/{i:04}_a.png");
        let ib = format!("images/{i:04}_b.png");
        save_image(&dir.join(&ia), &s.image_a)?;
        save_image(&dir.join(&ib), &s.image_b)?;
        let (ma, mb) = match (&s.gt_mask_a, &s.gt_mask_b) {
            (Some(a), Some(b)) => {
                let ma = format!("masks/{i:04}_a.png");
                let mb = format!("masks/{i:04}_b.png");
                save_mask(&dir.join(&ma), a)?;
                save_mask(&dir.join(&mb), b)?;
                (ma, mb)
            }
            _ => (String::new(), String::new()),
        };
        let kp_a: Vec<Point2> = s.keypoints.iter().map(|&(p, _)| p).collect();
        let kp_b: Vec<Point2> = s.keypoints.iter().map(|&(_, q)| q).collect();
        let bbox = s
            .bbox_b
            .map(|(bh, bw)| format!("{bh},{bw}"))
            .unwrap_or_default();
        writer.write_record([
            ia,
            ib,
            ma,
            mb,
            format_keypoints(&kp_a, w, h),
            format_keypoints(&kp_b, w, h),
            bbox,
        ])?;
    }
    writer.flush()?;
    let prov = Provenance {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        count: samples.len(),
        config: cfg.clone(),
    };
    std::fs::write(
        dir.join("provenance.json"),
        serde_json::to_string_pretty(&prov)?,
    )?;
    Ok(())
}

fn manifest_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

fn load_image(path: &Path) -> Result<ArrayD<f64>> {
    let img = image::open(path)
        .map_err(|e| manifest_err(path, format!("cannot open image: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ArrayD::zeros(IxDyn(&[h, w, 3]));
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for ch in 0..3 {
                out[[y, x, ch]] = px[ch] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

fn load_mask(path: &Path) -> Result<ArrayD<f64>> {
    let img = image::open(path)
        .map_err(|e| manifest_err(path, format!("cannot open mask: {e}")))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ArrayD::zeros(IxDyn(&[h, w]));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = if img.get_pixel(x as u32, y as u32)[0] > 127 {
                1.0
            } else {
                0.0
            };
        }
    }
    Ok(out)
}

fn resize_image(img: &ArrayD<f64>, res: usize) -> ArrayD<f64> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    if h == res && w == res {
        return img.clone();
    }
    let mut out = ArrayD::zeros(IxDyn(&[res, res, 3]));
    for y in 0..res {
        for x in 0..res {
            // Area-style sampling at the source position of the pixel center.
            let sy = ((y as f64 + 0.5) * h as f64 / res as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let sx = ((x as f64 + 0.5) * w as f64 / res as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for ch in 0..3 {
                out[[y, x, ch]] = (1.0 - fy) * (1.0 - fx) * img[[y0, x0, ch]]
                    + (1.0 - fy) * fx * img[[y0, x1, ch]]
                    + fy * (1.0 - fx) * img[[y1, x0, ch]]
                    + fy * fx * img[[y1, x1, ch]];
            }
        }
    }
    out
}

fn resize_mask(mask: &ArrayD<f64>, res: usize) -> ArrayD<f64> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    if h == res && w == res {
        return mask.clone();
    }
    let mut out = ArrayD::zeros(IxDyn(&[res, res]));
    for y in 0..res {
        for x in 0..res {
            let sy = ((y as f64 + 0.5) * h as f64 / res as f64 - 0.5)
                .round()
                .clamp(0.0, (h - 1) as f64) as usize;
            let sx = ((x as f64 + 0.5) * w as f64 / res as f64 - 0.5)
                .round()
                .clamp(0.0, (w - 1) as f64) as usize;
            out[[y, x]] = mask[[sy, sx]];
        }
    }
    out
}

fn parse_keypoints(field: &str, w: usize, h: usize, path: &Path) -> Result<Vec<Point2>> {
    if field.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for part in field.split(';') {
        let mut it = part.split(',');
        let (Some(xs), Some(ys)) = (it.next(), it.next()) else {
            return Err(manifest_err(path, format!("malformed keypoint `{part}`")));
        };
        let x: f64 = xs
            .trim()
            .parse()
            .map_err(|_| manifest_err(path, format!("malformed keypoint `{part}`")))?;
        let y: f64 = ys
            .trim()
            .parse()
            .map_err(|_| manifest_err(path, format!("malformed keypoint `{part}`")))?;
        if x < 0.0 || y < 0.0 || x > (w - 1) as f64 + 0.5 || y > (h - 1) as f64 + 0.5 {
            return Err(manifest_err(
                path,
                format!("keypoint ({x},{y}) outside {w}x{h} image"),
            ));
        }
        out.push(Point2::new(
            -1.0 + 2.0 * x / (w - 1) as f64,
            -1.0 + 2.0 * y / (h - 1) as f64,
        ));
    }
    Ok(out)
}

/// Load pairs listed in a manifest. When `resolution` is given, images are
/// resized and masks and keypoints rescaled accordingly. The image's parent
/// directory name doubles as a class label.
pub fn load_pairs(manifest_path: &Path, resolution: Option<usize>) -> Result<Vec<PairSample>> {
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(manifest_path)
        .map_err(|e| manifest_err(manifest_path, format!("cannot read manifest: {e}")))?;
    let mut out = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| manifest_err(manifest_path, format!("row {line}: {e}")))?;
        if record.len() != 7 {
            return Err(manifest_err(
                manifest_path,
                format!("row {line}: expected 7 columns, got {}", record.len()),
            ));
        }
        let field = |i: usize| record.get(i).unwrap_or("").trim().to_string();
        let path_a = base.join(field(0));
        let path_b = base.join(field(1));
        if !path_a.exists() {
            return Err(manifest_err(&path_a, "missing image file"));
        }
        if !path_b.exists() {
            return Err(manifest_err(&path_b, "missing image file"));
        }
        let raw_a = load_image(&path_a)?;
        let raw_b = load_image(&path_b)?;
        let (h0, w0) = (raw_a.shape()[0], raw_a.shape()[1]);
        let res = resolution.unwrap_or(h0);
        let image_a = resize_image(&raw_a, res);
        let image_b = resize_image(&raw_b, res);

        let load_opt_mask = |f: String| -> Result<Option<ArrayD<f64>>> {
            if f.is_empty() {
                Ok(None)
            } else {
                let p = base.join(&f);
                if !p.exists() {
                    return Err(manifest_err(&p, "missing mask file"));
                }
                Ok(Some(resize_mask(&load_mask(&p)?, res)))
            }
        };
        let gt_mask_a = load_opt_mask(field(2))?;
        let gt_mask_b = load_opt_mask(field(3))?;

        // Keypoints are stored in the original pixel frame.
        let kp_a = parse_keypoints(&field(4), w0, h0, manifest_path)?;
        let (hb0, wb0) = (raw_b.shape()[0], raw_b.shape()[1]);
        let kp_b = parse_keypoints(&field(5), wb0, hb0, manifest_path)?;
        if kp_a.len() != kp_b.len() {
            return Err(manifest_err(
                manifest_path,
                format!("row {line}: keypoint count mismatch"),
            ));
        }
        let bbox_field = field(6);
        let bbox_b = if bbox_field.is_empty() {
            None
        } else {
            let mut it = bbox_field.split(',');
            let (Some(hs), Some(ws)) = (it.next(), it.next()) else {
                return Err(manifest_err(manifest_path, format!("row {line}: bad bbox")));
            };
            let bh: f64 = hs.trim().parse().map_err(|_| {
                manifest_err(manifest_path, format!("row {line}: bad bbox"))
            })?;
            let bw: f64 = ws.trim().parse().map_err(|_| {
                manifest_err(manifest_path, format!("row {line}: bad bbox"))
            })?;
            // Rescale box dims with the image.
            let scale = res as f64 / hb0 as f64;
            Some(((bh * scale).round() as usize, (bw * scale).round() as usize))
        };

        let class = path_a
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().to_string());

        out.push(PairSample {
            image_a,
            image_b,
            gt_transform: None,
            gt_mask_a,
            gt_mask_b,
            keypoints: kp_a.into_iter().zip(kp_b).collect(),
            bbox_b,
            class,
        });
    }
    Ok(out)
}

// ---- augmentation ----

/// Augmentation knobs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    pub crop_prob: f64,
    /// Smallest crop side as a fraction of the full side.
    pub crop_min_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            crop_prob: 0.3,
            crop_min_frac: 0.75,
        }
    }
}

fn hflip_image(img: &ArrayD<f64>) -> ArrayD<f64> {
    let mut out = img.clone();
    out.invert_axis(ndarray::Axis(1));
    out.as_standard_layout().to_owned()
}

/// Normalized-coordinate maps of an axis-aligned crop: `to_old` maps the
/// cropped frame into the original frame.
fn crop_affine(cx: f64, cy: f64, frac: f64) -> AffineCoeffs {
    AffineCoeffs([frac, 0.0, cx, 0.0, frac, cy])
}

fn resample_by_affine(img: &ArrayD<f64>, map: &AffineCoeffs, binary: bool) -> ArrayD<f64> {
    let t = TransformParams::Affine(*map);
    let mut out = crate::geometry::warp(img, &t).unwrap();
    if binary {
        out.mapv_inplace(|v| if v > 0.5 { 1.0 } else { 0.0 });
    }
    out
}

/// Apply horizontal flips and random crops, keeping masks and keypoints
/// consistent. Flips and crops compose exactly into an affine ground-truth
/// transform (and into the affine stage of a cascade for A-side changes);
/// a B-side change under a non-affine ground truth invalidates it instead.
pub fn augment(sample: &PairSample, rng: &mut ChaCha8Rng, cfg: &AugmentConfig) -> PairSample {
    let mut s = sample.clone();
    let flip = AffineCoeffs([-1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    // Per-side geometric change expressed as `new -> old` coordinates.
    let mut map_a: Option<AffineCoeffs> = None;
    let mut map_b: Option<AffineCoeffs> = None;

    if rng.gen_bool(cfg.hflip_prob) {
        map_a = Some(flip);
    }
    if rng.gen_bool(cfg.hflip_prob) {
        map_b = Some(flip);
    }
    for (side, slot) in [(0usize, &mut map_a), (1usize, &mut map_b)] {
        let _ = side;
        if rng.gen_bool(cfg.crop_prob) {
            let frac = rng.gen_range(cfg.crop_min_frac..1.0);
            let margin = 1.0 - frac;
            let cx = rng.gen_range(-margin..margin);
            let cy = rng.gen_range(-margin..margin);
            let crop = crop_affine(cx, cy, frac);
            *slot = Some(match slot {
                Some(prev) => prev.compose(&crop),
                None => crop,
            });
        }
    }
    if map_a.is_none() && map_b.is_none() {
        return s;
    }

    // A crop that throws away every keypoint is retried; after ten failures
    // the sample passes through unaugmented.
    if !s.keypoints.is_empty() {
        let kp_visible = |map: &Option<AffineCoeffs>, pts: Vec<Point2>| -> Option<Vec<Point2>> {
            match map {
                None => Some(pts),
                Some(m) => {
                    let inv = m.inverse()?;
                    let moved: Vec<Point2> = pts.iter().map(|&p| inv.apply(p)).collect();
                    if moved
                        .iter()
                        .any(|p| p.x.abs() <= 1.0 && p.y.abs() <= 1.0)
                    {
                        Some(moved)
                    } else {
                        None
                    }
                }
            }
        };
        let mut ok = false;
        for _ in 0..10 {
            let pa: Vec<Point2> = s.keypoints.iter().map(|&(p, _)| p).collect();
            let pb: Vec<Point2> = s.keypoints.iter().map(|&(_, q)| q).collect();
            if let (Some(na), Some(nb)) = (kp_visible(&map_a, pa), kp_visible(&map_b, pb)) {
                // Keep only keypoints visible on both sides.
                let kept: Vec<(Point2, Point2)> = na
                    .into_iter()
                    .zip(nb)
                    .filter(|(p, q)| {
                        p.x.abs() <= 1.0 && p.y.abs() <= 1.0 && q.x.abs() <= 1.0 && q.y.abs() <= 1.0
                    })
                    .collect();
                if !kept.is_empty() {
                    s.keypoints = kept;
                    ok = true;
                    break;
                }
            }
            // Resample the crop portions only.
            map_a = map_a.map(|m| if m.0[0] < 0.0 { flip } else { m });
            map_b = map_b.map(|m| if m.0[0] < 0.0 { flip } else { m });
            for slot in [&mut map_a, &mut map_b] {
                if slot.is_some() && rng.gen_bool(cfg.crop_prob) {
                    let frac = rng.gen_range(cfg.crop_min_frac..1.0);
                    let margin = 1.0 - frac;
                    let crop = crop_affine(
                        rng.gen_range(-margin..margin),
                        rng.gen_range(-margin..margin),
                        frac,
                    );
                    let base = slot.unwrap();
                    *slot = Some(base.compose(&crop));
                }
            }
        }
        if !ok {
            return sample.clone();
        }
    }

    // Resample pixels. A pure flip is done exactly by axis reversal.
    let apply_side = |img: &ArrayD<f64>, mask: &Option<ArrayD<f64>>, map: &AffineCoeffs| {
        let is_pure_flip = *map == flip;
        if is_pure_flip {
            (
                hflip_image(img),
                mask.as_ref().map(|m| {
                    let mut f = m.clone();
                    f.invert_axis(ndarray::Axis(1));
                    f.as_standard_layout().to_owned()
                }),
            )
        } else {
            (
                resample_by_affine(img, map, false),
                mask.as_ref().map(|m| resample_by_affine(m, map, true)),
            )
        }
    };
    if let Some(m) = &map_a {
        let (img, mask) = apply_side(&s.image_a, &s.gt_mask_a, m);
        s.image_a = img;
        s.gt_mask_a = mask;
    }
    if let Some(m) = &map_b {
        let (img, mask) = apply_side(&s.image_b, &s.gt_mask_b, m);
        s.image_b = img;
        s.gt_mask_b = mask;
    }

    // Fold the changes into the ground-truth transform where exact.
    s.gt_transform = match (s.gt_transform.take(), &map_a, &map_b) {
        (None, _, _) => None,
        (Some(t), None, None) => Some(t),
        (Some(TransformParams::Affine(a)), ma, mb) => {
            // new_A -> old_A -> old_B -> new_B
            let mut t = a;
            if let Some(m) = ma {
                t = t.compose(m);
            }
            if let Some(m) = mb {
                match m.inverse() {
                    Some(inv) => t = inv.compose(&t),
                    None => return s,
                }
            }
            Some(TransformParams::Affine(t))
        }
        (Some(TransformParams::Cascade(a, tps)), ma, None) => {
            // Pre-composition enters the affine stage exactly.
            let mut aff = a;
            if let Some(m) = ma {
                aff = aff.compose(m);
            }
            Some(TransformParams::Cascade(aff, tps))
        }
        // Other changes of a non-affine ground truth cannot be represented.
        (Some(_), _, Some(_)) => None,
        (Some(TransformParams::Tps(_)), Some(_), None) => None,
    };

    if let Some(mb) = &s.gt_mask_b {
        s.bbox_b = mask_bbox(mb);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::jaccard;
    use crate::geometry::warp;

    #[test]
    fn zero_magnitude_transform_is_identity() {
        let cfg = SyntheticConfig {
            max_rotation: 1e-9,
            scale_range: (0.9999999, 1.0000001),
            max_translation: 1e-9,
            max_shear: 1e-12,
            ..SyntheticConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = gen_synthetic_pair(&cfg, &mut rng);
        let t = s.gt_transform.unwrap();
        let grid = crate::geometry::CoordGrid::regular(5, 5);
        let mapped = crate::geometry::apply_transform(&t, &grid).unwrap();
        for (p, q) in grid.points.iter().zip(&mapped.points) {
            assert!(p.dist(*q) < 1e-6);
        }
        // Masks coincide for the identity pair.
        let (ma, mb) = (s.gt_mask_a.unwrap(), s.gt_mask_b.unwrap());
        let j = jaccard(&ma, &mb).unwrap();
        assert!(j > 0.99, "jaccard {j}");
    }

    #[test]
    fn keypoints_satisfy_transform_consistency() {
        let cfg = SyntheticConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let s = gen_synthetic_pair(&cfg, &mut rng);
            let t = s.gt_transform.as_ref().unwrap();
            for &(p, q) in &s.keypoints {
                let mapped = apply_point(t, p);
                assert!(mapped.dist(q) < 1e-6);
            }
            assert!(!s.keypoints.is_empty());
        }
    }

    #[test]
    fn warped_mask_agrees_with_rendered_mask() {
        // Self-consistency audit: warping A's mask through the pair's
        // reverse transform reproduces B's mask nearly everywhere.
        let cfg = SyntheticConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut total = 0.0;
        let n = 100;
        for _ in 0..n {
            let s = gen_synthetic_pair(&cfg, &mut rng);
            let TransformParams::Affine(a) = s.gt_transform.as_ref().unwrap() else {
                panic!("affine dataset expected");
            };
            let inv = TransformParams::Affine(a.inverse().unwrap());
            let mut warped = warp(s.gt_mask_a.as_ref().unwrap(), &inv).unwrap();
            warped.mapv_inplace(|v| if v > 0.5 { 1.0 } else { 0.0 });
            total += jaccard(&warped, s.gt_mask_b.as_ref().unwrap()).unwrap();
        }
        let mean = total / n as f64;
        assert!(mean > 0.95, "mean warp/render jaccard {mean}");
    }

    #[test]
    fn retention_invariant_holds() {
        let cfg = SyntheticConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let s = gen_synthetic_pair(&cfg, &mut rng);
            let a_count: f64 = s.gt_mask_a.as_ref().unwrap().sum();
            let b_count: f64 = s.gt_mask_b.as_ref().unwrap().sum();
            // The visible fraction of B is at least 60% of A up to the
            // area scaling of the transform.
            let det = match s.gt_transform.as_ref().unwrap() {
                TransformParams::Affine(a) => a.determinant().abs(),
                _ => 1.0,
            };
            assert!(
                b_count >= 0.5 * MIN_FOREGROUND_RETENTION * det * a_count,
                "retention violated: {b_count} vs {a_count} (det {det})"
            );
        }
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let cfg = SyntheticConfig {
            keypoints: 4,
            ..SyntheticConfig::default()
        };
        let samples = gen_dataset(&cfg, 7, 3);
        let dir = std::env::temp_dir().join(format!("comatch_data_test_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        save_dataset(&dir, &samples, &cfg, 7).unwrap();
        let loaded = load_pairs(&dir.join("manifest.csv"), None).unwrap();
        assert_eq!(loaded.len(), 3);
        for (orig, back) in samples.iter().zip(&loaded) {
            // Masks are bit-exact through the 0/255 encoding.
            let (oa, ba) = (orig.gt_mask_a.as_ref().unwrap(), back.gt_mask_a.as_ref().unwrap());
            assert_eq!(oa.as_slice().unwrap(), ba.as_slice().unwrap());
            // Keypoints within half a pixel.
            let (h, w) = orig.resolution();
            for (&(p0, q0), &(p1, q1)) in orig.keypoints.iter().zip(&back.keypoints) {
                let tol = 0.5 * 2.0 / (w.min(h) - 1) as f64;
                assert!(p0.dist(p1) < tol);
                assert!(q0.dist(q1) < tol);
            }
            assert_eq!(orig.bbox_b, back.bbox_b);
            assert!(back.gt_transform.is_none());
        }
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn empty_manifest_loads_empty() {
        let dir = std::env::temp_dir().join(format!("comatch_empty_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(
            dir.join("manifest.csv"),
            "image_a,image_b,mask_a,mask_b,keypoints_a,keypoints_b,bbox\n",
        )
        .unwrap();
        let loaded = load_pairs(&dir.join("manifest.csv"), None).unwrap();
        assert!(loaded.is_empty());
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn missing_image_is_an_error() {
        let dir = std::env::temp_dir().join(format!("comatch_missing_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(
            dir.join("manifest.csv"),
            "image_a,image_b,mask_a,mask_b,keypoints_a,keypoints_b,bbox\nnope.png,nada.png,,,,,\n",
        )
        .unwrap();
        assert!(matches!(
            load_pairs(&dir.join("manifest.csv"), None),
            Err(Error::Manifest { .. })
        ));
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn double_flip_restores_the_sample() {
        let cfg = SyntheticConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = gen_synthetic_pair(&cfg, &mut rng);
        let flipped_once = {
            let mut f = s.clone();
            f.image_a = hflip_image(&f.image_a);
            f.image_a = hflip_image(&f.image_a);
            f
        };
        assert_eq!(
            s.image_a.as_slice().unwrap(),
            flipped_once.image_a.as_slice().unwrap()
        );
    }

    #[test]
    fn flip_maps_keypoints_and_composes_into_gt() {
        let cfg = SyntheticConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = gen_synthetic_pair(&cfg, &mut rng);
        // Force an A-side flip only.
        let aug_cfg = AugmentConfig {
            hflip_prob: 1.0,
            crop_prob: 0.0,
            crop_min_frac: 0.8,
        };
        // Draw until exactly (flip A, flip B) both happen — probability 1
        // here since hflip_prob is 1.
        let out = augment(&s, &mut rng, &aug_cfg);
        let (h, w) = s.resolution();
        let _ = h;
        // Keypoint x in pixels maps to width-1-x.
        for (&(p0, _), &(p1, _)) in s.keypoints.iter().zip(&out.keypoints) {
            let (x0, _) = norm_to_pixel(p0, w, w);
            let (x1, _) = norm_to_pixel(p1, w, w);
            assert!((x1 - ((w - 1) as f64 - x0)).abs() < 1e-9);
        }
        // Composed ground truth still maps keypoints exactly.
        let t = out.gt_transform.as_ref().expect("flip composes");
        for &(p, q) in &out.keypoints {
            assert!(apply_point(t, p).dist(q) < 1e-9, "brute-force map mismatch");
        }
    }

    #[test]
    fn crop_composes_into_gt_against_point_mapping() {
        let cfg = SyntheticConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = gen_synthetic_pair(&cfg, &mut rng);
        let aug_cfg = AugmentConfig {
            hflip_prob: 0.0,
            crop_prob: 1.0,
            crop_min_frac: 0.8,
        };
        for _ in 0..5 {
            let out = augment(&s, &mut rng, &aug_cfg);
            if let Some(t) = &out.gt_transform {
                for &(p, q) in &out.keypoints {
                    assert!(apply_point(t, p).dist(q) < 1e-9);
                }
            }
        }
    }
}

//! Evaluation protocol: keypoint transfer accuracy, co-segmentation
//! precision and Jaccard, and soft-mask binarization.
//!
//! PCK counts keypoints whose re-projection error is within
//! `alpha * max(H, W)`, with (H, W) the annotated object box in the target
//! image when present and the image dimensions otherwise; distances are in
//! pixel units of the target image.

use crate::data::PairSample;
use crate::geometry::{apply_point, Point2, TransformParams};
use crate::networks::{decode_masks, encode, predict_transform, Model};
use crate::{Error, Result};
use indexmap::IndexMap;
use ndarray::ArrayD;
use std::path::Path;

/// Fraction of correctly classified pixels, `(TP + TN) / total`.
pub fn precision(pred: &ArrayD<f64>, gt: &ArrayD<f64>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "precision: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let agree = pred
        .iter()
        .zip(gt.iter())
        .filter(|(p, g)| (**p > 0.5) == (**g > 0.5))
        .count();
    Ok(agree as f64 / pred.len() as f64)
}

/// Intersection over union of the foregrounds; two empty masks count as 1.
pub fn jaccard(pred: &ArrayD<f64>, gt: &ArrayD<f64>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "jaccard: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (p, g) in pred.iter().zip(gt.iter()) {
        let (p, g) = (*p > 0.5, *g > 0.5);
        if p && g {
            inter += 1;
        }
        if p || g {
            union += 1;
        }
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

/// Soft-mask binarization method.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BinarizeMethod {
    /// Threshold maximizing between-class variance over a 256-bin
    /// histogram; a degenerate (constant) mask falls back to 0.5.
    Otsu,
    Fixed(f64),
}

/// Otsu threshold of a soft mask over 256 quantization levels. Returns the
/// value `tau` such that foreground is `v > tau`.
pub fn otsu_threshold(soft: &ArrayD<f64>) -> f64 {
    let mut hist = [0usize; 256];
    for &v in soft.iter() {
        let level = (v.clamp(0.0, 1.0) * 255.0).round() as usize;
        hist[level.min(255)] += 1;
    }
    let total = soft.len() as f64;
    let total_sum: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let mut best_t: Option<usize> = None;
    let mut best_var = 0.0;
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    for t in 0..255 {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (total_sum - sum0) / w1;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_t = Some(t);
        }
    }
    match best_t {
        Some(t) => (t as f64 + 0.5) / 255.0,
        None => 0.5,
    }
}

/// Binarize a soft mask.
pub fn binarize(soft: &ArrayD<f64>, method: BinarizeMethod) -> ArrayD<f64> {
    let tau = match method {
        BinarizeMethod::Otsu => otsu_threshold(soft),
        BinarizeMethod::Fixed(t) => t,
    };
    soft.mapv(|v| if v > tau { 1.0 } else { 0.0 })
}

/// PCK at one threshold: the fraction of keypoints whose projection through
/// `t` lands within `alpha * max(bbox)` pixels of the annotation, measured
/// in the target image's pixel frame. `image_hw` converts normalized
/// coordinates to pixels; `bbox_hw` defaults to the image dimensions.
pub fn pck(
    t: &TransformParams,
    keypoints: &[(Point2, Point2)],
    image_hw: (usize, usize),
    bbox_hw: Option<(usize, usize)>,
    alpha: f64,
) -> Result<f64> {
    if keypoints.is_empty() {
        return Err(Error::EmptyKeypoints);
    }
    let (bh, bw) = bbox_hw.unwrap_or(image_hw);
    let threshold = alpha * bh.max(bw) as f64;
    let mut hits = 0usize;
    for &(p, q) in keypoints {
        if pixel_error(t, p, q, image_hw) <= threshold {
            hits += 1;
        }
    }
    Ok(hits as f64 / keypoints.len() as f64)
}

fn pixel_error(t: &TransformParams, p: Point2, q: Point2, image_hw: (usize, usize)) -> f64 {
    let (h, w) = image_hw;
    let mapped = apply_point(t, p);
    let dx = (mapped.x - q.x) * 0.5 * (w - 1) as f64;
    let dy = (mapped.y - q.y) * 0.5 * (h - 1) as f64;
    (dx * dx + dy * dy).sqrt()
}

/// Mean keypoint re-projection error in pixels of the target image.
pub fn mean_endpoint_error(
    t: &TransformParams,
    keypoints: &[(Point2, Point2)],
    image_hw: (usize, usize),
) -> Result<f64> {
    if keypoints.is_empty() {
        return Err(Error::EmptyKeypoints);
    }
    Ok(keypoints
        .iter()
        .map(|&(p, q)| pixel_error(t, p, q, image_hw))
        .sum::<f64>()
        / keypoints.len() as f64)
}

/// Default PCK thresholds.
pub const DEFAULT_ALPHAS: [f64; 3] = [0.05, 0.1, 0.15];

/// PCK aggregated per class and overall, one value per alpha.
#[derive(Clone, Debug)]
pub struct PckReport {
    pub alphas: Vec<f64>,
    /// class -> (keypoint count, mean per alpha weighted by keypoints).
    pub per_class: IndexMap<String, (usize, Vec<f64>)>,
    pub mean: Vec<f64>,
    pub total_keypoints: usize,
    /// Mean endpoint error in pixels over all keypoints.
    pub mean_epe: f64,
}

/// Precision / Jaccard aggregated per class and overall.
#[derive(Clone, Debug)]
pub struct CosegReport {
    /// class -> (pair count, precision, jaccard).
    pub per_class: IndexMap<String, (usize, f64, f64)>,
    pub precision: f64,
    pub jaccard: f64,
}

/// Run the matching stream over `samples` and score keypoint transfer.
pub fn evaluate_matching(model: &Model, samples: &[PairSample], alphas: &[f64]) -> Result<PckReport> {
    let mut per_class: IndexMap<String, (usize, Vec<f64>)> = IndexMap::new();
    let mut total_hits = vec![0usize; alphas.len()];
    let mut total_kp = 0usize;
    let mut epe_sum = 0.0;
    for sample in samples {
        if sample.keypoints.is_empty() {
            continue;
        }
        let pred = model.infer_pair(sample)?;
        let (h, w) = sample.resolution();
        let class = sample.class.clone().unwrap_or_else(|| "all".into());
        let entry = per_class
            .entry(class)
            .or_insert_with(|| (0, vec![0.0; alphas.len()]));
        let n = sample.keypoints.len();
        entry.0 += n;
        total_kp += n;
        for &(p, q) in &sample.keypoints {
            epe_sum += pixel_error(&pred.t_ab, p, q, (h, w));
        }
        for (i, &alpha) in alphas.iter().enumerate() {
            let frac = pck(&pred.t_ab, &sample.keypoints, (h, w), sample.bbox_b, alpha)?;
            entry.1[i] += frac * n as f64;
            total_hits[i] += (frac * n as f64).round() as usize;
        }
    }
    if total_kp == 0 {
        return Err(Error::EmptyKeypoints);
    }
    for (_, entry) in per_class.iter_mut() {
        for v in entry.1.iter_mut() {
            *v /= entry.0 as f64;
        }
    }
    let mean = total_hits
        .iter()
        .map(|&h| h as f64 / total_kp as f64)
        .collect();
    Ok(PckReport {
        alphas: alphas.to_vec(),
        per_class,
        mean,
        total_keypoints: total_kp,
        mean_epe: epe_sum / total_kp as f64,
    })
}

/// Run the co-segmentation stream over `samples`, binarize, and score
/// against the ground-truth masks.
pub fn evaluate_coseg(
    model: &Model,
    samples: &[PairSample],
    method: BinarizeMethod,
) -> Result<CosegReport> {
    let mut per_class: IndexMap<String, (usize, f64, f64)> = IndexMap::new();
    let mut p_sum = 0.0;
    let mut j_sum = 0.0;
    let mut count = 0usize;
    for sample in samples {
        let (Some(gt_a), Some(gt_b)) = (&sample.gt_mask_a, &sample.gt_mask_b) else {
            continue;
        };
        let pred = model.infer_pair(sample)?;
        let bin_a = binarize(&pred.mask_a, method);
        let bin_b = binarize(&pred.mask_b, method);
        let p = (precision(&bin_a, gt_a)? + precision(&bin_b, gt_b)?) / 2.0;
        let j = (jaccard(&bin_a, gt_a)? + jaccard(&bin_b, gt_b)?) / 2.0;
        let class = sample.class.clone().unwrap_or_else(|| "all".into());
        let entry = per_class.entry(class).or_insert((0, 0.0, 0.0));
        entry.0 += 1;
        entry.1 += p;
        entry.2 += j;
        p_sum += p;
        j_sum += j;
        count += 1;
    }
    if count == 0 {
        return Err(Error::ShapeMismatch("no samples carry ground-truth masks".into()));
    }
    for (_, e) in per_class.iter_mut() {
        e.1 /= e.0 as f64;
        e.2 /= e.0 as f64;
    }
    Ok(CosegReport {
        per_class,
        precision: p_sum / count as f64,
        jaccard: j_sum / count as f64,
    })
}

impl PckReport {
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["class".to_string(), "keypoints".to_string()];
        header.extend(self.alphas.iter().map(|a| format!("pck@{a}")));
        w.write_record(&header)?;
        for (class, (n, vals)) in &self.per_class {
            let mut row = vec![class.clone(), n.to_string()];
            row.extend(vals.iter().map(|v| format!("{v:.6}")));
            w.write_record(&row)?;
        }
        let mut row = vec!["mean".to_string(), self.total_keypoints.to_string()];
        row.extend(self.mean.iter().map(|v| format!("{v:.6}")));
        w.write_record(&row)?;
        w.flush()?;
        Ok(())
    }

    pub fn render_table(&self) -> String {
        let mut out = String::from("class            keypoints");
        for a in &self.alphas {
            out.push_str(&format!("  pck@{a:<5}"));
        }
        out.push('\n');
        for (class, (n, vals)) in &self.per_class {
            out.push_str(&format!("{class:<16} {n:>9}"));
            for v in vals {
                out.push_str(&format!("  {v:<8.4}"));
            }
            out.push('\n');
        }
        out.push_str(&format!("{:<16} {:>9}", "mean", self.total_keypoints));
        for v in &self.mean {
            out.push_str(&format!("  {v:<8.4}"));
        }
        out.push_str(&format!("\nmean endpoint error: {:.3} px\n", self.mean_epe));
        out
    }
}

impl CosegReport {
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["class", "pairs", "precision", "jaccard"])?;
        for (class, (n, p, j)) in &self.per_class {
            w.write_record([
                class.clone(),
                n.to_string(),
                format!("{p:.6}"),
                format!("{j:.6}"),
            ])?;
        }
        let total: usize = self.per_class.values().map(|e| e.0).sum();
        w.write_record([
            "mean".to_string(),
            total.to_string(),
            format!("{:.6}", self.precision),
            format!("{:.6}", self.jaccard),
        ])?;
        w.flush()?;
        Ok(())
    }

    pub fn render_table(&self) -> String {
        let mut out = String::from("class            pairs  precision  jaccard\n");
        for (class, (n, p, j)) in &self.per_class {
            out.push_str(&format!("{class:<16} {n:>5}  {p:<9.4}  {j:<7.4}\n"));
        }
        let total: usize = self.per_class.values().map(|e| e.0).sum();
        out.push_str(&format!(
            "{:<16} {total:>5}  {:<9.4}  {:<7.4}\n",
            "mean", self.precision, self.jaccard
        ));
        out
    }
}

/// Model predictions for one pair.
pub struct PairPrediction {
    pub t_ab: TransformParams,
    pub t_ba: TransformParams,
    pub mask_a: ArrayD<f64>,
    pub mask_b: ArrayD<f64>,
}

impl Model {
    /// Forward pass without gradients: both transforms and both soft masks.
    pub fn infer_pair(&self, sample: &PairSample) -> Result<PairPrediction> {
        let mut g = crate::autodiff::Graph::new();
        let bound = self.bind(&mut g);
        let ia = g.leaf(sample.image_a.clone());
        let ib = g.leaf(sample.image_b.clone());
        let enc_a = encode(&mut g, &bound, &self.cfg, ia)?;
        let enc_b = encode(&mut g, &bound, &self.cfg, ib)?;
        let s_ab = g.correlate(enc_a.features, enc_b.features);
        let s_ba = g.correlate(enc_b.features, enc_a.features);
        let t_ab = predict_transform(
            &mut g, &bound, &self.cfg, &self.tps, enc_a.features, enc_b.features, s_ab,
        );
        let t_ba = predict_transform(
            &mut g, &bound, &self.cfg, &self.tps, enc_b.features, enc_a.features, s_ba,
        );
        let (m_a, m_b) = decode_masks(&mut g, &bound, &self.cfg, &enc_a, &enc_b, s_ab, s_ba)?;
        Ok(PairPrediction {
            t_ab: t_ab.to_params(&g, self.cfg.tps_k),
            t_ba: t_ba.to_params(&g, self.cfg.tps_k),
            mask_a: g.value(m_a).clone(),
            mask_b: g.value(m_b).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{identity_params, AffineCoeffs, TransformKind};
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_from(rows: &[&[u8]]) -> ArrayD<f64> {
        let h = rows.len();
        let w = rows[0].len();
        ArrayD::from_shape_fn(IxDyn(&[h, w]), |ix| rows[ix[0]][ix[1]] as f64)
    }

    #[test]
    fn precision_identities() {
        let m = mask_from(&[&[1, 0, 1], &[0, 1, 0]]);
        assert_eq!(precision(&m, &m).unwrap(), 1.0);
        let inv = m.mapv(|v| 1.0 - v);
        assert_eq!(precision(&inv, &m).unwrap(), 0.0);
        // Pixel-loop oracle on random masks.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let a = ArrayD::from_shape_fn(IxDyn(&[8, 8]), |_| rng.gen_range(0..2) as f64);
            let b = ArrayD::from_shape_fn(IxDyn(&[8, 8]), |_| rng.gen_range(0..2) as f64);
            let mut agree = 0;
            for (x, y) in a.iter().zip(b.iter()) {
                if (x > &0.5) == (y > &0.5) {
                    agree += 1;
                }
            }
            assert_eq!(precision(&a, &b).unwrap(), agree as f64 / 64.0);
        }
    }

    #[test]
    fn precision_is_complement_invariant_but_jaccard_is_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = ArrayD::from_shape_fn(IxDyn(&[8, 8]), |_| rng.gen_range(0..2) as f64);
        let b = ArrayD::from_shape_fn(IxDyn(&[8, 8]), |_| rng.gen_range(0..2) as f64);
        let (ac, bc) = (a.mapv(|v| 1.0 - v), b.mapv(|v| 1.0 - v));
        assert_eq!(precision(&a, &b).unwrap(), precision(&ac, &bc).unwrap());
        // Complementing changes which pixels are foreground, so IoU moves.
        let j1 = jaccard(&a, &b).unwrap();
        let j2 = jaccard(&ac, &bc).unwrap();
        assert!((j1 - j2).abs() > 1e-9);
    }

    #[test]
    fn jaccard_identities() {
        let m = mask_from(&[&[1, 1, 0], &[0, 0, 0]]);
        assert_eq!(jaccard(&m, &m).unwrap(), 1.0);
        let disjoint = mask_from(&[&[0, 0, 1], &[0, 0, 0]]);
        assert_eq!(jaccard(&m, &disjoint).unwrap(), 0.0);
        // Two rectangles overlapping half of each: J = 1/3.
        let r1 = mask_from(&[&[1, 1, 0], &[1, 1, 0]]);
        let r2 = mask_from(&[&[0, 1, 1], &[0, 1, 1]]);
        assert!((jaccard(&r1, &r2).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        // Empty/empty convention.
        let empty = mask_from(&[&[0, 0, 0], &[0, 0, 0]]);
        assert_eq!(jaccard(&empty, &empty).unwrap(), 1.0);
        // Equality characterization for nonempty masks.
        assert!(jaccard(&m, &r1).unwrap() < 1.0);
    }

    #[test]
    fn jaccard_counts_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = ArrayD::from_shape_fn(IxDyn(&[8, 8]), |_| rng.gen_range(0..2) as f64);
            let b = ArrayD::from_shape_fn(IxDyn(&[8, 8]), |_| rng.gen_range(0..2) as f64);
            let mut inter = 0;
            let mut uni = 0;
            for (x, y) in a.iter().zip(b.iter()) {
                let (x, y) = (*x > 0.5, *y > 0.5);
                inter += (x && y) as usize;
                uni += (x || y) as usize;
            }
            let want = if uni == 0 { 1.0 } else { inter as f64 / uni as f64 };
            assert_eq!(jaccard(&a, &b).unwrap(), want);
        }
    }

    /// Exhaustive per-pixel oracle: recompute class statistics from scratch
    /// for each of the 256 candidate thresholds.
    fn otsu_oracle(soft: &ArrayD<f64>) -> f64 {
        let mut best = (0.0, None);
        for t in 0..255usize {
            let tau = (t as f64 + 0.5) / 255.0;
            let (mut n0, mut n1, mut s0, mut s1) = (0.0, 0.0, 0.0, 0.0);
            for &v in soft.iter() {
                let level = (v.clamp(0.0, 1.0) * 255.0).round();
                if level <= t as f64 {
                    n0 += 1.0;
                    s0 += level;
                } else {
                    n1 += 1.0;
                    s1 += level;
                }
            }
            if n0 == 0.0 || n1 == 0.0 {
                continue;
            }
            let var = n0 * n1 * (s0 / n0 - s1 / n1).powi(2);
            if var > best.0 {
                best = (var, Some(tau));
            }
        }
        best.1.unwrap_or(0.5)
    }

    #[test]
    fn otsu_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let soft = ArrayD::from_shape_fn(IxDyn(&[8, 8]), |_| rng.gen_range(0.0..1.0));
            let got = otsu_threshold(&soft);
            let want = otsu_oracle(&soft);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn otsu_separates_bimodal_mask() {
        let mut soft = ArrayD::from_elem(IxDyn(&[4, 4]), 0.1);
        for i in 0..8 {
            soft[[i / 4, i % 4]] = 0.9;
        }
        let bin = binarize(&soft, BinarizeMethod::Otsu);
        for i in 0..16 {
            let want = if i < 8 { 1.0 } else { 0.0 };
            assert_eq!(bin[[i / 4, i % 4]], want);
        }
    }

    #[test]
    fn otsu_constant_mask_falls_back() {
        let soft = ArrayD::from_elem(IxDyn(&[4, 4]), 0.7);
        assert_eq!(otsu_threshold(&soft), 0.5);
        let bin = binarize(&soft, BinarizeMethod::Otsu);
        assert!(bin.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn fixed_threshold_splits_at_tau() {
        let mut soft = ArrayD::from_elem(IxDyn(&[2, 2]), 0.4);
        soft[[0, 0]] = 0.6;
        let bin = binarize(&soft, BinarizeMethod::Fixed(0.5));
        assert_eq!(bin[[0, 0]], 1.0);
        assert_eq!(bin[[1, 1]], 0.0);
    }

    #[test]
    fn pck_cases() {
        let id = identity_params(TransformKind::Affine);
        let kps = vec![
            (Point2::new(0.0, 0.0), Point2::new(0.0, 0.0)),
            (Point2::new(0.5, 0.5), Point2::new(0.5, 0.5)),
        ];
        // Exact transform: all alphas hit.
        for alpha in DEFAULT_ALPHAS {
            assert_eq!(pck(&id, &kps, (48, 48), None, alpha).unwrap(), 1.0);
        }
        // alpha = 0 with any nonzero error misses everything.
        let t = TransformParams::Affine(AffineCoeffs::translation(0.1, 0.0));
        assert_eq!(pck(&t, &kps, (48, 48), None, 0.0).unwrap(), 0.0);
        // 3 of 4 within threshold -> 0.75, against brute-force distances.
        let kps4 = vec![
            (Point2::new(0.0, 0.0), Point2::new(0.0, 0.0)),
            (Point2::new(0.2, 0.0), Point2::new(0.2, 0.0)),
            (Point2::new(-0.2, 0.3), Point2::new(-0.2, 0.3)),
            (Point2::new(0.0, 0.5), Point2::new(0.9, 0.5)),
        ];
        // Translation of 0.1 normalized = 2.35 px on 48px; threshold at
        // alpha=0.1 is 4.8 px; the last keypoint is ~21 px + 2.35 off.
        let frac = pck(&t, &kps4, (48, 48), None, 0.1).unwrap();
        assert_eq!(frac, 0.75);
        // Monotone in alpha.
        let mut prev = 0.0;
        for alpha in [0.0, 0.05, 0.1, 0.2, 0.5, 1.0] {
            let v = pck(&t, &kps4, (48, 48), None, alpha).unwrap();
            assert!(v >= prev);
            prev = v;
        }
        // Empty keypoints error.
        assert!(matches!(pck(&id, &[], (48, 48), None, 0.1), Err(Error::EmptyKeypoints)));
    }

    #[test]
    fn bbox_threshold_differs_from_image_threshold() {
        let t = TransformParams::Affine(AffineCoeffs::translation(0.12, 0.0));
        let kps = vec![(Point2::new(0.0, 0.0), Point2::new(0.0, 0.0))];
        // 0.12 normalized on 48 px image = 2.82 px error.
        // Image-threshold at alpha 0.05: 2.4 px -> miss.
        assert_eq!(pck(&t, &kps, (48, 48), None, 0.05).unwrap(), 0.0);
        // Large bbox raises the threshold: 0.05 * 80 = 4 px -> hit.
        assert_eq!(pck(&t, &kps, (48, 48), Some((80, 80)), 0.05).unwrap(), 1.0);
    }
}

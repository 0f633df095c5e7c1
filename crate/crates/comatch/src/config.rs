//! Run configuration: one flat UTF-8 key-value namespace covering training
//! hyperparameters, architecture, synthetic-data generation, augmentation,
//! and evaluation. Files are flat TOML; `--set key=value` overrides apply
//! on top. Unknown keys are rejected. Every run writes the resolved
//! snapshot next to its outputs.

use crate::data::{AugmentConfig, ShapeFamily, SyntheticConfig};
use crate::eval::BinarizeMethod;
use crate::networks::{NetConfig, UpsampleMode};
use crate::train::HyperParams;
use crate::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

/// Everything a run needs, resolved.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub hyper: HyperParams,
    pub net: NetConfig,
    pub synth: SyntheticConfig,
    pub augment: AugmentConfig,
    /// Manifest to train from; empty means synthetic data.
    pub train_manifest: String,
    /// Manifest to evaluate on; empty means held-out synthetic data.
    pub eval_manifest: String,
    /// Synthetic dataset sizes and their generation seed.
    pub train_count: usize,
    pub eval_count: usize,
    pub data_seed: u64,
    /// PCK thresholds for reports.
    pub alphas: Vec<f64>,
    /// Mask binarization for evaluation.
    pub binarize: BinarizeMethod,
    /// Alpha used when checking `min_pck`.
    pub pck_alpha: f64,
    /// Optional acceptance thresholds; a missed one makes eval exit nonzero.
    pub min_pck: Option<f64>,
    pub min_jaccard: Option<f64>,
    pub min_precision: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            hyper: HyperParams::default(),
            net: NetConfig::default(),
            synth: SyntheticConfig::default(),
            augment: AugmentConfig::default(),
            train_manifest: String::new(),
            eval_manifest: String::new(),
            train_count: 200,
            eval_count: 50,
            data_seed: 1,
            alphas: crate::eval::DEFAULT_ALPHAS.to_vec(),
            binarize: BinarizeMethod::Otsu,
            pck_alpha: 0.1,
            min_pck: None,
            min_jaccard: None,
            min_precision: None,
        }
    }
}

fn bad<T>(key: &str, want: &str) -> Result<T> {
    Err(Error::Config(format!("key `{key}` expects {want}")))
}

fn as_f64(key: &str, v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => bad(key, "a number"),
    }
}

fn as_usize(key: &str, v: &toml::Value) -> Result<usize> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => bad(key, "a nonnegative integer"),
    }
}

fn as_u64(key: &str, v: &toml::Value) -> Result<u64> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => bad(key, "a nonnegative integer"),
    }
}

fn as_bool(key: &str, v: &toml::Value) -> Result<bool> {
    match v {
        toml::Value::Boolean(b) => Ok(*b),
        _ => bad(key, "a boolean"),
    }
}

fn as_str(key: &str, v: &toml::Value) -> Result<String> {
    match v {
        toml::Value::String(s) => Ok(s.clone()),
        _ => bad(key, "a string"),
    }
}

fn parse_list(key: &str, s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("key `{key}`: bad number `{p}`")))
        })
        .collect()
}

fn parse_usize_list(key: &str, s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("key `{key}`: bad count `{p}`")))
        })
        .collect()
}

impl RunConfig {
    /// Apply one key. The `preset` key must come first in a file since the
    /// table iteration applies it before specific overrides (toml tables
    /// iterate in insertion order).
    pub fn apply(&mut self, key: &str, v: &toml::Value) -> Result<()> {
        match key {
            "preset" => {
                let name = as_str(key, v)?;
                let preserved = self.hyper.seed;
                self.hyper = HyperParams::preset(&name)?;
                self.hyper.seed = preserved;
            }
            "lambda_cycle" => self.hyper.lambda_cycle = as_f64(key, v)?,
            "lambda_trans" => self.hyper.lambda_trans = as_f64(key, v)?,
            "lambda_contrast" => self.hyper.lambda_contrast = as_f64(key, v)?,
            "lambda_task" => self.hyper.lambda_task = as_f64(key, v)?,
            "phi" => self.hyper.phi = as_f64(key, v)?,
            "margin" => self.hyper.margin = as_f64(key, v)?,
            "learning_rate" => self.hyper.learning_rate = as_f64(key, v)?,
            "batch_size" => self.hyper.batch_size = as_usize(key, v)?,
            "steps" => self.hyper.steps = as_usize(key, v)?,
            "grid_k" => self.hyper.grid_k = as_usize(key, v)?,
            "seed" => self.hyper.seed = as_u64(key, v)?,
            "checkpoint_every" => self.hyper.checkpoint_every = as_usize(key, v)?,
            "loss_matching" => self.hyper.toggles.matching = as_bool(key, v)?,
            "loss_cycle" => self.hyper.toggles.cycle = as_bool(key, v)?,
            "loss_trans" => self.hyper.toggles.trans = as_bool(key, v)?,
            "loss_contrast" => self.hyper.toggles.contrast = as_bool(key, v)?,
            "loss_task" => self.hyper.toggles.task = as_bool(key, v)?,
            "soft_corr_mask" => self.hyper.soft_corr_mask = as_bool(key, v)?,
            "mask_flow_in_matching" => self.hyper.mask_flow_in_matching = as_bool(key, v)?,
            "adam_beta1" => self.hyper.adam_beta1 = as_f64(key, v)?,
            "adam_beta2" => self.hyper.adam_beta2 = as_f64(key, v)?,
            "adam_eps" => self.hyper.adam_eps = as_f64(key, v)?,
            "augment" => self.hyper.augment = as_bool(key, v)?,

            "resolution" => {
                let r = as_usize(key, v)?;
                self.net.resolution = r;
                self.synth.resolution = r;
            }
            "enc_channels" => self.net.enc_channels = parse_usize_list(key, &as_str(key, v)?)?,
            "dec_channels" => self.net.dec_channels = parse_usize_list(key, &as_str(key, v)?)?,
            "ext_channels" => self.net.ext_channels = parse_usize_list(key, &as_str(key, v)?)?,
            "pred_channels" => {
                let list = parse_usize_list(key, &as_str(key, v)?)?;
                if list.len() != 2 {
                    return bad(key, "two counts, e.g. \"32,16\"");
                }
                self.net.pred_channels = (list[0], list[1]);
            }
            "semantic_dim" => self.net.semantic_dim = as_usize(key, v)?,
            "tps_k" => self.net.tps_k = as_usize(key, v)?,
            "upsample" => {
                self.net.upsample = match as_str(key, v)?.as_str() {
                    "nearest" => UpsampleMode::Nearest,
                    "deconv" => UpsampleMode::Deconv,
                    other => {
                        return Err(Error::Config(format!("unknown upsample mode `{other}`")))
                    }
                }
            }

            "shape" => self.synth.shape = as_str(key, v)?.parse::<ShapeFamily>()?,
            "radius_min" => self.synth.radius_range.0 = as_f64(key, v)?,
            "radius_max" => self.synth.radius_range.1 = as_f64(key, v)?,
            "max_rotation" => self.synth.max_rotation = as_f64(key, v)?,
            "scale_min" => self.synth.scale_range.0 = as_f64(key, v)?,
            "scale_max" => self.synth.scale_range.1 = as_f64(key, v)?,
            "max_translation" => self.synth.max_translation = as_f64(key, v)?,
            "max_shear" => self.synth.max_shear = as_f64(key, v)?,
            "tps_jitter" => self.synth.tps_jitter = as_f64(key, v)?,
            "clutter" => self.synth.clutter = as_usize(key, v)?,
            "keypoints" => self.synth.keypoints = as_usize(key, v)?,

            "hflip_prob" => self.augment.hflip_prob = as_f64(key, v)?,
            "crop_prob" => self.augment.crop_prob = as_f64(key, v)?,
            "crop_min_frac" => self.augment.crop_min_frac = as_f64(key, v)?,

            "train_manifest" => self.train_manifest = as_str(key, v)?,
            "eval_manifest" => self.eval_manifest = as_str(key, v)?,
            "train_count" => self.train_count = as_usize(key, v)?,
            "eval_count" => self.eval_count = as_usize(key, v)?,
            "data_seed" => self.data_seed = as_u64(key, v)?,
            "alphas" => self.alphas = parse_list(key, &as_str(key, v)?)?,
            "pck_alpha" => self.pck_alpha = as_f64(key, v)?,
            "binarize" => {
                let s = as_str(key, v)?;
                self.binarize = if s == "otsu" {
                    BinarizeMethod::Otsu
                } else if let Some(t) = s.strip_prefix("fixed:") {
                    BinarizeMethod::Fixed(t.parse::<f64>().map_err(|_| {
                        Error::Config(format!("bad fixed threshold `{t}`"))
                    })?)
                } else {
                    return Err(Error::Config(format!("unknown binarize method `{s}`")));
                };
            }
            "min_pck" => self.min_pck = Some(as_f64(key, v)?),
            "min_jaccard" => self.min_jaccard = Some(as_f64(key, v)?),
            "min_precision" => self.min_precision = Some(as_f64(key, v)?),

            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parse a flat TOML file on top of the defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read `{}`: {e}", path.display())))?;
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("`{}`: {e}", path.display())))?;
        let mut cfg = Self::default();
        // Presets first so specific keys override them.
        if let Some(v) = table.get("preset") {
            cfg.apply("preset", v)?;
        }
        for (k, v) in &table {
            if k == "preset" {
                continue;
            }
            if v.is_table() || v.is_array() {
                return Err(Error::Config(format!(
                    "key `{k}`: nested values are not allowed in the flat namespace"
                )));
            }
            cfg.apply(k, v)?;
        }
        Ok(cfg)
    }

    /// One `--set key=value` override. Values are parsed as TOML scalars,
    /// falling back to a bare string.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let Some((key, raw)) = spec.split_once('=') else {
            return Err(Error::Config(format!(
                "override `{spec}` is not of the form key=value"
            )));
        };
        let key = key.trim();
        let raw = raw.trim();
        let value = raw
            .parse::<toml::Value>()
            .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
        self.apply(key, &value)
    }

    /// Render the fully resolved configuration as flat TOML, every key
    /// explicit and in a fixed order, for the snapshot written next to run
    /// outputs.
    pub fn to_toml_string(&self) -> String {
        let mut s = String::new();
        let b = |x: bool| x.to_string();
        let list = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let flist = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let _ = writeln!(s, "lambda_cycle = {}", self.hyper.lambda_cycle);
        let _ = writeln!(s, "lambda_trans = {}", self.hyper.lambda_trans);
        let _ = writeln!(s, "lambda_contrast = {}", self.hyper.lambda_contrast);
        let _ = writeln!(s, "lambda_task = {}", self.hyper.lambda_task);
        let _ = writeln!(s, "phi = {}", self.hyper.phi);
        let _ = writeln!(s, "margin = {}", self.hyper.margin);
        let _ = writeln!(s, "learning_rate = {}", self.hyper.learning_rate);
        let _ = writeln!(s, "batch_size = {}", self.hyper.batch_size);
        let _ = writeln!(s, "steps = {}", self.hyper.steps);
        let _ = writeln!(s, "grid_k = {}", self.hyper.grid_k);
        let _ = writeln!(s, "seed = {}", self.hyper.seed);
        let _ = writeln!(s, "checkpoint_every = {}", self.hyper.checkpoint_every);
        let _ = writeln!(s, "loss_matching = {}", b(self.hyper.toggles.matching));
        let _ = writeln!(s, "loss_cycle = {}", b(self.hyper.toggles.cycle));
        let _ = writeln!(s, "loss_trans = {}", b(self.hyper.toggles.trans));
        let _ = writeln!(s, "loss_contrast = {}", b(self.hyper.toggles.contrast));
        let _ = writeln!(s, "loss_task = {}", b(self.hyper.toggles.task));
        let _ = writeln!(s, "soft_corr_mask = {}", b(self.hyper.soft_corr_mask));
        let _ = writeln!(
            s,
            "mask_flow_in_matching = {}",
            b(self.hyper.mask_flow_in_matching)
        );
        let _ = writeln!(s, "adam_beta1 = {}", self.hyper.adam_beta1);
        let _ = writeln!(s, "adam_beta2 = {}", self.hyper.adam_beta2);
        let _ = writeln!(s, "adam_eps = {}", self.hyper.adam_eps);
        let _ = writeln!(s, "augment = {}", b(self.hyper.augment));
        let _ = writeln!(s, "resolution = {}", self.net.resolution);
        let _ = writeln!(s, "enc_channels = \"{}\"", list(&self.net.enc_channels));
        let _ = writeln!(s, "dec_channels = \"{}\"", list(&self.net.dec_channels));
        let _ = writeln!(s, "ext_channels = \"{}\"", list(&self.net.ext_channels));
        let _ = writeln!(
            s,
            "pred_channels = \"{},{}\"",
            self.net.pred_channels.0, self.net.pred_channels.1
        );
        let _ = writeln!(s, "semantic_dim = {}", self.net.semantic_dim);
        let _ = writeln!(s, "tps_k = {}", self.net.tps_k);
        let _ = writeln!(
            s,
            "upsample = \"{}\"",
            match self.net.upsample {
                UpsampleMode::Nearest => "nearest",
                UpsampleMode::Deconv => "deconv",
            }
        );
        let _ = writeln!(
            s,
            "shape = \"{}\"",
            format!("{:?}", self.synth.shape).to_lowercase()
        );
        let _ = writeln!(s, "radius_min = {}", self.synth.radius_range.0);
        let _ = writeln!(s, "radius_max = {}", self.synth.radius_range.1);
        let _ = writeln!(s, "max_rotation = {}", self.synth.max_rotation);
        let _ = writeln!(s, "scale_min = {}", self.synth.scale_range.0);
        let _ = writeln!(s, "scale_max = {}", self.synth.scale_range.1);
        let _ = writeln!(s, "max_translation = {}", self.synth.max_translation);
        let _ = writeln!(s, "max_shear = {}", self.synth.max_shear);
        let _ = writeln!(s, "tps_jitter = {}", self.synth.tps_jitter);
        let _ = writeln!(s, "clutter = {}", self.synth.clutter);
        let _ = writeln!(s, "keypoints = {}", self.synth.keypoints);
        let _ = writeln!(s, "hflip_prob = {}", self.augment.hflip_prob);
        let _ = writeln!(s, "crop_prob = {}", self.augment.crop_prob);
        let _ = writeln!(s, "crop_min_frac = {}", self.augment.crop_min_frac);
        let _ = writeln!(s, "train_manifest = \"{}\"", self.train_manifest);
        let _ = writeln!(s, "eval_manifest = \"{}\"", self.eval_manifest);
        let _ = writeln!(s, "train_count = {}", self.train_count);
        let _ = writeln!(s, "eval_count = {}", self.eval_count);
        let _ = writeln!(s, "data_seed = {}", self.data_seed);
        let _ = writeln!(s, "alphas = \"{}\"", flist(&self.alphas));
        let _ = writeln!(s, "pck_alpha = {}", self.pck_alpha);
        let _ = writeln!(
            s,
            "binarize = \"{}\"",
            match self.binarize {
                BinarizeMethod::Otsu => "otsu".to_string(),
                BinarizeMethod::Fixed(t) => format!("fixed:{t}"),
            }
        );
        if let Some(v) = self.min_pck {
            let _ = writeln!(s, "min_pck = {v}");
        }
        if let Some(v) = self.min_jaccard {
            let _ = writeln!(s, "min_jaccard = {v}");
        }
        if let Some(v) = self.min_precision {
            let _ = writeln!(s, "min_precision = {v}");
        }
        s
    }

    /// Write the resolved snapshot into a run directory.
    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("resolved_config.toml"), self.to_toml_string())?;
        Ok(())
    }
}

//! Checkpoints: one JSON archive holding every weight array keyed by
//! module/layer name plus the hyperparameters of the run. The format is
//! stable across runs of the same crate version.

use crate::networks::{Model, NetConfig, ParamSet};
use crate::train::HyperParams;
use crate::{Error, Result};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct WeightEntry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: String,
    net_config: NetConfig,
    hyperparams: HyperParams,
    learnable: IndexMap<String, WeightEntry>,
    extractor: IndexMap<String, WeightEntry>,
}

fn pack(set: &ParamSet) -> IndexMap<String, WeightEntry> {
    set.entries
        .iter()
        .map(|(k, v)| {
            (
                k.clone(),
                WeightEntry {
                    shape: v.shape().to_vec(),
                    data: v.iter().copied().collect(),
                },
            )
        })
        .collect()
}

fn unpack(
    entries: IndexMap<String, WeightEntry>,
    into: &mut ParamSet,
    what: &str,
) -> Result<()> {
    for (key, expected) in into.entries.iter_mut() {
        let Some(e) = entries.get(key) else {
            return Err(Error::Checkpoint(format!("{what}: missing weight `{key}`")));
        };
        if e.shape != expected.shape() {
            return Err(Error::Checkpoint(format!(
                "{what}: weight `{key}` has shape {:?}, expected {:?}",
                e.shape,
                expected.shape()
            )));
        }
        *expected = ArrayD::from_shape_vec(IxDyn(&e.shape), e.data.clone())
            .map_err(|e| Error::Checkpoint(format!("{what}: bad weight `{key}`: {e}")))?;
    }
    if entries.len() != into.entries.len() {
        return Err(Error::Checkpoint(format!(
            "{what}: {} stored weights but the architecture has {}",
            entries.len(),
            into.entries.len()
        )));
    }
    Ok(())
}

/// Write a checkpoint.
pub fn save(path: &Path, model: &Model, hp: &HyperParams) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let file = CheckpointFile {
        version: env!("CARGO_PKG_VERSION").to_string(),
        net_config: model.cfg.clone(),
        hyperparams: hp.clone(),
        learnable: pack(&model.learnable),
        extractor: pack(&model.extractor),
    };
    std::fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

/// Read a checkpoint back into a model and its hyperparameters. Every
/// stored weight must match the architecture implied by the stored config.
pub fn load(path: &Path) -> Result<(Model, HyperParams)> {
    let bytes = std::fs::read(path)?;
    let file: CheckpointFile = serde_json::from_slice(&bytes)?;
    let mut model = Model::new(file.net_config, file.hyperparams.seed)?;
    unpack(file.learnable, &mut model.learnable, "learnable")?;
    unpack(file.extractor, &mut model.extractor, "extractor")?;
    Ok((model, file.hyperparams))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_everything() {
        let model = Model::new(
            NetConfig {
                resolution: 16,
                enc_channels: vec![4, 8],
                dec_channels: vec![8, 4, 4],
                ext_channels: vec![4, 4],
                semantic_dim: 8,
                ..NetConfig::default()
            },
            42,
        )
        .unwrap();
        let hp = HyperParams {
            margin: 1.75,
            seed: 42,
            ..HyperParams::default()
        };
        let path = std::env::temp_dir().join(format!("comatch_ckpt_{}.json", std::process::id()));
        save(&path, &model, &hp).unwrap();
        let (loaded, hp2) = load(&path).unwrap();
        assert_eq!(model.learnable.content_hash(), loaded.learnable.content_hash());
        assert_eq!(model.extractor.content_hash(), loaded.extractor.content_hash());
        assert_eq!(hp2.margin, hp.margin);
        let _ = std::fs::remove_file(&path);
    }

    #[test]
    fn corrupt_shape_is_rejected() {
        let model = Model::new(
            NetConfig {
                resolution: 16,
                enc_channels: vec![4, 8],
                dec_channels: vec![8, 4, 4],
                ext_channels: vec![4, 4],
                semantic_dim: 8,
                ..NetConfig::default()
            },
            1,
        )
        .unwrap();
        let hp = HyperParams::default();
        let path = std::env::temp_dir().join(format!("comatch_ckpt_bad_{}.json", std::process::id()));
        save(&path, &model, &hp).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text = text.replacen("\"shape\":[4]", "\"shape\":[5]", 1);
        std::fs::write(&path, text).unwrap();
        assert!(load(&path).is_err());
        let _ = std::fs::remove_file(&path);
    }
}

//! JSON checkpoints: the model config plus every named parameter tensor.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

const FORMAT: &str = "mnagt-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint<T: Scalar>(path: &Path, cfg: &ModelConfig, store: &ParamStore<T>) -> Result<()> {
    let file = CheckpointFile {
        format: FORMAT.into(),
        version: VERSION,
        config: cfg.clone(),
        tensors: store
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.data().iter().map(|v| v.as_f64()).collect(),
            })
            .collect(),
    };
    let text = serde_json::to_string(&file).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Rebuild the model described by the checkpoint and overwrite every
/// parameter with the stored values. Missing, extra or misshapen tensors
/// are errors.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ModelConfig, ModelParams, ParamStore<T>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if file.format != FORMAT || file.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{} (expected {FORMAT} v{VERSION})",
            file.format, file.version
        )));
    }
    let (params, mut store) = ModelParams::init::<T, _>(&file.config, &mut ChaCha8Rng::seed_from_u64(0))?;
    if file.tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            file.tensors.len(),
            store.len()
        )));
    }
    for entry in file.tensors {
        let tensor = Tensor::from_f64(&entry.shape, &entry.values)?;
        store.assign(&entry.name, tensor)?;
    }
    Ok((file.config, params, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::MnaConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            in_dim: 3,
            layers: 1,
            ffn_dim: 8,
            mna: MnaConfig { max_hop: 1, heads: 1, dim: 4, head_dim: 2, ..MnaConfig::default() },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn save_then_load_restores_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let (_, store) = ModelParams::init::<f32, _>(&cfg(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        save_checkpoint(&path, &cfg(), &store).unwrap();
        let (loaded_cfg, _, loaded) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded_cfg, cfg());
        assert_eq!(loaded.tensors(), store.tensors());
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let (_, store) = ModelParams::init::<f64, _>(&cfg(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        save_checkpoint(&path, &cfg(), &store).unwrap();
        let text = fs::read_to_string(&path).unwrap().replacen("\"shape\":[3,4]", "\"shape\":[4,3]", 1);
        fs::write(&path, text).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::Checkpoint(_))));
        fs::write(&path, "{").unwrap();
        assert!(load_checkpoint::<f64>(&path).is_err());
    }
}

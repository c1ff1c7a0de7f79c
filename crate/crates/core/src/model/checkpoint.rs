//! Model checkpoints: a JSON manifest next to a tensor blob holding the
//! weights and, optionally, the optimizer moments.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::store::{read_json, write_json, TensorBlob};

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
pub const CHECKPOINT_BLOB: &str = "weights.bin";
const FORMAT: &str = "icrl-checkpoint/1";

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub model: ModelConfig,
    pub epoch: usize,
    pub optim_step: Option<u64>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub epoch: usize,
    pub optim: Option<OptimState>,
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut blob = TensorBlob::default();
        self.params.to_blob("param.", &mut blob);
        if let Some(o) = &self.optim {
            blob.insert("adam.m", vec![o.m.len()], o.m.clone());
            blob.insert("adam.v", vec![o.v.len()], o.v.clone());
        }
        blob.save(&dir.join(CHECKPOINT_BLOB))?;
        let manifest = CheckpointManifest {
            format: FORMAT.into(),
            model: self.params.config.clone(),
            epoch: self.epoch,
            optim_step: self.optim.as_ref().map(|o| o.step),
            extra: self.extra.clone(),
        };
        write_json(&dir.join(CHECKPOINT_MANIFEST), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CheckpointManifest = read_json(&dir.join(CHECKPOINT_MANIFEST))?;
        if manifest.format != FORMAT {
            return Err(Error::Format(format!("unknown checkpoint format {}", manifest.format)));
        }
        manifest.model.validate()?;
        let blob = TensorBlob::load(&dir.join(CHECKPOINT_BLOB))?;
        let params = ModelParams::from_blob(&manifest.model, "param.", &blob)?;
        let optim = match manifest.optim_step {
            Some(step) => {
                let m = blob.get("adam.m")?.data.clone();
                let v = blob.get("adam.v")?.data.clone();
                if m.len() != params.data.len() || v.len() != params.data.len() {
                    return Err(Error::Format("optimizer state size mismatch".into()));
                }
                Some(OptimState { step, m, v })
            }
            None => None,
        };
        Ok(Checkpoint {
            params,
            epoch: manifest.epoch,
            optim,
            extra: manifest.extra,
        })
    }
}

/// Loads only the weights of a checkpoint directory.
pub fn load_params(dir: &Path) -> Result<ModelParams<f32>> {
    Ok(Checkpoint::load(dir)?.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envcore::Suite;
    use crate::rng::substream;

    #[test]
    fn roundtrip_with_optimizer() {
        let cfg = ModelConfig::sized(Suite::Tree, 1, 2, 8);
        let params = ModelParams::<f32>::init(&cfg, &mut substream(1, "init", 0)).unwrap();
        let n = params.data.len();
        let ck = Checkpoint {
            params,
            epoch: 7,
            optim: Some(OptimState {
                step: 99,
                m: vec![0.5; n],
                v: vec![0.25; n],
            }),
            extra: serde_json::json!({"note": "x"}),
        };
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.params.data, ck.params.data);
        assert_eq!(back.optim, ck.optim);
        assert_eq!(back.epoch, 7);
        assert_eq!(back.extra, ck.extra);
    }
}

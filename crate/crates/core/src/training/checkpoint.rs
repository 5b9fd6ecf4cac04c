//! Checkpoint directory: `meta.json` plus one little-endian f32 blob per tensor.

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::AdamHyper;
use super::train::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TimeEmbedding};
use crate::nn::ParamStore;
use crate::schedule::DiffusionSchedule;

pub const FORMAT: &str = "colorshift-checkpoint";
pub const VERSION: u32 = 1;
const META: &str = "meta.json";
const TENSORS: &str = "tensors";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub schedule: DiffusionSchedule,
    pub embedding: TimeEmbedding,
    pub train_config: TrainConfig,
    pub params: ParamStore<f32>,
    pub ema: ParamStore<f32>,
    pub adam_m: ParamStore<f32>,
    pub adam_v: ParamStore<f32>,
    pub adam_hyper: AdamHyper,
    pub adam_step: u64,
    pub epoch: u64,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    format: String,
    version: u32,
    model: ModelConfig,
    schedule: DiffusionSchedule,
    embedding: TimeEmbedding,
    train: TrainConfig,
    epoch: u64,
    step: u64,
    adam: AdamMeta,
    rng: ChaCha8Rng,
    tensors: Vec<TensorMeta>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamMeta {
    step: u64,
    #[serde(flatten)]
    hyper: AdamHyper,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorMeta {
    group: String,
    name: String,
    shape: Vec<usize>,
    file: String,
}

const GROUPS: [&str; 4] = ["params", "ema", "adam_m", "adam_v"];

impl Checkpoint {
    fn groups(&self) -> [&ParamStore<f32>; 4] {
        [&self.params, &self.ema, &self.adam_m, &self.adam_v]
    }

    /// Writes the checkpoint to `dir`, replacing any previous one only after
    /// the new one is complete.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let staging = sibling(dir, "tmp");
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        self.write_into(&staging)?;
        if dir.exists() {
            let old = sibling(dir, "old");
            if old.exists() {
                fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
            }
            fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
            fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        } else {
            fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(())
    }

    fn write_into(&self, dir: &Path) -> Result<()> {
        let tdir = dir.join(TENSORS);
        fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
        let mut tensors = Vec::new();
        for (group, store) in GROUPS.iter().zip(self.groups()) {
            for (i, p) in store.iter().enumerate() {
                let file = format!("{group}-{i:04}.f32");
                let bytes: Vec<u8> = p.data.iter().flat_map(|v| v.to_le_bytes()).collect();
                let path = tdir.join(&file);
                fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
                tensors.push(TensorMeta {
                    group: group.to_string(),
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    file,
                });
            }
        }
        let meta = Meta {
            format: FORMAT.into(),
            version: VERSION,
            model: self.model_config.clone(),
            schedule: self.schedule,
            embedding: self.embedding.clone(),
            train: self.train_config.clone(),
            epoch: self.epoch,
            step: self.step,
            adam: AdamMeta {
                step: self.adam_step,
                hyper: self.adam_hyper,
            },
            rng: self.rng.clone(),
            tensors,
        };
        let path = dir.join(META);
        let text = serde_json::to_string_pretty(&meta)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(META);
        if !path.exists() {
            return Err(Error::MissingInput(vec![path.display().to_string()]));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: Meta =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if meta.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", meta.format)));
        }
        if meta.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {VERSION})",
                meta.version
            )));
        }
        let mut stores: [ParamStore<f32>; 4] = Default::default();
        for t in &meta.tensors {
            let slot = GROUPS
                .iter()
                .position(|g| *g == t.group)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor group {:?}", t.group)))?;
            if t.file.contains('/') || t.file.contains('\\') || t.file.contains("..") {
                return Err(Error::Checkpoint(format!("invalid tensor file name {:?}", t.file)));
            }
            let path = dir.join(TENSORS).join(&t.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let len: usize = t.shape.iter().product();
            if bytes.len() != 4 * len {
                return Err(Error::Checkpoint(format!(
                    "{}: expected {} bytes, found {}",
                    path.display(),
                    4 * len,
                    bytes.len()
                )));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            stores[slot].push(t.name.clone(), t.shape.clone(), data);
        }
        let [params, ema, adam_m, adam_v] = stores;
        for (g, s) in GROUPS.iter().zip([&ema, &adam_m, &adam_v]).skip(0) {
            if !params.same_layout(s) {
                return Err(Error::Checkpoint(format!("tensor group {g} does not match params")));
            }
        }
        Ok(Self {
            model_config: meta.model,
            schedule: meta.schedule,
            embedding: meta.embedding,
            train_config: meta.train,
            params,
            ema,
            adam_m,
            adam_v,
            adam_hyper: meta.adam.hyper,
            adam_step: meta.adam.step,
            epoch: meta.epoch,
            step: meta.step,
            rng: meta.rng,
        })
    }
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".{suffix}"));
    dir.with_file_name(name)
}

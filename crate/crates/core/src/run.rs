//! The train, sample, diagnose and synth commands over run directories.
//!
//! A run directory holds `config.json` and `VERSION`, the loss log and
//! `checkpoint/` from training, the dataset cache under `data/`, samples under
//! `samples/` and diagnostics under `report/`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{code_version, RunConfig, CONFIG_FILE};
use crate::data::{export_samples, load_dataset, write_tensor, DataSource, Normalization};
use crate::diagnostics::{report, ReportSummary};
use crate::error::{Error, Result};
use crate::fields::ImageBatch;
use crate::loss::LossRecord;
use crate::model::ScoreModel;
use crate::sampler::{sample, SamplerConfig};
use crate::training::{holdout_split, train, Checkpoint, TrainOptions, Trainer, CHECKPOINT_DIR};

pub const DATA_CACHE_DIR: &str = "data";
pub const SAMPLES_DIR: &str = "samples";
pub const SAMPLE_RECORD: &str = "sampler.json";

fn normalization_of(kind: DataSource) -> Normalization {
    match kind {
        DataSource::Idx => Normalization::Byte,
        DataSource::Grf => Normalization::None,
    }
}

/// Loads the dataset of `config` through the cache in `run_dir/data`.
pub fn run_dataset(config: &RunConfig, run_dir: &Path) -> Result<ImageBatch<f32>> {
    load_dataset(&config.dataset, Some(&run_dir.join(DATA_CACHE_DIR)))
}

/// Trains per `config` into `run_dir`, resuming from an existing checkpoint.
pub fn cmd_train(config: &RunConfig, run_dir: &Path, progress: bool) -> Result<Vec<LossRecord>> {
    config.validate()?;
    let ck_dir = run_dir.join(CHECKPOINT_DIR);
    let mut trainer = if ck_dir.exists() {
        let ck = Checkpoint::load(&ck_dir)?;
        let mut saved = ck.train_config.clone();
        saved.epochs = config.train.epochs;
        if ck.model_config != config.model || ck.schedule != config.schedule || saved != config.train {
            return Err(Error::Config(format!(
                "{} was written with a different configuration; only train.epochs may change on resume",
                ck_dir.display()
            )));
        }
        let mut t = Trainer::from_checkpoint(ck)?;
        t.set_epochs(config.train.epochs);
        t
    } else {
        let model = ScoreModel::new(config.model.clone(), config.schedule, config.seed)?;
        Trainer::new(model, config.train.clone())?
    };
    config.write_to(run_dir)?;
    let data = run_dataset(config, run_dir)?;
    let (train_set, test_set) = holdout_split(&data, config.train.test_fraction, config.seed);
    let opts = TrainOptions {
        run_dir: Some(run_dir.to_path_buf()),
        progress,
    };
    let records = train(&mut trainer, &train_set, &test_set, &opts)?;
    if !ck_dir.exists() {
        trainer.checkpoint().save(&ck_dir)?;
    }
    Ok(records)
}

/// What `cmd_sample` wrote next to the images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub count: usize,
    pub use_ema: bool,
    pub epoch: u64,
    pub step: u64,
    pub sampler: SamplerConfig,
    pub version: String,
}

/// Draws `count` samples from the checkpoint in `run_dir` into `run_dir/samples`.
pub fn cmd_sample(run_dir: &Path, count: usize, use_ema: bool, seed: Option<u64>) -> Result<ImageBatch<f32>> {
    let cfg_path = run_dir.join(CONFIG_FILE);
    let ck_dir = run_dir.join(CHECKPOINT_DIR);
    let missing: Vec<String> = [&cfg_path, &ck_dir]
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingInput(missing));
    }
    let config = RunConfig::load(&cfg_path)?;
    let ck = Checkpoint::load(&ck_dir)?;
    let (epoch, step) = (ck.epoch, ck.step);
    let params = if use_ema { ck.ema } else { ck.params };
    let model = ScoreModel::from_parts(ck.model_config, ck.schedule, ck.embedding, params)?;
    let mut sampler = config.sampler.clone();
    if let Some(s) = seed {
        sampler.seed = s;
    }
    let images = sample::<f32, _>(
        &model,
        model.schedule(),
        model.config().channels,
        config.dataset.resolution,
        count,
        &sampler,
    )?;
    let dir = run_dir.join(SAMPLES_DIR);
    export_samples(&dir, &images, normalization_of(config.dataset.kind))?;
    let record = SampleRecord {
        count,
        use_ema,
        epoch,
        step,
        sampler,
        version: code_version(),
    };
    let path = dir.join(SAMPLE_RECORD);
    std::fs::write(&path, serde_json::to_string_pretty(&record)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(images)
}

/// Writes the diagnostics report comparing `run_dir/samples` against the run's dataset.
pub fn cmd_diagnose(run_dir: &Path) -> Result<ReportSummary> {
    let cfg_path = run_dir.join(CONFIG_FILE);
    let samples = run_dir.join(SAMPLES_DIR);
    let missing: Vec<String> = [
        cfg_path.clone(),
        samples.join("samples.f32"),
        samples.join("samples.json"),
    ]
    .iter()
    .filter(|p| !p.exists())
    .map(|p| p.display().to_string())
    .collect();
    if !missing.is_empty() {
        return Err(Error::MissingInput(missing));
    }
    let config = RunConfig::load(&cfg_path)?;
    let data = run_dataset(&config, run_dir)?;
    report(run_dir, &data, &config.diagnostics)
}

/// Generates the GRF dataset of `config` into `out_dir`; returns the tensor path.
pub fn cmd_synth(config: &RunConfig, out_dir: &Path, seed: Option<u64>) -> Result<PathBuf> {
    let mut config = config.clone();
    if config.dataset.kind != DataSource::Grf {
        return Err(Error::Config("synth needs dataset.kind = \"grf\"".into()));
    }
    if let Some(s) = seed {
        config.dataset.grf.get_or_insert_with(Default::default).seed = s;
    }
    config.validate()?;
    let (batch, norm) = config.dataset.build()?;
    config.write_to(out_dir)?;
    write_tensor(out_dir, &config.dataset.cache_stem(), &batch, (norm, Some(config.dataset.clone())))
}

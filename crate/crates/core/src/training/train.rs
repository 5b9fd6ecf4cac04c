use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamHyper, AdamState};
use super::checkpoint::Checkpoint;
use super::ema::EmaState;
use crate::error::{Error, Result};
use crate::fields::ImageBatch;
use crate::loss::{check_lambda, draw_times, loss_gradient, split_terms, LossLog, LossRecord, NoiseDraw, Split};
use crate::model::{check_resolution, Mode, ScoreModel};
use crate::nn::ParamStore;
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Zero writes the freshly initialized model without training.
    #[serde(default = "default_epochs")]
    pub epochs: u64,
    #[serde(default = "default_ema_rate")]
    pub ema_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_lambda_bar")]
    pub lambda_bar: f64,
    #[serde(default)]
    pub dropout: f64,
    /// Fraction of the dataset held out for the test-loss curve.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Write a checkpoint every this many epochs (0: only after the last epoch).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch_size() -> usize {
    16
}
fn default_epochs() -> u64 {
    100
}
fn default_ema_rate() -> f64 {
    0.999
}
fn default_lambda_bar() -> f64 {
    1.0
}
fn default_test_fraction() -> f64 {
    0.1
}
fn default_checkpoint_every() -> u64 {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: default_lr(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            ema_rate: default_ema_rate(),
            seed: 0,
            lambda_bar: default_lambda_bar(),
            dropout: 0.0,
            test_fraction: default_test_fraction(),
            checkpoint_every: default_checkpoint_every(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("train.learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if !(self.ema_rate > 0.0 && self.ema_rate < 1.0) {
            return bad(format!("train.ema_rate must lie in (0, 1), got {}", self.ema_rate));
        }
        check_lambda(self.lambda_bar)?;
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("train.dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad(format!("train.test_fraction must lie in [0, 1), got {}", self.test_fraction));
        }
        Ok(())
    }
}

/// Parameter gradient of `𝓛′ + λ̄ 𝓛̄` at the given noise draw, plus the loss itself.
pub fn gradients<T: Real>(
    model: &ScoreModel<T>,
    x0: &ImageBatch<T>,
    t_draws: &[f64],
    noise: &NoiseDraw<T>,
    lambda_bar: f64,
    mode: &mut Mode<'_>,
) -> Result<(ParamStore<T>, LossRecord)> {
    check_lambda(lambda_bar)?;
    let xt = model.schedule().perturb_each(x0, t_draws, &noise.eps)?;
    let (f, cache) = model.forward(&xt, t_draws, mode)?;
    let (l_prime, l_bar) = split_terms(&f, &noise.eps)?;
    let record = LossRecord::from_terms(l_prime, l_bar, x0.resolution());
    if !record.is_finite() {
        return Err(Error::TrainingFault {
            step: 0,
            msg: format!("non-finite loss (l_prime={l_prime}, l_bar={l_bar})"),
        });
    }
    let grads = model.backward(&cache, &loss_gradient(&f, &noise.eps, lambda_bar)?);
    if !grads.is_finite() {
        return Err(Error::TrainingFault {
            step: 0,
            msg: "non-finite gradient".into(),
        });
    }
    Ok((grads, record))
}

/// Deterministic train/test split; the last `ceil(fraction·n)` shuffled indices are held out.
pub fn holdout_split(data: &ImageBatch<f32>, fraction: f64, seed: u64) -> (ImageBatch<f32>, ImageBatch<f32>) {
    let n = data.batch();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    idx.shuffle(&mut rng);
    let n_test = ((fraction * n as f64).ceil() as usize).min(n.saturating_sub(1));
    let (train, test) = idx.split_at(n - n_test);
    (data.select(train), data.select(test))
}

fn with_step(e: Error, step: u64) -> Error {
    match e {
        Error::TrainingFault { msg, .. } => Error::TrainingFault { step, msg },
        other => other,
    }
}

/// Optimizer, EMA and random state of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub(crate) config: TrainConfig,
    pub(crate) model: ScoreModel<f32>,
    pub(crate) adam: AdamState<f32>,
    pub(crate) ema: EmaState<f32>,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) epoch: u64,
    pub(crate) step: u64,
}

impl Trainer {
    pub fn new(model: ScoreModel<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            adam: AdamState::new(model.params(), AdamHyper::default()),
            ema: EmaState::new(model.params(), config.ema_rate),
            config,
            model,
            rng,
            epoch: 0,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Changing the epoch budget is the only edit allowed when resuming.
    pub fn set_epochs(&mut self, epochs: u64) {
        self.config.epochs = epochs;
    }

    pub fn model(&self) -> &ScoreModel<f32> {
        &self.model
    }

    pub fn ema_model(&self) -> ScoreModel<f32> {
        self.model
            .with_params(self.ema.shadow.clone())
            .expect("shadow shares the model layout")
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn train_step(&mut self, batch: &ImageBatch<f32>) -> Result<LossRecord> {
        let step = self.step + 1;
        let ts = draw_times(&mut self.rng, self.model.schedule(), batch.batch());
        let noise = NoiseDraw::sample(&mut self.rng, batch.batch(), batch.channels(), batch.resolution());
        let mut mode = Mode::Train {
            rng: &mut self.rng,
            dropout: self.config.dropout,
        };
        let (grads, record) = gradients(&self.model, batch, &ts, &noise, self.config.lambda_bar, &mut mode)
            .map_err(|e| with_step(e, step))?;
        self.adam.step(self.model.params_mut(), &grads, self.config.learning_rate);
        if !self.model.params().is_finite() {
            return Err(Error::TrainingFault {
                step,
                msg: "non-finite parameters after update".into(),
            });
        }
        self.ema.update(self.model.params());
        self.step = step;
        Ok(record.at(step, Split::Train))
    }

    /// One pass over `data` in shuffled minibatches (the last one may be short).
    pub fn run_epoch(
        &mut self,
        data: &ImageBatch<f32>,
        sink: &mut dyn FnMut(&LossRecord) -> Result<()>,
    ) -> Result<()> {
        let mut idx: Vec<usize> = (0..data.batch()).collect();
        idx.shuffle(&mut self.rng);
        for chunk in idx.chunks(self.config.batch_size) {
            let record = self.train_step(&data.select(chunk))?;
            sink(&record)?;
        }
        self.epoch += 1;
        Ok(())
    }

    /// Loss over `data` with a noise draw that is identical at every call, so
    /// successive test losses differ only through the parameters.
    pub fn evaluate(&self, data: &ImageBatch<f32>, use_ema: bool) -> Result<LossRecord> {
        let ema;
        let model = if use_ema {
            ema = self.ema_model();
            &ema
        } else {
            &self.model
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(2);
        let (mut lp, mut lb) = (0.0, 0.0);
        let bs = self.config.batch_size.max(16);
        let mut start = 0;
        while start < data.batch() {
            let end = (start + bs).min(data.batch());
            let idx: Vec<usize> = (start..end).collect();
            let x0 = data.select(&idx);
            let ts = draw_times(&mut rng, model.schedule(), idx.len());
            let noise = NoiseDraw::sample(&mut rng, idx.len(), x0.channels(), x0.resolution());
            let xt = model.schedule().perturb_each(&x0, &ts, &noise.eps)?;
            let f = model.f(&xt, &ts)?;
            let (a, b) = split_terms(&f, &noise.eps)?;
            lp += a * idx.len() as f64;
            lb += b * idx.len() as f64;
            start = end;
        }
        let n = data.batch() as f64;
        let record = LossRecord::from_terms(lp / n, lb / n, data.resolution()).at(self.step, Split::Test);
        if !record.is_finite() {
            return Err(Error::TrainingFault {
                step: self.step,
                msg: "non-finite test loss".into(),
            });
        }
        Ok(record)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config().clone(),
            schedule: *self.model.schedule(),
            embedding: self.model.embedding().clone(),
            train_config: self.config.clone(),
            params: self.model.params().clone(),
            ema: self.ema.shadow.clone(),
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
            adam_hyper: self.adam.hyper,
            adam_step: self.adam.step,
            epoch: self.epoch,
            step: self.step,
            rng: self.rng.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.train_config.validate()?;
        let model = ScoreModel::from_parts(ck.model_config, ck.schedule, ck.embedding, ck.params)?;
        for (what, store) in [("ema", &ck.ema), ("adam_m", &ck.adam_m), ("adam_v", &ck.adam_v)] {
            if !model.params().same_layout(store) {
                return Err(Error::Checkpoint(format!("{what} layout does not match the parameters")));
            }
        }
        Ok(Self {
            ema: EmaState {
                shadow: ck.ema,
                rate: ck.train_config.ema_rate,
            },
            adam: AdamState {
                hyper: ck.adam_hyper,
                m: ck.adam_m,
                v: ck.adam_v,
                step: ck.adam_step,
            },
            config: ck.train_config,
            model,
            rng: ck.rng,
            epoch: ck.epoch,
            step: ck.step,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Receives `loss.csv` and `checkpoint/`.
    pub run_dir: Option<PathBuf>,
    /// Print one line per epoch to standard output.
    pub progress: bool,
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOSS_LOG: &str = "loss.csv";

/// Runs the remaining epochs of `trainer`, logging the train loss every step
/// and the test loss after every epoch. Returns the records written.
pub fn train(
    trainer: &mut Trainer,
    train_set: &ImageBatch<f32>,
    test_set: &ImageBatch<f32>,
    opts: &TrainOptions,
) -> Result<Vec<LossRecord>> {
    check_resolution(train_set.resolution())?;
    if train_set.batch() == 0 {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    if train_set.channels() != trainer.model.config().channels {
        return Err(Error::shape(&[trainer.model.config().channels], &[train_set.channels()]));
    }
    let mut log = match &opts.run_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(LossLog::open(&dir.join(LOSS_LOG))?)
        }
        None => None,
    };
    let mut records = Vec::new();
    while trainer.epoch < trainer.config.epochs {
        let mut sink = |r: &LossRecord| -> Result<()> {
            records.push(*r);
            match log.as_mut() {
                Some(l) => l.append(r),
                None => Ok(()),
            }
        };
        trainer.run_epoch(train_set, &mut sink)?;
        let test = if test_set.batch() > 0 {
            let r = trainer.evaluate(test_set, false)?;
            sink(&r)?;
            Some(r)
        } else {
            None
        };
        if let Some(l) = log.as_mut() {
            l.flush()?;
        }
        let every = trainer.config.checkpoint_every;
        let last = trainer.epoch == trainer.config.epochs;
        if let Some(dir) = &opts.run_dir {
            if last || (every > 0 && trainer.epoch % every == 0) {
                trainer.checkpoint().save(&dir.join(CHECKPOINT_DIR))?;
            }
        }
        if opts.progress {
            let last_train = records.iter().rev().find(|r| r.split == Split::Train);
            match (last_train, test) {
                (Some(tr), Some(te)) => println!(
                    "epoch {}/{} step {} train {:.5} test {:.5} (N²L̄ {:.4})",
                    trainer.epoch, trainer.config.epochs, trainer.step, tr.total, te.total, te.per_pixel_l_bar
                ),
                (Some(tr), None) => println!(
                    "epoch {}/{} step {} train {:.5}",
                    trainer.epoch, trainer.config.epochs, trainer.step, tr.total
                ),
                _ => {}
            }
        }
    }
    Ok(records)
}

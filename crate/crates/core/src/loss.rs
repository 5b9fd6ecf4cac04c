//! Denoising score-matching loss, split exactly into a fluctuation part `𝓛′`
//! and a spatial-mean part `𝓛̄`.
//!
//! With `a = f + ε` (where `f = σ(t) s`), per sample and channel
//! `Σ_pix a² = Σ_pix (a − ā)² + N² ā²`, so
//! `𝓛 = mean_b Σ_c Σ_pix a²/N² = 𝓛′ + 𝓛̄` with
//! `𝓛′ = mean_b Σ_c Σ_pix (a − ā)²/N²` and `𝓛̄ = mean_b Σ_c ā²`.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{demean, plane_mean, spatial_mean, ChannelMean, ImageBatch};
use crate::model::ScoreModel;
use crate::real::Real;
use crate::schedule::DiffusionSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub split: Split,
    pub l_prime: f64,
    pub l_bar: f64,
    /// `𝓛′`, which is already normalized per pixel.
    pub per_pixel_l_prime: f64,
    /// `N² 𝓛̄`.
    pub per_pixel_l_bar: f64,
    pub total: f64,
}

impl LossRecord {
    pub(crate) fn from_terms(l_prime: f64, l_bar: f64, resolution: usize) -> Self {
        let n2 = (resolution * resolution) as f64;
        Self {
            step: 0,
            split: Split::Train,
            l_prime,
            l_bar,
            per_pixel_l_prime: l_prime,
            per_pixel_l_bar: n2 * l_bar,
            total: l_prime + l_bar,
        }
    }

    pub fn at(mut self, step: u64, split: Split) -> Self {
        self.step = step;
        self.split = split;
        self
    }

    pub fn is_finite(&self) -> bool {
        self.l_prime.is_finite() && self.l_bar.is_finite()
    }
}

/// One standard-normal noise field and its Reynolds parts.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw<T = f32> {
    pub eps: ImageBatch<T>,
    pub eps_prime: ImageBatch<T>,
    pub eps_bar: ChannelMean<T>,
    /// `N ε̄`, a standard normal scalar per sample and channel.
    pub eps_bar_star: ChannelMean<T>,
}

impl<T: Real> NoiseDraw<T> {
    pub fn new(eps: ImageBatch<T>) -> Self {
        let eps_prime = demean(&eps);
        let eps_bar = spatial_mean(&eps);
        let n = T::of(eps.resolution() as f64);
        let star = eps_bar.values().iter().map(|&v| v * n).collect();
        let eps_bar_star = ChannelMean::from_vec(eps_bar.batch(), eps_bar.channels(), star).expect("same shape");
        Self {
            eps,
            eps_prime,
            eps_bar,
            eps_bar_star,
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, batch: usize, channels: usize, resolution: usize) -> Self {
        let eps = ImageBatch::from_fn(batch, channels, resolution, |_, _, _, _| {
            T::of(rng.sample::<f64, _>(StandardNormal))
        });
        Self::new(eps)
    }
}

/// One `t ~ U(t_eps, 1]` per batch element.
pub fn draw_times<R: Rng + ?Sized>(rng: &mut R, schedule: &DiffusionSchedule, batch: usize) -> Vec<f64> {
    let lo = schedule.t_eps();
    (0..batch)
        .map(|_| {
            let u: f64 = rng.random();
            lo + (1.0 - lo) * (1.0 - u)
        })
        .collect()
}

/// `(𝓛′, 𝓛̄)` for a prediction `f` against noise `eps`, accumulated in f64.
pub fn split_terms<T: Real>(f: &ImageBatch<T>, eps: &ImageBatch<T>) -> Result<(f64, f64)> {
    f.ensure_same_shape(eps)?;
    let n2 = f.pixels() as f64;
    let mut l_prime = 0.0;
    let mut l_bar = 0.0;
    let mut a = vec![0.0f64; f.pixels()];
    for b in 0..f.batch() {
        for c in 0..f.channels() {
            for ((o, &x), &e) in a.iter_mut().zip(f.plane(b, c)).zip(eps.plane(b, c)) {
                *o = x.f64() + e.f64();
            }
            let mean = plane_mean(&a);
            l_prime += a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n2;
            l_bar += mean * mean;
        }
    }
    let bsz = f.batch() as f64;
    Ok((l_prime / bsz, l_bar / bsz))
}

/// `∂(𝓛′ + λ̄ 𝓛̄)/∂f`.
pub fn loss_gradient<T: Real>(f: &ImageBatch<T>, eps: &ImageBatch<T>, lambda_bar: f64) -> Result<ImageBatch<T>> {
    f.ensure_same_shape(eps)?;
    let scale = 2.0 / (f.batch() as f64 * f.pixels() as f64);
    let mut g = ImageBatch::zeros(f.batch(), f.channels(), f.resolution());
    let mut a = vec![0.0f64; f.pixels()];
    for b in 0..f.batch() {
        for c in 0..f.channels() {
            for ((o, &x), &e) in a.iter_mut().zip(f.plane(b, c)).zip(eps.plane(b, c)) {
                *o = x.f64() + e.f64();
            }
            let mean = plane_mean(&a);
            for (o, &v) in g.plane_mut(b, c).iter_mut().zip(&a) {
                *o = T::of(scale * ((v - mean) + lambda_bar * mean));
            }
        }
    }
    Ok(g)
}

/// Evaluates the split loss of `model` at `x(t) = x0 + σ(t) ε` (dropout off).
pub fn dsm_terms<T: Real>(
    model: &ScoreModel<T>,
    x0: &ImageBatch<T>,
    t_draws: &[f64],
    noise: &NoiseDraw<T>,
) -> Result<LossRecord> {
    let xt = model.schedule().perturb_each(x0, t_draws, &noise.eps)?;
    let f = model.f(&xt, t_draws)?;
    let (l_prime, l_bar) = split_terms(&f, &noise.eps)?;
    let record = LossRecord::from_terms(l_prime, l_bar, x0.resolution());
    if !record.is_finite() {
        return Err(Error::TrainingFault {
            step: 0,
            msg: format!("non-finite loss (l_prime={l_prime}, l_bar={l_bar})"),
        });
    }
    Ok(record)
}

/// `𝓛′ + λ̄ 𝓛̄`.
pub fn loss_weighting(record: &LossRecord, lambda_bar: f64) -> Result<f64> {
    check_lambda(lambda_bar)?;
    Ok(record.l_prime + lambda_bar * record.l_bar)
}

pub(crate) fn check_lambda(lambda_bar: f64) -> Result<()> {
    if lambda_bar >= 0.0 && lambda_bar.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("lambda_bar must be a nonnegative number, got {lambda_bar}")))
    }
}

/// Appends loss records to a CSV file, writing the header when the file is new.
pub struct LossLog {
    writer: csv::Writer<std::fs::File>,
}

impl LossLog {
    pub fn open(path: &Path) -> Result<Self> {
        let exists = path.exists() && std::fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let writer = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
        Ok(Self { writer })
    }

    pub fn append(&mut self, record: &LossRecord) -> Result<()> {
        self.writer
            .serialize(record)
            .map_err(|e| Error::InvalidInput(format!("writing loss log: {e}")))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer
            .flush()
            .map_err(|e| Error::InvalidInput(format!("flushing loss log: {e}")))
    }
}

pub fn write_loss_csv<W: Write>(out: W, records: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r).map_err(|e| Error::InvalidInput(format!("writing loss log: {e}")))?;
    }
    w.flush().map_err(|e| Error::InvalidInput(format!("writing loss log: {e}")))
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display()))))
        .collect()
}

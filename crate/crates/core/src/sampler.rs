//! Euler–Maruyama integration of the reverse-time SDE
//! `dx = −g²(t) s(x, t) dt + g(t) dW` from `t = 1` down to `t_eps`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::ImageBatch;
use crate::model::{check_resolution, ScoreModel};
use crate::real::Real;
use crate::schedule::DiffusionSchedule;

/// Anything that can evaluate `s(x, t)` for a whole batch at one time.
pub trait ScoreFn<T: Real> {
    fn score(&self, x: &ImageBatch<T>, t: f64) -> Result<ImageBatch<T>>;

    /// Checks that a batch of this shape can be scored.
    fn check_shape(&self, _channels: usize, _resolution: usize) -> Result<()> {
        Ok(())
    }
}

impl<T: Real> ScoreFn<T> for ScoreModel<T> {
    fn score(&self, x: &ImageBatch<T>, t: f64) -> Result<ImageBatch<T>> {
        ScoreModel::score(self, x, t)
    }

    fn check_shape(&self, channels: usize, resolution: usize) -> Result<()> {
        if channels != self.config().channels {
            return Err(Error::shape(&[self.config().channels], &[channels]));
        }
        check_resolution(resolution)
    }
}

/// Closed-form score of Gaussian data `N(mu, sigma_data² I)` perturbed by the VE kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticScore {
    /// Per-channel means (length `C`) or a full mean field (length `C·N²`).
    pub mu: Vec<f64>,
    pub sigma_data: f64,
    pub schedule: DiffusionSchedule,
}

impl AnalyticScore {
    pub fn new(mu: Vec<f64>, sigma_data: f64, schedule: DiffusionSchedule) -> Result<Self> {
        if !(sigma_data >= 0.0 && sigma_data.is_finite()) {
            return Err(Error::Config(format!("sigma_data must be nonnegative, got {sigma_data}")));
        }
        Ok(Self {
            mu,
            sigma_data,
            schedule,
        })
    }

    fn mean_at(&self, c: usize, p: usize, channels: usize, pixels: usize) -> Result<f64> {
        if self.mu.len() == channels {
            Ok(self.mu[c])
        } else if self.mu.len() == channels * pixels {
            Ok(self.mu[c * pixels + p])
        } else {
            Err(Error::shape(&[channels, channels * pixels], &[self.mu.len()]))
        }
    }
}

/// `−(x − mu)/(sigma_data² + σ²(t))`, elementwise.
pub fn analytic_score<T: Real>(oracle: &AnalyticScore, x: &ImageBatch<T>, t: f64) -> Result<ImageBatch<T>> {
    let var = oracle.sigma_data.powi(2) + oracle.schedule.sigma(t)?.powi(2);
    let (c_n, p_n) = (x.channels(), x.pixels());
    let mut out = ImageBatch::zeros(x.batch(), c_n, x.resolution());
    for b in 0..x.batch() {
        for c in 0..c_n {
            for (p, (o, &v)) in out.plane_mut(b, c).iter_mut().zip(x.plane(b, c)).enumerate() {
                *o = T::of(-(v.f64() - oracle.mean_at(c, p, c_n, p_n)?) / var);
            }
        }
    }
    Ok(out)
}

impl<T: Real> ScoreFn<T> for AnalyticScore {
    fn score(&self, x: &ImageBatch<T>, t: f64) -> Result<ImageBatch<T>> {
        analytic_score(self, x, t)
    }

    fn check_shape(&self, channels: usize, resolution: usize) -> Result<()> {
        let pixels = resolution * resolution;
        if self.mu.len() == channels || self.mu.len() == channels * pixels {
            Ok(())
        } else {
            Err(Error::shape(&[channels, channels * pixels], &[self.mu.len()]))
        }
    }
}

/// `s ≡ 0`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroScore;

impl<T: Real> ScoreFn<T> for ZeroScore {
    fn score(&self, x: &ImageBatch<T>, _t: f64) -> Result<ImageBatch<T>> {
        Ok(ImageBatch::zeros(x.batch(), x.channels(), x.resolution()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_steps")]
    pub n_steps: usize,
    #[serde(default = "default_t_start")]
    pub t_start: f64,
    /// Defaults to the schedule's `t_eps`.
    #[serde(default)]
    pub t_end: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Take the last step without the stochastic term.
    #[serde(default = "default_true")]
    pub denoise_final: bool,
    /// Number of chains integrated together.
    #[serde(default = "default_chunk")]
    pub chunk: usize,
}

fn default_steps() -> usize {
    500
}
fn default_t_start() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_chunk() -> usize {
    32
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: default_steps(),
            t_start: default_t_start(),
            t_end: None,
            seed: 0,
            denoise_final: true,
            chunk: default_chunk(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &DiffusionSchedule) -> Result<()> {
        self.resolved_end(schedule).map(|_| ())
    }

    fn resolved_end(&self, schedule: &DiffusionSchedule) -> Result<f64> {
        let t_end = self.t_end.unwrap_or(schedule.t_eps());
        if self.n_steps == 0 {
            return Err(Error::Config("sampler.n_steps must be at least 1".into()));
        }
        if self.chunk == 0 {
            return Err(Error::Config("sampler.chunk must be at least 1".into()));
        }
        if !(self.t_start <= 1.0 && t_end > 0.0 && t_end < self.t_start) {
            return Err(Error::Config(format!(
                "sampler needs 0 < t_end < t_start <= 1, got t_end={t_end}, t_start={}",
                self.t_start
            )));
        }
        Ok(t_end)
    }
}

/// `x + g² s dt + g √dt z` (reverse time, `dt > 0`); `z = None` drops the noise term.
pub fn em_update<T: Real>(x: &ImageBatch<T>, score: &ImageBatch<T>, g: f64, dt: f64, z: Option<&ImageBatch<T>>) -> Result<ImageBatch<T>> {
    x.ensure_same_shape(score)?;
    if let Some(z) = z {
        x.ensure_same_shape(z)?;
    }
    let drift = T::of(g * g * dt);
    let diff = T::of(g * dt.sqrt());
    let mut out = x.clone();
    for (o, &s) in out.data_mut().iter_mut().zip(score.data()) {
        *o += drift * s;
    }
    if let Some(z) = z {
        for (o, &v) in out.data_mut().iter_mut().zip(z.data()) {
            *o += diff * v;
        }
    }
    Ok(out)
}

/// One reverse step from `t` to `t − dt`.
pub fn em_step<T: Real, S: ScoreFn<T> + ?Sized>(
    schedule: &DiffusionSchedule,
    x: &ImageBatch<T>,
    t: f64,
    dt: f64,
    score_fn: &S,
    z: Option<&ImageBatch<T>>,
) -> Result<ImageBatch<T>> {
    if !(dt > 0.0) {
        return Err(Error::Domain {
            what: "dt",
            value: dt,
            lo: 0.0,
            hi: f64::INFINITY,
        });
    }
    let s = score_fn.score(x, t)?;
    em_update(x, &s, schedule.g(t)?, dt, z)
}

fn normal_batch<T: Real>(rng: &mut ChaCha8Rng, b: usize, c: usize, n: usize, scale: f64) -> ImageBatch<T> {
    ImageBatch::from_fn(b, c, n, |_, _, _, _| T::of(scale * rng.sample::<f64, _>(StandardNormal)))
}

/// Draws `count` samples of shape `channels × resolution²` from `x(t_start) ~ N(0, σ²(t_start) I)`.
pub fn sample<T: Real, S: ScoreFn<T> + ?Sized>(
    score_fn: &S,
    schedule: &DiffusionSchedule,
    channels: usize,
    resolution: usize,
    count: usize,
    config: &SamplerConfig,
) -> Result<ImageBatch<T>> {
    let t_end = config.resolved_end(schedule)?;
    score_fn.check_shape(channels, resolution)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n_steps;
    let dt = (config.t_start - t_end) / n as f64;
    let sigma0 = schedule.sigma(config.t_start)?;
    let mut parts = Vec::new();
    let mut done = 0;
    while done < count {
        let b = config.chunk.min(count - done);
        let mut x = normal_batch::<T>(&mut rng, b, channels, resolution, sigma0);
        for i in 0..n {
            let t = config.t_start - i as f64 * dt;
            let last = i + 1 == n;
            let z = if last && config.denoise_final {
                None
            } else {
                Some(normal_batch::<T>(&mut rng, b, channels, resolution, 1.0))
            };
            x = em_step(schedule, &x, t, dt, score_fn, z.as_ref()).map_err(|e| match e {
                Error::Domain { .. } | Error::Shape { .. } | Error::Config(_) => e,
                other => Error::SamplingFault {
                    step: i,
                    msg: other.to_string(),
                },
            })?;
            if !x.is_finite() {
                return Err(Error::SamplingFault {
                    step: i,
                    msg: format!("non-finite state at t={t}"),
                });
            }
        }
        parts.push(x);
        done += b;
    }
    if parts.is_empty() {
        return Ok(ImageBatch::zeros(0, channels, resolution));
    }
    ImageBatch::concat(&parts)
}

//! Gaussian random fields with a power-law spectrum, used as a stand-in for
//! turbulence snapshots.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{signed_freq, Fft2};
use crate::fields::ImageBatch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrfConfig {
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    /// Slope of the azimuthally averaged power spectrum, `P(k) ∝ k^alpha`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Standard deviation of the fluctuations.
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    /// Standard deviation of the per-sample spatial mean.
    #[serde(default = "default_jitter")]
    pub mean_jitter_std: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_resolution() -> usize {
    64
}
fn default_alpha() -> f64 {
    -3.0
}
fn default_amplitude() -> f64 {
    1.0
}
fn default_jitter() -> f64 {
    0.3
}

impl Default for GrfConfig {
    fn default() -> Self {
        Self {
            resolution: default_resolution(),
            alpha: default_alpha(),
            amplitude: default_amplitude(),
            mean_jitter_std: default_jitter(),
            seed: 0,
        }
    }
}

impl GrfConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.resolution;
        if n < 2 || !n.is_power_of_two() {
            return Err(Error::Config(format!("grf.resolution must be a power of two >= 2, got {n}")));
        }
        if !self.alpha.is_finite() || !(self.amplitude > 0.0) || !(self.mean_jitter_std >= 0.0) {
            return Err(Error::Config("grf.alpha must be finite, amplitude positive, mean_jitter_std nonnegative".into()));
        }
        Ok(())
    }
}

/// Fields before standardization, plus the largest imaginary residue seen.
fn raw_fields(config: &GrfConfig, count: usize, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, f64) {
    let n = config.resolution;
    let fft = Fft2::new(n);
    let filter: Vec<f64> = (0..n * n)
        .map(|i| {
            let (ky, kx) = (signed_freq(i / n, n) as f64, signed_freq(i % n, n) as f64);
            let k = (kx * kx + ky * ky).sqrt();
            if k == 0.0 {
                0.0
            } else {
                k.powf(config.alpha / 2.0)
            }
        })
        .collect();
    let mut residue: f64 = 0.0;
    let fields = (0..count)
        .map(|_| {
            // the transform of real white noise has Gaussian, Hermitian-symmetric
            // coefficients; shaping them keeps the symmetry
            let mut buf: Vec<Complex64> = (0..n * n)
                .map(|_| Complex64::new(rng.sample(StandardNormal), 0.0))
                .collect();
            fft.forward(&mut buf);
            for (v, &a) in buf.iter_mut().zip(&filter) {
                *v *= a;
            }
            fft.inverse(&mut buf);
            residue = buf.iter().fold(residue, |m, v| m.max(v.im.abs()));
            buf.iter().map(|v| v.re).collect()
        })
        .collect();
    (fields, residue)
}

/// `count` single-channel fields: unit-variance fluctuations scaled by
/// `amplitude`, plus a per-sample mean drawn from `N(0, mean_jitter_std²)`.
pub fn synth_grf(config: &GrfConfig, count: usize) -> Result<ImageBatch<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (fields, _) = raw_fields(config, count, &mut rng);
    let n = config.resolution;
    let mut out = ImageBatch::zeros(count, 1, n);
    for (b, f) in fields.iter().enumerate() {
        let mean = f.iter().sum::<f64>() / f.len() as f64;
        let std = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f.len() as f64).sqrt();
        let jitter = config.mean_jitter_std * rng.sample::<f64, _>(StandardNormal);
        for (o, v) in out.plane_mut(b, 0).iter_mut().zip(f) {
            *o = (config.amplitude * (v - mean) / std + jitter) as f32;
        }
    }
    Ok(out)
}

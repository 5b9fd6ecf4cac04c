//! Color-shift and spatial-structure diagnostics.

mod report;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{signed_freq, Fft2};
use crate::fields::{plane_mean, ImageBatch};
use crate::real::Real;

pub use report::{report, ReportOptions, ReportSummary, KDE_HEADER, LOSSES_HEADER, SPECTRA_HEADER, STATS_HEADER, WASSERSTEIN_HEADER};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Data,
    Generated,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Data => "data",
            Source::Generated => "generated",
        }
    }
}

/// Per-image, per-channel spatial means and standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub source: Source,
    pub resolution: usize,
}

/// Spatial mean and population standard deviation (divisor `N²`) of every plane.
pub fn spatial_stats<T: Real>(images: &ImageBatch<T>, source: Source) -> Result<SummaryStats> {
    if images.batch() == 0 {
        return Err(Error::InvalidInput("spatial_stats needs at least one image".into()));
    }
    let mut means = Vec::with_capacity(images.batch() * images.channels());
    let mut stds = Vec::with_capacity(means.capacity());
    for b in 0..images.batch() {
        for c in 0..images.channels() {
            // shifting by the first pixel keeps constant planes exact
            let p = images.plane(b, c);
            let shift = p[0].f64();
            let d = p.iter().map(|v| v.f64() - shift).sum::<f64>() / p.len() as f64;
            let var = p.iter().map(|v| (v.f64() - shift - d).powi(2)).sum::<f64>() / p.len() as f64;
            means.push(shift + d);
            stds.push(var.sqrt());
        }
    }
    Ok(SummaryStats {
        means,
        stds,
        source,
        resolution: images.resolution(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KdEstimate {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0).max(1.0);
    (m, var.sqrt())
}

/// Silverman's rule `1.06 σ̂ n^(−1/5)` with the sample standard deviation.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    1.06 * mean_std(samples).1 * (samples.len() as f64).powf(-0.2)
}

/// Gaussian-kernel density estimate evaluated on `grid`.
pub fn kde(samples: &[f64], grid: &[f64]) -> Result<KdEstimate> {
    if samples.len() < 2 {
        return Err(Error::InvalidInput("kde needs at least two samples".into()));
    }
    let h = silverman_bandwidth(samples);
    if !(h > 0.0) {
        return Err(Error::InvalidInput(
            "kde samples have zero spread; use a histogram of the values instead".into(),
        ));
    }
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let density = grid
        .iter()
        .map(|&x| norm * samples.iter().map(|&s| (-0.5 * ((x - s) / h).powi(2)).exp()).sum::<f64>())
        .collect();
    Ok(KdEstimate {
        grid: grid.to_vec(),
        density,
        bandwidth: h,
    })
}

/// `points` evenly spaced values covering the samples with a margin of `pad` bandwidths.
pub fn kde_grid(samples: &[f64], points: usize, pad: f64) -> Vec<f64> {
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let h = silverman_bandwidth(samples).max(1e-12);
    let (a, b) = (lo - pad * h, hi + pad * h);
    (0..points)
        .map(|i| a + (b - a) * i as f64 / (points.max(2) - 1) as f64)
        .collect()
}

/// Trapezoidal integral of a density on its grid.
pub fn integrate(grid: &[f64], density: &[f64]) -> f64 {
    grid.windows(2)
        .zip(density.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

/// Empirical 1-Wasserstein distance `∫₀¹ |F_a⁻¹(u) − F_b⁻¹(u)| du`.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("wasserstein1 needs two nonempty samples".into()));
    }
    let sort = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(|x, y| x.total_cmp(y));
        s
    };
    let (a, b) = (sort(a), sort(b));
    let (n, m) = (a.len(), b.len());
    if n == m {
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64);
    }
    // walk the merged quantile breakpoints i/n and j/m
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        total += (next - u) * (a[i] - b[j]).abs();
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    Ok(total)
}

/// Unbinned power `|F(k)|²/N⁴` of the demeaned plane, row-major over FFT indices.
pub fn power_spectrum_2d<T: Real>(plane: &[T], n: usize) -> Result<Vec<f64>> {
    if plane.len() != n * n {
        return Err(Error::shape(&[n * n], &[plane.len()]));
    }
    let m = plane_mean(plane);
    let mut buf: Vec<Complex64> = plane.iter().map(|v| Complex64::new(v.f64() - m, 0.0)).collect();
    Fft2::new(n).forward(&mut buf);
    let n4 = (n as f64).powi(4);
    Ok(buf.iter().map(|v| v.norm_sqr() / n4).collect())
}

/// Azimuthally averaged power for `k = 1..=N/2` (element `k − 1`), binning by
/// `round(√(k_x² + k_y²))` over signed frequencies.
pub fn azimuthal_spectrum<T: Real>(plane: &[T], n: usize) -> Result<Vec<f64>> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::InvalidInput(format!("azimuthal_spectrum needs an even side, got {n}")));
    }
    let power = power_spectrum_2d(plane, n)?;
    let half = n / 2;
    let mut sum = vec![0.0; half];
    let mut cnt = vec![0usize; half];
    for (i, p) in power.iter().enumerate() {
        let (ky, kx) = (signed_freq(i / n, n) as f64, signed_freq(i % n, n) as f64);
        let r = (kx * kx + ky * ky).sqrt().round() as usize;
        if (1..=half).contains(&r) {
            sum[r - 1] += p;
            cnt[r - 1] += 1;
        }
    }
    Ok(sum.iter().zip(&cnt).map(|(s, &c)| s / c as f64).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumEstimate {
    pub k: Vec<usize>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap of the per-`k` mean spectrum.
pub fn bootstrap_ci(spectra: &[Vec<f64>], n_boot: usize, level: f64, seed: u64) -> Result<SpectrumEstimate> {
    if spectra.len() < 2 {
        return Err(Error::InvalidInput("bootstrap_ci needs at least two spectra".into()));
    }
    if n_boot == 0 || !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("bootstrap needs n_boot > 0 and level in (0, 1), got {n_boot}, {level}")));
    }
    let len = spectra[0].len();
    if spectra.iter().any(|s| s.len() != len) {
        return Err(Error::InvalidInput("spectra have different lengths".into()));
    }
    let m = spectra.len();
    let mean: Vec<f64> = (0..len).map(|k| spectra.iter().map(|s| s[k]).sum::<f64>() / m as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut resampled = vec![Vec::with_capacity(n_boot); len];
    for _ in 0..n_boot {
        let mut acc = vec![0.0; len];
        for _ in 0..m {
            let s = &spectra[rng.random_range(0..m)];
            acc.iter_mut().zip(s).for_each(|(a, v)| *a += v);
        }
        for (k, a) in acc.into_iter().enumerate() {
            resampled[k].push(a / m as f64);
        }
    }
    let tail = (1.0 - level) / 2.0;
    let (mut lower, mut upper) = (Vec::with_capacity(len), Vec::with_capacity(len));
    for mut r in resampled {
        r.sort_by(|a, b| a.total_cmp(b));
        lower.push(quantile(&r, tail));
        upper.push(quantile(&r, 1.0 - tail));
    }
    Ok(SpectrumEstimate {
        k: (1..=len).collect(),
        mean,
        lower,
        upper,
    })
}

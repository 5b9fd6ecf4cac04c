use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{azimuthal_spectrum, bootstrap_ci, kde, kde_grid, spatial_stats, wasserstein1, Source};
use crate::data::read_tensor;
use crate::error::{Error, Result};
use crate::fields::ImageBatch;
use crate::loss::{read_loss_csv, Split};

pub const STATS_HEADER: &str = "source,index,channel,mean,std";
pub const KDE_HEADER: &str = "quantity,source,x,density";
pub const WASSERSTEIN_HEADER: &str = "quantity,w1";
pub const LOSSES_HEADER: &str = "resolution,split,step,per_pixel_l_prime,per_pixel_l_bar";
pub const SPECTRA_HEADER: &str = "source,k,mean,lower,upper";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportOptions {
    /// Number of data images compared against the generated ones; unset means
    /// 200, or 100 at 256² and 33 at 512².
    #[serde(default)]
    pub sample_count: Option<usize>,
    #[serde(default = "default_kde_points")]
    pub kde_points: usize,
    #[serde(default = "default_boot")]
    pub n_boot: usize,
    #[serde(default = "default_level")]
    pub ci_level: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_kde_points() -> usize {
    256
}
fn default_boot() -> usize {
    100
}
fn default_level() -> f64 {
    0.9
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            sample_count: None,
            kde_points: default_kde_points(),
            n_boot: default_boot(),
            ci_level: default_level(),
            seed: 0,
        }
    }
}

impl ReportOptions {
    pub fn compare_count(&self, resolution: usize) -> usize {
        self.sample_count.unwrap_or(match resolution {
            512.. => 33,
            256.. => 100,
            _ => 200,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_count == Some(0) || self.kde_points < 2 || self.n_boot == 0 || !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::Config(
                "diagnostics needs sample_count > 0, kde_points >= 2, n_boot > 0 and ci_level in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportSummary {
    pub w1_mean: f64,
    pub w1_std: f64,
    pub n_data: usize,
    pub n_generated: usize,
    pub files: Vec<PathBuf>,
}

struct Table {
    name: &'static str,
    lines: Vec<String>,
}

impl Table {
    fn new(name: &'static str, header: &str) -> Self {
        Self {
            name,
            lines: vec![header.to_string()],
        }
    }

    fn row(&mut self, line: String) {
        self.lines.push(line);
    }
}

/// Compares `run_dir/samples/samples.f32` against `data` and writes
/// `stats.csv`, `kde.csv`, `wasserstein.csv`, `losses.csv` and `spectra.csv`
/// under `run_dir/report/`. Nothing is written unless every table can be built.
pub fn report(run_dir: &Path, data: &ImageBatch<f32>, opts: &ReportOptions) -> Result<ReportSummary> {
    opts.validate()?;
    let (generated, _) = read_tensor(&run_dir.join("samples").join("samples"))?;
    if generated.batch() == 0 {
        return Err(Error::InvalidInput(format!("{}: no generated samples", run_dir.display())));
    }
    if data.batch() == 0 {
        return Err(Error::InvalidInput("no data images to compare against".into()));
    }
    if generated.channels() != data.channels() || generated.resolution() != data.resolution() {
        return Err(Error::shape(&data.shape()[1..], &generated.shape()[1..]));
    }
    let take = opts.compare_count(data.resolution()).min(data.batch());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut idx = sample_indices(&mut rng, data.batch(), take).into_vec();
    idx.sort_unstable();
    let reference = data.select(&idx);

    let ds = spatial_stats(&reference, Source::Data)?;
    let gs = spatial_stats(&generated, Source::Generated)?;

    let mut stats = Table::new("stats.csv", STATS_HEADER);
    for s in [&ds, &gs] {
        let c = data.channels();
        for (i, (m, sd)) in s.means.iter().zip(&s.stds).enumerate() {
            stats.row(format!("{},{},{},{m},{sd}", s.source.as_str(), i / c, i % c));
        }
    }

    let mut kdes = Table::new("kde.csv", KDE_HEADER);
    for (quantity, a, b) in [("mean", &ds.means, &gs.means), ("std", &ds.stds, &gs.stds)] {
        let pooled: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
        let grid = kde_grid(&pooled, opts.kde_points, 3.0);
        for (source, v) in [(Source::Data, a), (Source::Generated, b)] {
            // degenerate samples (one value, or all equal) have no density curve
            if let Ok(e) = kde(v, &grid) {
                for (x, d) in e.grid.iter().zip(&e.density) {
                    kdes.row(format!("{quantity},{},{x},{d}", source.as_str()));
                }
            }
        }
    }

    let w1_mean = wasserstein1(&ds.means, &gs.means)?;
    let w1_std = wasserstein1(&ds.stds, &gs.stds)?;
    let mut w1 = Table::new("wasserstein.csv", WASSERSTEIN_HEADER);
    w1.row(format!("mean,{w1_mean}"));
    w1.row(format!("std,{w1_std}"));

    let mut losses = Table::new("losses.csv", LOSSES_HEADER);
    let log = run_dir.join(crate::training::LOSS_LOG);
    if log.exists() {
        let records = read_loss_csv(&log)?;
        for split in [Split::Train, Split::Test] {
            if let Some(r) = records.iter().rev().find(|r| r.split == split) {
                let name = if split == Split::Train { "train" } else { "test" };
                losses.row(format!(
                    "{},{name},{},{},{}",
                    data.resolution(),
                    r.step,
                    r.per_pixel_l_prime,
                    r.per_pixel_l_bar
                ));
            }
        }
    }

    let mut spectra = Table::new("spectra.csv", SPECTRA_HEADER);
    for (source, batch) in [(Source::Data, &reference), (Source::Generated, &generated)] {
        let n = batch.resolution();
        let mut per_plane = Vec::with_capacity(batch.batch() * batch.channels());
        for b in 0..batch.batch() {
            for c in 0..batch.channels() {
                per_plane.push(azimuthal_spectrum(batch.plane(b, c), n)?);
            }
        }
        if per_plane.len() < 2 {
            continue;
        }
        let e = bootstrap_ci(&per_plane, opts.n_boot, opts.ci_level, opts.seed)?;
        for i in 0..e.k.len() {
            spectra.row(format!("{},{},{},{},{}", source.as_str(), e.k[i], e.mean[i], e.lower[i], e.upper[i]));
        }
    }

    let out_dir = run_dir.join("report");
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut files = Vec::new();
    for t in [stats, kdes, w1, losses, spectra] {
        let path = out_dir.join(t.name);
        fs::write(&path, t.lines.join("\n") + "\n").map_err(|e| Error::io(&path, e))?;
        files.push(path);
    }
    Ok(ReportSummary {
        w1_mean,
        w1_std,
        n_data: reference.batch(),
        n_generated: generated.batch(),
        files,
    })
}

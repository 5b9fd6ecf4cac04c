//! Dataset ingestion, resampling, normalization, caching and image export.

pub mod grf;
pub mod idx;
pub mod resize;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::ImageBatch;

pub use grf::{synth_grf, GrfConfig};
pub use idx::{load_idx, IdxImages};
pub use resize::{resize, ResizeMethod};

/// `[0, 255] → [−1, 1]`.
pub fn normalize(batch: &ImageBatch<f32>) -> ImageBatch<f32> {
    batch.map(|v| (v as f64 / 127.5 - 1.0) as f32)
}

/// Inverse of [`normalize`].
pub fn denormalize(batch: &ImageBatch<f32>) -> ImageBatch<f32> {
    batch.map(|v| ((v as f64 + 1.0) * 127.5) as f32)
}

/// Normalized value to an 8-bit gray level, clamped.
pub fn to_gray(v: f32) -> u8 {
    ((v as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Idx,
    Grf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataSource,
    /// IDX images file (plain or gzip) for `idx`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Number of images to use (the first ones in file order, or the number of fields).
    pub count: usize,
    pub resolution: usize,
    #[serde(default)]
    pub interpolation: ResizeMethod,
    /// Spectrum parameters for `grf`; its resolution is overridden by `resolution`.
    #[serde(default)]
    pub grf: Option<GrfConfig>,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.resolution == 0 {
            return Err(Error::Config("dataset.count and dataset.resolution must be positive".into()));
        }
        if self.kind == DataSource::Idx && self.path.is_none() {
            return Err(Error::Config("dataset.path is required for idx".into()));
        }
        Ok(())
    }

    pub fn cache_stem(&self) -> String {
        match self.kind {
            DataSource::Idx => format!(
                "idx-{}-{}-{}",
                self.count,
                self.resolution,
                match self.interpolation {
                    ResizeMethod::Bilinear => "bilinear",
                    ResizeMethod::Nearest => "nearest",
                }
            ),
            DataSource::Grf => {
                let g = self.grf.clone().unwrap_or_default();
                format!("grf-{}-{}-seed{}", self.count, self.resolution, g.seed)
            }
        }
    }

    pub(crate) fn build(&self) -> Result<(ImageBatch<f32>, Normalization)> {
        match self.kind {
            DataSource::Idx => {
                let path = self.path.as_ref().expect("validated");
                let idx = IdxImages::read(path)?;
                let raw = idx.to_batch(0, self.count.min(idx.count))?;
                if raw.batch() < self.count {
                    return Err(Error::InvalidInput(format!(
                        "{} holds {} images, {} requested",
                        path.display(),
                        idx.count,
                        self.count
                    )));
                }
                Ok((normalize(&resize(&raw, self.resolution, self.interpolation)), Normalization::Byte))
            }
            DataSource::Grf => {
                let mut g = self.grf.clone().unwrap_or_default();
                g.resolution = self.resolution;
                Ok((synth_grf(&g, self.count)?, Normalization::None))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Stored values are `x/127.5 − 1` of 8-bit pixels.
    Byte,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorMeta {
    pub shape: [usize; 4],
    pub dtype: String,
    pub normalization: Normalization,
    #[serde(default)]
    pub data: Option<DataConfig>,
}

/// Writes `<stem>.f32` (little-endian) and `<stem>.json`.
pub fn write_tensor(dir: &Path, stem: &str, batch: &ImageBatch<f32>, meta_extra: (Normalization, Option<DataConfig>)) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob = dir.join(format!("{stem}.f32"));
    let bytes: Vec<u8> = batch.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))?;
    let meta = TensorMeta {
        shape: batch.shape(),
        dtype: "f32le".into(),
        normalization: meta_extra.0,
        data: meta_extra.1,
    };
    let side = dir.join(format!("{stem}.json"));
    fs::write(&side, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&side, e))?;
    Ok(blob)
}

/// Reads a tensor written by [`write_tensor`]; `path` may name either file or the stem.
pub fn read_tensor(path: &Path) -> Result<(ImageBatch<f32>, TensorMeta)> {
    let blob = path.with_extension("f32");
    let side = path.with_extension("json");
    let missing: Vec<String> = [&blob, &side]
        .iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingInput(missing));
    }
    let meta: TensorMeta = serde_json::from_str(&fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", side.display())))?;
    if meta.dtype != "f32le" {
        return Err(Error::InvalidInput(format!("{}: unsupported dtype {}", side.display(), meta.dtype)));
    }
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let [b, c, n, n2] = meta.shape;
    if n != n2 || bytes.len() != 4 * b * c * n * n {
        return Err(Error::InvalidInput(format!(
            "{}: {} bytes do not match shape {:?}",
            blob.display(),
            bytes.len(),
            meta.shape
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|q| f32::from_le_bytes([q[0], q[1], q[2], q[3]]))
        .collect();
    Ok((ImageBatch::from_vec(b, c, n, data)?, meta))
}

/// Builds the dataset described by `config`, reusing a matching cache entry in `cache_dir`.
pub fn load_dataset(config: &DataConfig, cache_dir: Option<&Path>) -> Result<ImageBatch<f32>> {
    config.validate()?;
    let stem = config.cache_stem();
    if let Some(dir) = cache_dir {
        let path = dir.join(&stem);
        if path.with_extension("json").exists() {
            if let Ok((batch, meta)) = read_tensor(&path) {
                if meta.data.as_ref() == Some(config) {
                    return Ok(batch);
                }
            }
        }
    }
    let (batch, norm) = config.build()?;
    if let Some(dir) = cache_dir {
        write_tensor(dir, &stem, &batch, (norm, Some(config.clone())))?;
    }
    Ok(batch)
}

/// 8-bit grayscale PNG of one normalized plane.
pub fn write_png(path: &Path, plane: &[f32], n: usize) -> Result<()> {
    assert_eq!(plane.len(), n * n);
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), n as u32, n as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let pixels: Vec<u8> = plane.iter().map(|&v| to_gray(v)).collect();
    let mut w = enc
        .write_header()
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    w.write_image_data(&pixels)
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    w.finish().map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

/// Writes `samples.f32`/`samples.json` and one PNG per image and channel under `png/`.
pub fn export_samples(dir: &Path, batch: &ImageBatch<f32>, normalization: Normalization) -> Result<()> {
    write_tensor(dir, "samples", batch, (normalization, None))?;
    let png_dir = dir.join("png");
    fs::create_dir_all(&png_dir).map_err(|e| Error::io(&png_dir, e))?;
    for b in 0..batch.batch() {
        for c in 0..batch.channels() {
            let name = if batch.channels() == 1 {
                format!("sample_{b:04}.png")
            } else {
                format!("sample_{b:04}_c{c}.png")
            };
            write_png(&png_dir.join(name), batch.plane(b, c), batch.resolution())?;
        }
    }
    Ok(())
}

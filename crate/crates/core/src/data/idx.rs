//! IDX image container: big-endian `u32` magic `0x00000803`, then count,
//! rows and cols as big-endian `u32`, then `count·rows·cols` unsigned bytes.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::fields::ImageBatch;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
const HEADER: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            offset: offset as u64,
            msg: format!("header truncated: need {} bytes, file has {}", offset + 4, bytes.len()),
        })
}

impl IdxImages {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let magic = be_u32(bytes, 0)?;
        if magic != IMAGE_MAGIC {
            let hint = if magic == 0x0000_0801 { " (this is a label file)" } else { "" };
            return Err(Error::Parse {
                offset: 0,
                msg: format!("bad magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}{hint}"),
            });
        }
        let count = be_u32(bytes, 4)? as usize;
        let rows = be_u32(bytes, 8)? as usize;
        let cols = be_u32(bytes, 12)? as usize;
        if rows == 0 || cols == 0 {
            return Err(Error::Parse {
                offset: 8,
                msg: format!("zero image dimension {rows}x{cols}"),
            });
        }
        let len = count
            .checked_mul(rows)
            .and_then(|v| v.checked_mul(cols))
            .ok_or_else(|| Error::Parse {
                offset: 4,
                msg: "image dimensions overflow".into(),
            })?;
        let payload = &bytes[HEADER..];
        if payload.len() < len {
            return Err(Error::Parse {
                offset: bytes.len() as u64,
                msg: format!("payload truncated: expected {len} bytes after the header, found {}", payload.len()),
            });
        }
        if payload.len() > len {
            return Err(Error::Parse {
                offset: (HEADER + len) as u64,
                msg: format!("{} trailing bytes after the payload", payload.len() - len),
            });
        }
        Ok(Self {
            count,
            rows,
            cols,
            pixels: payload.to_vec(),
        })
    }

    /// Reads a plain or gzip-compressed IDX file.
    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(vec![path.display().to_string()]));
        }
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if raw.starts_with(&[0x1f, 0x8b]) {
            let mut out = Vec::new();
            GzDecoder::new(&raw[..])
                .read_to_end(&mut out)
                .map_err(|e| Error::io(path, e))?;
            Self::parse(&out)
        } else {
            Self::parse(&raw)
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + self.pixels.len());
        for v in [IMAGE_MAGIC, self.count as u32, self.rows as u32, self.cols as u32] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Images `[start, start + len)` as a `len×1×rows×rows` batch with values in `[0, 255]`.
    pub fn to_batch(&self, start: usize, len: usize) -> Result<ImageBatch<f32>> {
        if self.rows != self.cols {
            return Err(Error::Parse {
                offset: 8,
                msg: format!("non-square images {}x{} are not supported", self.rows, self.cols),
            });
        }
        if start + len > self.count {
            return Err(Error::InvalidInput(format!(
                "requested images {start}..{} but the file holds {}",
                start + len,
                self.count
            )));
        }
        let px = self.rows * self.cols;
        let data = self.pixels[start * px..(start + len) * px].iter().map(|&b| b as f32).collect();
        ImageBatch::from_vec(len, 1, self.rows, data)
    }
}

/// All images of an IDX file as `count×1×28×28` (for FashionMNIST) with values in `[0, 255]`.
pub fn load_idx(path: &Path) -> Result<ImageBatch<f32>> {
    let idx = IdxImages::read(path)?;
    idx.to_batch(0, idx.count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fixture() -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        b.extend_from_slice(&[0, 1, 2, 255, 10, 20, 30, 40]);
        b
    }

    #[test]
    fn parses_hand_built_fixture() {
        let idx = IdxImages::parse(&fixture()).unwrap();
        assert_eq!((idx.count, idx.rows, idx.cols), (2, 2, 2));
        let batch = idx.to_batch(0, 2).unwrap();
        assert_eq!(batch.data(), &[0.0, 1.0, 2.0, 255.0, 10.0, 20.0, 30.0, 40.0]);
        assert_eq!(batch.get(1, 0, 1, 0), 30.0);
    }

    #[test]
    fn rejects_label_magic() {
        let mut b = fixture();
        b[3] = 1;
        match IdxImages::parse(&b) {
            Err(Error::Parse { offset: 0, msg }) => assert!(msg.contains("label")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_truncation() {
        let b = fixture();
        assert!(matches!(IdxImages::parse(&b[..b.len() - 1]), Err(Error::Parse { offset: 23, .. })));
        assert!(matches!(IdxImages::parse(&b[..10]), Err(Error::Parse { offset: 8, .. })));
        let mut long = b.clone();
        long.push(0);
        assert!(matches!(IdxImages::parse(&long), Err(Error::Parse { offset: 24, .. })));
    }

    #[test]
    fn reads_gzip_and_plain() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let plain = dir.path().join("a-idx3-ubyte");
        std::fs::write(&plain, fixture()).unwrap();
        let gz = dir.path().join("a-idx3-ubyte.gz");
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&fixture()).unwrap();
        std::fs::write(&gz, enc.finish().unwrap()).unwrap();
        assert_eq!(IdxImages::read(&plain).unwrap(), IdxImages::read(&gz).unwrap());
        assert!(matches!(
            IdxImages::read(&dir.path().join("missing")),
            Err(Error::MissingInput(_))
        ));
    }

    proptest! {
        #[test]
        fn random_fixtures_round_trip(count in 0usize..5, side in 1usize..9, seed in any::<u64>()) {
            let mut state = seed;
            let pixels: Vec<u8> = (0..count * side * side)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (state >> 56) as u8
                })
                .collect();
            let idx = IdxImages { count, rows: side, cols: side, pixels };
            let bytes = idx.to_bytes();
            let back = IdxImages::parse(&bytes).unwrap();
            prop_assert_eq!(&back, &idx);
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}

use serde::{Deserialize, Serialize};

use crate::fields::ImageBatch;
use crate::real::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResizeMethod {
    Nearest,
    #[default]
    Bilinear,
}

/// Corner-aligned source coordinate of output index `i`.
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out == 1 {
        (n_in - 1) as f64 / 2.0
    } else {
        i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
    }
}

/// Resamples every plane to `target × target`. Corner pixels map onto corner pixels.
pub fn resize<T: Real>(batch: &ImageBatch<T>, target: usize, method: ResizeMethod) -> ImageBatch<T> {
    assert!(target >= 1, "target resolution must be positive");
    let n_in = batch.resolution();
    let mut out = ImageBatch::zeros(batch.batch(), batch.channels(), target);
    if n_in == 0 {
        return out;
    }
    let coords: Vec<f64> = (0..target).map(|i| source_coord(i, n_in, target)).collect();
    for b in 0..batch.batch() {
        for c in 0..batch.channels() {
            let src = batch.plane(b, c);
            let dst = out.plane_mut(b, c);
            for (r, &y) in coords.iter().enumerate() {
                for (col, &x) in coords.iter().enumerate() {
                    dst[r * target + col] = match method {
                        ResizeMethod::Nearest => src[(y.round() as usize) * n_in + x.round() as usize],
                        ResizeMethod::Bilinear => bilinear(src, n_in, y, x),
                    };
                }
            }
        }
    }
    out
}

fn bilinear<T: Real>(src: &[T], n: usize, y: f64, x: f64) -> T {
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(n - 1), (x0 + 1).min(n - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, c: usize| src[r * n + c].f64();
    let v00 = at(y0, x0);
    // exact weights of zero keep constants exactly constant
    let top = if fx == 0.0 { v00 } else { v00 + fx * (at(y0, x1) - v00) };
    let bottom = if fx == 0.0 {
        at(y1, x0)
    } else {
        at(y1, x0) + fx * (at(y1, x1) - at(y1, x0))
    };
    T::of(if fy == 0.0 { top } else { top + fy * (bottom - top) })
}

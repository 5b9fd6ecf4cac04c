//! Square image grids and the mean/fluctuation split `x = x̄ + x′`.
//!
//! Layout is `[batch, channel, row, col]`, row-major and contiguous. Spatial
//! means are always accumulated in `f64` in row-major order, so the same
//! input yields the same bits on every run.

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<T = f32> {
    batch: usize,
    channels: usize,
    resolution: usize,
    data: Vec<T>,
}

/// Per-(batch, channel) spatial means.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMean<T = f32> {
    batch: usize,
    channels: usize,
    values: Vec<T>,
}

impl<T: Real> ImageBatch<T> {
    pub fn zeros(batch: usize, channels: usize, resolution: usize) -> Self {
        Self::filled(batch, channels, resolution, T::zero())
    }

    pub fn filled(batch: usize, channels: usize, resolution: usize, value: T) -> Self {
        Self {
            batch,
            channels,
            resolution,
            data: vec![value; batch * channels * resolution * resolution],
        }
    }

    pub fn from_vec(batch: usize, channels: usize, resolution: usize, data: Vec<T>) -> Result<Self> {
        let expected = batch * channels * resolution * resolution;
        if data.len() != expected {
            return Err(Error::shape(&[expected], &[data.len()]));
        }
        Ok(Self {
            batch,
            channels,
            resolution,
            data,
        })
    }

    pub fn from_fn(
        batch: usize,
        channels: usize,
        resolution: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(batch * channels * resolution * resolution);
        for b in 0..batch {
            for c in 0..channels {
                for r in 0..resolution {
                    for col in 0..resolution {
                        data.push(f(b, c, r, col));
                    }
                }
            }
        }
        Self {
            batch,
            channels,
            resolution,
            data,
        }
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.batch
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Horizontal pixel count `N`.
    #[inline]
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// `N²`.
    #[inline]
    pub fn pixels(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.resolution, self.resolution]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let p = self.pixels();
        let start = (b * self.channels + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let p = self.pixels();
        let start = (b * self.channels + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of one batch element.
    pub fn item(&self, b: usize) -> &[T] {
        let len = self.channels * self.pixels();
        &self.data[b * len..(b + 1) * len]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [T] {
        let len = self.channels * self.pixels();
        &mut self.data[b * len..(b + 1) * len]
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize, row: usize, col: usize) -> T {
        let n = self.resolution;
        self.data[((b * self.channels + c) * n + row) * n + col]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape<U: Real>(&self, other: &ImageBatch<U>) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(&self.shape(), &other.shape()));
        }
        Ok(())
    }

    /// Copies out the batch elements at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let len = self.channels * self.pixels();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(self.item(i));
        }
        Self {
            batch: indices.len(),
            channels: self.channels,
            resolution: self.resolution,
            data,
        }
    }

    /// Concatenates batches along the batch axis.
    pub fn concat(parts: &[ImageBatch<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot concatenate zero batches".into()))?;
        let mut data = Vec::new();
        let mut batch = 0;
        for p in parts {
            if p.channels != first.channels || p.resolution != first.resolution {
                return Err(Error::shape(&first.shape(), &p.shape()));
            }
            batch += p.batch;
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            batch,
            channels: first.channels,
            resolution: first.resolution,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            batch: self.batch,
            channels: self.channels,
            resolution: self.resolution,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ImageBatch<U> {
        ImageBatch {
            batch: self.batch,
            channels: self.channels,
            resolution: self.resolution,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

impl<T: Real> ChannelMean<T> {
    pub fn zeros(batch: usize, channels: usize) -> Self {
        Self {
            batch,
            channels,
            values: vec![T::zero(); batch * channels],
        }
    }

    pub fn from_vec(batch: usize, channels: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != batch * channels {
            return Err(Error::shape(&[batch * channels], &[values.len()]));
        }
        Ok(Self {
            batch,
            channels,
            values,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, b: usize, c: usize) -> T {
        self.values[b * self.channels + c]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Mean of one plane, accumulated row-major in double precision.
#[inline]
pub fn plane_mean<T: Real>(plane: &[T]) -> f64 {
    let mut acc = 0.0f64;
    for v in plane {
        acc += v.f64();
    }
    acc / plane.len() as f64
}

/// Per-(batch, channel) arithmetic mean over all `N²` pixels.
pub fn spatial_mean<T: Real>(x: &ImageBatch<T>) -> ChannelMean<T> {
    let mut values = Vec::with_capacity(x.batch() * x.channels());
    for b in 0..x.batch() {
        for c in 0..x.channels() {
            values.push(T::of(plane_mean(x.plane(b, c))));
        }
    }
    ChannelMean {
        batch: x.batch(),
        channels: x.channels(),
        values,
    }
}

/// `x − broadcast(x̄)`: the zero-mean fluctuation field.
pub fn demean<T: Real>(x: &ImageBatch<T>) -> ImageBatch<T> {
    let mut out = x.clone();
    demean_in_place(&mut out);
    out
}

pub fn demean_in_place<T: Real>(x: &mut ImageBatch<T>) {
    for b in 0..x.batch() {
        for c in 0..x.channels() {
            let plane = x.plane_mut(b, c);
            let m = T::of(plane_mean(plane));
            for v in plane.iter_mut() {
                *v -= m;
            }
        }
    }
}

/// Broadcast-add of a per-channel mean onto a fluctuation field.
pub fn recompose<T: Real>(xbar: &ChannelMean<T>, xprime: &ImageBatch<T>) -> Result<ImageBatch<T>> {
    if xbar.batch() != xprime.batch() || xbar.channels() != xprime.channels() {
        return Err(Error::shape(
            &[xprime.batch(), xprime.channels()],
            &[xbar.batch(), xbar.channels()],
        ));
    }
    let mut out = xprime.clone();
    for b in 0..out.batch() {
        for c in 0..out.channels() {
            let m = xbar.get(b, c);
            for v in out.plane_mut(b, c) {
                *v += m;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn two_by_two() -> ImageBatch<f64> {
        ImageBatch::from_vec(1, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, b: usize, c: usize, n: usize) -> ImageBatch<f64> {
        ImageBatch::from_fn(b, c, n, |_, _, _, _| rng.random_range(-3.0..3.0))
    }

    #[test]
    fn mean_of_small_grid() {
        assert_eq!(spatial_mean(&two_by_two()).values(), &[2.5]);
        let c = ImageBatch::<f64>::filled(2, 3, 5, 0.7);
        assert!(spatial_mean(&c).values().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn mean_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_batch(&mut rng, 3, 2, 8);
        let m = spatial_mean(&x);
        for b in 0..3 {
            for c in 0..2 {
                let mut s = 0.0;
                for r in 0..8 {
                    for col in 0..8 {
                        s += x.get(b, c, r, col);
                    }
                }
                assert!((m.get(b, c) - s / 64.0).abs() < 1e-12);
            }
        }
        let x32: ImageBatch<f32> = x.cast();
        let m32 = spatial_mean(&x32);
        for (a, b) in m32.values().iter().zip(m.values()) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn demean_and_recompose_small_grid() {
        let x = two_by_two();
        let xp = demean(&x);
        assert_eq!(xp.data(), &[-1.5, -0.5, 0.5, 1.5]);
        let back = recompose(&spatial_mean(&x), &xp).unwrap();
        assert_eq!(back.data(), x.data());
        let zero = ChannelMean::zeros(1, 1);
        assert_eq!(recompose(&zero, &xp).unwrap(), xp);
        assert!(demean(&ImageBatch::<f64>::filled(1, 1, 4, 3.0)).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recompose_rejects_mismatched_shapes() {
        let x = two_by_two();
        let bad = ChannelMean::<f64>::zeros(2, 1);
        assert!(matches!(recompose(&bad, &x), Err(Error::Shape { .. })));
    }

    #[test]
    fn channel_mean_of_gaussian_has_std_one_over_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 28usize;
        let draws = 100_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..draws {
            let mut acc = 0.0;
            for _ in 0..n * n {
                let z: f64 = rng.sample(StandardNormal);
                acc += z;
            }
            let m = acc / (n * n) as f64;
            sum += m;
            sum2 += m * m;
        }
        let mean = sum / draws as f64;
        let std = (sum2 / draws as f64 - mean * mean).sqrt();
        assert!((std * n as f64 - 1.0).abs() < 0.03, "std*N = {}", std * n as f64);
    }

    proptest! {
        #[test]
        fn demean_is_idempotent_and_zero_mean(seed in any::<u64>(), b in 1usize..3, c in 1usize..3, n in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_batch(&mut rng, b, c, n);
            let xp = demean(&x);
            let m = spatial_mean(&x);
            for (bar, orig) in spatial_mean(&xp).values().iter().zip(m.values()) {
                prop_assert!(bar.abs() < 1e-6 * (1.0 + orig.abs()));
            }
            let twice = demean(&xp);
            for (a, b) in twice.data().iter().zip(xp.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn round_trip_and_energy_split(seed in any::<u64>(), n in 2usize..17) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_batch(&mut rng, 2, 2, n);
            let xf: ImageBatch<f32> = x.cast();
            let back = recompose(&spatial_mean(&xf), &demean(&xf)).unwrap();
            for (a, b) in back.data().iter().zip(xf.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
            // Σ a² = Σ a′² + N² ā² per channel
            let xp = demean(&x);
            let m = spatial_mean(&x);
            for b in 0..2 {
                for c in 0..2 {
                    let total: f64 = x.plane(b, c).iter().map(|v| v * v).sum();
                    let fluct: f64 = xp.plane(b, c).iter().map(|v| v * v).sum();
                    let split = fluct + (n * n) as f64 * m.get(b, c).powi(2);
                    prop_assert!((total - split).abs() <= 1e-6 * total.abs().max(1e-300));
                }
            }
        }
    }
}

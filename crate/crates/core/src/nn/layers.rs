//! Layers with explicit forward caches and reverse-mode backward passes.
//!
//! Every `backward` accumulates (`+=`) into the gradient store so shared
//! parameters and repeated calls compose.

use rand::Rng;

use crate::error::Result;
use crate::fields::ImageBatch;
use crate::nn::params::{Matrix, ParamId, ParamStore};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±1/√fan_in`.
    FanIn,
    Zero,
}

fn init_values<T: Real, R: Rng + ?Sized>(len: usize, fan_in: usize, init: Init, rng: &mut R) -> Vec<T> {
    match init {
        Init::Zero => vec![T::zero(); len],
        Init::FanIn => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..len).map(|_| T::of(rng.random_range(-bound..bound))).collect()
        }
    }
}

/// 3×3 convolution, padding 1, stride 1 or 2.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

pub struct ConvCache<T> {
    cols: Vec<T>,
    batch: usize,
    in_res: usize,
    out_res: usize,
}

const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

impl Conv2d {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        assert!(stride == 1 || stride == 2, "conv stride must be 1 or 2");
        let fan_in = c_in * TAPS;
        let w = init_values(c_out * fan_in, fan_in, init, rng);
        let b = init_values(c_out, fan_in, init, rng);
        let weight = store.push(format!("{name}.weight"), vec![c_out, c_in, KERNEL, KERNEL], w);
        let bias = store.push(format!("{name}.bias"), vec![c_out], b);
        Self {
            weight,
            bias,
            c_in,
            c_out,
            stride,
        }
    }

    pub fn out_resolution(&self, n: usize) -> usize {
        if self.stride == 1 {
            n
        } else {
            (n + 1) / 2
        }
    }

    fn im2col<T: Real>(&self, x: &ImageBatch<T>, out_res: usize) -> Vec<T> {
        let n = x.resolution();
        let k = self.c_in * TAPS;
        let p = out_res * out_res;
        let s = self.stride;
        let mut cols = vec![T::zero(); x.batch() * k * p];
        for b in 0..x.batch() {
            for ci in 0..self.c_in {
                let src = x.plane(b, ci);
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        let row = ci * TAPS + ky * KERNEL + kx;
                        let dst = &mut cols[(b * k + row) * p..(b * k + row + 1) * p];
                        for oy in 0..out_res {
                            let iy = (oy * s + ky) as isize - 1;
                            if iy < 0 || iy >= n as isize {
                                continue;
                            }
                            let src_row = &src[iy as usize * n..(iy as usize + 1) * n];
                            let dst_row = &mut dst[oy * out_res..(oy + 1) * out_res];
                            if s == 1 {
                                // ix = ox + kx - 1
                                let lo = if kx == 0 { 1 } else { 0 };
                                let hi = if kx == 2 { out_res - 1 } else { out_res };
                                let off = kx as isize - 1;
                                for ox in lo..hi {
                                    dst_row[ox] = src_row[(ox as isize + off) as usize];
                                }
                            } else {
                                for (ox, d) in dst_row.iter_mut().enumerate() {
                                    let ix = (ox * s + kx) as isize - 1;
                                    if ix >= 0 && ix < n as isize {
                                        *d = src_row[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, dcols: &[T], b: usize, dx: &mut ImageBatch<T>, out_res: usize) {
        let n = dx.resolution();
        let p = out_res * out_res;
        let s = self.stride;
        for ci in 0..self.c_in {
            let dst = dx.plane_mut(b, ci);
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let row = ci * TAPS + ky * KERNEL + kx;
                    let src = &dcols[row * p..(row + 1) * p];
                    for oy in 0..out_res {
                        let iy = (oy * s + ky) as isize - 1;
                        if iy < 0 || iy >= n as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * n..(iy as usize + 1) * n];
                        for ox in 0..out_res {
                            let ix = (ox * s + kx) as isize - 1;
                            if ix >= 0 && ix < n as isize {
                                dst_row[ix as usize] += src[oy * out_res + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &ImageBatch<T>) -> Result<(ImageBatch<T>, ConvCache<T>)> {
        if x.channels() != self.c_in {
            return Err(crate::Error::shape(&[self.c_in], &[x.channels()]));
        }
        let out_res = self.out_resolution(x.resolution());
        let cols = self.im2col(x, out_res);
        let k = self.c_in * TAPS;
        let p = out_res * out_res;
        let w = ps.get(self.weight);
        let bias = ps.get(self.bias);
        let mut out = ImageBatch::zeros(x.batch(), self.c_out, out_res);
        for b in 0..x.batch() {
            let dst = out.item_mut(b);
            for (o, &bv) in bias.iter().enumerate() {
                dst[o * p..(o + 1) * p].iter_mut().for_each(|v| *v = bv);
            }
            let cb = &cols[b * k * p..(b + 1) * k * p];
            T::gemm(self.c_out, k, p, T::one(), w, (k, 1), cb, (p, 1), T::one(), dst, (p, 1));
        }
        Ok((
            out,
            ConvCache {
                cols,
                batch: x.batch(),
                in_res: x.resolution(),
                out_res,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut ParamStore<T>,
        cache: &ConvCache<T>,
        dout: &ImageBatch<T>,
        want_input_grad: bool,
    ) -> Option<ImageBatch<T>> {
        let k = self.c_in * TAPS;
        let p = cache.out_res * cache.out_res;
        {
            let db = grads.get_mut(self.bias);
            for b in 0..cache.batch {
                for (o, g) in db.iter_mut().enumerate() {
                    let s: T = dout.plane(b, o).iter().copied().sum();
                    *g += s;
                }
            }
        }
        {
            let dw = grads.get_mut(self.weight);
            for b in 0..cache.batch {
                let cb = &cache.cols[b * k * p..(b + 1) * k * p];
                // dW[o, r] += Σ_p dout[o, p] cols[r, p]
                T::gemm(self.c_out, p, k, T::one(), dout.item(b), (p, 1), cb, (1, p), T::one(), dw, (k, 1));
            }
        }
        if !want_input_grad {
            return None;
        }
        let w = ps.get(self.weight);
        let mut dx = ImageBatch::zeros(cache.batch, self.c_in, cache.in_res);
        let mut dcols = vec![T::zero(); k * p];
        for b in 0..cache.batch {
            // dcols[r, p] = Σ_o W[o, r] dout[o, p]
            T::gemm(k, self.c_out, p, T::one(), w, (1, k), dout.item(b), (p, 1), T::zero(), &mut dcols, (p, 1));
            self.col2im(&dcols, b, &mut dx, cache.out_res);
        }
        Some(dx)
    }
}

/// Fully connected layer `y = x Wᵀ + b`, `W: [n_out, n_in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Dense {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        n_in: usize,
        n_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = init_values(n_out * n_in, n_in, init, rng);
        let b = init_values(n_out, n_in, init, rng);
        let weight = store.push(format!("{name}.weight"), vec![n_out, n_in], w);
        let bias = store.push(format!("{name}.bias"), vec![n_out], b);
        Self {
            weight,
            bias,
            n_in,
            n_out,
        }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Matrix<T>) -> Matrix<T> {
        assert_eq!(x.cols, self.n_in, "dense input width");
        let mut y = Matrix::zeros(x.rows, self.n_out);
        let bias = ps.get(self.bias);
        for r in 0..x.rows {
            y.row_mut(r).copy_from_slice(bias);
        }
        T::gemm(
            x.rows,
            self.n_in,
            self.n_out,
            T::one(),
            &x.data,
            (self.n_in, 1),
            ps.get(self.weight),
            (1, self.n_in),
            T::one(),
            &mut y.data,
            (self.n_out, 1),
        );
        y
    }

    /// `x` is the forward input.
    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut ParamStore<T>,
        x: &Matrix<T>,
        dy: &Matrix<T>,
        want_input_grad: bool,
    ) -> Option<Matrix<T>> {
        {
            let db = grads.get_mut(self.bias);
            for r in 0..dy.rows {
                for (g, &d) in db.iter_mut().zip(dy.row(r)) {
                    *g += d;
                }
            }
        }
        T::gemm(
            self.n_out,
            dy.rows,
            self.n_in,
            T::one(),
            &dy.data,
            (1, self.n_out),
            &x.data,
            (self.n_in, 1),
            T::one(),
            grads.get_mut(self.weight),
            (self.n_in, 1),
        );
        if !want_input_grad {
            return None;
        }
        let mut dx = Matrix::zeros(dy.rows, self.n_in);
        T::gemm(
            dy.rows,
            self.n_out,
            self.n_in,
            T::one(),
            &dy.data,
            (self.n_out, 1),
            ps.get(self.weight),
            (self.n_in, 1),
            T::zero(),
            &mut dx.data,
            (self.n_in, 1),
        );
        Some(dx)
    }
}

/// Group normalization with per-channel affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
}

pub struct GroupNormCache<T> {
    xhat: ImageBatch<T>,
    inv_std: Vec<f64>,
}

const GN_EPS: f64 = 1e-5;

/// Largest group count `≤ 8` that divides `channels` and leaves at least two
/// channels per group. With single-channel groups a per-channel bias added
/// just before the norm (the time projection) would be cancelled exactly.
pub fn default_groups(channels: usize) -> usize {
    (1..=8.min(channels / 2)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

impl GroupNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.push(format!("{name}.gamma"), vec![channels], vec![T::one(); channels]);
        let beta = store.push(format!("{name}.beta"), vec![channels], vec![T::zero(); channels]);
        Self {
            gamma,
            beta,
            channels,
            groups: default_groups(channels),
        }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &ImageBatch<T>) -> (ImageBatch<T>, GroupNormCache<T>) {
        let per_group = self.channels / self.groups;
        let p = x.pixels();
        let gamma = ps.get(self.gamma);
        let beta = ps.get(self.beta);
        let mut xhat = x.clone();
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.batch() * self.groups);
        let m = (per_group * p) as f64;
        for b in 0..x.batch() {
            let item = x.item(b);
            for g in 0..self.groups {
                let span = g * per_group * p..(g + 1) * per_group * p;
                let vals = &item[span.clone()];
                let mut mean = 0.0;
                for v in vals {
                    mean += v.f64();
                }
                mean /= m;
                let mut var = 0.0;
                for v in vals {
                    let d = v.f64() - mean;
                    var += d * d;
                }
                var /= m;
                let is = 1.0 / (var + GN_EPS).sqrt();
                inv_std.push(is);
                let (mean_t, is_t) = (T::of(mean), T::of(is));
                let xh = &mut xhat.item_mut(b)[span.clone()];
                for v in xh.iter_mut() {
                    *v = (*v - mean_t) * is_t;
                }
                let o = &mut out.item_mut(b)[span];
                for (ci, chunk) in o.chunks_mut(p).enumerate() {
                    let c = g * per_group + ci;
                    let src = &xhat.item(b)[c * p..(c + 1) * p];
                    for (dst, &h) in chunk.iter_mut().zip(src) {
                        *dst = gamma[c] * h + beta[c];
                    }
                }
            }
        }
        (out, GroupNormCache { xhat, inv_std })
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut ParamStore<T>,
        cache: &GroupNormCache<T>,
        dy: &ImageBatch<T>,
    ) -> ImageBatch<T> {
        let per_group = self.channels / self.groups;
        let p = dy.pixels();
        let gamma = ps.get(self.gamma);
        let m = (per_group * p) as f64;
        let mut dgamma = vec![0.0f64; self.channels];
        let mut dbeta = vec![0.0f64; self.channels];
        let mut dx = dy.clone();
        for b in 0..dy.batch() {
            for c in 0..self.channels {
                let dyc = dy.plane(b, c);
                let xh = cache.xhat.plane(b, c);
                let mut sg = 0.0;
                let mut sb = 0.0;
                for (&d, &h) in dyc.iter().zip(xh) {
                    sg += (d * h).f64();
                    sb += d.f64();
                }
                dgamma[c] += sg;
                dbeta[c] += sb;
            }
            for g in 0..self.groups {
                // dxhat = dy * gamma; dx = is/m (m dxhat - Σdxhat - xhat Σ dxhat xhat)
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for ci in 0..per_group {
                    let c = g * per_group + ci;
                    let gm = gamma[c].f64();
                    for (&d, &h) in dy.plane(b, c).iter().zip(cache.xhat.plane(b, c)) {
                        let dxh = d.f64() * gm;
                        s1 += dxh;
                        s2 += dxh * h.f64();
                    }
                }
                let is = cache.inv_std[b * self.groups + g];
                for ci in 0..per_group {
                    let c = g * per_group + ci;
                    let gm = gamma[c].f64();
                    let xh = cache.xhat.plane(b, c);
                    let out = dx.plane_mut(b, c);
                    for (o, &h) in out.iter_mut().zip(xh) {
                        let dxh = o.f64() * gm;
                        *o = T::of(is / m * (m * dxh - s1 - h.f64() * s2));
                    }
                }
            }
        }
        for (g, v) in grads.get_mut(self.gamma).iter_mut().zip(&dgamma) {
            *g += T::of(*v);
        }
        for (g, v) in grads.get_mut(self.beta).iter_mut().zip(&dbeta) {
            *g += T::of(*v);
        }
        debug_assert_eq!(p * self.channels, dx.item(0).len());
        dx
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x σ(x)`, elementwise.
pub fn silu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter()
        .map(|&v| {
            let f = v.f64();
            T::of(f * sigmoid(f))
        })
        .collect()
}

/// Multiplies `grad` in place by `d silu/dx` evaluated at `x`.
pub fn silu_backward<T: Real>(x: &[T], grad: &mut [T]) {
    for (g, &v) in grad.iter_mut().zip(x) {
        let f = v.f64();
        let s = sigmoid(f);
        *g = T::of(g.f64() * (s + f * s * (1.0 - s)));
    }
}

pub fn silu_batch<T: Real>(x: &ImageBatch<T>) -> ImageBatch<T> {
    let [b, c, n, _] = x.shape();
    ImageBatch::from_vec(b, c, n, silu(x.data())).expect("same shape")
}

pub fn silu_matrix<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    Matrix::from_vec(x.rows, x.cols, silu(&x.data))
}

/// `h[b, c, :, :] += bias[b, c]`.
pub fn add_channel_bias<T: Real>(h: &mut ImageBatch<T>, bias: &Matrix<T>) {
    assert_eq!((bias.rows, bias.cols), (h.batch(), h.channels()));
    for b in 0..h.batch() {
        for c in 0..h.channels() {
            let v = bias.row(b)[c];
            h.plane_mut(b, c).iter_mut().for_each(|x| *x += v);
        }
    }
}

/// Gradient of [`add_channel_bias`] w.r.t. the bias.
pub fn channel_sums<T: Real>(g: &ImageBatch<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(g.batch(), g.channels());
    for b in 0..g.batch() {
        for c in 0..g.channels() {
            let mut s = 0.0;
            for v in g.plane(b, c) {
                s += v.f64();
            }
            out.row_mut(b)[c] = T::of(s);
        }
    }
    out
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Real>(x: &ImageBatch<T>) -> ImageBatch<T> {
    let n = x.resolution();
    let m = 2 * n;
    let mut out = ImageBatch::zeros(x.batch(), x.channels(), m);
    for b in 0..x.batch() {
        for c in 0..x.channels() {
            let src = x.plane(b, c);
            let dst = out.plane_mut(b, c);
            for r in 0..m {
                for col in 0..m {
                    dst[r * m + col] = src[(r / 2) * n + col / 2];
                }
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(g: &ImageBatch<T>) -> ImageBatch<T> {
    let m = g.resolution();
    let n = m / 2;
    let mut out = ImageBatch::zeros(g.batch(), g.channels(), n);
    for b in 0..g.batch() {
        for c in 0..g.channels() {
            let src = g.plane(b, c);
            let dst = out.plane_mut(b, c);
            for r in 0..m {
                for col in 0..m {
                    dst[(r / 2) * n + col / 2] += src[r * m + col];
                }
            }
        }
    }
    out
}

/// Stacks `a` and `b` along the channel axis.
pub fn concat_channels<T: Real>(a: &ImageBatch<T>, b: &ImageBatch<T>) -> ImageBatch<T> {
    assert_eq!((a.batch(), a.resolution()), (b.batch(), b.resolution()));
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    for i in 0..a.batch() {
        data.extend_from_slice(a.item(i));
        data.extend_from_slice(b.item(i));
    }
    ImageBatch::from_vec(a.batch(), a.channels() + b.channels(), a.resolution(), data).expect("concat shape")
}

pub fn split_channels<T: Real>(g: &ImageBatch<T>, first: usize) -> (ImageBatch<T>, ImageBatch<T>) {
    let p = g.pixels();
    let second = g.channels() - first;
    let mut a = Vec::with_capacity(g.batch() * first * p);
    let mut b = Vec::with_capacity(g.batch() * second * p);
    for i in 0..g.batch() {
        let item = g.item(i);
        a.extend_from_slice(&item[..first * p]);
        b.extend_from_slice(&item[first * p..]);
    }
    (
        ImageBatch::from_vec(g.batch(), first, g.resolution(), a).expect("split shape"),
        ImageBatch::from_vec(g.batch(), second, g.resolution(), b).expect("split shape"),
    )
}

/// Inverted dropout; returns the scaled keep-mask.
pub fn dropout<T: Real, R: Rng + ?Sized>(x: &mut ImageBatch<T>, p: f64, rng: &mut R) -> Vec<T> {
    let scale = T::of(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..x.data().len())
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { scale })
        .collect();
    for (v, &m) in x.data_mut().iter_mut().zip(&mask) {
        *v *= m;
    }
    mask
}

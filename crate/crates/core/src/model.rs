//! Score networks.
//!
//! Both kinds predict `f = σ(t) s(x, t)`:
//!
//! * **baseline**: `f = u_φ(x, t)`, a U-net with three stride-2 downsampling
//!   stages, a stack of residual blocks at the bottleneck, and three
//!   nearest-neighbour upsampling stages with skip connections.
//! * **modified**: `f = [u_φ(x′, t) − mean(u_φ(x′, t))] + n̄_Φ(x̄, t)/N`, where
//!   `n̄_Φ` is a two-layer dense network on the channel means and the fixed
//!   Fourier time features. The U-net and the bypass own disjoint parameters
//!   (`unet.*` and `bypass.*`).

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{demean_in_place, plane_mean, spatial_mean, ChannelMean, ImageBatch};
use crate::nn::layers::{
    add_channel_bias, channel_sums, concat_channels, dropout, silu_backward, silu_batch, silu_matrix,
    split_channels, upsample2, upsample2_backward, ConvCache, GroupNormCache,
};
use crate::nn::{Conv2d, Dense, GroupNorm, Init, Matrix, ParamStore};
use crate::real::Real;
use crate::schedule::DiffusionSchedule;

pub const UNET_PREFIX: &str = "unet.";
pub const BYPASS_PREFIX: &str = "bypass.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Baseline,
    Modified,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Image channels.
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Feature widths after the lifting layer and after each downsampling stage.
    #[serde(default = "default_widths")]
    pub widths: [usize; 4],
    #[serde(default = "default_res_blocks")]
    pub res_blocks: usize,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_embedding_scale")]
    pub embedding_scale: f64,
    /// Width of the U-net's internal time-conditioning vector.
    #[serde(default = "default_time_dim")]
    pub time_dim: usize,
    #[serde(default = "default_bypass_hidden")]
    pub bypass_hidden: usize,
}

fn default_channels() -> usize {
    1
}
fn default_widths() -> [usize; 4] {
    [32, 64, 128, 256]
}
fn default_res_blocks() -> usize {
    8
}
fn default_embedding_dim() -> usize {
    128
}
fn default_embedding_scale() -> f64 {
    30.0
}
fn default_time_dim() -> usize {
    128
}
fn default_bypass_hidden() -> usize {
    256
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            channels: default_channels(),
            widths: default_widths(),
            res_blocks: default_res_blocks(),
            embedding_dim: default_embedding_dim(),
            embedding_scale: default_embedding_scale(),
            time_dim: default_time_dim(),
            bypass_hidden: default_bypass_hidden(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 {
            return bad("model.channels must be positive".into());
        }
        if self.widths.iter().any(|&w| w == 0) {
            return bad(format!("model.widths must be positive, got {:?}", self.widths));
        }
        if self.embedding_dim == 0 || self.embedding_dim % 2 != 0 {
            return bad(format!("model.embedding_dim must be even and positive, got {}", self.embedding_dim));
        }
        if !(self.embedding_scale > 0.0) {
            return bad(format!("model.embedding_scale must be positive, got {}", self.embedding_scale));
        }
        if self.time_dim == 0 || self.bypass_hidden == 0 {
            return bad("model.time_dim and model.bypass_hidden must be positive".into());
        }
        Ok(())
    }
}

/// Gaussian Fourier features of `t` with fixed, untrained frequencies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    scale: f64,
    frequencies: Vec<f64>,
}

impl TimeEmbedding {
    pub fn new<R: Rng + ?Sized>(dim: usize, scale: f64, rng: &mut R) -> Self {
        assert!(dim % 2 == 0 && dim > 0, "embedding dim must be even");
        let frequencies = (0..dim / 2)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { scale, frequencies }
    }

    pub fn from_frequencies(scale: f64, frequencies: Vec<f64>) -> Self {
        Self { scale, frequencies }
    }

    pub fn dim(&self) -> usize {
        2 * self.frequencies.len()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    /// `[sin(2π f_i t)…, cos(2π f_i t)…]`.
    pub fn embed(&self, t: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        out.extend(self.frequencies.iter().map(|f| (2.0 * PI * f * t).sin()));
        out.extend(self.frequencies.iter().map(|f| (2.0 * PI * f * t).cos()));
        out
    }

    pub fn embed_batch<T: Real>(&self, ts: &[f64]) -> Matrix<T> {
        let mut data = Vec::with_capacity(ts.len() * self.dim());
        for &t in ts {
            data.extend(self.embed(t).into_iter().map(T::of));
        }
        Matrix::from_vec(ts.len(), self.dim(), data)
    }
}

/// Whether dropout is active.
pub enum Mode<'a> {
    Eval,
    Train { rng: &'a mut ChaCha8Rng, dropout: f64 },
}

impl Mode<'_> {
    fn dropout(&mut self) -> Option<(&mut ChaCha8Rng, f64)> {
        match self {
            Mode::Train { rng, dropout } if *dropout > 0.0 => Some((rng, *dropout)),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct TimeMlp {
    fc1: Dense,
    fc2: Dense,
}

struct TimeCache<T> {
    feat: Matrix<T>,
    h1: Matrix<T>,
    a1: Matrix<T>,
    h2: Matrix<T>,
}

impl TimeMlp {
    fn forward<T: Real>(&self, ps: &ParamStore<T>, feat: &Matrix<T>) -> (Matrix<T>, TimeCache<T>) {
        let h1 = self.fc1.forward(ps, feat);
        let a1 = silu_matrix(&h1);
        let h2 = self.fc2.forward(ps, &a1);
        let act = silu_matrix(&h2);
        (
            act,
            TimeCache {
                feat: feat.clone(),
                h1,
                a1,
                h2,
            },
        )
    }

    fn backward<T: Real>(&self, ps: &ParamStore<T>, grads: &mut ParamStore<T>, c: &TimeCache<T>, mut dact: Matrix<T>) {
        silu_backward(&c.h2.data, &mut dact.data);
        let mut da1 = self.fc2.backward(ps, grads, &c.a1, &dact, true).expect("input grad");
        silu_backward(&c.h1.data, &mut da1.data);
        self.fc1.backward(ps, grads, &c.feat, &da1, false);
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Down {
    conv: Conv2d,
    temb: Dense,
    norm: GroupNorm,
}

struct StageCache<T> {
    conv: ConvCache<T>,
    norm: GroupNormCache<T>,
    pre_act: ImageBatch<T>,
}

impl Down {
    fn forward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        x: &ImageBatch<T>,
        act: &Matrix<T>,
    ) -> Result<(ImageBatch<T>, StageCache<T>)> {
        let (mut h, conv) = self.conv.forward(ps, x)?;
        add_channel_bias(&mut h, &self.temb.forward(ps, act));
        let (pre_act, norm) = self.norm.forward(ps, &h);
        let out = silu_batch(&pre_act);
        Ok((out, StageCache { conv, norm, pre_act }))
    }

    fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut ParamStore<T>,
        c: &StageCache<T>,
        mut dout: ImageBatch<T>,
        act: &Matrix<T>,
        dact: &mut Matrix<T>,
    ) -> ImageBatch<T> {
        silu_backward(c.pre_act.data(), dout.data_mut());
        let dh = self.norm.backward(ps, grads, &c.norm, &dout);
        let dt = self.temb.backward(ps, grads, act, &channel_sums(&dh), true).expect("input grad");
        dact.add_assign(&dt);
        self.conv.backward(ps, grads, &c.conv, &dh, true).expect("input grad")
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Dense,
    norm2: GroupNorm,
    conv2: Conv2d,
}

struct ResCache<T> {
    norm1: GroupNormCache<T>,
    g1: ImageBatch<T>,
    conv1: ConvCache<T>,
    norm2: GroupNormCache<T>,
    g2: ImageBatch<T>,
    mask: Option<Vec<T>>,
    conv2: ConvCache<T>,
}

impl ResBlock {
    fn forward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        x: &ImageBatch<T>,
        act: &Matrix<T>,
        mode: &mut Mode<'_>,
    ) -> Result<(ImageBatch<T>, ResCache<T>)> {
        let (g1, norm1) = self.norm1.forward(ps, x);
        let (mut h1, conv1) = self.conv1.forward(ps, &silu_batch(&g1))?;
        add_channel_bias(&mut h1, &self.temb.forward(ps, act));
        let (g2, norm2) = self.norm2.forward(ps, &h1);
        let mut s2 = silu_batch(&g2);
        let mask = mode.dropout().map(|(rng, p)| dropout(&mut s2, p, rng));
        let (h2, conv2) = self.conv2.forward(ps, &s2)?;
        let mut out = x.clone();
        for (o, &v) in out.data_mut().iter_mut().zip(h2.data()) {
            *o += v;
        }
        Ok((
            out,
            ResCache {
                norm1,
                g1,
                conv1,
                norm2,
                g2,
                mask,
                conv2,
            },
        ))
    }

    fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut ParamStore<T>,
        c: &ResCache<T>,
        dout: ImageBatch<T>,
        act: &Matrix<T>,
        dact: &mut Matrix<T>,
    ) -> ImageBatch<T> {
        let mut ds2 = self.conv2.backward(ps, grads, &c.conv2, &dout, true).expect("input grad");
        if let Some(mask) = &c.mask {
            for (g, &m) in ds2.data_mut().iter_mut().zip(mask) {
                *g *= m;
            }
        }
        silu_backward(c.g2.data(), ds2.data_mut());
        let dh1 = self.norm2.backward(ps, grads, &c.norm2, &ds2);
        let dt = self.temb.backward(ps, grads, act, &channel_sums(&dh1), true).expect("input grad");
        dact.add_assign(&dt);
        let mut ds1 = self.conv1.backward(ps, grads, &c.conv1, &dh1, true).expect("input grad");
        silu_backward(c.g1.data(), ds1.data_mut());
        let dx1 = self.norm1.backward(ps, grads, &c.norm1, &ds1);
        let mut dx = dout;
        for (o, &v) in dx.data_mut().iter_mut().zip(dx1.data()) {
            *o += v;
        }
        dx
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Up {
    conv: Conv2d,
    temb: Dense,
    norm: GroupNorm,
    in_channels: usize,
}

impl Up {
    fn forward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        x: &ImageBatch<T>,
        skip: &ImageBatch<T>,
        act: &Matrix<T>,
    ) -> Result<(ImageBatch<T>, StageCache<T>)> {
        let cat = concat_channels(&upsample2(x), skip);
        let (mut h, conv) = self.conv.forward(ps, &cat)?;
        add_channel_bias(&mut h, &self.temb.forward(ps, act));
        let (pre_act, norm) = self.norm.forward(ps, &h);
        let out = silu_batch(&pre_act);
        Ok((out, StageCache { conv, norm, pre_act }))
    }

    fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut ParamStore<T>,
        c: &StageCache<T>,
        mut dout: ImageBatch<T>,
        act: &Matrix<T>,
        dact: &mut Matrix<T>,
    ) -> (ImageBatch<T>, ImageBatch<T>) {
        silu_backward(c.pre_act.data(), dout.data_mut());
        let dh = self.norm.backward(ps, grads, &c.norm, &dout);
        let dt = self.temb.backward(ps, grads, act, &channel_sums(&dh), true).expect("input grad");
        dact.add_assign(&dt);
        let dcat = self.conv.backward(ps, grads, &c.conv, &dh, true).expect("input grad");
        let (du, dskip) = split_channels(&dcat, self.in_channels);
        (upsample2_backward(&du), dskip)
    }
}

/// U-net `u_φ` with zero-initialized output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    time: TimeMlp,
    lift: Conv2d,
    down: Vec<Down>,
    res: Vec<ResBlock>,
    up: Vec<Up>,
    proj: Conv2d,
}

pub struct UNetCache<T> {
    act: Matrix<T>,
    time: TimeCache<T>,
    lift: ConvCache<T>,
    down: Vec<StageCache<T>>,
    res: Vec<ResCache<T>>,
    up: Vec<StageCache<T>>,
    proj: ConvCache<T>,
}

/// Number of stride-2 stages; input resolution must be divisible by `2^DEPTH`.
pub const DEPTH: usize = 3;

impl UNet {
    fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let p = UNET_PREFIX;
        let w = cfg.widths;
        let td = cfg.time_dim;
        let time = TimeMlp {
            fc1: Dense::new(store, &format!("{p}time.fc1"), cfg.embedding_dim, td, Init::FanIn, rng),
            fc2: Dense::new(store, &format!("{p}time.fc2"), td, td, Init::FanIn, rng),
        };
        let lift = Conv2d::new(store, &format!("{p}lift"), cfg.channels, w[0], 1, Init::FanIn, rng);
        let down = (0..DEPTH)
            .map(|i| Down {
                conv: Conv2d::new(store, &format!("{p}down{i}.conv"), w[i], w[i + 1], 2, Init::FanIn, rng),
                temb: Dense::new(store, &format!("{p}down{i}.temb"), td, w[i + 1], Init::FanIn, rng),
                norm: GroupNorm::new(store, &format!("{p}down{i}.norm"), w[i + 1]),
            })
            .collect();
        let wb = w[DEPTH];
        let res = (0..cfg.res_blocks)
            .map(|i| ResBlock {
                norm1: GroupNorm::new(store, &format!("{p}res{i}.norm1"), wb),
                conv1: Conv2d::new(store, &format!("{p}res{i}.conv1"), wb, wb, 1, Init::FanIn, rng),
                temb: Dense::new(store, &format!("{p}res{i}.temb"), td, wb, Init::FanIn, rng),
                norm2: GroupNorm::new(store, &format!("{p}res{i}.norm2"), wb),
                conv2: Conv2d::new(store, &format!("{p}res{i}.conv2"), wb, wb, 1, Init::FanIn, rng),
            })
            .collect();
        let up = (0..DEPTH)
            .map(|i| {
                // up0 brings w3 -> w2 using skip d2, ..., up2 brings w1 -> w0 using the lift output
                let from = w[DEPTH - i];
                let to = w[DEPTH - i - 1];
                Up {
                    conv: Conv2d::new(store, &format!("{p}up{i}.conv"), from + to, to, 1, Init::FanIn, rng),
                    temb: Dense::new(store, &format!("{p}up{i}.temb"), td, to, Init::FanIn, rng),
                    norm: GroupNorm::new(store, &format!("{p}up{i}.norm"), to),
                    in_channels: from,
                }
            })
            .collect();
        let proj = Conv2d::new(store, &format!("{p}proj"), w[0], cfg.channels, 1, Init::Zero, rng);
        Self {
            time,
            lift,
            down,
            res,
            up,
            proj,
        }
    }

    pub fn forward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        x: &ImageBatch<T>,
        feat: &Matrix<T>,
        mode: &mut Mode<'_>,
    ) -> Result<(ImageBatch<T>, UNetCache<T>)> {
        check_resolution(x.resolution())?;
        if feat.rows != x.batch() {
            return Err(Error::shape(&[x.batch()], &[feat.rows]));
        }
        let (act, time) = self.time.forward(ps, feat);
        let (h0, lift) = self.lift.forward(ps, x)?;
        let mut skips = vec![h0];
        let mut down = Vec::with_capacity(DEPTH);
        for stage in &self.down {
            let (h, c) = stage.forward(ps, skips.last().expect("nonempty"), &act)?;
            skips.push(h);
            down.push(c);
        }
        let mut h = skips.pop().expect("bottleneck");
        let mut res = Vec::with_capacity(self.res.len());
        for block in &self.res {
            let (next, c) = block.forward(ps, &h, &act, mode)?;
            h = next;
            res.push(c);
        }
        let mut up = Vec::with_capacity(DEPTH);
        for stage in &self.up {
            let skip = skips.pop().expect("skip");
            let (next, c) = stage.forward(ps, &h, &skip, &act)?;
            h = next;
            up.push(c);
        }
        let (out, proj) = self.proj.forward(ps, &h)?;
        Ok((
            out,
            UNetCache {
                act,
                time,
                lift,
                down,
                res,
                up,
                proj,
            },
        ))
    }

    /// Accumulates `∂⟨dout, u⟩/∂φ` into `grads`. The input gradient is not formed.
    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, grads: &mut ParamStore<T>, c: &UNetCache<T>, dout: &ImageBatch<T>) {
        let act = &c.act;
        let mut dact = Matrix::zeros(act.rows, act.cols);
        let mut dh = self.proj.backward(ps, grads, &c.proj, dout, true).expect("input grad");
        let mut dskips = Vec::with_capacity(DEPTH);
        for (stage, sc) in self.up.iter().zip(&c.up).rev() {
            let (dx, dskip) = stage.backward(ps, grads, sc, dh, act, &mut dact);
            dh = dx;
            dskips.push(dskip);
        }
        // dskips holds gradients for [h0, d1, d2] in that order.
        for (block, rc) in self.res.iter().zip(&c.res).rev() {
            dh = block.backward(ps, grads, rc, dh, act, &mut dact);
        }
        for (i, (stage, sc)) in self.down.iter().zip(&c.down).enumerate().rev() {
            let mut dx = stage.backward(ps, grads, sc, dh, act, &mut dact);
            for (o, &v) in dx.data_mut().iter_mut().zip(dskips[i].data()) {
                *o += v;
            }
            dh = dx;
        }
        self.lift.backward(ps, grads, &c.lift, &dh, false);
        self.time.backward(ps, grads, &c.time, dact);
    }
}

pub fn check_resolution(n: usize) -> Result<()> {
    let m = 1 << DEPTH;
    if n == 0 || n % m != 0 {
        return Err(Error::Config(format!("resolution {n} is not divisible by {m}")));
    }
    Ok(())
}

/// Dense network `n̄_Φ(x̄, t)` predicting the channel means of `f`, before the `1/N` factor.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanBypass {
    fc1: Dense,
    fc2: Dense,
    channels: usize,
}

pub struct BypassCache<T> {
    input: Matrix<T>,
    h1: Matrix<T>,
    a1: Matrix<T>,
    resolution: usize,
}

impl MeanBypass {
    fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let p = BYPASS_PREFIX;
        Self {
            fc1: Dense::new(
                store,
                &format!("{p}fc1"),
                cfg.channels + cfg.embedding_dim,
                cfg.bypass_hidden,
                Init::FanIn,
                rng,
            ),
            fc2: Dense::new(store, &format!("{p}fc2"), cfg.bypass_hidden, cfg.channels, Init::Zero, rng),
            channels: cfg.channels,
        }
    }

    /// Returns `n̄_Φ(x̄, t) / N`.
    pub fn forward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        xbar: &ChannelMean<T>,
        feat: &Matrix<T>,
        resolution: usize,
    ) -> Result<(ChannelMean<T>, BypassCache<T>)> {
        if xbar.channels() != self.channels || feat.rows != xbar.batch() {
            return Err(Error::shape(&[feat.rows, self.channels], &[xbar.batch(), xbar.channels()]));
        }
        let width = self.channels + feat.cols;
        let mut input = Matrix::zeros(xbar.batch(), width);
        for b in 0..xbar.batch() {
            let row = input.row_mut(b);
            for c in 0..self.channels {
                row[c] = xbar.get(b, c);
            }
            row[self.channels..].copy_from_slice(feat.row(b));
        }
        let h1 = self.fc1.forward(ps, &input);
        let a1 = silu_matrix(&h1);
        let out = self.fc2.forward(ps, &a1);
        let inv_n = T::of(1.0 / resolution as f64);
        let values = out.data.iter().map(|&v| v * inv_n).collect();
        Ok((
            ChannelMean::from_vec(xbar.batch(), self.channels, values)?,
            BypassCache {
                input,
                h1,
                a1,
                resolution,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut ParamStore<T>,
        c: &BypassCache<T>,
        dfbar: &ChannelMean<T>,
    ) {
        let inv_n = T::of(1.0 / c.resolution as f64);
        let dn = Matrix::from_vec(
            dfbar.batch(),
            dfbar.channels(),
            dfbar.values().iter().map(|&v| v * inv_n).collect(),
        );
        let mut da1 = self.fc2.backward(ps, grads, &c.a1, &dn, true).expect("input grad");
        silu_backward(&c.h1.data, &mut da1.data);
        self.fc1.backward(ps, grads, &c.input, &da1, false);
    }
}

/// Parameter-free description of a score network.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNet {
    config: ModelConfig,
    schedule: DiffusionSchedule,
    embedding: TimeEmbedding,
    unet: UNet,
    bypass: Option<MeanBypass>,
}

/// Score network architecture plus its parameters `θ = [φ, Φ]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreModel<T> {
    net: ScoreNet,
    params: ParamStore<T>,
}

enum BranchCache<T> {
    Baseline,
    Modified {
        bypass: BypassCache<T>,
    },
}

/// Everything the backward pass of [`ScoreModel::forward`] needs.
pub struct ForwardCache<T> {
    unet: UNetCache<T>,
    branch: BranchCache<T>,
}

impl<T: Real> ScoreModel<T> {
    /// Builds a freshly initialized model. The same `(config, seed)` always
    /// yields the same parameters and embedding frequencies.
    pub fn new(config: ModelConfig, schedule: DiffusionSchedule, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = TimeEmbedding::new(config.embedding_dim, config.embedding_scale, &mut rng);
        Self::build(config, schedule, embedding, &mut rng)
    }

    /// Rebuilds the architecture around existing parameters (e.g. from a checkpoint).
    pub fn from_parts(
        config: ModelConfig,
        schedule: DiffusionSchedule,
        embedding: TimeEmbedding,
        params: ParamStore<T>,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Self::build(config, schedule, embedding, &mut rng)?;
        if !model.params.same_layout(&params) {
            return Err(Error::Checkpoint("parameter layout does not match the model configuration".into()));
        }
        model.params = params;
        Ok(model)
    }

    fn build(
        config: ModelConfig,
        schedule: DiffusionSchedule,
        embedding: TimeEmbedding,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if embedding.dim() != config.embedding_dim {
            return Err(Error::Config(format!(
                "embedding has {} features, config expects {}",
                embedding.dim(),
                config.embedding_dim
            )));
        }
        let mut params = ParamStore::new();
        let unet = UNet::new(&mut params, &config, rng);
        let bypass = match config.kind {
            ModelKind::Baseline => None,
            ModelKind::Modified => Some(MeanBypass::new(&mut params, &config, rng)),
        };
        Ok(Self {
            net: ScoreNet {
                config,
                schedule,
                embedding,
                unet,
                bypass,
            },
            params,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.net.config.kind
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.net.schedule
    }

    pub fn embedding(&self) -> &TimeEmbedding {
        &self.net.embedding
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Same architecture with a different parameter set (e.g. the EMA shadow).
    pub fn with_params(&self, params: ParamStore<T>) -> Result<Self> {
        if !self.params.same_layout(&params) {
            return Err(Error::InvalidInput("parameter layout mismatch".into()));
        }
        Ok(Self {
            net: self.net.clone(),
            params,
        })
    }

    pub fn cast<U: Real>(&self) -> ScoreModel<U> {
        ScoreModel {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    pub fn embed_time(&self, t: f64) -> Vec<f64> {
        self.net.embedding.embed(t)
    }

    /// `u_φ(x, t)` for one time per batch element.
    pub fn unet_forward(&self, x: &ImageBatch<T>, ts: &[f64]) -> Result<ImageBatch<T>> {
        let feat = self.net.embedding.embed_batch(ts);
        Ok(self.net.unet.forward(&self.params, x, &feat, &mut Mode::Eval)?.0)
    }

    /// `f′_φ(x′, t) = u_φ(x′, t) − mean(u_φ(x′, t))`.
    pub fn f_prime(&self, x_prime: &ImageBatch<T>, ts: &[f64]) -> Result<ImageBatch<T>> {
        let mut u = self.unet_forward(x_prime, ts)?;
        demean_in_place(&mut u);
        Ok(u)
    }

    /// `f̄_Φ(x̄, t) = n̄_Φ(x̄, t)/N`. Only defined for the modified kind.
    pub fn f_bar(&self, x_bar: &ChannelMean<T>, ts: &[f64], resolution: usize) -> Result<ChannelMean<T>> {
        let bypass = self
            .net
            .bypass
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("baseline model has no mean-bypass branch".into()))?;
        let feat = self.net.embedding.embed_batch(ts);
        Ok(bypass.forward(&self.params, x_bar, &feat, resolution)?.0)
    }

    fn check_times(&self, ts: &[f64], batch: usize) -> Result<()> {
        if ts.len() != batch {
            return Err(Error::shape(&[batch], &[ts.len()]));
        }
        let lo = self.net.schedule.t_eps();
        for &t in ts {
            // small slack for grids whose last node is computed in floating point
            if !(t >= lo * (1.0 - 1e-9) && t <= 1.0) {
                return Err(Error::Domain {
                    what: "t",
                    value: t,
                    lo,
                    hi: 1.0,
                });
            }
        }
        Ok(())
    }

    /// `f = σ(t) s_θ(x, t)` with a cache for [`ScoreModel::backward`].
    pub fn forward(&self, x: &ImageBatch<T>, ts: &[f64], mode: &mut Mode<'_>) -> Result<(ImageBatch<T>, ForwardCache<T>)> {
        self.check_times(ts, x.batch())?;
        if x.channels() != self.net.config.channels {
            return Err(Error::shape(&[self.net.config.channels], &[x.channels()]));
        }
        let feat: Matrix<T> = self.net.embedding.embed_batch(ts);
        match &self.net.bypass {
            None => {
                let (u, unet) = self.net.unet.forward(&self.params, x, &feat, mode)?;
                Ok((
                    u,
                    ForwardCache {
                        unet,
                        branch: BranchCache::Baseline,
                    },
                ))
            }
            Some(bypass) => {
                let xbar = spatial_mean(x);
                let mut xprime = x.clone();
                demean_in_place(&mut xprime);
                let (mut f, unet) = self.net.unet.forward(&self.params, &xprime, &feat, mode)?;
                demean_in_place(&mut f);
                let (fbar, bcache) = bypass.forward(&self.params, &xbar, &feat, x.resolution())?;
                for b in 0..f.batch() {
                    for c in 0..f.channels() {
                        let m = fbar.get(b, c);
                        f.plane_mut(b, c).iter_mut().for_each(|v| *v += m);
                    }
                }
                Ok((
                    f,
                    ForwardCache {
                        unet,
                        branch: BranchCache::Modified { bypass: bcache },
                    },
                ))
            }
        }
    }

    /// Parameter gradient of `⟨grad_f, f⟩`.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_f: &ImageBatch<T>) -> ParamStore<T> {
        let mut grads = self.params.zeros_like();
        match (&cache.branch, &self.net.bypass) {
            (BranchCache::Baseline, _) => {
                self.net.unet.backward(&self.params, &mut grads, &cache.unet, grad_f);
            }
            (BranchCache::Modified { bypass: bc }, Some(bypass)) => {
                let mut dfbar = ChannelMean::zeros(grad_f.batch(), grad_f.channels());
                let mut du = grad_f.clone();
                for b in 0..grad_f.batch() {
                    for c in 0..grad_f.channels() {
                        let plane = grad_f.plane(b, c);
                        dfbar.values_mut()[b * grad_f.channels() + c] = T::of(plane_mean(plane) * plane.len() as f64);
                    }
                }
                demean_in_place(&mut du);
                self.net.unet.backward(&self.params, &mut grads, &cache.unet, &du);
                bypass.backward(&self.params, &mut grads, bc, &dfbar);
            }
            (BranchCache::Modified { .. }, None) => unreachable!("cache kind follows model kind"),
        }
        grads
    }

    /// `f = σ(t) s_θ(x, t)` in evaluation mode.
    pub fn f(&self, x: &ImageBatch<T>, ts: &[f64]) -> Result<ImageBatch<T>> {
        Ok(self.forward(x, ts, &mut Mode::Eval)?.0)
    }

    /// `s_θ(x, t) = f/σ(t)` with one `t` for the whole batch.
    pub fn score(&self, x: &ImageBatch<T>, t: f64) -> Result<ImageBatch<T>> {
        let ts = vec![t; x.batch()];
        let f = self.f(x, &ts)?;
        let inv = T::of(1.0 / self.net.schedule.sigma(t)?);
        Ok(f.map(|v| v * inv))
    }

    /// Tensor names that belong to the U-net (`φ`).
    pub fn unet_param_names(&self) -> Vec<&str> {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(UNET_PREFIX))
            .map(|p| p.name.as_str())
            .collect()
    }
}

//! Variance-exploding noising process.
//!
//! `σ(t) = σ_min (σ_max/σ_min)^t` and `g(t) = σ(t) √(2 ln(σ_max/σ_min))`, so
//! that `g²(t) = d σ²(t)/dt` and the forward SDE `dx = g(t) dV` has marginals
//! `N(x(0), σ²(t) I)` up to the constant `σ_min²`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::ImageBatch;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleFields", into = "ScheduleFields")]
pub struct DiffusionSchedule {
    sigma_min: f64,
    sigma_max: f64,
    t_eps: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleFields {
    #[serde(default = "default_sigma_min")]
    sigma_min: f64,
    #[serde(default = "default_sigma_max")]
    sigma_max: f64,
    #[serde(default = "default_t_eps")]
    t_eps: f64,
}

fn default_sigma_min() -> f64 {
    0.01
}
fn default_sigma_max() -> f64 {
    50.0
}
fn default_t_eps() -> f64 {
    1e-5
}

impl TryFrom<ScheduleFields> for DiffusionSchedule {
    type Error = Error;

    fn try_from(f: ScheduleFields) -> Result<Self> {
        DiffusionSchedule::new(f.sigma_min, f.sigma_max, f.t_eps)
    }
}

impl From<DiffusionSchedule> for ScheduleFields {
    fn from(s: DiffusionSchedule) -> Self {
        ScheduleFields {
            sigma_min: s.sigma_min,
            sigma_max: s.sigma_max,
            t_eps: s.t_eps,
        }
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self {
            sigma_min: default_sigma_min(),
            sigma_max: default_sigma_max(),
            t_eps: default_t_eps(),
        }
    }
}

impl DiffusionSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, t_eps: f64) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_min.is_finite()) {
            return Err(Error::Config(format!("sigma_min must be positive, got {sigma_min}")));
        }
        if !(sigma_max > sigma_min && sigma_max.is_finite()) {
            return Err(Error::Config(format!(
                "sigma_max must exceed sigma_min ({sigma_min}), got {sigma_max}"
            )));
        }
        if !(t_eps > 0.0 && t_eps < 1.0) {
            return Err(Error::Config(format!("t_eps must lie in (0, 1), got {t_eps}")));
        }
        Ok(Self {
            sigma_min,
            sigma_max,
            t_eps,
        })
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn t_eps(&self) -> f64 {
        self.t_eps
    }

    fn check_t(t: f64) -> Result<()> {
        if (0.0..=1.0).contains(&t) {
            Ok(())
        } else {
            Err(Error::Domain {
                what: "t",
                value: t,
                lo: 0.0,
                hi: 1.0,
            })
        }
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        Self::check_t(t)?;
        Ok(self.sigma_min * (self.sigma_max / self.sigma_min).powf(t))
    }

    pub fn g(&self, t: f64) -> Result<f64> {
        Ok(self.sigma(t)? * (2.0 * (self.sigma_max / self.sigma_min).ln()).sqrt())
    }

    /// `x0 + σ(t) eps` with a single `t` for the whole batch.
    pub fn perturb<T: Real>(&self, x0: &ImageBatch<T>, t: f64, eps: &ImageBatch<T>) -> Result<ImageBatch<T>> {
        self.perturb_each(x0, &vec![t; x0.batch()], eps)
    }

    /// `x0 + σ(t_b) eps` with one time per batch element.
    pub fn perturb_each<T: Real>(
        &self,
        x0: &ImageBatch<T>,
        ts: &[f64],
        eps: &ImageBatch<T>,
    ) -> Result<ImageBatch<T>> {
        x0.ensure_same_shape(eps)?;
        if ts.len() != x0.batch() {
            return Err(Error::shape(&[x0.batch()], &[ts.len()]));
        }
        let mut out = x0.clone();
        for (b, &t) in ts.iter().enumerate() {
            let s = T::of(self.sigma(t)?);
            for (o, &e) in out.item_mut(b).iter_mut().zip(eps.item(b)) {
                *o += s * e;
            }
        }
        Ok(out)
    }
}

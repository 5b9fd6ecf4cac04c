use crate::nn::ParamStore;
use crate::real::Real;

/// Exponential moving average of parameter iterates.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState<T> {
    pub shadow: ParamStore<T>,
    pub rate: f64,
}

impl<T: Real> EmaState<T> {
    pub fn new(params: &ParamStore<T>, rate: f64) -> Self {
        Self {
            shadow: params.clone(),
            rate,
        }
    }

    /// `shadow ← rate·shadow + (1 − rate)·params`.
    pub fn update(&mut self, params: &ParamStore<T>) {
        assert!(self.shadow.same_layout(params), "ema layout mismatch");
        let r = self.rate;
        for (s, p) in self.shadow.iter_mut().zip(params.iter()) {
            for (a, &b) in s.data.iter_mut().zip(&p.data) {
                *a = T::of(r * a.f64() + (1.0 - r) * b.f64());
            }
        }
    }
}

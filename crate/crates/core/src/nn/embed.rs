//! Timestep conditioning.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::linear::Linear;
use crate::nn::params::{Bound, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Multiplier applied to `t in [0, 1]` before the sinusoids.
pub const TIME_SCALE: f64 = 100.0;
const MAX_PERIOD: f64 = 10_000.0;

/// `[cos(w_j s t), sin(w_j s t)]` features, one row per time value.
pub fn sinusoid<T: Scalar>(ts: &[f64], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); ts.len() * dim];
    for (r, &t) in ts.iter().enumerate() {
        for j in 0..half {
            let freq = (-(MAX_PERIOD.ln()) * j as f64 / half as f64).exp();
            let a = TIME_SCALE * t * freq;
            out[r * dim + j] = T::from_f64(a.cos());
            out[r * dim + half + j] = T::from_f64(a.sin());
        }
    }
    Tensor::from_parts(vec![ts.len(), dim], out)
}

/// Sinusoidal features followed by a two-layer SiLU MLP.
#[derive(Debug, Clone, Copy)]
pub struct TimestepEmbedder {
    pub freq_dim: usize,
    l1: Linear,
    l2: Linear,
}

impl TimestepEmbedder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        freq_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TimestepEmbedder {
            freq_dim,
            l1: Linear::glorot(store, &format!("{name}.l1"), freq_dim, hidden, rng)?,
            l2: Linear::glorot(store, &format!("{name}.l2"), hidden, hidden, rng)?,
        })
    }

    /// `[ts.len(), hidden]`.
    pub fn forward<T: Scalar>(&self, p: &Bound<T>, ts: &[f64]) -> Result<Var<T>> {
        if let Some(&t) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::invalid("timestep_embedding", format!("t = {t} outside [0, 1]")));
        }
        let f = Var::constant(sinusoid::<T>(ts, self.freq_dim));
        let h = self.l1.forward(p, &f)?.silu()?;
        self.l2.forward(p, &h)
    }
}

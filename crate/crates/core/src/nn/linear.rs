use rand::Rng;

use crate::autograd::Var;
use crate::error::Result;
use crate::nn::params::{init, Bound, ParamId, ParamStore};
use crate::tensor::Scalar;

/// Affine map `x @ w + b` on the last axis of `[rows, in]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn glorot<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = init::glorot(fan_in, fan_out, rng);
        Self::with_weight(store, name, w)
    }

    pub fn normal<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let w = init::normal(&[fan_in, fan_out], std, rng);
        Self::with_weight(store, name, w)
    }

    pub fn zeros<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Self::with_weight(store, name, init::zeros(&[fan_in, fan_out]))
    }

    fn with_weight<T: Scalar>(store: &mut ParamStore<T>, name: &str, w: crate::tensor::Tensor<T>) -> Result<Self> {
        let (fan_in, fan_out) = w.dims2()?;
        let w = store.add(format!("{name}.w"), w)?;
        let b = store.add(format!("{name}.b"), init::zeros(&[fan_out]))?;
        Ok(Linear { w, b, fan_in, fan_out })
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        x.linear(p.get(self.w), p.get(self.b))
    }

    /// The output split into `parts` equal column blocks, each computed by
    /// its own matmul so no backward pass touches the full output width.
    pub fn forward_split<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>, parts: usize) -> Result<Vec<Var<T>>> {
        let n = self.fan_out / parts;
        let (w, b) = (p.get(self.w), p.get(self.b));
        (0..parts)
            .map(|i| x.linear(&w.slice(1, i * n, n)?, &b.slice(0, i * n, n)?))
            .collect()
    }
}

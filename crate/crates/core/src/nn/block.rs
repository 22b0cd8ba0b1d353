//! Pre-norm transformer block with adaLN-Zero conditioning, the output layer,
//! and the per-layer key/value cache.

use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::linear::Linear;
use crate::nn::mask::Mask;
use crate::nn::params::{Bound, ParamStore};
use crate::nn::rope::RopeTable;
use crate::tensor::{Scalar, Tensor};

pub const MLP_RATIO: usize = 4;

/// Inputs shared by every block of one forward pass.
pub struct BlockCtx<'a, T: Scalar> {
    /// SiLU-activated conditioning, one row per conditioning slot.
    pub cond: &'a Var<T>,
    /// Conditioning slot of each token row.
    pub row_cond: &'a [usize],
    pub mask: &'a Mask,
    pub rope: Option<&'a RopeTable<T>>,
    /// Independent sequences stacked in the rows; `mask` applies to each.
    pub batch: usize,
    pub capture_attn: bool,
}

pub struct BlockOut<T: Scalar> {
    pub x: Var<T>,
    /// Keys and values of the current tokens, `[batch, L, hidden]`, post-rotation.
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    /// `[batch, heads, Lq, Lk]` when captured.
    pub attn: Option<Tensor<T>>,
}

#[derive(Debug, Clone, Copy)]
pub struct DitBlock {
    pub hidden: usize,
    pub heads: usize,
    ada: Linear,
    qkv: Linear,
    proj: Linear,
    fc1: Linear,
    fc2: Linear,
}

/// Adds 1 to the scale chunks of a `[.., chunks * hidden]` modulation.
fn scale_offset<T: Scalar>(chunks: &[bool], hidden: usize) -> Var<T> {
    let mut v = vec![T::zero(); chunks.len() * hidden];
    for (c, &is_scale) in chunks.iter().enumerate() {
        if is_scale {
            v[c * hidden..(c + 1) * hidden].fill(T::one());
        }
    }
    Var::constant(Tensor::from_parts(vec![chunks.len() * hidden], v))
}

fn modulate<T: Scalar>(x: &Var<T>, shift: &Var<T>, scale1p: &Var<T>) -> Result<Var<T>> {
    x.layer_norm()?.mul(scale1p)?.add(shift)
}

impl DitBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        hidden: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !hidden.is_multiple_of(heads) {
            return Err(Error::invalid(
                "block",
                format!("hidden {hidden} not divisible by {heads} heads"),
            ));
        }
        Ok(DitBlock {
            hidden,
            heads,
            ada: Linear::zeros(store, &format!("{name}.ada"), hidden, 6 * hidden)?,
            qkv: Linear::glorot(store, &format!("{name}.qkv"), hidden, 3 * hidden, rng)?,
            proj: Linear::glorot(store, &format!("{name}.proj"), hidden, hidden, rng)?,
            fc1: Linear::glorot(store, &format!("{name}.fc1"), hidden, MLP_RATIO * hidden, rng)?,
            fc2: Linear::glorot(store, &format!("{name}.fc2"), MLP_RATIO * hidden, hidden, rng)?,
        })
    }

    /// One block over `x: [batch * L, hidden]`. With `prefix` (cached keys and
    /// values `[batch, Lc, hidden]`), attention keys are the prefix followed by
    /// the current tokens and `ctx.mask` must be `L x (Lc + L)`.
    pub fn forward<T: Scalar>(
        &self,
        p: &Bound<T>,
        x: &Var<T>,
        ctx: &BlockCtx<'_, T>,
        prefix: Option<(&Tensor<T>, &Tensor<T>)>,
    ) -> Result<BlockOut<T>> {
        let h = self.hidden;
        let rows = x.shape()[0];
        if x.shape() != [rows, h] || ctx.row_cond.len() != rows || !rows.is_multiple_of(ctx.batch) {
            return Err(Error::invalid(
                "block",
                format!(
                    "x {:?}, {} conditioning rows, batch {}",
                    x.shape(),
                    ctx.row_cond.len(),
                    ctx.batch
                ),
            ));
        }
        let l = rows / ctx.batch;
        let m = self
            .ada
            .forward(p, ctx.cond)?
            .add(&scale_offset(&[false, true, false, false, true, false], h))?;
        let chunk = |i: usize| m.slice(1, i * h, h)?.embedding_lookup(ctx.row_cond);

        let a_in = modulate(x, &chunk(0)?, &chunk(1)?)?;
        let [mut q, mut k, v]: [Var<T>; 3] = self
            .qkv
            .forward_split(p, &a_in, 3)?
            .try_into()
            .map_err(|_| Error::invalid("block", "qkv split"))?;
        if let Some(r) = ctx.rope {
            q = q.rope(r)?;
            k = k.rope(r)?;
        }
        let k_cur = k.value().reshape(&[ctx.batch, l, h])?;
        let v_cur = v.value().reshape(&[ctx.batch, l, h])?;
        let (k_all, v_all) = match prefix {
            None => (k, v),
            Some((pk, pv)) => {
                let lc = pk.shape().get(1).copied().unwrap_or(0);
                if pk.shape() != [ctx.batch, lc, h] || pv.shape() != pk.shape() {
                    return Err(Error::Cache(format!(
                        "prefix shape {:?} / {:?} for batch {} width {h}",
                        pk.shape(),
                        pv.shape(),
                        ctx.batch
                    )));
                }
                let join = |c: &Tensor<T>, cur: &Var<T>| -> Result<Var<T>> {
                    Var::concat(&[Var::constant(c.clone()), cur.reshape(&[ctx.batch, l, h])?], 1)?
                        .reshape(&[ctx.batch * (lc + l), h])
                };
                (join(pk, &k)?, join(pv, &v)?)
            }
        };
        let (att, weights) = Var::attention(&q, &k_all, &v_all, ctx.mask, self.heads, ctx.batch, ctx.capture_attn)?;
        let x = x.add(&self.proj.forward(p, &att)?.mul(&chunk(2)?)?)?;

        let m_in = modulate(&x, &chunk(3)?, &chunk(4)?)?;
        let mlp = self.fc2.forward(p, &self.fc1.forward(p, &m_in)?.gelu()?)?;
        let x = x.add(&mlp.mul(&chunk(5)?)?)?;
        Ok(BlockOut {
            x,
            k: k_cur,
            v: v_cur,
            attn: weights,
        })
    }
}

/// Norm, adaLN shift/scale, and linear projection to the output width.
#[derive(Debug, Clone, Copy)]
pub struct FinalLayer {
    ada: Linear,
    head: Linear,
}

impl FinalLayer {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        hidden: usize,
        out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FinalLayer {
            ada: Linear::zeros(store, &format!("{name}.ada"), hidden, 2 * hidden)?,
            head: Linear::normal(store, &format!("{name}.head"), hidden, out, 0.02, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>, cond: &Var<T>, row_cond: &[usize]) -> Result<Var<T>> {
        let h = self.ada.fan_in;
        let m = self.ada.forward(p, cond)?.add(&scale_offset(&[false, true], h))?;
        let chunk = |i: usize| m.slice(1, i * h, h)?.embedding_lookup(row_cond);
        let y = modulate(x, &chunk(0)?, &chunk(1)?)?;
        self.head.forward(p, &y)
    }
}

/// Append-only per-layer keys and values, `[batch, frames * tokens_per_frame, width]`.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    batch: usize,
    tokens_per_frame: usize,
    width: usize,
    layers: Vec<Option<(Tensor<T>, Tensor<T>)>>,
    frames: Vec<usize>,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(num_layers: usize, batch: usize, tokens_per_frame: usize, width: usize) -> Self {
        KvCache {
            batch,
            tokens_per_frame,
            width,
            layers: vec![None; num_layers],
            frames: vec![0; num_layers],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens_per_frame
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Frames cached at layer 0.
    pub fn frames_cached(&self) -> usize {
        self.frames.first().copied().unwrap_or(0)
    }

    pub fn frames_at(&self, layer: usize) -> usize {
        self.frames[layer]
    }

    /// Cached key length at `layer`.
    pub fn key_len(&self, layer: usize) -> usize {
        self.frames[layer] * self.tokens_per_frame
    }

    pub fn prefix(&self, layer: usize) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.layers[layer].as_ref().map(|(k, v)| (k, v))
    }

    /// Tokens cached across all layers.
    pub fn total_tokens(&self) -> usize {
        (0..self.layers.len()).map(|l| self.key_len(l)).sum()
    }

    /// Append one frame of keys and values `[batch, tokens_per_frame, width]`.
    pub fn kv_append(&mut self, layer: usize, k: Tensor<T>, v: Tensor<T>) -> Result<()> {
        let want = [self.batch, self.tokens_per_frame, self.width];
        if layer >= self.layers.len() {
            return Err(Error::Cache(format!("layer {layer} out of {}", self.layers.len())));
        }
        if k.shape() != want || v.shape() != want {
            return Err(Error::Cache(format!(
                "append expects {want:?}, got keys {:?} values {:?}",
                k.shape(),
                v.shape()
            )));
        }
        let joined = match self.layers[layer].take() {
            None => (k, v),
            Some((pk, pv)) => (cat_axis1(&pk, &k), cat_axis1(&pv, &v)),
        };
        self.layers[layer] = Some(joined);
        self.frames[layer] += 1;
        Ok(())
    }
}

fn cat_axis1<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (batch, la, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let lb = b.shape()[1];
    let mut out = Vec::with_capacity(batch * (la + lb) * w);
    for i in 0..batch {
        out.extend_from_slice(&a.data()[i * la * w..(i + 1) * la * w]);
        out.extend_from_slice(&b.data()[i * lb * w..(i + 1) * lb * w]);
    }
    Tensor::from_parts(vec![batch, la + lb, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::mask::{build_mask, MaskKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(hidden: usize) -> (ParamStore<f64>, DitBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let b = DitBlock::new(&mut store, "b", hidden, 2, &mut rng).unwrap();
        (store, b)
    }

    #[test]
    fn zero_gates_make_identity() {
        let (store, b) = setup(8);
        let p = store.bind(false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Var::constant(Tensor::<f64>::randn(&[6, 8], 1.0, &mut rng));
        let cond = Var::constant(Tensor::<f64>::randn(&[3, 8], 1.0, &mut rng));
        let mask = build_mask(3, 2, MaskKind::FrameCausal);
        let ctx = BlockCtx {
            cond: &cond,
            row_cond: &[0, 0, 1, 1, 2, 2],
            mask: &mask,
            rope: None,
            batch: 1,
            capture_attn: false,
        };
        let out = b.forward(&p, &x, &ctx, None).unwrap();
        assert!(out.x.value().bitwise_eq(x.value()));
        assert_eq!(out.k.shape(), &[1, 6, 8]);
    }

    #[test]
    fn cache_append_arithmetic() {
        let mut c = KvCache::<f32>::new(2, 1, 3, 4);
        assert_eq!(c.frames_cached(), 0);
        let kv = || Tensor::<f32>::from_fn(&[1, 3, 4], |i| i as f32);
        c.kv_append(0, kv(), kv()).unwrap();
        assert_eq!(c.frames_cached(), 1);
        let before = c.prefix(0).unwrap().0.clone();
        c.kv_append(0, kv(), kv()).unwrap();
        let after = c.prefix(0).unwrap().0;
        assert_eq!(after.shape(), &[1, 6, 4]);
        assert_eq!(&after.data()[..12], before.data());
        assert!(c
            .kv_append(1, Tensor::zeros(&[1, 2, 4]), Tensor::zeros(&[1, 2, 4]))
            .is_err());
    }
}

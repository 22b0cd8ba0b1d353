//! Separable causal diffusion: a frame-causal encoder producing one context
//! per frame and a frame-wise decoder that denoises each frame given only
//! its context.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::data::FrameGeom;
use crate::diffusion::{fm_loss_frames, forward_path_frames, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::model::{push_capture, scd_bp_per_frame, BlockCounter, ForwardOpts, FrameCost, LayerCapture};
use crate::nn::block::{BlockCtx, DitBlock, FinalLayer, KvCache};
use crate::nn::embed::TimestepEmbedder;
use crate::nn::linear::Linear;
use crate::nn::mask::{build_mask, last_frame_mask, Mask, MaskKind};
use crate::nn::params::{init, Bound, ParamId, ParamStore};
use crate::nn::rope::{RopeMode, RopeTable, TokenPos};
use crate::tensor::{Scalar, Tensor};

/// How the decoder combines context and noisy tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interface {
    /// `[c ; x_t]` along the sequence, attended jointly.
    FrameConcat,
    /// `[c, x_t]` along channels, projected back to the hidden width.
    ChannelConcat,
}

/// Named depth/width presets: `(enc_blocks, dec_blocks, hidden, heads)`.
pub fn scd_variant(name: &str) -> Option<(usize, usize, usize, usize)> {
    Some(match name {
        "scd-b" => (8, 4, 768, 12),
        "scd-b-e" => (12, 4, 768, 12),
        "scd-b-d" => (8, 12, 768, 12),
        "scd-m" => (8, 4, 1024, 16),
        "scd-m-e" => (12, 4, 1024, 16),
        "scd-m-d" => (8, 12, 1024, 16),
        _ => return None,
    })
}

pub const SCD_VARIANTS: [&str; 6] = ["scd-b", "scd-b-e", "scd-b-d", "scd-m", "scd-m-e", "scd-m-d"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScdConfig {
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub hidden: usize,
    pub heads: usize,
    pub interface: Interface,
    pub rope_mode: RopeMode,
    pub corrupt_eta_train: f64,
    pub num_actions: usize,
    pub freq_dim: usize,
    pub geom: FrameGeom,
}

impl ScdConfig {
    pub fn from_variant(name: &str, geom: FrameGeom, num_actions: usize) -> Result<Self> {
        let (enc_blocks, dec_blocks, hidden, heads) =
            scd_variant(name).ok_or_else(|| Error::config("model.variant", format!("unknown variant `{name}`")))?;
        Ok(ScdConfig {
            enc_blocks,
            dec_blocks,
            hidden,
            heads,
            interface: Interface::FrameConcat,
            rope_mode: RopeMode::Temporal,
            corrupt_eta_train: 0.0,
            num_actions,
            freq_dim: 64,
            geom,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_blocks == 0 {
            return Err(Error::config("model.enc_blocks", "must be >= 1"));
        }
        if self.dec_blocks == 0 {
            return Err(Error::config("model.dec_blocks", "must be >= 1"));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config("model.heads", "must divide model.hidden"));
        }
        let dh = self.hidden / self.heads;
        if dh < 2 || !dh.is_multiple_of(2) {
            return Err(Error::config("model.heads", "head width must be even"));
        }
        if !(self.corrupt_eta_train >= 0.0) {
            return Err(Error::config("model.corrupt_eta_train", "must be >= 0"));
        }
        if self.num_actions == 0 {
            return Err(Error::config("data.num_actions", "must be >= 1"));
        }
        if self.freq_dim < 2 || !self.freq_dim.is_multiple_of(2) {
            return Err(Error::config("model.freq_dim", "must be even and >= 2"));
        }
        self.geom.validate()
    }

    pub fn depth(&self) -> usize {
        self.enc_blocks + self.dec_blocks
    }
}

impl FrameCost for ScdConfig {
    fn bp_per_frame(&self, denoise_steps: usize) -> u64 {
        scd_bp_per_frame(self.enc_blocks, self.dec_blocks, denoise_steps)
    }
}

/// `c + eta * zeta`; exactly `c` when `eta == 0`.
pub fn corrupt_context<T: Scalar>(c: &Tensor<T>, eta: f64, zeta: &Tensor<T>) -> Result<Tensor<T>> {
    if !(eta >= 0.0) {
        return Err(Error::invalid("corrupt_context", format!("eta = {eta} must be >= 0")));
    }
    if eta == 0.0 {
        return Ok(c.clone());
    }
    let e = T::from_f64(eta);
    c.zip_map(zeta, |cv, z| cv + e * z)
}

/// Graph version of [`corrupt_context`]; `zeta` is treated as a constant.
pub fn corrupt_context_var<T: Scalar>(c: &Var<T>, eta: f64, zeta: &Tensor<T>) -> Result<Var<T>> {
    if !(eta >= 0.0) {
        return Err(Error::invalid("corrupt_context", format!("eta = {eta} must be >= 0")));
    }
    if eta == 0.0 {
        return Ok(c.clone());
    }
    c.add(&Var::constant(zeta.scale(T::from_f64(eta))))
}

pub fn randn_tensor<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let v: Vec<T> = (0..n)
        .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::from_parts(shape.to_vec(), v)
}

/// Random quantities of one training step. Decoder frames are ordered
/// sample-major: frame `k * clean + f` is sample `k` of clean frame `f`.
#[derive(Debug, Clone)]
pub struct ScdDraws<T> {
    pub k: usize,
    pub ts: Vec<f64>,
    /// `[k * clean * P, D]`.
    pub eps: Tensor<T>,
    /// `[k * clean * P, hidden]`.
    pub zeta: Tensor<T>,
}

impl<T: Scalar> ScdDraws<T> {
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        schedule: &DiffusionSchedule,
        k: usize,
        clean_frames: usize,
        cfg: &ScdConfig,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("train_step", "K must be >= 1"));
        }
        let f = k * clean_frames;
        let pp = cfg.geom.tokens_per_frame();
        let ts = (0..f).map(|_| schedule.sample_t(rng)).collect::<Result<Vec<_>>>()?;
        let eps = randn_tensor(&[f * pp, cfg.geom.token_dim()], rng);
        let zeta = randn_tensor(&[f * pp, cfg.hidden], rng);
        Ok(ScdDraws { k, ts, eps, zeta })
    }

    /// Draws of the single sample `k`.
    pub fn sample_k(&self, k: usize) -> Result<Self> {
        let f = self.ts.len() / self.k;
        let rows_e = self.eps.shape()[0] / self.k;
        let rows_z = self.zeta.shape()[0] / self.k;
        Ok(ScdDraws {
            k: 1,
            ts: self.ts[k * f..(k + 1) * f].to_vec(),
            eps: self.eps.rows(k * rows_e, rows_e)?,
            zeta: self.zeta.rows(k * rows_z, rows_z)?,
        })
    }
}

pub struct ScdModel<T: Scalar> {
    pub cfg: ScdConfig,
    params: ParamStore<T>,
    enc_embed: Linear,
    bos: ParamId,
    action: ParamId,
    enc_cond: ParamId,
    enc: Vec<DitBlock>,
    dec_embed: Linear,
    ctx_proj: Option<Linear>,
    temb: TimestepEmbedder,
    dec: Vec<DitBlock>,
    fin: FinalLayer,
    dec_rope: RopeTable<T>,
    counter: BlockCounter,
}

fn dims4<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => Err(Error::invalid(op, format!("expected 4 axes, got {:?}", t.shape()))),
    }
}

/// Rows `[b, 0..keep)` of a `[B, N, ...]` tensor, flattened to `[B * keep * inner / last, last]`.
fn leading_frames<T: Scalar>(t: &Tensor<T>, keep: usize) -> Result<Tensor<T>> {
    let (b, n, p, d) = dims4("frames", t)?;
    let per = p * d;
    let mut out = Vec::with_capacity(b * keep * per);
    for bi in 0..b {
        out.extend_from_slice(&t.data()[bi * n * per..(bi * n + keep) * per]);
    }
    Tensor::new(&[b * keep * p, d], out)
}

fn grid_positions(frames: &[f64], geom: &FrameGeom) -> Vec<TokenPos> {
    frames
        .iter()
        .flat_map(|&f| TokenPos::frame_grid(f, geom.grid_h(), geom.grid_w()))
        .collect()
}

impl<T: Scalar> ScdModel<T> {
    pub fn new(cfg: ScdConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let (h, pp, d) = (cfg.hidden, cfg.geom.tokens_per_frame(), cfg.geom.token_dim());
        let enc_embed = Linear::glorot(&mut s, "enc.embed", d, h, &mut rng)?;
        let bos = s.add("enc.bos", init::normal(&[pp, h], 1.0, &mut rng))?;
        let action = s.add("enc.action", init::normal(&[cfg.num_actions, h], 0.02, &mut rng))?;
        let enc_cond = s.add("enc.cond", init::normal(&[1, h], 1.0, &mut rng))?;
        let enc = (0..cfg.enc_blocks)
            .map(|i| DitBlock::new(&mut s, &format!("enc.block{i}"), h, cfg.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let dec_embed = Linear::glorot(&mut s, "dec.embed", d, h, &mut rng)?;
        let ctx_proj = match cfg.interface {
            Interface::FrameConcat => None,
            Interface::ChannelConcat => Some(Linear::glorot(&mut s, "dec.ctx_proj", 2 * h, h, &mut rng)?),
        };
        let temb = TimestepEmbedder::new(&mut s, "dec.temb", cfg.freq_dim, h, &mut rng)?;
        let dec = (0..cfg.dec_blocks)
            .map(|i| DitBlock::new(&mut s, &format!("dec.block{i}"), h, cfg.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let fin = FinalLayer::new(&mut s, "dec.final", h, d, &mut rng)?;
        // Context and noisy tokens sit one frame apart (or together); only the
        // offset enters attention scores, so the absolute frame index is fixed.
        let frames: &[f64] = match (cfg.interface, cfg.rope_mode) {
            (Interface::ChannelConcat, _) => &[1.0],
            (Interface::FrameConcat, RopeMode::Temporal) => &[0.0, 1.0],
            (Interface::FrameConcat, RopeMode::Identical) => &[1.0, 1.0],
        };
        let dec_rope = RopeTable::new(h / cfg.heads, &grid_positions(frames, &cfg.geom))?;
        Ok(ScdModel {
            cfg,
            params: s,
            enc_embed,
            bos,
            action,
            enc_cond,
            enc,
            dec_embed,
            ctx_proj,
            temb,
            dec,
            fin,
            dec_rope,
            counter: BlockCounter::default(),
        })
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn block_passes(&self) -> u64 {
        self.counter.get()
    }

    pub fn reset_counter(&self) {
        self.counter.reset()
    }

    pub fn new_cache(&self, batch: usize) -> KvCache<T> {
        KvCache::new(
            self.cfg.enc_blocks,
            batch,
            self.cfg.geom.tokens_per_frame(),
            self.cfg.hidden,
        )
    }

    fn check_actions(&self, actions: &[usize], want: usize) -> Result<()> {
        if actions.len() != want {
            return Err(Error::invalid(
                "encode_contexts",
                format!("{} actions for {want} frames", actions.len()),
            ));
        }
        if let Some(&a) = actions.iter().find(|&&a| a >= self.cfg.num_actions) {
            return Err(Error::invalid("encode_contexts", format!("action {a} out of range")));
        }
        Ok(())
    }

    fn add_actions(&self, p: &Bound<T>, x: &Var<T>, actions: &[usize]) -> Result<Var<T>> {
        let pp = self.cfg.geom.tokens_per_frame();
        let rows: Vec<usize> = (0..actions.len() * pp).map(|r| actions[r / pp]).collect();
        x.add(&p.get(self.action).embedding_lookup(&rows)?)
    }

    fn tiled_bos(&self, p: &Bound<T>, batch: usize) -> Result<Var<T>> {
        let (pp, h) = (self.cfg.geom.tokens_per_frame(), self.cfg.hidden);
        p.get(self.bos)
            .reshape(&[1, pp * h])?
            .embedding_lookup(&vec![0; batch])?
            .reshape(&[batch, 1, pp, h])
    }

    /// Teacher-forced contexts for every frame: `frames: [B, N, P, D]`,
    /// `actions` of length `B * N` (row-major). Returns `[B * N * P, hidden]`
    /// where context `i` depends only on frames `< i` and actions `<= i`.
    pub fn encode_contexts(
        &self,
        p: &Bound<T>,
        frames: &Tensor<T>,
        actions: &[usize],
        opts: &ForwardOpts,
    ) -> Result<(Var<T>, Vec<LayerCapture<T>>)> {
        let (b, n, pp, d) = dims4("encode_contexts", frames)?;
        let h = self.cfg.hidden;
        if pp != self.cfg.geom.tokens_per_frame() || d != self.cfg.geom.token_dim() {
            return Err(Error::invalid(
                "encode_contexts",
                format!("frame shape {:?}", frames.shape()),
            ));
        }
        self.check_actions(actions, b * n)?;
        let bos = self.tiled_bos(p, b)?;
        let seq = if n > 1 {
            let prev = Var::constant(leading_frames(frames, n - 1)?);
            let e = self.enc_embed.forward(p, &prev)?.reshape(&[b, n - 1, pp, h])?;
            Var::concat(&[bos, e], 1)?
        } else {
            bos
        };
        let mut x = self.add_actions(p, &seq.reshape(&[b * n * pp, h])?, actions)?;
        let cond = p.get(self.enc_cond).silu()?;
        let row_cond = vec![0usize; b * n * pp];
        let mask = build_mask(n, pp, MaskKind::FrameCausal);
        let positions: Vec<f64> = (0..n).map(|j| j as f64).collect();
        let rope = RopeTable::new(h / self.cfg.heads, &grid_positions(&positions, &self.cfg.geom))?;
        let ctx = BlockCtx {
            cond: &cond,
            row_cond: &row_cond,
            mask: &mask,
            rope: Some(&rope),
            batch: b,
            capture_attn: opts.capture_attn,
        };
        let mut caps = Vec::new();
        for (l, blk) in self.enc.iter().enumerate() {
            if !opts.runs(l) {
                continue;
            }
            let out = blk.forward(p, &x, &ctx, None)?;
            self.counter.add(b * n);
            push_capture(&mut caps, opts, l, &out);
            x = out.x;
        }
        Ok((x.layer_norm()?, caps))
    }

    /// Next context from the cache: the first call (empty cache) consumes the
    /// begin-of-sequence frame, later calls the previous frame `[B, P, D]`.
    /// `actions` has one entry per batch item.
    pub fn encode_next(
        &self,
        p: &Bound<T>,
        cache: &mut KvCache<T>,
        prev: Option<&Tensor<T>>,
        actions: &[usize],
        opts: &ForwardOpts,
    ) -> Result<(Var<T>, Vec<LayerCapture<T>>)> {
        let (pp, h) = (self.cfg.geom.tokens_per_frame(), self.cfg.hidden);
        let b = cache.batch();
        if opts.bypass.is_some() || opts.active.is_some() {
            return Err(Error::invalid(
                "encode_next",
                "layer bypass is not supported with a cache",
            ));
        }
        if cache.num_layers() != self.cfg.enc_blocks || cache.tokens_per_frame() != pp {
            return Err(Error::Cache("cache geometry does not match the encoder".into()));
        }
        self.check_actions(actions, b)?;
        let j = cache.frames_cached();
        let x = match (j, prev) {
            (0, None) => self.tiled_bos(p, b)?.reshape(&[b * pp, h])?,
            (0, Some(_)) => return Err(Error::Cache("empty cache expects the begin-of-sequence step".into())),
            (_, None) => return Err(Error::Cache(format!("{j} frames cached but no previous frame"))),
            (_, Some(f)) => {
                let want = [b, pp, self.cfg.geom.token_dim()];
                if f.shape() != want {
                    return Err(Error::Shape {
                        op: "encode_next",
                        lhs: f.shape().to_vec(),
                        rhs: want.to_vec(),
                    });
                }
                let f = f.reshape(&[b * pp, want[2]])?;
                self.enc_embed.forward(p, &Var::constant(f))?
            }
        };
        let mut x = self.add_actions(p, &x, actions)?;
        let cond = p.get(self.enc_cond).silu()?;
        let row_cond = vec![0usize; b * pp];
        let mask = last_frame_mask(j + 1, pp, MaskKind::FrameCausal);
        let rope = RopeTable::new(h / self.cfg.heads, &grid_positions(&[j as f64], &self.cfg.geom))?;
        let ctx = BlockCtx {
            cond: &cond,
            row_cond: &row_cond,
            mask: &mask,
            rope: Some(&rope),
            batch: b,
            capture_attn: opts.capture_attn,
        };
        let mut caps = Vec::new();
        for (l, blk) in self.enc.iter().enumerate() {
            let out = blk.forward(p, &x, &ctx, cache.prefix(l))?;
            self.counter.add(b);
            push_capture(&mut caps, opts, l, &out);
            cache.kv_append(l, out.k, out.v)?;
            x = out.x;
        }
        Ok((x.layer_norm()?, caps))
    }

    /// Velocity for `F = ts.len()` independent frames: `xt, [F * P, D]` and
    /// contexts `c, [F * P, hidden]`. Decoder layers are numbered after the
    /// encoder's in captures and bypass indices.
    pub fn decode_velocity(
        &self,
        p: &Bound<T>,
        xt: &Var<T>,
        ts: &[f64],
        c: &Var<T>,
        opts: &ForwardOpts,
    ) -> Result<(Var<T>, Vec<LayerCapture<T>>)> {
        let (pp, h, d) = (
            self.cfg.geom.tokens_per_frame(),
            self.cfg.hidden,
            self.cfg.geom.token_dim(),
        );
        let f = ts.len();
        if f == 0 || xt.shape() != [f * pp, d] || c.shape() != [f * pp, h] {
            return Err(Error::invalid(
                "decode_velocity",
                format!("x_t {:?}, context {:?}, {f} frames", xt.shape(), c.shape()),
            ));
        }
        let xe = self.dec_embed.forward(p, xt)?;
        let (mut x, seq) = match &self.ctx_proj {
            None => (
                Var::concat(&[c.reshape(&[f, pp, h])?, xe.reshape(&[f, pp, h])?], 1)?.reshape(&[f * 2 * pp, h])?,
                2 * pp,
            ),
            Some(proj) => (proj.forward(p, &Var::concat_lastdim(&[c.clone(), xe])?)?, pp),
        };
        let cond = self.temb.forward(p, ts)?.silu()?;
        let row_cond: Vec<usize> = (0..f * seq).map(|r| r / seq).collect();
        let mask = Mask::all(seq, seq);
        let ctx = BlockCtx {
            cond: &cond,
            row_cond: &row_cond,
            mask: &mask,
            rope: Some(&self.dec_rope),
            batch: f,
            capture_attn: opts.capture_attn,
        };
        let mut caps = Vec::new();
        for (j, blk) in self.dec.iter().enumerate() {
            let l = self.cfg.enc_blocks + j;
            if !opts.runs(l) {
                continue;
            }
            let out = blk.forward(p, &x, &ctx, None)?;
            self.counter.add(f);
            push_capture(&mut caps, opts, l, &out);
            x = out.x;
        }
        if seq != pp {
            x = x.reshape(&[f, seq, h])?.slice(1, pp, pp)?.reshape(&[f * pp, h])?;
        }
        let row_frame: Vec<usize> = (0..f * pp).map(|r| r / pp).collect();
        Ok((self.fin.forward(p, &x, &cond, &row_frame)?, caps))
    }

    /// Amortized flow-matching loss: contexts are encoded once and shared by
    /// `draws.k` decoder samples per frame.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        p: &Bound<T>,
        frames: &Tensor<T>,
        actions: &[usize],
        draws: &ScdDraws<T>,
        eta: f64,
        schedule: &DiffusionSchedule,
        opts: &ForwardOpts,
    ) -> Result<Var<T>> {
        let (b, n, pp, d) = dims4("scd_loss", frames)?;
        let clean = b * n;
        if draws.ts.len() != draws.k * clean {
            return Err(Error::invalid(
                "scd_loss",
                format!("{} draws for {} frames x K={}", draws.ts.len(), clean, draws.k),
            ));
        }
        let (c, _) = self.encode_contexts(p, frames, actions, opts)?;
        let c_rep = if draws.k == 1 {
            c
        } else {
            Var::concat_seqdim(&vec![c; draws.k])?
        };
        let c_tilde = corrupt_context_var(&c_rep, eta, &draws.zeta)?;
        let x = frames.reshape(&[clean * pp, d])?;
        let x_rep = if draws.k == 1 {
            x
        } else {
            Tensor::cat_rows(&vec![&x; draws.k])?
        };
        let xt = forward_path_frames(&x_rep, &draws.eps, &draws.ts)?;
        let (v, _) = self.decode_velocity(p, &Var::constant(xt), &draws.ts, &c_tilde, opts)?;
        fm_loss_frames(&v, &x_rep, &draws.eps, &draws.ts, schedule)
    }
}

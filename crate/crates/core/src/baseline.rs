//! Entangled causal diffusion transformer: one stack handles both history and
//! denoising, trained with teacher forcing or diffusion forcing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::data::FrameGeom;
use crate::diffusion::{fm_loss_frames, forward_path_frames, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::model::{baseline_bp_per_frame, push_capture, BlockCounter, ForwardOpts, FrameCost, LayerCapture};
use crate::nn::block::{BlockCtx, DitBlock, FinalLayer, KvCache};
use crate::nn::embed::TimestepEmbedder;
use crate::nn::linear::Linear;
use crate::nn::mask::{build_mask, last_frame_mask, Mask, MaskKind};
use crate::nn::params::{init, Bound, ParamId, ParamStore};
use crate::nn::rope::{RopeTable, TokenPos};
use crate::scd::randn_tensor;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStrategy {
    TeacherForcing,
    DiffusionForcing,
}

/// Late denoising steps run only the first `prefix_len` and last
/// `suffix_len` layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct SkipSchedule {
    pub n_full_steps: usize,
    pub prefix_len: usize,
    pub suffix_len: usize,
}

impl From<[usize; 3]> for SkipSchedule {
    fn from(v: [usize; 3]) -> Self {
        SkipSchedule {
            n_full_steps: v[0],
            prefix_len: v[1],
            suffix_len: v[2],
        }
    }
}

impl From<SkipSchedule> for [usize; 3] {
    fn from(s: SkipSchedule) -> Self {
        [s.n_full_steps, s.prefix_len, s.suffix_len]
    }
}

/// Layers executed at 1-based denoising step `s`.
pub fn active_layers(schedule: Option<&SkipSchedule>, depth: usize, s: usize) -> Vec<usize> {
    match schedule {
        Some(sk) if s > sk.n_full_steps => {
            let suffix_start = depth - sk.suffix_len.min(depth);
            (0..sk.prefix_len.min(suffix_start))
                .chain(suffix_start..depth)
                .collect()
        }
        _ => (0..depth).collect(),
    }
}

/// Named presets: `(depth, hidden, heads)`.
pub fn baseline_variant(name: &str) -> Option<(usize, usize, usize)> {
    Some(match name {
        "dit-b" => (12, 768, 12),
        "far-m" => (12, 1024, 16),
        _ => return None,
    })
}

pub const BASELINE_VARIANTS: [&str; 2] = ["dit-b", "far-m"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub train_strategy: TrainStrategy,
    pub deep_diagonal: usize,
    pub skip_schedule: Option<SkipSchedule>,
    pub num_actions: usize,
    pub freq_dim: usize,
    pub geom: FrameGeom,
}

impl BaselineConfig {
    pub fn from_variant(name: &str, geom: FrameGeom, num_actions: usize) -> Result<Self> {
        let (depth, hidden, heads) = baseline_variant(name)
            .ok_or_else(|| Error::config("model.variant", format!("unknown variant `{name}`")))?;
        Ok(BaselineConfig {
            depth,
            hidden,
            heads,
            train_strategy: TrainStrategy::TeacherForcing,
            deep_diagonal: 0,
            skip_schedule: None,
            num_actions,
            freq_dim: 64,
            geom,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("model.depth", "must be >= 1"));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config("model.heads", "must divide model.hidden"));
        }
        let dh = self.hidden / self.heads;
        if dh < 2 || !dh.is_multiple_of(2) {
            return Err(Error::config("model.heads", "head width must be even"));
        }
        if self.deep_diagonal > self.depth {
            return Err(Error::config(
                "model.deep_diagonal",
                format!("{} exceeds depth {}", self.deep_diagonal, self.depth),
            ));
        }
        if let Some(s) = &self.skip_schedule {
            if s.prefix_len + s.suffix_len > self.depth {
                return Err(Error::config(
                    "model.skip_schedule",
                    format!("prefix + suffix exceeds depth {}", self.depth),
                ));
            }
        }
        if self.num_actions == 0 {
            return Err(Error::config("data.num_actions", "must be >= 1"));
        }
        if self.freq_dim < 2 || !self.freq_dim.is_multiple_of(2) {
            return Err(Error::config("model.freq_dim", "must be even and >= 2"));
        }
        self.geom.validate()
    }
}

impl FrameCost for BaselineConfig {
    fn bp_per_frame(&self, denoise_steps: usize) -> u64 {
        baseline_bp_per_frame(self.depth, denoise_steps)
    }
}

/// Frame-causal everywhere except the last `deep_diagonal` layers.
pub fn layer_masks(cfg: &BaselineConfig) -> Result<Vec<MaskKind>> {
    if cfg.deep_diagonal > cfg.depth {
        return Err(Error::config(
            "model.deep_diagonal",
            format!("{} exceeds depth {}", cfg.deep_diagonal, cfg.depth),
        ));
    }
    Ok((0..cfg.depth)
        .map(|l| {
            if l >= cfg.depth - cfg.deep_diagonal {
                MaskKind::FrameDiagonal
            } else {
                MaskKind::FrameCausal
            }
        })
        .collect())
}

/// Random quantities of one training step: per-frame `t` and noise.
#[derive(Debug, Clone)]
pub struct BaselineDraws<T> {
    pub ts: Vec<f64>,
    /// `[frames * P, D]`.
    pub eps: Tensor<T>,
}

impl<T: Scalar> BaselineDraws<T> {
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        schedule: &DiffusionSchedule,
        frames: usize,
        geom: &FrameGeom,
    ) -> Result<Self> {
        let ts = (0..frames)
            .map(|_| schedule.sample_t(rng))
            .collect::<Result<Vec<_>>>()?;
        let eps = randn_tensor(&[frames * geom.tokens_per_frame(), geom.token_dim()], rng);
        Ok(BaselineDraws { ts, eps })
    }
}

pub struct CausalDit<T: Scalar> {
    pub cfg: BaselineConfig,
    params: ParamStore<T>,
    embed: Linear,
    temb: TimestepEmbedder,
    action: ParamId,
    blocks: Vec<DitBlock>,
    fin: FinalLayer,
    kinds: Vec<MaskKind>,
    counter: BlockCounter,
}

fn dims4<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => Err(Error::invalid(op, format!("expected 4 axes, got {:?}", t.shape()))),
    }
}

impl<T: Scalar> CausalDit<T> {
    pub fn new(cfg: BaselineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let (h, d) = (cfg.hidden, cfg.geom.token_dim());
        let embed = Linear::glorot(&mut s, "embed", d, h, &mut rng)?;
        let temb = TimestepEmbedder::new(&mut s, "temb", cfg.freq_dim, h, &mut rng)?;
        let action = s.add("action", init::normal(&[cfg.num_actions, h], 0.02, &mut rng))?;
        let blocks = (0..cfg.depth)
            .map(|i| DitBlock::new(&mut s, &format!("block{i}"), h, cfg.heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let fin = FinalLayer::new(&mut s, "final", h, d, &mut rng)?;
        let kinds = layer_masks(&cfg)?;
        Ok(CausalDit {
            cfg,
            params: s,
            embed,
            temb,
            action,
            blocks,
            fin,
            kinds,
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

    pub fn mask_kinds(&self) -> &[MaskKind] {
        &self.kinds
    }

    pub fn new_cache(&self, batch: usize) -> KvCache<T> {
        KvCache::new(self.cfg.depth, batch, self.cfg.geom.tokens_per_frame(), self.cfg.hidden)
    }

    fn check_actions(&self, actions: &[usize], want: usize) -> Result<()> {
        if actions.len() != want {
            return Err(Error::invalid(
                "baseline",
                format!("{} actions for {want} frames", actions.len()),
            ));
        }
        if let Some(&a) = actions.iter().find(|&&a| a >= self.cfg.num_actions) {
            return Err(Error::invalid("baseline", format!("action {a} out of range")));
        }
        Ok(())
    }

    /// SiLU of timestep plus action embedding, one row per slot.
    fn cond(&self, p: &Bound<T>, ts: &[f64], actions: &[usize]) -> Result<Var<T>> {
        self.temb
            .forward(p, ts)?
            .add(&p.get(self.action).embedding_lookup(actions)?)?
            .silu()
    }

    fn rope(&self, slot_frames: &[f64]) -> Result<RopeTable<T>> {
        let g = &self.cfg.geom;
        let pos: Vec<TokenPos> = slot_frames
            .iter()
            .flat_map(|&f| TokenPos::frame_grid(f, g.grid_h(), g.grid_w()))
            .collect();
        RopeTable::new(self.cfg.hidden / self.cfg.heads, &pos)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_stack(
        &self,
        p: &Bound<T>,
        mut x: Var<T>,
        cond: &Var<T>,
        row_cond: &[usize],
        masks: &[Mask],
        rope: &RopeTable<T>,
        batch: usize,
        slots: usize,
        opts: &ForwardOpts,
    ) -> Result<(Var<T>, Vec<LayerCapture<T>>)> {
        let mut caps = Vec::new();
        for (l, blk) in self.blocks.iter().enumerate() {
            if !opts.runs(l) {
                continue;
            }
            let ctx = BlockCtx {
                cond,
                row_cond,
                mask: &masks[l],
                rope: Some(rope),
                batch,
                capture_attn: opts.capture_attn,
            };
            let out = blk.forward(p, &x, &ctx, None)?;
            self.counter.add(batch * slots);
            push_capture(&mut caps, opts, l, &out);
            x = out.x;
        }
        Ok((x, caps))
    }

    /// Teacher forcing: one pass over `[clean_1, noisy_1, clean_2, ...]` per
    /// sequence. `clean, xt: [B, N, P, D]`, `ts, actions` of length `B * N`.
    /// Returns velocities at the noisy slots, `[B * N * P, D]`.
    pub fn forward_tf(
        &self,
        p: &Bound<T>,
        clean: &Tensor<T>,
        xt: &Tensor<T>,
        ts: &[f64],
        actions: &[usize],
        opts: &ForwardOpts,
    ) -> Result<(Var<T>, Vec<LayerCapture<T>>)> {
        let (b, n, pp, d) = dims4("baseline_forward_tf", xt)?;
        let h = self.cfg.hidden;
        if clean.shape() != xt.shape() || ts.len() != b * n {
            return Err(Error::invalid(
                "baseline_forward_tf",
                format!("clean {:?}, noisy {:?}, {} times", clean.shape(), xt.shape(), ts.len()),
            ));
        }
        self.check_actions(actions, b * n)?;
        let emb = |t: &Tensor<T>| -> Result<Var<T>> {
            self.embed
                .forward(p, &Var::constant(t.reshape(&[b * n * pp, d])?))?
                .reshape(&[b, n, pp, h])
        };
        let x = Var::concat(&[emb(clean)?, emb(xt)?], 2)?.reshape(&[b * 2 * n * pp, h])?;
        let slot_ts: Vec<f64> = ts.iter().flat_map(|&t| [0.0, t]).collect();
        let slot_actions: Vec<usize> = actions.iter().flat_map(|&a| [a, a]).collect();
        let cond = self.cond(p, &slot_ts, &slot_actions)?;
        let row_cond: Vec<usize> = (0..b * 2 * n * pp).map(|r| r / pp).collect();
        let masks: Vec<Mask> = self
            .kinds
            .iter()
            .map(|k| match k {
                MaskKind::FrameDiagonal => build_mask(2 * n, pp, MaskKind::FrameDiagonal),
                _ => build_mask(n, pp, MaskKind::TeacherForcingInterleaved),
            })
            .collect();
        let frames: Vec<f64> = (0..2 * n).map(|s| (s / 2) as f64).collect();
        let rope = self.rope(&frames)?;
        let (x, caps) = self.run_stack(p, x, &cond, &row_cond, &masks, &rope, b, 2 * n, opts)?;
        let y = x
            .reshape(&[b, n, 2 * pp, h])?
            .slice(2, pp, pp)?
            .reshape(&[b * n * pp, h])?;
        let row_noisy: Vec<usize> = (0..b * n * pp).map(|r| 2 * (r / pp) + 1).collect();
        Ok((self.fin.forward(p, &y, &cond, &row_noisy)?, caps))
    }

    /// Diffusion forcing: frames noised to independent levels, one
    /// frame-causal pass. `xt: [B, N, P, D]`.
    pub fn forward_df(
        &self,
        p: &Bound<T>,
        xt: &Tensor<T>,
        ts: &[f64],
        actions: &[usize],
        opts: &ForwardOpts,
    ) -> Result<(Var<T>, Vec<LayerCapture<T>>)> {
        let (b, n, pp, d) = dims4("baseline_forward_df", xt)?;
        if ts.len() != b * n {
            return Err(Error::invalid(
                "baseline_forward_df",
                format!("{} times for {} frames", ts.len(), b * n),
            ));
        }
        self.check_actions(actions, b * n)?;
        let x = self.embed.forward(p, &Var::constant(xt.reshape(&[b * n * pp, d])?))?;
        let cond = self.cond(p, ts, actions)?;
        let row_cond: Vec<usize> = (0..b * n * pp).map(|r| r / pp).collect();
        let masks: Vec<Mask> = self.kinds.iter().map(|&k| build_mask(n, pp, k)).collect();
        let frames: Vec<f64> = (0..n).map(|s| s as f64).collect();
        let rope = self.rope(&frames)?;
        let (x, caps) = self.run_stack(p, x, &cond, &row_cond, &masks, &rope, b, n, opts)?;
        Ok((self.fin.forward(p, &x, &cond, &row_cond)?, caps))
    }

    /// One frame against the cached clean history. `x: [B * P, D]` tokens
    /// at time `t`. With `append`, every layer runs and the frame's keys and
    /// values are cached (no head is applied); otherwise only `layers` run
    /// and the velocity is returned.
    #[allow(clippy::too_many_arguments, clippy::type_complexity)]
    pub fn step_frame(
        &self,
        p: &Bound<T>,
        cache: &mut KvCache<T>,
        x: &Tensor<T>,
        t: f64,
        actions: &[usize],
        layers: &[usize],
        append: bool,
        opts: &ForwardOpts,
    ) -> Result<(Option<Var<T>>, Vec<LayerCapture<T>>)> {
        let (pp, d) = (self.cfg.geom.tokens_per_frame(), self.cfg.geom.token_dim());
        let b = cache.batch();
        if x.shape() != [b * pp, d] {
            return Err(Error::Shape {
                op: "baseline_step",
                lhs: x.shape().to_vec(),
                rhs: vec![b * pp, d],
            });
        }
        if cache.num_layers() != self.cfg.depth || cache.tokens_per_frame() != pp {
            return Err(Error::Cache("cache geometry does not match the model".into()));
        }
        self.check_actions(actions, b)?;
        let j = cache.frames_cached();
        if (0..self.cfg.depth).any(|l| cache.frames_at(l) != j) {
            return Err(Error::Cache("layers hold different frame counts".into()));
        }
        let mut h_x = self.embed.forward(p, &Var::constant(x.clone()))?;
        let cond = self.cond(p, &vec![t; b], actions)?;
        let row_cond: Vec<usize> = (0..b * pp).map(|r| r / pp).collect();
        let rope = self.rope(&[j as f64])?;
        let mut caps = Vec::new();
        let mut pending = Vec::new();
        for (l, blk) in self.blocks.iter().enumerate() {
            if !append && !layers.contains(&l) {
                continue;
            }
            let mask = last_frame_mask(j + 1, pp, self.kinds[l]);
            let ctx = BlockCtx {
                cond: &cond,
                row_cond: &row_cond,
                mask: &mask,
                rope: Some(&rope),
                batch: b,
                capture_attn: opts.capture_attn,
            };
            let out = blk.forward(p, &h_x, &ctx, cache.prefix(l))?;
            self.counter.add(b);
            push_capture(&mut caps, opts, l, &out);
            if append {
                pending.push((l, out.k.clone(), out.v.clone()));
            }
            h_x = out.x;
        }
        if append {
            for (l, k, v) in pending {
                cache.kv_append(l, k, v)?;
            }
            return Ok((None, caps));
        }
        Ok((Some(self.fin.forward(p, &h_x, &cond, &row_cond)?), caps))
    }

    /// Flow-matching loss under the configured training strategy.
    pub fn loss(
        &self,
        p: &Bound<T>,
        frames: &Tensor<T>,
        actions: &[usize],
        draws: &BaselineDraws<T>,
        schedule: &DiffusionSchedule,
        opts: &ForwardOpts,
    ) -> Result<Var<T>> {
        let (b, n, pp, d) = dims4("baseline_loss", frames)?;
        let x = frames.reshape(&[b * n * pp, d])?;
        let xt = forward_path_frames(&x, &draws.eps, &draws.ts)?.reshape(&[b, n, pp, d])?;
        let (v, _) = match self.cfg.train_strategy {
            TrainStrategy::TeacherForcing => self.forward_tf(p, frames, &xt, &draws.ts, actions, opts)?,
            TrainStrategy::DiffusionForcing => self.forward_df(p, &xt, &draws.ts, actions, opts)?,
        };
        fm_loss_frames(&v, &x, &draws.eps, &draws.ts, schedule)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(strategy: TrainStrategy) -> BaselineConfig {
        BaselineConfig {
            depth: 3,
            hidden: 16,
            heads: 2,
            train_strategy: strategy,
            deep_diagonal: 0,
            skip_schedule: None,
            num_actions: 4,
            freq_dim: 8,
            geom: FrameGeom {
                height: 4,
                width: 4,
                channels: 1,
                patch_size: 2,
            },
        }
    }

    #[test]
    fn skip_schedule_examples() {
        let s = SkipSchedule::from([5, 5, 10]);
        assert_eq!(active_layers(Some(&s), 30, 3), (0..30).collect::<Vec<_>>());
        let want: Vec<usize> = (0..5).chain(20..30).collect();
        assert_eq!(active_layers(Some(&s), 30, 6), want);
        let full = SkipSchedule::from([0, 30, 0]);
        assert_eq!(active_layers(Some(&full), 30, 17), (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn mask_layout() {
        let mut cfg = tiny(TrainStrategy::TeacherForcing);
        cfg.depth = 30;
        cfg.deep_diagonal = 5;
        let m = layer_masks(&cfg).unwrap();
        assert!(m[..25].iter().all(|&k| k == MaskKind::FrameCausal));
        assert!(m[25..].iter().all(|&k| k == MaskKind::FrameDiagonal));
        cfg.deep_diagonal = 31;
        assert!(layer_masks(&cfg).is_err());
    }

    #[test]
    fn table_presets() {
        let g = tiny(TrainStrategy::TeacherForcing).geom;
        for v in BASELINE_VARIANTS {
            assert_eq!(BaselineConfig::from_variant(v, g, 4).unwrap().bp_per_frame(50), 600);
        }
    }

    #[test]
    fn tf_and_df_agree_on_one_frame() {
        let m = CausalDit::<f64>::new(tiny(TrainStrategy::TeacherForcing), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // perturb so blocks are not identities
        let mut m = m;
        for t in m.params_mut().tensors_mut() {
            *t = t.add(&randn_tensor(t.shape(), &mut rng).scale(0.1)).unwrap();
        }
        let p = m.params().bind(false);
        let x = randn_tensor::<f64, _>(&[1, 1, 4, 4], &mut rng);
        let draws = BaselineDraws::sample(&mut rng, &DiffusionSchedule::default(), 1, &m.cfg.geom).unwrap();
        let opts = ForwardOpts::default();
        let tf = m
            .loss(&p, &x, &[1], &draws, &DiffusionSchedule::default(), &opts)
            .unwrap();
        m.cfg.train_strategy = TrainStrategy::DiffusionForcing;
        let df = m
            .loss(&p, &x, &[1], &draws, &DiffusionSchedule::default(), &opts)
            .unwrap();
        assert!((tf.value().item() - df.value().item()).abs() < 1e-6);
    }
}

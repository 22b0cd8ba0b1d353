//! Frame-by-frame generation for both families, guidance through corrupted
//! contexts, and the latency benchmark.

use std::cell::Cell;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autograd::Var;
use crate::baseline::{active_layers, CausalDit};
use crate::diffusion::{euler_sample, SamplerConfig};
use crate::error::{Error, Result};
use crate::family::{Family, Model};
use crate::model::{ForwardOpts, LayerCapture};
use crate::nn::params::Bound;
use crate::probe::ActivationTrace;
use crate::scd::{corrupt_context, randn_tensor, ScdModel};
use crate::tensor::{Scalar, Tensor};

/// Guidance through a Gaussian-corrupted context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    /// `1` is the plain conditional velocity, `0` the corrupted branch alone.
    pub cfg_scale: f64,
    /// Noise scale of the negative branch's context.
    pub cfg_eta: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            cfg_scale: 1.0,
            cfg_eta: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncodeMode {
    /// Reuse cached keys and values of earlier frames.
    #[default]
    Incremental,
    /// Re-run the whole history every frame.
    FullPrefix,
}

/// Which blocks to record during a rollout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CaptureSpec {
    /// Global layer indices; `None` records every layer.
    pub layers: Option<Vec<usize>>,
    pub attn: bool,
}

impl RolloutConfig {
    /// Replay settings recorded in capture traces.
    pub fn trace_meta(&self, family: Family) -> Value {
        serde_json::json!({
            "family": family,
            "num_frames": self.num_frames,
            "denoise_steps": self.denoise_steps,
            "shift_k": self.shift_k,
            "cfg_scale": self.corruption.cfg_scale,
            "cfg_eta": self.corruption.cfg_eta,
            "seed": self.seed,
            "cosine": "per-token mean",
        })
    }
}

impl CaptureSpec {
    fn wants(&self, layer: usize) -> bool {
        self.layers.as_ref().is_none_or(|l| l.contains(&layer))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutConfig {
    pub num_frames: usize,
    pub denoise_steps: usize,
    pub shift_k: f64,
    pub corruption: CorruptionConfig,
    pub seed: u64,
    pub encode: EncodeMode,
    pub capture: Option<CaptureSpec>,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            num_frames: 16,
            denoise_steps: 50,
            shift_k: 1.0,
            corruption: CorruptionConfig::default(),
            seed: 0,
            encode: EncodeMode::Incremental,
            capture: None,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_frames == 0 {
            return Err(Error::config("rollout.num_frames", "must be >= 1"));
        }
        if self.denoise_steps == 0 {
            return Err(Error::config("rollout.denoise_steps", "must be >= 1"));
        }
        if !(self.corruption.cfg_scale >= 0.0) {
            return Err(Error::config("rollout.cfg_scale", "must be >= 0"));
        }
        if !(self.corruption.cfg_eta >= 0.0) {
            return Err(Error::config("rollout.cfg_eta", "must be >= 0"));
        }
        if self.capture.is_some() && self.encode == EncodeMode::FullPrefix {
            return Err(Error::config("rollout.encode", "capture requires incremental encoding"));
        }
        Ok(())
    }

    fn sampler(&self) -> Result<SamplerConfig> {
        SamplerConfig::linear(self.denoise_steps, self.shift_k)
    }
}

#[derive(Debug, Clone)]
pub struct RolloutOutput<T> {
    /// `[N, P, D]` tokens.
    pub frames: Tensor<T>,
    pub trace: Option<ActivationTrace>,
    /// Block passes executed by this rollout.
    pub block_invocations: u64,
    /// Tokens held by the key/value cache at the end.
    pub cache_tokens: usize,
}

fn frame_rng(seed: u64, frame: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame as u64);
    rng
}

fn check_inputs<T: Scalar>(
    cfg: &RolloutConfig,
    actions: &[usize],
    context: Option<&Tensor<T>>,
    pp: usize,
    d: usize,
) -> Result<usize> {
    cfg.validate()?;
    if actions.len() != cfg.num_frames {
        return Err(Error::invalid(
            "rollout",
            format!("{} actions for {} frames", actions.len(), cfg.num_frames),
        ));
    }
    match context {
        None => Ok(0),
        Some(c) => {
            let s = c.shape();
            if s.len() != 3 || s[1] != pp || s[2] != d || s[0] > cfg.num_frames {
                return Err(Error::invalid("rollout", format!("context shape {s:?}")));
            }
            Ok(s[0])
        }
    }
}

/// Run `euler_sample`, attributing failures to `frame`.
fn sample_frame<T: Scalar>(
    frame: usize,
    z: &Tensor<T>,
    sampler: &SamplerConfig,
    mut v: impl FnMut(&Tensor<T>, f64, usize) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    let cur = Cell::new(0);
    euler_sample(
        |x, t, s| {
            cur.set(s);
            v(x, t, s)
        },
        z,
        sampler,
    )
    .map_err(|e| match e {
        Error::SamplerDiverged { step } => Error::RolloutDiverged { frame, step },
        Error::NonFinite { .. } => Error::RolloutDiverged { frame, step: cur.get() },
        other => other,
    })
}

/// `v(c~) + s (v(c) - v(c~))` with `c~ = c + cfg_eta * zeta`. The
/// conditional velocity is returned unchanged when `s = 1` or `cfg_eta = 0`;
/// otherwise both branches run as one batch. Captures describe the
/// conditional branch.
#[allow(clippy::too_many_arguments)]
pub fn guided_velocity<T: Scalar>(
    model: &ScdModel<T>,
    p: &Bound<T>,
    xt: &Tensor<T>,
    t: f64,
    c: &Tensor<T>,
    zeta: &Tensor<T>,
    corr: &CorruptionConfig,
    opts: &ForwardOpts,
) -> Result<(Tensor<T>, Vec<LayerCapture<T>>)> {
    let pp = model.cfg.geom.tokens_per_frame();
    let f = xt.shape()[0] / pp;
    let ts = vec![t; f];
    let s = corr.cfg_scale;
    if s == 1.0 || corr.cfg_eta == 0.0 {
        let (v, caps) = model.decode_velocity(p, &Var::constant(xt.clone()), &ts, &Var::constant(c.clone()), opts)?;
        return Ok((v.value().clone(), caps));
    }
    let c_neg = corrupt_context(c, corr.cfg_eta, zeta)?;
    if s == 0.0 {
        let (v, caps) = model.decode_velocity(p, &Var::constant(xt.clone()), &ts, &Var::constant(c_neg), opts)?;
        return Ok((v.value().clone(), caps));
    }
    let x2 = Tensor::cat_rows(&[xt, xt])?;
    let c2 = Tensor::cat_rows(&[c, &c_neg])?;
    let (v2, caps) = model.decode_velocity(p, &Var::constant(x2), &vec![t; 2 * f], &Var::constant(c2), opts)?;
    let v2 = v2.value();
    let half = v2.shape()[0] / 2;
    let (vc, vn) = (v2.rows(0, half)?, v2.rows(half, half)?);
    let st = T::from_f64(s);
    let v = vn.zip_map(&vc, |n, c| n + st * (c - n))?;
    let caps = caps
        .into_iter()
        .map(|cap| {
            let rows = cap.features.shape()[0] / 2;
            Ok(LayerCapture {
                layer: cap.layer,
                features: cap.features.rows(0, rows)?,
                attn: cap.attn.map(|a| a.rows(0, a.shape()[0] / 2)).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((v, caps))
}

/// Autoregressive SCD generation. The first `context` frames (if any) are
/// taken as given; the rest are sampled. Each frame's context is encoded
/// once and reused across all denoising steps.
pub fn scd_rollout<T: Scalar>(
    model: &ScdModel<T>,
    p: &Bound<T>,
    actions: &[usize],
    context: Option<&Tensor<T>>,
    cfg: &RolloutConfig,
) -> Result<RolloutOutput<T>> {
    let (pp, d, h) = (
        model.cfg.geom.tokens_per_frame(),
        model.cfg.geom.token_dim(),
        model.cfg.hidden,
    );
    let n_ctx = check_inputs(cfg, actions, context, pp, d)?;
    let sampler = cfg.sampler()?;
    let start = model.block_passes();
    let mut cache = model.new_cache(1);
    let mut frames: Vec<Tensor<T>> = Vec::with_capacity(cfg.num_frames);
    let mut trace = cfg
        .capture
        .as_ref()
        .map(|_| ActivationTrace::new(cfg.trace_meta(Family::Scd)));
    let opts = match &cfg.capture {
        Some(c) => ForwardOpts::capturing(c.attn),
        None => ForwardOpts::default(),
    };
    let enc_blocks = model.cfg.enc_blocks;
    for i in 0..cfg.num_frames {
        let c = match cfg.encode {
            EncodeMode::Incremental => {
                let prev = match i {
                    0 => None,
                    _ => Some(frames[i - 1].reshape(&[1, pp, d])?),
                };
                let (c, caps) = model.encode_next(p, &mut cache, prev.as_ref(), &actions[i..=i], &opts)?;
                if let (Some(tr), Some(spec)) = (trace.as_mut(), cfg.capture.as_ref()) {
                    for cap in caps.iter().filter(|c| spec.wants(c.layer)) {
                        // encoder slot 0 is BOS, slot j holds frame j - 1
                        tr.record(cap, 0, i, i as i64, |k| (k / pp) as i64 - 1)?;
                    }
                }
                c.value().clone()
            }
            EncodeMode::FullPrefix => {
                let mut seq: Vec<&Tensor<T>> = frames.iter().collect();
                let pad = Tensor::zeros(&[pp, d]);
                seq.push(&pad);
                let hist = Tensor::cat_rows(&seq)?.reshape(&[1, i + 1, pp, d])?;
                let (c, _) = model.encode_contexts(p, &hist, &actions[..=i], &ForwardOpts::default())?;
                c.value().rows(i * pp, pp)?
            }
        };
        if i < n_ctx {
            frames.push(context.expect("n_ctx > 0").rows(i, 1)?.reshape(&[pp, d])?);
            continue;
        }
        let mut rng = frame_rng(cfg.seed, i);
        let z: Tensor<T> = randn_tensor(&[pp, d], &mut rng);
        let zeta: Tensor<T> = randn_tensor(&[pp, h], &mut rng);
        let mut step_caps = Vec::new();
        let x = sample_frame(i, &z, &sampler, |x, t, s| {
            let (v, caps) = guided_velocity(model, p, x, t, &c, &zeta, &cfg.corruption, &opts)?;
            if trace.is_some() {
                step_caps.push((s, caps));
            }
            Ok(v)
        })?;
        if let (Some(tr), Some(spec)) = (trace.as_mut(), cfg.capture.as_ref()) {
            for (s, caps) in step_caps {
                for cap in caps.iter().filter(|c| spec.wants(c.layer)) {
                    debug_assert!(cap.layer >= enc_blocks);
                    tr.record(cap, s, i, i as i64, |_| i as i64)?;
                }
            }
        }
        frames.push(x);
    }
    let refs: Vec<&Tensor<T>> = frames.iter().collect();
    Ok(RolloutOutput {
        frames: Tensor::cat_rows(&refs)?.reshape(&[cfg.num_frames, pp, d])?,
        trace,
        block_invocations: model.block_passes() - start,
        cache_tokens: cache.total_tokens(),
    })
}

/// Autoregressive generation with the entangled baseline: every denoising
/// step runs the stack against the cached clean history, then one extra
/// pass at `t = 0` writes the finished frame into the cache.
pub fn baseline_rollout<T: Scalar>(
    model: &CausalDit<T>,
    p: &Bound<T>,
    actions: &[usize],
    context: Option<&Tensor<T>>,
    cfg: &RolloutConfig,
) -> Result<RolloutOutput<T>> {
    let (pp, d) = (model.cfg.geom.tokens_per_frame(), model.cfg.geom.token_dim());
    let n_ctx = check_inputs(cfg, actions, context, pp, d)?;
    if cfg.corruption.cfg_scale != 1.0 {
        return Err(Error::config("rollout.cfg_scale", "guidance needs the scd family"));
    }
    if cfg.encode == EncodeMode::FullPrefix && model.cfg.skip_schedule.is_some() {
        return Err(Error::config(
            "rollout.encode",
            "full-prefix recomputation cannot reproduce a skip schedule",
        ));
    }
    let sampler = cfg.sampler()?;
    let depth = model.cfg.depth;
    let all: Vec<usize> = (0..depth).collect();
    let start = model.block_passes();
    let mut cache = model.new_cache(1);
    let mut frames: Vec<Tensor<T>> = Vec::with_capacity(cfg.num_frames);
    let mut trace = cfg
        .capture
        .as_ref()
        .map(|_| ActivationTrace::new(cfg.trace_meta(Family::CausalDit)));
    let opts = match &cfg.capture {
        Some(c) => ForwardOpts::capturing(c.attn),
        None => ForwardOpts::default(),
    };
    for i in 0..cfg.num_frames {
        let a = &actions[i..=i];
        let x = if i < n_ctx {
            context.expect("n_ctx > 0").rows(i, 1)?.reshape(&[pp, d])?
        } else {
            let mut rng = frame_rng(cfg.seed, i);
            let z: Tensor<T> = randn_tensor(&[pp, d], &mut rng);
            let mut step_caps = Vec::new();
            let x = match cfg.encode {
                EncodeMode::Incremental => sample_frame(i, &z, &sampler, |x, t, s| {
                    let layers = active_layers(model.cfg.skip_schedule.as_ref(), depth, s + 1);
                    let (v, caps) = model.step_frame(p, &mut cache, x, t, a, &layers, false, &opts)?;
                    if trace.is_some() {
                        step_caps.push((s, caps));
                    }
                    Ok(v.expect("denoising pass returns a velocity").value().clone())
                })?,
                EncodeMode::FullPrefix => sample_frame(i, &z, &sampler, |x, t, _| {
                    let mut seq: Vec<&Tensor<T>> = frames.iter().collect();
                    seq.push(x);
                    let hist = Tensor::cat_rows(&seq)?.reshape(&[1, i + 1, pp, d])?;
                    let mut ts = vec![0.0; i + 1];
                    ts[i] = t;
                    let (v, _) = model.forward_df(p, &hist, &ts, &actions[..=i], &ForwardOpts::default())?;
                    v.value().rows(i * pp, pp)
                })?,
            };
            if let (Some(tr), Some(spec)) = (trace.as_mut(), cfg.capture.as_ref()) {
                for (s, caps) in step_caps {
                    for cap in caps.iter().filter(|c| spec.wants(c.layer)) {
                        tr.record(cap, s, i, i as i64, |k| (k / pp) as i64)?;
                    }
                }
            }
            x
        };
        if cfg.encode == EncodeMode::Incremental {
            model.step_frame(p, &mut cache, &x, 0.0, a, &all, true, &ForwardOpts::default())?;
        }
        frames.push(x);
    }
    let refs: Vec<&Tensor<T>> = frames.iter().collect();
    Ok(RolloutOutput {
        frames: Tensor::cat_rows(&refs)?.reshape(&[cfg.num_frames, pp, d])?,
        trace,
        block_invocations: model.block_passes() - start,
        cache_tokens: cache.total_tokens(),
    })
}

/// Dispatch on the model family.
pub fn rollout<T: Scalar>(
    model: &Model<T>,
    p: &Bound<T>,
    actions: &[usize],
    context: Option<&Tensor<T>>,
    cfg: &RolloutConfig,
) -> Result<RolloutOutput<T>> {
    match model {
        Model::Scd(m) => scd_rollout(m, p, actions, context, cfg),
        Model::CausalDit(m) => baseline_rollout(m, p, actions, context, cfg),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub frames: usize,
    pub steps: usize,
    pub warmup: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            frames: 16,
            steps: 50,
            warmup: 1,
            trials: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub family: Family,
    pub frames: usize,
    pub steps: usize,
    /// Median over trials.
    pub sec_per_frame: f64,
    pub frames_per_second: f64,
    /// Analytic cost per generated frame.
    pub bp_per_frame: u64,
    /// Counted block passes of one rollout, caching passes included.
    pub block_invocations: u64,
    /// Analytic count of the same quantity.
    pub expected_invocations: u64,
    pub peak_cache_tokens: usize,
    pub trial_secs: Vec<f64>,
}

impl BenchReport {
    pub fn counts_match(&self) -> bool {
        self.block_invocations == self.expected_invocations
    }
}

/// Median wall-clock seconds per frame of full rollouts after `warmup`
/// untimed runs.
pub fn bench<T: Scalar>(model: &Model<T>, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.trials < 3 {
        return Err(Error::config("bench.trials", "must be >= 3"));
    }
    let rc = RolloutConfig {
        num_frames: cfg.frames,
        denoise_steps: cfg.steps,
        seed: cfg.seed,
        ..Default::default()
    };
    let actions = vec![0; cfg.frames];
    let p = model.params().bind(false);
    for _ in 0..cfg.warmup {
        rollout(model, &p, &actions, None, &rc)?;
    }
    let mut secs = Vec::with_capacity(cfg.trials);
    let mut counted = 0;
    let mut cache_tokens = 0;
    for _ in 0..cfg.trials {
        let t0 = Instant::now();
        let out = rollout(model, &p, &actions, None, &rc)?;
        secs.push(t0.elapsed().as_secs_f64());
        counted = out.block_invocations;
        cache_tokens = out.cache_tokens;
    }
    let mut sorted = secs.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mid = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let median = mid / cfg.frames as f64;
    let mc = model.config();
    Ok(BenchReport {
        family: mc.family(),
        frames: cfg.frames,
        steps: cfg.steps,
        sec_per_frame: median,
        frames_per_second: 1.0 / median,
        bp_per_frame: mc.bp_per_frame(cfg.steps),
        block_invocations: counted,
        expected_invocations: mc.rollout_invocations(cfg.frames, 0, cfg.steps),
        peak_cache_tokens: cache_tokens,
        trial_secs: secs,
    })
}

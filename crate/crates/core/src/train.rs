//! Training loop: amortized K-sample decoding for SCD, teacher or diffusion
//! forcing for the baseline, AdamW, EMA, and checkpointing.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::autograd::Var;
use crate::baseline::{BaselineDraws, TrainStrategy};
use crate::container::{diff_keys, Container};
use crate::data::Dataset;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::family::Model;
use crate::model::ForwardOpts;
use crate::nn::params::{Bound, ParamStore};
use crate::scd::ScdDraws;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub ema_decay: f64,
    pub steps: u64,
    /// Noisy decoder samples per encoded frame.
    pub k: usize,
    pub seed: u64,
    pub warmup_steps: u64,
    pub grad_clip: f64,
    /// Baseline only.
    pub strategy: TrainStrategy,
    /// SCD only: update decoder parameters, keep the encoder at its init.
    pub freeze_encoder: bool,
    pub log_every: u64,
    pub save_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            lr: 3e-4,
            weight_decay: 0.0,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            ema_decay: 0.99,
            steps: 1000,
            k: 1,
            seed: 0,
            warmup_steps: 0,
            grad_clip: 1.0,
            strategy: TrainStrategy::TeacherForcing,
            freeze_encoder: false,
            log_every: 1,
            save_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if self.k == 0 {
            return Err(Error::config("train.k", "must be >= 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be >= 0"));
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return Err(Error::config("train.betas", "each must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("train.adam_eps", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config("train.ema_decay", "must lie in [0, 1)"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("train.grad_clip", "must be positive"));
        }
        Ok(())
    }

    /// Constant rate after an optional linear warmup.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Adam moments with decoupled, multiplicative weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, betas: [f64; 2], eps: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor<T>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamW {
            betas,
            eps,
            weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Parameters flagged in `frozen` are left untouched. A
    /// non-finite gradient aborts before anything changes.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64, frozen: &[bool]) -> Result<()> {
        if grads.len() != params.len() || frozen.len() != params.len() {
            return Err(Error::invalid("optimizer", "gradient list does not match parameters"));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params.tensors()[i].shape() {
                return Err(Error::Shape {
                    op: "optimizer",
                    lhs: g.shape().to_vec(),
                    rhs: params.tensors()[i].shape().to_vec(),
                });
            }
            if !frozen[i] && !g.is_finite() {
                return Err(Error::NonFiniteGrad(params.names()[i].clone()));
            }
        }
        self.t += 1;
        let [b1, b2] = self.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            if frozen[i] {
                continue;
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                let g = gv.as_f64();
                let mj = b1 * m[j].as_f64() + (1.0 - b1) * g;
                let vj = b2 * v[j].as_f64() + (1.0 - b2) * g * g;
                m[j] = T::from_f64(mj);
                v[j] = T::from_f64(vj);
                let upd = (mj / c1) / ((vj / c2).sqrt() + self.eps);
                *pv = T::from_f64(pv.as_f64() * decay - lr * upd);
            }
        }
        Ok(())
    }
}

/// `ema <- decay * ema + (1 - decay) * params`.
pub fn ema_update<T: Scalar>(ema: &mut [Tensor<T>], params: &[Tensor<T>], decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::invalid("ema", format!("decay {decay} outside [0, 1)")));
    }
    if ema.len() != params.len() {
        return Err(Error::invalid("ema", "parameter count mismatch"));
    }
    for (e, p) in ema.iter_mut().zip(params) {
        *e = e.zip_map(p, |ev, pv| {
            T::from_f64(decay * ev.as_f64() + (1.0 - decay) * pv.as_f64())
        })?;
    }
    Ok(())
}

/// Rescale so the global L2 norm is at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

/// Tokenized training sequences.
#[derive(Debug, Clone)]
pub struct TrainData<T> {
    /// One `[N, P, D]` tensor per sequence.
    pub tokens: Vec<Tensor<T>>,
    pub actions: Vec<Vec<usize>>,
}

impl<T: Scalar> TrainData<T> {
    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        Ok(TrainData {
            tokens: (0..ds.len()).map(|i| ds.tokens(i)).collect::<Result<_>>()?,
            actions: ds.samples.iter().map(|s| s.actions.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Stack sequences into `[B, N, P, D]` plus row-major actions.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let first = self
            .tokens
            .get(*idx.first().ok_or_else(|| Error::invalid("train_step", "empty batch"))?)
            .ok_or_else(|| Error::invalid("train_step", "batch index out of range"))?;
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(first.numel() * idx.len());
        let mut actions = Vec::new();
        for &i in idx {
            let t = self
                .tokens
                .get(i)
                .ok_or_else(|| Error::invalid("train_step", "batch index out of range"))?;
            if t.shape() != first.shape() {
                return Err(Error::invalid("train_step", "sequences differ in shape"));
            }
            data.extend_from_slice(t.data());
            actions.extend_from_slice(&self.actions[i]);
        }
        Ok((Tensor::new(&shape, data)?, actions))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Block passes per clean frame in this step.
    pub bp_clean: f64,
    /// Block passes per noisy sample in this step.
    pub bp_noisy: f64,
    pub grad_norm: f64,
}

pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub opt: AdamW<T>,
    pub ema: Vec<Tensor<T>>,
    pub cfg: TrainConfig,
    pub schedule: DiffusionSchedule,
    pub step: u64,
    frozen: Vec<bool>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(mut model: Model<T>, cfg: TrainConfig, schedule: DiffusionSchedule) -> Result<Self> {
        cfg.validate()?;
        if let Model::CausalDit(m) = &mut model {
            m.cfg.train_strategy = cfg.strategy;
        }
        if cfg.freeze_encoder && !matches!(model, Model::Scd(_)) {
            return Err(Error::config("train.freeze_encoder", "only applies to the scd family"));
        }
        let params = model.params();
        let opt = AdamW::new(params, cfg.betas, cfg.adam_eps, cfg.weight_decay);
        let ema = params.tensors().to_vec();
        let frozen = params
            .names()
            .iter()
            .map(|n| cfg.freeze_encoder && n.starts_with("enc."))
            .collect();
        Ok(Trainer {
            model,
            opt,
            ema,
            cfg,
            schedule,
            step: 0,
            frozen,
        })
    }

    /// Randomness of step `step`, independent of every other step.
    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step);
        rng
    }

    /// Loss of one batch with draws taken from `rng`; returns the loss and
    /// the number of noisy samples it averages.
    pub fn batch_loss<R: Rng + ?Sized>(
        &self,
        p: &Bound<T>,
        frames: &Tensor<T>,
        actions: &[usize],
        rng: &mut R,
    ) -> Result<(Var<T>, usize)> {
        let clean = frames.shape()[0] * frames.shape().get(1).copied().unwrap_or(0);
        if clean == 0 {
            return Err(Error::invalid("train_step", "empty batch"));
        }
        let opts = ForwardOpts::default();
        match &self.model {
            Model::Scd(m) => {
                let draws = ScdDraws::sample(rng, &self.schedule, self.cfg.k, clean, &m.cfg)?;
                let l = m.loss(
                    p,
                    frames,
                    actions,
                    &draws,
                    m.cfg.corrupt_eta_train,
                    &self.schedule,
                    &opts,
                )?;
                Ok((l, clean * self.cfg.k))
            }
            Model::CausalDit(m) => {
                let draws = BaselineDraws::sample(rng, &self.schedule, clean, &m.cfg.geom)?;
                Ok((m.loss(p, frames, actions, &draws, &self.schedule, &opts)?, clean))
            }
        }
    }

    /// One optimizer step on an explicit batch.
    pub fn train_step_on(&mut self, frames: &Tensor<T>, actions: &[usize]) -> Result<StepStats> {
        let mut rng = self.step_rng(self.step);
        self.step_with_rng(frames, actions, &mut rng)
    }

    /// One optimizer step on a batch drawn from `data`.
    pub fn train_step(&mut self, data: &TrainData<T>) -> Result<StepStats> {
        if data.is_empty() {
            return Err(Error::invalid("train_step", "empty dataset"));
        }
        let mut rng = self.step_rng(self.step);
        let idx: Vec<usize> = (0..self.cfg.batch_size)
            .map(|_| rng.random_range(0..data.len()))
            .collect();
        let (frames, actions) = data.batch(&idx)?;
        self.step_with_rng(&frames, &actions, &mut rng)
    }

    fn step_with_rng(&mut self, frames: &Tensor<T>, actions: &[usize], rng: &mut ChaCha8Rng) -> Result<StepStats> {
        let before = self.model.block_passes();
        let p = self.model.params().bind(true);
        let (loss, noisy) = self.batch_loss(&p, frames, actions, rng)?;
        let clean = frames.shape()[0] * frames.shape()[1];
        let passes = (self.model.block_passes() - before) as f64;
        loss.backward()?;
        let mut grads = p.grads();
        for (g, &f) in grads.iter_mut().zip(&self.frozen) {
            if f {
                *g = Tensor::zeros(g.shape());
            }
        }
        let grad_norm = clip_grad_norm(&mut grads, self.cfg.grad_clip);
        let lr = self.cfg.lr_at(self.step);
        self.opt.step(self.model.params_mut(), &grads, lr, &self.frozen)?;
        ema_update(&mut self.ema, self.model.params().tensors(), self.cfg.ema_decay)?;
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss: loss.value().item().as_f64(),
            lr,
            bp_clean: passes / clean as f64,
            bp_noisy: passes / noisy as f64,
            grad_norm,
        })
    }

    /// Run until `cfg.steps`, appending one JSON line per logged step and
    /// calling `checkpoint` every `save_every` steps.
    pub fn run(
        &mut self,
        data: &TrainData<T>,
        log: &mut dyn Write,
        mut checkpoint: impl FnMut(&Self) -> Result<()>,
    ) -> Result<Vec<StepStats>> {
        let start = Instant::now();
        let mut out = Vec::new();
        while self.step < self.cfg.steps {
            let s = self.train_step(data)?;
            if self.cfg.log_every > 0 && (s.step % self.cfg.log_every == 0 || s.step == self.cfg.steps) {
                let rec = json!({
                    "step": s.step,
                    "loss": s.loss,
                    "lr": s.lr,
                    "wallclock_ms": start.elapsed().as_secs_f64() * 1e3,
                    "bp_clean": s.bp_clean,
                    "bp_noisy": s.bp_noisy,
                });
                writeln!(log, "{rec}")?;
            }
            if self.cfg.save_every > 0 && s.step % self.cfg.save_every == 0 {
                checkpoint(self)?;
            }
            out.push(s);
        }
        log.flush()?;
        Ok(out)
    }

    /// Full training state with `config` as the provenance snapshot.
    pub fn to_container(&self, config: Value) -> Container {
        let mut c = Container::new("checkpoint", config);
        c.step = self.step;
        c.meta = json!({ "adam_t": self.opt.t, "family": family_name(&self.model) });
        let params = self.model.params();
        for (i, name) in params.names().iter().enumerate() {
            c.push(format!("param.{name}"), &params.tensors()[i]);
            c.push(format!("ema.{name}"), &self.ema[i]);
            c.push(format!("adam_m.{name}"), &self.opt.m[i]);
            c.push(format!("adam_v.{name}"), &self.opt.v[i]);
        }
        c
    }

    /// Restore state saved by [`Self::to_container`].
    pub fn restore(&mut self, c: &Container) -> Result<()> {
        c.expect_kind("checkpoint")?;
        let names = self.model.params().names().to_vec();
        let take = |prefix: &str| -> Result<Vec<Tensor<T>>> {
            names
                .iter()
                .map(|n| Ok(c.get(&format!("{prefix}.{n}"))?.to()))
                .collect()
        };
        let params = take("param")?;
        let (ema, m, v) = (take("ema")?, take("adam_m")?, take("adam_v")?);
        self.model.params_mut().load(params)?;
        for (dst, src) in [(&mut self.ema, ema), (&mut self.opt.m, m), (&mut self.opt.v, v)] {
            if dst.iter().zip(&src).any(|(a, b)| a.shape() != b.shape()) {
                return Err(Error::Format("state tensor shape mismatch".into()));
            }
            *dst = src;
        }
        self.opt.t = c.meta["adam_t"]
            .as_u64()
            .ok_or_else(|| Error::Format("missing adam_t".into()))?;
        self.step = c.step;
        Ok(())
    }
}

fn family_name<T: Scalar>(m: &Model<T>) -> &'static str {
    match m {
        Model::Scd(_) => "scd",
        Model::CausalDit(_) => "causal_dit",
    }
}

/// Error listing every differing key, ignoring those in `ignore`.
pub fn check_config(expected: &Value, found: &Value, ignore: &[&str]) -> Result<()> {
    let keys: Vec<String> = diff_keys(expected, found)
        .into_iter()
        .filter(|k| !ignore.contains(&k.as_str()))
        .collect();
    if keys.is_empty() {
        Ok(())
    } else {
        Err(Error::ConfigMismatch(keys))
    }
}

/// Parameters of a checkpoint, preferring the EMA copy when asked.
pub fn load_params<T: Scalar>(c: &Container, params: &mut ParamStore<T>, use_ema: bool) -> Result<()> {
    let prefix = if use_ema { "ema" } else { "param" };
    let vals = params
        .names()
        .iter()
        .map(|n| Ok(c.get(&format!("{prefix}.{n}"))?.to()))
        .collect::<Result<Vec<Tensor<T>>>>()?;
    params.load(vals)
}

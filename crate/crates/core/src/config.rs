//! Run configuration: one JSON document with `model`, `train`, `data`,
//! `rollout`, `probe`, and `bench` sections, layered as defaults, then a
//! named variant, then the user's file, then `key=value` overrides.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::baseline::{baseline_variant, BaselineConfig, SkipSchedule};
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::family::{Family, ModelConfig};
use crate::nn::rope::RopeMode;
use crate::probe::{SimMetric, LOO_LEVELS};
use crate::rollout::{BenchConfig, CaptureSpec, CorruptionConfig, EncodeMode, RolloutConfig};
use crate::scd::{scd_variant, Interface, ScdConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub family: Family,
    pub variant: Option<String>,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    /// Baseline block count.
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub interface: Interface,
    pub rope_mode: RopeMode,
    pub corrupt_eta_train: f64,
    pub deep_diagonal: usize,
    pub skip_schedule: Option<SkipSchedule>,
    pub freq_dim: usize,
    /// Seed of the weight initialization.
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            family: Family::Scd,
            variant: None,
            enc_blocks: 8,
            dec_blocks: 4,
            depth: 12,
            hidden: 64,
            heads: 4,
            interface: Interface::FrameConcat,
            rope_mode: RopeMode::Temporal,
            corrupt_eta_train: 0.0,
            deep_diagonal: 0,
            skip_schedule: None,
            freq_dim: 64,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSection {
    pub num_frames: usize,
    pub denoise_steps: usize,
    pub shift_k: f64,
    pub cfg_scale: f64,
    pub cfg_eta: f64,
    pub seed: u64,
    /// Leading frames taken from data instead of sampled.
    pub context_frames: usize,
    pub encode: EncodeMode,
    pub capture: bool,
    pub capture_attn: bool,
    /// `None` captures every layer.
    pub capture_layers: Option<Vec<usize>>,
    pub use_ema: bool,
}

impl Default for RolloutSection {
    fn default() -> Self {
        RolloutSection {
            num_frames: 16,
            denoise_steps: 50,
            shift_k: 1.0,
            cfg_scale: 1.0,
            cfg_eta: 0.0,
            seed: 0,
            context_frames: 0,
            encode: EncodeMode::Incremental,
            capture: false,
            capture_attn: false,
            capture_layers: None,
            use_ema: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSection {
    pub metric: SimMetric,
    pub layer: Option<usize>,
    pub frame: usize,
    pub head: usize,
    pub ref_step: usize,
    pub k: usize,
    pub levels: Vec<f64>,
    /// Validation sequences for leave-one-out.
    pub batch: usize,
    pub seed: u64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            metric: SimMetric::Cosine,
            layer: None,
            frame: 1,
            head: 0,
            ref_step: 0,
            k: 3,
            levels: LOO_LEVELS.to_vec(),
            batch: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub rollout: RolloutSection,
    pub probe: ProbeSection,
    pub bench: BenchConfig,
}

const SEED_KEYS: [&str; 6] = [
    "model.init_seed",
    "train.seed",
    "data.seed",
    "rollout.seed",
    "probe.seed",
    "bench.seed",
];

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "bool",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

/// Reject keys absent from `defaults` and leaves whose JSON type differs.
fn check_keys(user: &Value, defaults: &Value, path: &str) -> Result<()> {
    let (Value::Object(u), Value::Object(d)) = (user, defaults) else {
        return Ok(());
    };
    for (k, v) in u {
        let p = if path.is_empty() {
            k.clone()
        } else {
            format!("{path}.{k}")
        };
        let dv = d.get(k).ok_or_else(|| Error::config(&p, "unknown key"))?;
        match (dv, v) {
            (Value::Object(_), Value::Object(_)) => check_keys(v, dv, &p)?,
            (Value::Object(_), _) => return Err(Error::config(&p, "expected a section object")),
            (Value::Null, _) | (_, Value::Null) => {}
            _ if kind(dv) != kind(v) => {
                return Err(Error::config(&p, format!("expected {}, got {}", kind(dv), kind(v))));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Recursively overlay `over` onto `base`; non-object values replace.
pub fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn get_path<'a>(v: &'a Value, key: &str) -> Option<&'a Value> {
    key.split('.').try_fold(v, |cur, k| cur.get(k))
}

fn set_path(v: &mut Value, key: &str, val: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "malformed key"));
    }
    let mut cur = v;
    for p in &parts[..parts.len() - 1] {
        if !cur.is_object() {
            return Err(Error::config(key, "path crosses a non-object value"));
        }
        cur = cur
            .as_object_mut()
            .expect("checked")
            .entry(p.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    match cur.as_object_mut() {
        Some(m) => {
            m.insert(parts[parts.len() - 1].to_string(), val);
            Ok(())
        }
        None => Err(Error::config(key, "path crosses a non-object value")),
    }
}

/// Parse `key=value`; the value is JSON when it parses as JSON, otherwise a
/// bare string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::config(s, "override must look like key=value"))?;
    let val = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), val))
}

fn preset(variant: &str) -> Result<(Family, Value)> {
    if let Some((e, d, h, n)) = scd_variant(variant) {
        return Ok((
            Family::Scd,
            serde_json::json!({"enc_blocks": e, "dec_blocks": d, "hidden": h, "heads": n}),
        ));
    }
    if let Some((depth, h, n)) = baseline_variant(variant) {
        return Ok((
            Family::CausalDit,
            serde_json::json!({"depth": depth, "hidden": h, "heads": n}),
        ));
    }
    Err(Error::config("model.variant", format!("unknown variant `{variant}`")))
}

impl RunConfig {
    /// Build from an optional user document, overrides, and a fallback
    /// seed used for every seed key the user left unset.
    pub fn load(user: Option<&Value>, overrides: &[String], env_seed: Option<u64>) -> Result<Self> {
        let defaults = serde_json::to_value(RunConfig::default())?;
        let mut layer = user.cloned().unwrap_or_else(|| Value::Object(Map::new()));
        if !layer.is_object() {
            return Err(Error::config("<root>", "config must be a JSON object"));
        }
        for o in overrides {
            let (k, v) = parse_override(o)?;
            set_path(&mut layer, &k, v)?;
        }
        check_keys(&layer, &defaults, "")?;
        if let Some(seed) = env_seed {
            for k in SEED_KEYS {
                if get_path(&layer, k).is_none() {
                    set_path(&mut layer, k, Value::from(seed))?;
                }
            }
        }
        let mut merged = defaults;
        if let Some(Value::String(v)) = get_path(&layer, "model.variant") {
            let (family, values) = preset(v)?;
            merge(&mut merged["model"], &values);
            merged["model"]["family"] = serde_json::to_value(family)?;
        }
        merge(&mut merged, &layer);
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::config("<config>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        match self.model_config()? {
            ModelConfig::Scd(c) => c.validate()?,
            ModelConfig::CausalDit(c) => c.validate()?,
        }
        if let (Some(v), Family::Scd) = (&self.model.variant, self.model.family) {
            if scd_variant(v).is_none() {
                return Err(Error::config("model.variant", format!("`{v}` is not an scd variant")));
            }
        }
        if let (Some(v), Family::CausalDit) = (&self.model.variant, self.model.family) {
            if baseline_variant(v).is_none() {
                return Err(Error::config(
                    "model.variant",
                    format!("`{v}` is not a causal_dit variant"),
                ));
            }
        }
        if self.rollout.context_frames > self.rollout.num_frames {
            return Err(Error::config("rollout.context_frames", "exceeds rollout.num_frames"));
        }
        if self.rollout.context_frames > self.data.num_frames {
            return Err(Error::config("rollout.context_frames", "exceeds data.num_frames"));
        }
        self.rollout_config().validate()?;
        if self.bench.trials < 3 {
            return Err(Error::config("bench.trials", "must be >= 3"));
        }
        if self.probe.levels.is_empty() || self.probe.levels.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::config("probe.levels", "need at least one level in [0, 1]"));
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let geom = self.data.geom();
        Ok(match m.family {
            Family::Scd => ModelConfig::Scd(ScdConfig {
                enc_blocks: m.enc_blocks,
                dec_blocks: m.dec_blocks,
                hidden: m.hidden,
                heads: m.heads,
                interface: m.interface,
                rope_mode: m.rope_mode,
                corrupt_eta_train: m.corrupt_eta_train,
                num_actions: self.data.num_actions,
                freq_dim: m.freq_dim,
                geom,
            }),
            Family::CausalDit => ModelConfig::CausalDit(BaselineConfig {
                depth: m.depth,
                hidden: m.hidden,
                heads: m.heads,
                train_strategy: self.train.strategy,
                deep_diagonal: m.deep_diagonal,
                skip_schedule: m.skip_schedule,
                num_actions: self.data.num_actions,
                freq_dim: m.freq_dim,
                geom,
            }),
        })
    }

    pub fn rollout_config(&self) -> RolloutConfig {
        let r = &self.rollout;
        RolloutConfig {
            num_frames: r.num_frames,
            denoise_steps: r.denoise_steps,
            shift_k: r.shift_k,
            corruption: CorruptionConfig {
                cfg_scale: r.cfg_scale,
                cfg_eta: r.cfg_eta,
            },
            seed: r.seed,
            encode: r.encode,
            capture: (r.capture || r.capture_attn).then(|| CaptureSpec {
                layers: r.capture_layers.clone(),
                attn: r.capture_attn,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_validate() {
        RunConfig::load(None, &[], None).unwrap();
    }

    #[test]
    fn unknown_key_named() {
        let e = RunConfig::load(Some(&json!({"model": {"hiden": 8}})), &[], None).unwrap_err();
        assert!(e.to_string().contains("model.hiden"), "{e}");
        let e = RunConfig::load(None, &["train.lr=\"fast\"".into()], None).unwrap_err();
        assert!(e.to_string().contains("train.lr"), "{e}");
    }

    #[test]
    fn layering_order() {
        let user = json!({"model": {"variant": "dit-b", "hidden": 96}});
        let c = RunConfig::load(Some(&user), &["model.heads=6".into()], None).unwrap();
        assert_eq!(c.model.family, Family::CausalDit);
        assert_eq!((c.model.depth, c.model.hidden, c.model.heads), (12, 96, 6));
    }

    #[test]
    fn patch_size_error_names_key() {
        let e = RunConfig::load(None, &["data.patch_size=5".into()], None).unwrap_err();
        assert!(e.to_string().contains("data.patch_size"), "{e}");
    }

    #[test]
    fn env_seed_fills_unset_only() {
        let c = RunConfig::load(None, &["train.seed=3".into()], Some(9)).unwrap();
        assert_eq!((c.train.seed, c.data.seed, c.rollout.seed), (3, 9, 9));
    }

    #[test]
    fn skip_schedule_parses() {
        let c = RunConfig::load(
            None,
            &["model.family=causal_dit".into(), "model.skip_schedule=[5,2,4]".into()],
            None,
        )
        .unwrap();
        assert_eq!(c.model.skip_schedule, Some(SkipSchedule::from([5, 2, 4])));
    }
}

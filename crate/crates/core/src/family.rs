//! Either model family behind one type, for code that handles both.

use serde::{Deserialize, Serialize};

use crate::baseline::{active_layers, BaselineConfig, CausalDit};
use crate::error::Result;
use crate::model::FrameCost;
use crate::nn::params::ParamStore;
use crate::scd::{ScdConfig, ScdModel};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Scd,
    CausalDit,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelConfig {
    Scd(ScdConfig),
    CausalDit(BaselineConfig),
}

impl ModelConfig {
    pub fn family(&self) -> Family {
        match self {
            ModelConfig::Scd(_) => Family::Scd,
            ModelConfig::CausalDit(_) => Family::CausalDit,
        }
    }

    /// Total block count.
    pub fn depth(&self) -> usize {
        match self {
            ModelConfig::Scd(c) => c.depth(),
            ModelConfig::CausalDit(c) => c.depth,
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            ModelConfig::Scd(c) => c.hidden,
            ModelConfig::CausalDit(c) => c.hidden,
        }
    }

    pub fn bp_per_frame(&self, steps: usize) -> u64 {
        match self {
            ModelConfig::Scd(c) => c.bp_per_frame(steps),
            ModelConfig::CausalDit(c) => c.bp_per_frame(steps),
        }
    }

    /// Block passes actually executed by a rollout of `frames` frames, of
    /// which the first `context` are given rather than sampled.
    pub fn rollout_invocations(&self, frames: usize, context: usize, steps: usize) -> u64 {
        let gen = frames.saturating_sub(context) as u64;
        match self {
            ModelConfig::Scd(c) => frames as u64 * c.enc_blocks as u64 + gen * (steps * c.dec_blocks) as u64,
            ModelConfig::CausalDit(c) => {
                let per: usize = (1..=steps)
                    .map(|s| active_layers(c.skip_schedule.as_ref(), c.depth, s).len())
                    .sum();
                frames as u64 * c.depth as u64 + gen * per as u64
            }
        }
    }
}

pub enum Model<T: Scalar> {
    Scd(ScdModel<T>),
    CausalDit(CausalDit<T>),
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(match cfg {
            ModelConfig::Scd(c) => Model::Scd(ScdModel::new(c.clone(), seed)?),
            ModelConfig::CausalDit(c) => Model::CausalDit(CausalDit::new(c.clone(), seed)?),
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Model::Scd(m) => ModelConfig::Scd(m.cfg.clone()),
            Model::CausalDit(m) => ModelConfig::CausalDit(m.cfg.clone()),
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        match self {
            Model::Scd(m) => m.params(),
            Model::CausalDit(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        match self {
            Model::Scd(m) => m.params_mut(),
            Model::CausalDit(m) => m.params_mut(),
        }
    }

    pub fn block_passes(&self) -> u64 {
        match self {
            Model::Scd(m) => m.block_passes(),
            Model::CausalDit(m) => m.block_passes(),
        }
    }

    pub fn reset_counter(&self) {
        match self {
            Model::Scd(m) => m.reset_counter(),
            Model::CausalDit(m) => m.reset_counter(),
        }
    }
}

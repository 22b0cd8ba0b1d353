//! Pieces shared by both model families: forward options, activation
//! capture, block-pass accounting.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::tensor::{Scalar, Tensor};

/// Per-call switches for a model forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardOpts {
    /// Global layer index to bypass through its residual connection.
    pub bypass: Option<usize>,
    /// Restrict execution to these global layer indices (others bypassed).
    pub active: Option<Vec<usize>>,
    /// Record each executed block's output features.
    pub capture: bool,
    /// Record attention weights too (requires `capture`).
    pub capture_attn: bool,
}

impl ForwardOpts {
    pub fn capturing(attn: bool) -> Self {
        ForwardOpts {
            capture: true,
            capture_attn: attn,
            ..Default::default()
        }
    }

    pub fn runs(&self, layer: usize) -> bool {
        if self.bypass == Some(layer) {
            return false;
        }
        match &self.active {
            Some(a) => a.contains(&layer),
            None => true,
        }
    }
}

/// Output of one executed block.
#[derive(Debug, Clone)]
pub struct LayerCapture<T> {
    pub layer: usize,
    /// `[rows, hidden]` block output.
    pub features: Tensor<T>,
    /// `[batch, heads, Lq, Lk]`.
    pub attn: Option<Tensor<T>>,
}

/// Counter of block passes, one per frame-sized token group per block.
#[derive(Debug, Default)]
pub struct BlockCounter(AtomicU64);

impl BlockCounter {
    pub fn add(&self, n: usize) {
        self.0.fetch_add(n as u64, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

impl Clone for BlockCounter {
    fn clone(&self) -> Self {
        BlockCounter(AtomicU64::new(self.get()))
    }
}

/// Analytic per-frame inference cost in block passes.
pub trait FrameCost {
    fn bp_per_frame(&self, denoise_steps: usize) -> u64;
}

/// SCD: the encoder once per frame plus the decoder once per step.
pub fn scd_bp_per_frame(enc_blocks: usize, dec_blocks: usize, steps: usize) -> u64 {
    (enc_blocks + steps * dec_blocks) as u64
}

/// Entangled baseline: the full stack once per step (the extra caching pass
/// is not counted).
pub fn baseline_bp_per_frame(depth: usize, steps: usize) -> u64 {
    (steps * depth) as u64
}

/// Exact non-negative rational.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        assert!(den > 0, "zero denominator");
        let g = gcd(num, den);
        Ratio {
            num: num / g,
            den: den / g,
        }
    }

    pub fn int(v: u64) -> Self {
        Ratio { num: v, den: 1 }
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl std::fmt::Display for Ratio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a.max(1)
    } else {
        gcd(b, a % b)
    }
}

/// Training cost with `k` decoder samples per encoded frame:
/// `(l + m k, l / k + m)` block passes per clean and per noisy sample.
pub fn bp_accounting(enc_blocks: usize, dec_blocks: usize, k: usize) -> crate::Result<(Ratio, Ratio)> {
    if k == 0 {
        return Err(crate::Error::invalid("bp_accounting", "K must be >= 1"));
    }
    let (l, m, k) = (enc_blocks as u64, dec_blocks as u64, k as u64);
    Ok((Ratio::int(l + m * k), Ratio::new(l + m * k, k)))
}

pub(crate) fn push_capture<T: Scalar>(
    caps: &mut Vec<LayerCapture<T>>,
    opts: &ForwardOpts,
    layer: usize,
    out: &crate::nn::BlockOut<T>,
) {
    if opts.capture {
        caps.push(LayerCapture {
            layer,
            features: out.x.value().clone(),
            attn: out.attn.clone(),
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_reduces() {
        assert_eq!(Ratio::new(24, 4), Ratio::int(6));
        assert_eq!(Ratio::new(20, 3).to_string(), "20/3");
    }

    #[test]
    fn opts_runs() {
        let o = ForwardOpts {
            bypass: Some(2),
            active: Some(vec![0, 2, 3]),
            ..Default::default()
        };
        assert!(o.runs(0) && !o.runs(1) && !o.runs(2) && o.runs(3));
    }
}

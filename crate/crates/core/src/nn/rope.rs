//! Rotary position embedding with separate row / column / frame bands.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

const ROPE_BASE: f64 = 10_000.0;

/// How decoder context tokens are placed in time relative to the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RopeMode {
    /// Context tokens sit one frame before the noisy frame.
    Temporal,
    /// Context and noisy tokens share the frame index.
    Identical,
}

/// Position of one token: frame index plus patch grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenPos {
    pub frame: f64,
    pub row: f64,
    pub col: f64,
}

impl TokenPos {
    /// Row-major patch grid of one frame.
    pub fn frame_grid(frame: f64, grid_h: usize, grid_w: usize) -> Vec<TokenPos> {
        (0..grid_h * grid_w)
            .map(|i| TokenPos {
                frame,
                row: (i / grid_w) as f64,
                col: (i % grid_w) as f64,
            })
            .collect()
    }
}

/// Split of the `head_dim / 2` rotation pairs: half spatial (row, col), half temporal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RopeBands {
    pub row_pairs: usize,
    pub col_pairs: usize,
    pub time_pairs: usize,
}

impl RopeBands {
    pub fn for_head_dim(head_dim: usize) -> Result<Self> {
        if head_dim < 2 || !head_dim.is_multiple_of(2) {
            return Err(Error::invalid(
                "rope",
                format!("head_dim must be even and >= 2, got {head_dim}"),
            ));
        }
        let pairs = head_dim / 2;
        let time_pairs = pairs / 2;
        let spatial = pairs - time_pairs;
        let row_pairs = spatial.div_ceil(2);
        Ok(RopeBands {
            row_pairs,
            col_pairs: spatial - row_pairs,
            time_pairs,
        })
    }

    pub fn pairs(&self) -> usize {
        self.row_pairs + self.col_pairs + self.time_pairs
    }

    fn angles(&self, pos: &TokenPos, out: &mut Vec<f64>) {
        for (n, p) in [
            (self.row_pairs, pos.row),
            (self.col_pairs, pos.col),
            (self.time_pairs, pos.frame),
        ] {
            for j in 0..n {
                let freq = ROPE_BASE.powf(-(j as f64) / n as f64);
                out.push(p * freq);
            }
        }
    }
}

/// Per-token cos/sin table, shared across heads.
#[derive(Debug, Clone)]
pub struct RopeTable<T> {
    rows: usize,
    pairs: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(head_dim: usize, positions: &[TokenPos]) -> Result<Self> {
        let bands = RopeBands::for_head_dim(head_dim)?;
        let pairs = bands.pairs();
        let mut angles = Vec::with_capacity(positions.len() * pairs);
        for p in positions {
            bands.angles(p, &mut angles);
        }
        Ok(RopeTable {
            rows: positions.len(),
            pairs,
            cos: angles.iter().map(|a| T::from_f64(a.cos())).collect(),
            sin: angles.iter().map(|a| T::from_f64(a.sin())).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn head_dim(&self) -> usize {
        2 * self.pairs
    }

    /// Rotate every head of `x` (`n * rows` rows of `width`, width a multiple
    /// of the head dim); the table repeats every `rows` rows.
    /// `inverse` applies the transposed rotation.
    pub(crate) fn apply(&self, x: &[T], width: usize, inverse: bool) -> Vec<T> {
        let dh = self.head_dim();
        let heads = width / dh;
        let mut out = vec![T::zero(); x.len()];
        for r in 0..x.len() / width {
            let tr = r % self.rows;
            let cs = &self.cos[tr * self.pairs..(tr + 1) * self.pairs];
            let sn = &self.sin[tr * self.pairs..(tr + 1) * self.pairs];
            for h in 0..heads {
                let base = r * width + h * dh;
                for j in 0..self.pairs {
                    let (a, b) = (x[base + 2 * j], x[base + 2 * j + 1]);
                    let (c, s) = (cs[j], if inverse { -sn[j] } else { sn[j] });
                    out[base + 2 * j] = a * c - b * s;
                    out[base + 2 * j + 1] = a * s + b * c;
                }
            }
        }
        out
    }
}

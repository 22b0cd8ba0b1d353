//! Diagnostics over captured activations: step-to-step feature similarity,
//! PCA alignment, cross-frame attention mass, and leave-one-out layer
//! importance.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::baseline::BaselineDraws;
use crate::container::Container;
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::family::Model;
use crate::model::{ForwardOpts, LayerCapture};
use crate::nn::params::Bound;
use crate::scd::ScdDraws;
use crate::tensor::{Scalar, Tensor};

/// `(layer, step, frame)`.
pub type TraceKey = (usize, usize, usize);

/// Attention weights of one layer for the queries of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMap {
    /// `[heads, Lq, Lk]`.
    pub weights: Tensor<f32>,
    pub query_frame: i64,
    /// Frame of each key token; `-1` marks begin-of-sequence tokens.
    pub key_frames: Vec<i64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ActivationTrace {
    /// Config snapshot and seed needed to replay the capture.
    pub meta: Value,
    /// `[tokens, hidden]` features.
    pub features: BTreeMap<TraceKey, Tensor<f32>>,
    pub attn: BTreeMap<TraceKey, AttnMap>,
}

#[derive(Serialize, Deserialize)]
struct AttnEntry {
    layer: usize,
    step: usize,
    frame: usize,
    query_frame: i64,
    key_frames: Vec<i64>,
}

impl ActivationTrace {
    pub fn new(meta: Value) -> Self {
        ActivationTrace {
            meta,
            ..Default::default()
        }
    }

    /// Store one block capture; the attention batch axis must be 1.
    pub fn record<T: Scalar>(
        &mut self,
        cap: &LayerCapture<T>,
        step: usize,
        frame: usize,
        query_frame: i64,
        key_frames: impl Fn(usize) -> i64,
    ) -> Result<()> {
        self.features.insert((cap.layer, step, frame), cap.features.cast());
        if let Some(a) = &cap.attn {
            let s = a.shape();
            if s.len() != 4 || s[0] != 1 {
                return Err(Error::invalid("trace", format!("attention shape {s:?}")));
            }
            self.attn.insert(
                (cap.layer, step, frame),
                AttnMap {
                    weights: a.reshape(&s[1..])?.cast(),
                    query_frame,
                    key_frames: (0..s[3]).map(key_frames).collect(),
                },
            );
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.features.keys().map(|k| k.0).collect();
        l.dedup();
        l
    }

    pub fn frames(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self.features.keys().map(|k| k.2).collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    pub fn attn_layers(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.attn.keys().map(|k| k.0).collect();
        l.dedup();
        l
    }

    /// Captured steps of `(layer, frame)` in order, with their features.
    pub fn steps(&self, layer: usize, frame: usize) -> Vec<(usize, &Tensor<f32>)> {
        self.features
            .range((layer, 0, 0)..=(layer, usize::MAX, usize::MAX))
            .filter(|(k, _)| k.2 == frame)
            .map(|(k, v)| (k.1, v))
            .collect()
    }

    pub fn to_container(&self) -> Container {
        let config = self.meta.get("config").cloned().unwrap_or(Value::Null);
        let mut c = Container::new("trace", config);
        let entries: Vec<AttnEntry> = self
            .attn
            .iter()
            .map(|(&(layer, step, frame), a)| AttnEntry {
                layer,
                step,
                frame,
                query_frame: a.query_frame,
                key_frames: a.key_frames.clone(),
            })
            .collect();
        c.meta = json!({ "meta": self.meta, "attn": entries });
        for (&(l, s, f), t) in &self.features {
            c.push(format!("feat.{l}.{s}.{f}"), t);
        }
        for (&(l, s, f), a) in &self.attn {
            c.push(format!("attn.{l}.{s}.{f}"), &a.weights);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("trace")?;
        let entries: Vec<AttnEntry> = serde_json::from_value(c.meta["attn"].clone())?;
        let mut tr = ActivationTrace::new(c.meta["meta"].clone());
        for (name, t) in &c.tensors {
            if let Some(rest) = name.strip_prefix("feat.") {
                tr.features.insert(parse_key(rest)?, t.to());
            }
        }
        for e in entries {
            let w = c.get(&format!("attn.{}.{}.{}", e.layer, e.step, e.frame))?.to();
            tr.attn.insert(
                (e.layer, e.step, e.frame),
                AttnMap {
                    weights: w,
                    query_frame: e.query_frame,
                    key_frames: e.key_frames,
                },
            );
        }
        Ok(tr)
    }
}

fn parse_key(s: &str) -> Result<TraceKey> {
    let v: Vec<usize> = s
        .split('.')
        .map(|p| p.parse().map_err(|_| Error::Format(format!("bad trace key `{s}`"))))
        .collect::<Result<_>>()?;
    match v[..] {
        [l, st, f] => Ok((l, st, f)),
        _ => Err(Error::Format(format!("bad trace key `{s}`"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMetric {
    /// Per-token cosine, averaged over tokens.
    Cosine,
    /// Cosine of the flattened feature tensors.
    CosineFlat,
    /// Squared Frobenius distance.
    Mse,
}

fn rows_f64(t: &Tensor<f32>) -> Result<(usize, usize, Vec<f64>)> {
    let (r, c) = t.dims2()?;
    Ok((r, c, t.to_f64_vec()))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    match (aa == 0.0, bb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0),
    }
}

fn similarity(a: &Tensor<f32>, b: &Tensor<f32>, metric: SimMetric) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "step_similarity",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (r, c, x) = rows_f64(a)?;
    let (_, _, y) = rows_f64(b)?;
    Ok(match metric {
        SimMetric::Cosine => {
            (0..r)
                .map(|i| cosine(&x[i * c..(i + 1) * c], &y[i * c..(i + 1) * c]))
                .sum::<f64>()
                / r as f64
        }
        SimMetric::CosineFlat => cosine(&x, &y),
        SimMetric::Mse => x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum(),
    })
}

/// `S x S` matrix over the captured steps of `(layer, frame)`.
pub fn step_similarity_matrix(
    trace: &ActivationTrace,
    layer: usize,
    frame: usize,
    metric: SimMetric,
) -> Result<DMatrix<f64>> {
    let steps = trace.steps(layer, frame);
    if steps.len() < 2 {
        return Err(Error::invalid(
            "step_similarity",
            format!(
                "layer {layer} frame {frame} has {} captured steps, need >= 2",
                steps.len()
            ),
        ));
    }
    let s = steps.len();
    let mut m = DMatrix::zeros(s, s);
    for i in 0..s {
        for j in 0..s {
            m[(i, j)] = similarity(steps[i].1, steps[j].1, metric)?;
        }
    }
    Ok(m)
}

/// Mean off-diagonal squared distance per captured layer.
pub fn per_layer_mean_distance(trace: &ActivationTrace, frame: usize) -> Result<Vec<(usize, f64)>> {
    trace
        .layers()
        .into_iter()
        .filter(|&l| trace.steps(l, frame).len() >= 2)
        .map(|l| {
            let m = step_similarity_matrix(trace, l, frame, SimMetric::Mse)?;
            let s = m.nrows();
            Ok((l, m.sum() / (s * (s - 1)) as f64))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PcaReport {
    pub ref_step: usize,
    pub k: usize,
    /// `(step, energy ratio)`.
    pub ratios: Vec<(usize, f64)>,
    /// Reference-step scores on the top components, `[tokens][<= 3]`.
    pub component_maps: Vec<Vec<f64>>,
}

/// Uncentered PCA on the reference step's `[tokens, hidden]` features and
/// the share of every step's energy that lies in the top-`k` subspace.
pub fn pca_alignment(
    trace: &ActivationTrace,
    layer: usize,
    frame: usize,
    ref_step: usize,
    k: usize,
) -> Result<PcaReport> {
    let feat = trace.features.get(&(layer, ref_step, frame)).ok_or_else(|| {
        Error::invalid(
            "pca_alignment",
            format!("no capture at layer {layer} step {ref_step} frame {frame}"),
        )
    })?;
    let (r, c, x) = rows_f64(feat)?;
    if k == 0 || k > r.min(c) {
        return Err(Error::invalid(
            "pca_alignment",
            format!("k = {k} must lie in 1..={}", r.min(c)),
        ));
    }
    let f = DMatrix::from_row_slice(r, c, &x);
    let eig = SymmetricEigen::new(f.transpose() * &f);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let basis = DMatrix::from_fn(c, k, |i, j| eig.eigenvectors[(i, order[j])]);
    let mut ratios = Vec::new();
    for (s, t) in trace.steps(layer, frame) {
        let (rs, cs, xs) = rows_f64(t)?;
        let fs = DMatrix::from_row_slice(rs, cs, &xs);
        let total = fs.norm_squared();
        let ratio = if total == 0.0 {
            0.0
        } else {
            ((&fs * &basis).norm_squared() / total).clamp(0.0, 1.0)
        };
        ratios.push((s, ratio));
    }
    let n_maps = k.min(3);
    let scores = &f * basis.columns(0, n_maps);
    let component_maps = (0..r).map(|i| (0..n_maps).map(|j| scores[(i, j)]).collect()).collect();
    Ok(PcaReport {
        ref_step,
        k,
        ratios,
        component_maps,
    })
}

/// Share of attention a frame's queries give to history, own frame, and
/// begin-of-sequence keys.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MassSplit {
    pub cross: f64,
    pub intra: f64,
    pub other: f64,
}

fn mass_split(a: &AttnMap, head: usize) -> Result<MassSplit> {
    let s = a.weights.shape();
    if head >= s[0] {
        return Err(Error::invalid("xframe_mass", format!("head {head} of {}", s[0])));
    }
    let (lq, lk) = (s[1], s[2]);
    let w = &a.weights.data()[head * lq * lk..(head + 1) * lq * lk];
    let (mut cross, mut intra, mut other) = (0.0, 0.0, 0.0);
    for q in 0..lq {
        for (kx, &kf) in a.key_frames.iter().enumerate() {
            let v = w[q * lk + kx] as f64;
            if kf >= 0 && kf < a.query_frame {
                cross += v;
            } else if kf == a.query_frame {
                intra += v;
            } else {
                other += v;
            }
        }
    }
    let n = lq as f64;
    Ok(MassSplit {
        cross: cross / n,
        intra: intra / n,
        other: other / n,
    })
}

/// Attention split for `(layer, head, frame)`, averaged over captured steps.
pub fn attention_mass_split(trace: &ActivationTrace, layer: usize, head: usize, frame: usize) -> Result<MassSplit> {
    let maps: Vec<&AttnMap> = trace
        .attn
        .range((layer, 0, 0)..=(layer, usize::MAX, usize::MAX))
        .filter(|(k, _)| k.2 == frame)
        .map(|(_, v)| v)
        .collect();
    if maps.is_empty() {
        return Err(Error::invalid(
            "xframe_mass",
            format!("no attention captured for layer {layer} frame {frame}"),
        ));
    }
    let mut acc = MassSplit {
        cross: 0.0,
        intra: 0.0,
        other: 0.0,
    };
    for a in &maps {
        let s = mass_split(a, head)?;
        acc.cross += s.cross;
        acc.intra += s.intra;
        acc.other += s.other;
    }
    let n = maps.len() as f64;
    Ok(MassSplit {
        cross: acc.cross / n,
        intra: acc.intra / n,
        other: acc.other / n,
    })
}

/// Mean weight the queries of `frame` put on keys of earlier frames.
pub fn cross_frame_attention_mass(trace: &ActivationTrace, layer: usize, head: usize, frame: usize) -> Result<f64> {
    Ok(attention_mass_split(trace, layer, head, frame)?.cross.clamp(0.0, 1.0))
}

pub const LOO_LEVELS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LooReport {
    pub levels: Vec<f64>,
    pub full: f64,
    /// `loss(bypass l) - loss(full)` for every layer.
    pub deltas: Vec<f64>,
    /// Full-model loss re-evaluated after the sweep.
    pub full_after: f64,
}

/// Validation loss of a batch at fixed noise levels, optionally with one
/// layer bypassed. Draws depend only on `seed` and the level index.
pub fn validation_loss<T: Scalar>(
    model: &Model<T>,
    p: &Bound<T>,
    frames: &Tensor<T>,
    actions: &[usize],
    levels: &[f64],
    seed: u64,
    opts: &ForwardOpts,
) -> Result<f64> {
    let schedule = DiffusionSchedule::default();
    let clean = frames.shape()[0] * frames.shape()[1];
    let mut total = 0.0;
    for (i, &t) in levels.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let l = match model {
            Model::Scd(m) => {
                let mut d = ScdDraws::sample(&mut rng, &schedule, 1, clean, &m.cfg)?;
                d.ts = vec![t; clean];
                m.loss(p, frames, actions, &d, 0.0, &schedule, opts)?
            }
            Model::CausalDit(m) => {
                let mut d = BaselineDraws::sample(&mut rng, &schedule, clean, &m.cfg.geom)?;
                d.ts = vec![t; clean];
                m.loss(p, frames, actions, &d, &schedule, opts)?
            }
        };
        total += l.value().item().as_f64();
    }
    Ok(total / levels.len() as f64)
}

/// Bypass each layer in turn through its residual path and report the
/// change in validation loss.
pub fn leave_one_out<T: Scalar>(
    model: &Model<T>,
    p: &Bound<T>,
    frames: &Tensor<T>,
    actions: &[usize],
    levels: &[f64],
    seed: u64,
) -> Result<LooReport> {
    let depth = model.config().depth();
    if depth < 2 {
        return Err(Error::invalid("leave_one_out", "model depth must be >= 2"));
    }
    let full_opts = ForwardOpts::default();
    let full = validation_loss(model, p, frames, actions, levels, seed, &full_opts)?;
    let deltas = (0..depth)
        .map(|l| {
            let o = ForwardOpts {
                bypass: Some(l),
                ..Default::default()
            };
            Ok(validation_loss(model, p, frames, actions, levels, seed, &o)? - full)
        })
        .collect::<Result<Vec<_>>>()?;
    let full_after = validation_loss(model, p, frames, actions, levels, seed, &full_opts)?;
    Ok(LooReport {
        levels: levels.to_vec(),
        full,
        deltas,
        full_after,
    })
}

/// Per-layer mean off-diagonal cosine and cross-frame attention mass, plus
/// the mid-layer versus last-layer comparison.
pub fn trend_report(trace: &ActivationTrace) -> Result<Value> {
    let mut cos = Vec::new();
    for l in trace.layers() {
        let mut vals = Vec::new();
        for f in trace.frames() {
            if trace.steps(l, f).len() >= 2 {
                let m = step_similarity_matrix(trace, l, f, SimMetric::Cosine)?;
                let s = m.nrows();
                vals.push((m.sum() - s as f64) / (s * (s - 1)) as f64);
            }
        }
        if !vals.is_empty() {
            cos.push((l, vals.iter().sum::<f64>() / vals.len() as f64));
        }
    }
    let mut mass = Vec::new();
    for l in trace.attn_layers() {
        let mut vals = Vec::new();
        for (&(_, _, f), a) in trace.attn.range((l, 0, 0)..=(l, usize::MAX, usize::MAX)) {
            if f == 0 {
                continue;
            }
            for h in 0..a.weights.shape()[0] {
                vals.push(mass_split(a, h)?.cross);
            }
        }
        if !vals.is_empty() {
            mass.push((l, vals.iter().sum::<f64>() / vals.len() as f64));
        }
    }
    let (mid, last) = match cos.len() {
        0 => (Value::Null, Value::Null),
        n => (json!(cos[n / 2]), json!(cos[n - 1])),
    };
    Ok(json!({
        "cosine": "per-token mean, off-diagonal average",
        "per_layer_cosine": cos,
        "mid_layer_cosine": mid,
        "last_layer_cosine": last,
        "per_layer_xframe_mass": mass,
    }))
}

pub fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut s = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}

pub fn curve_csv(header: &str, rows: &[(usize, f64)]) -> String {
    let mut s = format!("{header}\n");
    for (a, b) in rows {
        let _ = writeln!(s, "{a},{b}");
    }
    s
}

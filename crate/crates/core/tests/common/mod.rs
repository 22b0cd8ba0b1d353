#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use scd_core::autograd::OpKind;
use scd_core::baseline::{BaselineConfig, TrainStrategy};
use scd_core::config::RunConfig;
use scd_core::data::FrameGeom;
use scd_core::gradcheck::finite_diff_check_many;
use scd_core::nn::mask::{build_mask, last_frame_mask, MaskKind};
use scd_core::nn::params::ParamStore;
use scd_core::nn::rope::{RopeMode, RopeTable, TokenPos};
use scd_core::scd::{Interface, ScdConfig};
use scd_core::{Scalar, Tensor, Var};

pub fn geom(height: usize, width: usize, channels: usize, patch_size: usize) -> FrameGeom {
    FrameGeom {
        height,
        width,
        channels,
        patch_size,
    }
}

pub fn scd_cfg(enc_blocks: usize, dec_blocks: usize, hidden: usize, heads: usize, geom: FrameGeom) -> ScdConfig {
    ScdConfig {
        enc_blocks,
        dec_blocks,
        hidden,
        heads,
        interface: Interface::FrameConcat,
        rope_mode: RopeMode::Temporal,
        corrupt_eta_train: 0.0,
        num_actions: 4,
        freq_dim: 8,
        geom,
    }
}

pub fn dit_cfg(depth: usize, hidden: usize, heads: usize, geom: FrameGeom) -> BaselineConfig {
    BaselineConfig {
        depth,
        hidden,
        heads,
        train_strategy: TrainStrategy::TeacherForcing,
        deep_diagonal: 0,
        skip_schedule: None,
        num_actions: 4,
        freq_dim: 8,
        geom,
    }
}

/// Add `N(0, std)` to every parameter so zero-initialized gates and output
/// layers stop hiding the rest of the network.
pub fn jitter<T: Scalar>(params: &mut ParamStore<T>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("valid std");
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = T::from_f64(v.as_f64() + normal.sample(&mut rng));
        }
    }
}

pub fn run_config(sets: &[&str]) -> RunConfig {
    let sets: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
    RunConfig::load(None, &sets, None).expect("valid test config")
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `sum(y * r)` for a fixed random `r`, so every output entry gets its own
/// upstream gradient.
pub fn project(y: &Var<f64>, seed: u64) -> scd_core::Result<Var<f64>> {
    y.mul(&Var::constant(randn(y.shape(), seed)))?.sum()
}

pub const ALL_OPS: [OpKind; 19] = [
    OpKind::Matmul,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Scale,
    OpKind::Gelu,
    OpKind::Silu,
    OpKind::LayerNorm,
    OpKind::SoftmaxLastDim,
    OpKind::Reshape,
    OpKind::Permute,
    OpKind::Concat,
    OpKind::Slice,
    OpKind::EmbeddingLookup,
    OpKind::Mean,
    OpKind::Sum,
    OpKind::SumSq,
    OpKind::Attention,
    OpKind::Rope,
];

pub type OpCheck = (OpKind, &'static str, Box<dyn Fn() -> scd_core::Result<f64>>);

fn check(
    f: impl Fn(&[Var<f64>]) -> scd_core::Result<Var<f64>>,
    shapes: &[Vec<usize>],
    seed: u64,
    h: f64,
) -> scd_core::Result<f64> {
    let xs: Vec<Tensor<f64>> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| randn(s, seed + i as u64))
        .collect();
    finite_diff_check_many(f, &xs, h, None)
}

/// One gradient check per op kind (some kinds more than once). Inputs and
/// projections are seeded from `trial`.
pub fn op_checks(trial: u64, h: f64) -> Vec<OpCheck> {
    let mut v: Vec<OpCheck> = Vec::new();
    macro_rules! op {
        ($kind:expr, $name:expr, $shapes:expr, $seed:expr, $f:expr) => {
            v.push((
                $kind,
                $name,
                Box::new(move || check($f, &$shapes, trial * 1000 + $seed, h)),
            ));
        };
    }
    op!(OpKind::Matmul, "matmul", [vec![3, 4], vec![4, 5]], 10, |x| project(
        &x[0].matmul(&x[1])?,
        trial * 1000 + 501
    ));
    op!(OpKind::Matmul, "linear", [vec![3, 4], vec![4, 5], vec![5]], 20, |x| {
        project(&x[0].linear(&x[1], &x[2])?, trial * 1000 + 502)
    });
    op!(OpKind::Add, "add", [vec![3, 4], vec![3, 4]], 30, |x| project(
        &x[0].add(&x[1])?,
        trial * 1000 + 503
    ));
    op!(OpKind::Add, "add_broadcast", [vec![2, 3, 4], vec![4]], 40, |x| {
        project(&x[0].add(&x[1])?, trial * 1000 + 504)
    });
    op!(OpKind::Sub, "sub_broadcast", [vec![3, 4], vec![4]], 50, |x| project(
        &x[0].sub(&x[1])?,
        trial * 1000 + 505
    ));
    op!(OpKind::Mul, "mul", [vec![3, 4], vec![3, 4]], 60, |x| project(
        &x[0].mul(&x[1])?,
        trial * 1000 + 506
    ));
    op!(OpKind::Mul, "mul_broadcast", [vec![3, 4], vec![3, 4]], 70, |x| {
        let row = x[1].slice(0, 0, 1)?.reshape(&[4])?;
        project(&x[0].mul(&row)?, trial * 1000 + 507)
    });
    op!(OpKind::Scale, "scale", [vec![3, 4]], 80, |x| project(
        &x[0].scale(-1.7)?,
        trial * 1000 + 508
    ));
    op!(OpKind::Gelu, "gelu", [vec![4, 5]], 90, |x| project(
        &x[0].scale(2.0)?.gelu()?,
        trial * 1000 + 509
    ));
    op!(OpKind::Silu, "silu", [vec![4, 5]], 100, |x| project(
        &x[0].scale(2.0)?.silu()?,
        trial * 1000 + 510
    ));
    op!(OpKind::LayerNorm, "layer_norm", [vec![3, 6]], 110, |x| project(
        &x[0].layer_norm()?,
        trial * 1000 + 511
    ));
    op!(OpKind::SoftmaxLastDim, "softmax", [vec![3, 5]], 120, |x| {
        project(&x[0].softmax_lastdim()?, trial * 1000 + 512)
    });
    op!(OpKind::Reshape, "reshape", [vec![3, 4]], 130, |x| project(
        &x[0].reshape(&[2, 6])?,
        trial * 1000 + 513
    ));
    op!(OpKind::Permute, "permute", [vec![2, 3, 4]], 140, |x| {
        project(&x[0].permute(&[2, 0, 1])?, trial * 1000 + 514)
    });
    op!(OpKind::Concat, "concat", [vec![2, 3], vec![2, 5]], 150, |x| {
        project(&Var::concat(&[x[0].clone(), x[1].clone()], 1)?, trial * 1000 + 515)
    });
    op!(OpKind::Concat, "concat_rows", [vec![2, 3], vec![4, 3]], 160, |x| {
        project(&Var::concat(&[x[0].clone(), x[1].clone()], 0)?, trial * 1000 + 516)
    });
    op!(OpKind::Slice, "slice", [vec![3, 6]], 170, |x| project(
        &x[0].slice(1, 2, 3)?,
        trial * 1000 + 517
    ));
    op!(OpKind::EmbeddingLookup, "embedding_lookup", [vec![5, 3]], 180, |x| {
        project(&x[0].embedding_lookup(&[0, 2, 2, 4])?, trial * 1000 + 518)
    });
    op!(OpKind::Mean, "mean", [vec![3, 4]], 190, |x| x[0].mul(&x[0])?.mean());
    op!(OpKind::Sum, "sum", [vec![3, 4]], 200, |x| x[0].mul(&x[0])?.sum());
    op!(OpKind::SumSq, "sum_sq", [vec![3, 4]], 210, |x| x[0].sum_sq());
    op!(OpKind::Sub, "mse", [vec![3, 4], vec![3, 4]], 220, |x| x[0].mse(&x[1]));
    op!(OpKind::Rope, "rope", [vec![8, 8]], 230, |x| {
        let pos: Vec<TokenPos> = (0..4)
            .map(|i| TokenPos {
                frame: i as f64,
                row: 1.0,
                col: 2.0 - i as f64,
            })
            .collect();
        project(&x[0].rope(&RopeTable::new(4, &pos)?)?, trial * 1000 + 523)
    });
    op!(
        OpKind::Attention,
        "attention_frame_causal",
        [vec![8, 4], vec![8, 4], vec![8, 4]],
        240,
        |x| {
            let m = build_mask(2, 2, MaskKind::FrameCausal);
            project(
                &Var::attention(&x[0], &x[1], &x[2], &m, 2, 2, false)?.0,
                trial * 1000 + 524,
            )
        }
    );
    op!(
        OpKind::Attention,
        "attention_interleaved",
        [vec![8, 4], vec![8, 4], vec![8, 4]],
        250,
        |x| {
            let m = build_mask(2, 2, MaskKind::TeacherForcingInterleaved);
            project(
                &Var::attention(&x[0], &x[1], &x[2], &m, 2, 1, false)?.0,
                trial * 1000 + 525,
            )
        }
    );
    op!(
        OpKind::Attention,
        "attention_last_frame",
        [vec![4, 4], vec![12, 4], vec![12, 4]],
        260,
        |x| {
            let m = last_frame_mask(3, 2, MaskKind::FrameCausal);
            project(
                &Var::attention(&x[0], &x[1], &x[2], &m, 2, 2, false)?.0,
                trial * 1000 + 526,
            )
        }
    );
    v
}

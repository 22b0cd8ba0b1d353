mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{dit_cfg, geom, jitter, randn, scd_cfg};
use scd_core::baseline::{CausalDit, SkipSchedule, TrainStrategy};
use scd_core::family::{Model, ModelConfig};
use scd_core::model::ForwardOpts;
use scd_core::probe::{attention_mass_split, cross_frame_attention_mass};
use scd_core::rollout::{rollout, CaptureSpec, CorruptionConfig, EncodeMode, RolloutConfig};
use scd_core::scd::ScdModel;
use scd_core::{Tensor, Var};

fn rcfg(frames: usize, steps: usize) -> RolloutConfig {
    RolloutConfig {
        num_frames: frames,
        denoise_steps: steps,
        seed: 4,
        ..Default::default()
    }
}

#[test]
fn frame_causal_stack_ignores_later_frames() {
    let g = geom(4, 4, 1, 2);
    let mut cfg = dit_cfg(2, 16, 2, g);
    cfg.train_strategy = TrainStrategy::DiffusionForcing;
    let mut m = CausalDit::<f64>::new(cfg, 0).unwrap();
    jitter(m.params_mut(), 0.3, 1);
    let p = m.params().bind(false);
    let xt = randn(&[1, 3, 4, 4], 2);
    let ts = [0.2, 0.5, 0.9];
    let opts = ForwardOpts::default();
    let (v, _) = m.forward_df(&p, &xt, &ts, &[0, 1, 2], &opts).unwrap();
    for j in 1..3 {
        let mut x2 = xt.clone();
        for k in j * 16..48 {
            x2.data_mut()[k] += 0.7;
        }
        let (v2, _) = m.forward_df(&p, &x2, &ts, &[0, 1, 2], &opts).unwrap();
        let keep = j * 4;
        assert!(v
            .value()
            .rows(0, keep)
            .unwrap()
            .bitwise_eq(&v2.value().rows(0, keep).unwrap()));
        assert!(!v.value().bitwise_eq(v2.value()));
    }
}

#[test]
fn encoder_context_ignores_current_and_later_frames() {
    let mut m = ScdModel::<f64>::new(scd_cfg(2, 1, 16, 2, geom(4, 4, 1, 2)), 0).unwrap();
    jitter(m.params_mut(), 0.3, 3);
    let p = m.params().bind(false);
    let frames = randn(&[1, 3, 4, 4], 4);
    let actions = [0, 1, 2];
    let opts = ForwardOpts::default();
    let c = |f: &Tensor<f64>| m.encode_contexts(&p, f, &actions, &opts).unwrap().0.value().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-4;
    for _ in 0..3 {
        let coord = rng.random_range(0..frames.numel());
        let j = coord / 16;
        let mut up = frames.clone();
        up.data_mut()[coord] += h;
        let mut dn = frames.clone();
        dn.data_mut()[coord] -= h;
        let (cu, cd) = (c(&up), c(&dn));
        // context i covers rows [16 i, 16 (i + 1)); only i > j may respond
        let rows = (j + 1) * 4 * 16;
        let fd: Vec<f64> = cu.data()[..rows]
            .iter()
            .zip(&cd.data()[..rows])
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect();
        assert!(
            fd.iter().all(|&d| d == 0.0),
            "frame {j} leaks into its own or earlier contexts"
        );
        if j < 2 {
            assert!(cu.data()[rows..].iter().zip(&cd.data()[rows..]).any(|(a, b)| a != b));
        }
    }
}

#[test]
fn kv_cache_matches_full_prefix_at_f64() {
    let g = geom(4, 4, 1, 2);
    let inc = rcfg(4, 5);
    let full = RolloutConfig {
        encode: EncodeMode::FullPrefix,
        ..inc.clone()
    };
    for mc in [
        ModelConfig::Scd(scd_cfg(2, 2, 16, 2, g)),
        ModelConfig::CausalDit(dit_cfg(3, 16, 2, g)),
    ] {
        let mut m = Model::<f64>::new(&mc, 0).unwrap();
        jitter(m.params_mut(), 0.1, 6);
        let p = m.params().bind(false);
        let a = rollout(&m, &p, &[0, 1, 2, 3], None, &inc).unwrap().frames;
        let b = rollout(&m, &p, &[0, 1, 2, 3], None, &full).unwrap().frames;
        assert!(a.max_abs_diff(&b) < 1e-10, "{:?}: {}", mc.family(), a.max_abs_diff(&b));
    }
}

#[test]
fn untrained_stack_is_identity_plus_output_head() {
    let g = geom(4, 4, 1, 2);
    let m = CausalDit::<f32>::new(dit_cfg(4, 16, 2, g), 0).unwrap();
    let p = m.params().bind(false);
    let xt = randn(&[1, 2, 4, 4], 7).cast::<f32>();
    let (v, caps) = m
        .forward_df(&p, &xt, &[0.3, 0.6], &[0, 1], &ForwardOpts::capturing(false))
        .unwrap();
    assert_eq!(caps.len(), 4);
    for c in &caps[1..] {
        assert!(
            c.features.bitwise_eq(&caps[0].features),
            "layer {} changed its input",
            c.layer
        );
    }
    let id = |n: &str| m.params().id(n).unwrap();
    let head = Var::constant(caps[0].features.clone())
        .layer_norm()
        .unwrap()
        .linear(p.get(id("final.head.w")), p.get(id("final.head.b")))
        .unwrap();
    assert!(v.value().max_abs_diff(head.value()) < 1e-6);
}

#[test]
fn decoder_frames_are_independent() {
    let mut m = ScdModel::<f32>::new(scd_cfg(2, 2, 16, 2, geom(4, 4, 1, 2)), 0).unwrap();
    jitter(m.params_mut(), 0.1, 8);
    let p = m.params().bind(false);
    let xt = randn(&[12, 4], 9).cast::<f32>();
    let c = randn(&[12, 16], 10).cast::<f32>();
    let ts = [0.2, 0.5, 0.8];
    let opts = ForwardOpts::default();
    let decode = |x: &Tensor<f32>, c: &Tensor<f32>, ts: &[f64]| {
        m.decode_velocity(&p, &Var::constant(x.clone()), ts, &Var::constant(c.clone()), &opts)
            .unwrap()
            .0
            .value()
            .clone()
    };
    let batched = decode(&xt, &c, &ts);
    for (f, &t) in ts.iter().enumerate() {
        let one = decode(&xt.rows(4 * f, 4).unwrap(), &c.rows(4 * f, 4).unwrap(), &[t]);
        assert!(one.max_abs_diff(&batched.rows(4 * f, 4).unwrap()) < 1e-6);
    }
    let order = [2, 0, 1];
    let perm = |t: &Tensor<f32>| {
        let parts: Vec<Tensor<f32>> = order.iter().map(|&f| t.rows(4 * f, 4).unwrap()).collect();
        Tensor::cat_rows(&parts.iter().collect::<Vec<_>>()).unwrap()
    };
    let permuted = decode(&perm(&xt), &perm(&c), &order.map(|f| ts[f]));
    assert!(permuted.max_abs_diff(&perm(&batched)) < 1e-6);
}

#[test]
fn cross_frame_gradients_flow_only_through_context() {
    let mut m = ScdModel::<f64>::new(scd_cfg(2, 2, 16, 2, geom(4, 4, 1, 2)), 0).unwrap();
    jitter(m.params_mut(), 0.3, 11);
    let p = m.params().bind(false);
    let xt = Var::leaf(randn(&[12, 4], 12), true);
    let c = Var::constant(randn(&[12, 16], 13));
    let (v, _) = m
        .decode_velocity(&p, &xt, &[0.3, 0.6, 0.9], &c, &ForwardOpts::default())
        .unwrap();
    v.slice(0, 4, 4).unwrap().sum_sq().unwrap().backward().unwrap();
    let g = xt.grad().unwrap();
    for f in 0..3 {
        let zero = g.rows(4 * f, 4).unwrap().data().iter().all(|&x| x == 0.0);
        assert_eq!(zero, f != 1, "frame {f}");
    }
}

#[test]
fn full_skip_schedule_is_bitwise_unmodified() {
    let g = geom(4, 4, 1, 2);
    let mut base = dit_cfg(4, 16, 2, g);
    let mut m = Model::<f32>::new(&ModelConfig::CausalDit(base.clone()), 0).unwrap();
    jitter(m.params_mut(), 0.1, 14);
    let params = m.params().tensors().to_vec();
    let a = rollout(&m, &m.params().bind(false), &[0, 1, 2], None, &rcfg(3, 6))
        .unwrap()
        .frames;
    base.skip_schedule = Some(SkipSchedule::from([0, 4, 0]));
    let mut s = Model::<f32>::new(&ModelConfig::CausalDit(base), 0).unwrap();
    s.params_mut().load(params).unwrap();
    let b = rollout(&s, &s.params().bind(false), &[0, 1, 2], None, &rcfg(3, 6))
        .unwrap()
        .frames;
    assert!(a.bitwise_eq(&b));
}

#[test]
fn skipping_identity_layers_changes_nothing_at_init() {
    let g = geom(4, 4, 1, 2);
    let mut cfg = dit_cfg(6, 16, 2, g);
    let full = Model::<f32>::new(&ModelConfig::CausalDit(cfg.clone()), 0).unwrap();
    let a = rollout(&full, &full.params().bind(false), &[0, 1, 2], None, &rcfg(3, 6)).unwrap();
    cfg.skip_schedule = Some(SkipSchedule::from([2, 1, 2]));
    let skip = Model::<f32>::new(&ModelConfig::CausalDit(cfg), 0).unwrap();
    let b = rollout(&skip, &skip.params().bind(false), &[0, 1, 2], None, &rcfg(3, 6)).unwrap();
    assert!(a.frames.bitwise_eq(&b.frames));
    assert!(b.block_invocations < a.block_invocations);
}

#[test]
fn all_diagonal_layers_have_zero_cross_frame_mass() {
    let g = geom(4, 4, 1, 2);
    let mut cfg = dit_cfg(3, 16, 2, g);
    cfg.deep_diagonal = 3;
    let mut m = Model::<f32>::new(&ModelConfig::CausalDit(cfg), 0).unwrap();
    jitter(m.params_mut(), 0.1, 15);
    let rc = RolloutConfig {
        capture: Some(CaptureSpec {
            layers: None,
            attn: true,
        }),
        ..rcfg(3, 3)
    };
    let trace = rollout(&m, &m.params().bind(false), &[0, 1, 2], None, &rc)
        .unwrap()
        .trace
        .unwrap();
    assert_eq!(trace.attn_layers(), vec![0, 1, 2]);
    for l in 0..3 {
        for f in 0..3 {
            for h in 0..2 {
                assert_eq!(cross_frame_attention_mass(&trace, l, h, f).unwrap(), 0.0);
            }
        }
    }
}

#[test]
fn baseline_attention_mass_is_cross_plus_intra() {
    let g = geom(4, 4, 1, 2);
    let mut m = Model::<f32>::new(&ModelConfig::CausalDit(dit_cfg(2, 16, 2, g)), 0).unwrap();
    jitter(m.params_mut(), 0.1, 16);
    let rc = RolloutConfig {
        capture: Some(CaptureSpec {
            layers: None,
            attn: true,
        }),
        ..rcfg(3, 3)
    };
    let trace = rollout(&m, &m.params().bind(false), &[0, 1, 2], None, &rc)
        .unwrap()
        .trace
        .unwrap();
    for l in trace.attn_layers() {
        for f in 0..3 {
            for h in 0..2 {
                let s = attention_mass_split(&trace, l, h, f).unwrap();
                assert!((s.cross + s.intra - 1.0).abs() <= 1e-6);
                assert_eq!(s.other, 0.0);
                if f > 0 {
                    assert!(s.cross > 0.0);
                }
            }
        }
    }
}

#[test]
fn encoder_never_runs_during_denoising() {
    let g = geom(4, 4, 1, 2);
    let m = Model::<f32>::new(&ModelConfig::Scd(scd_cfg(3, 2, 16, 2, g)), 0).unwrap();
    let p = m.params().bind(false);
    let count = |s| {
        rollout(&m, &p, &[0, 1, 2, 3], None, &rcfg(4, s))
            .unwrap()
            .block_invocations
    };
    let (one, five) = (count(1), count(5));
    // four extra steps on four frames, decoder blocks only
    assert_eq!(five - one, 4 * 4 * 2);
    assert_eq!(one, 4 * 3 + 4 * 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn unit_guidance_is_a_fixed_point(eta in 0.0f64..3.0, seed in 0u64..100) {
        let g = geom(4, 4, 1, 2);
        let mut m = Model::<f32>::new(&ModelConfig::Scd(scd_cfg(1, 1, 16, 2, g)), 0).unwrap();
        jitter(m.params_mut(), 0.1, seed);
        let p = m.params().bind(false);
        let plain = rollout(&m, &p, &[0, 1], None, &rcfg(2, 3)).unwrap().frames;
        let guided_cfg = RolloutConfig {
            corruption: CorruptionConfig { cfg_scale: 1.0, cfg_eta: eta },
            ..rcfg(2, 3)
        };
        let guided = rollout(&m, &p, &[0, 1], None, &guided_cfg).unwrap().frames;
        prop_assert!(guided.bitwise_eq(&plain));
    }
}

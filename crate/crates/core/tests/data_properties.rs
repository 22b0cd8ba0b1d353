use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use scd_core::data::{
    centroid, detokenize_video, gen_dataset, generate_sequence, patchify, tokenize_video, unpatchify, DataConfig,
    FrameGeom,
};
use scd_core::metrics::ssim;
use scd_core::Tensor;

fn small_cfg() -> DataConfig {
    DataConfig {
        height: 16,
        width: 16,
        sprite_size: 4,
        num_frames: 6,
        ..Default::default()
    }
}

#[test]
fn datasets_are_bitwise_reproducible() {
    let cfg = small_cfg();
    let bytes = |seed| {
        gen_dataset(&cfg, 5, seed)
            .unwrap()
            .to_container()
            .unwrap()
            .to_bytes()
            .unwrap()
    };
    assert_eq!(bytes(3), bytes(3));
    assert_ne!(bytes(3), bytes(4));
}

#[test]
fn generated_videos_survive_tokenization_bitwise() {
    let cfg = DataConfig {
        channels: 3,
        ..small_cfg()
    };
    let ds = gen_dataset(&cfg, 4, 9).unwrap();
    for s in &ds.samples {
        let tokens: Tensor<f32> = tokenize_video(&s.frames, &cfg.geom()).unwrap();
        assert!(detokenize_video(&tokens, &cfg.geom()).unwrap().bitwise_eq(&s.frames));
    }
}

fn geometry() -> impl Strategy<Value = (FrameGeom, Vec<f32>)> {
    (1usize..4, 1usize..4, 1usize..4, 1usize..4).prop_flat_map(|(gh, gw, c, p)| {
        let g = FrameGeom {
            height: gh * p,
            width: gw * p,
            channels: c,
            patch_size: p,
        };
        let n = g.pixels();
        (
            Just(g),
            prop::collection::vec(0u16..=256, n).prop_map(|v| v.into_iter().map(|k| k as f32 / 256.0).collect()),
        )
    })
}

proptest! {
    #[test]
    fn patchify_round_trip((g, px) in geometry()) {
        let frame = Tensor::new(&[g.height, g.width, g.channels], px.clone()).unwrap();
        let tokens = patchify(&frame, &g).unwrap();
        prop_assert_eq!(tokens.shape(), &[g.tokens_per_frame(), g.token_dim()][..]);
        prop_assert!(unpatchify(&tokens, &g).unwrap().bitwise_eq(&frame));
        let video = frame.reshape(&[1, g.height, g.width, g.channels]).unwrap();
        let back = detokenize_video(&tokenize_video(&video, &g).unwrap(), &g).unwrap();
        prop_assert!(back.bitwise_eq(&video));
    }
}

#[test]
fn ssim_is_one_on_identity_and_falls_with_noise() {
    let cfg = DataConfig {
        height: 24,
        width: 24,
        num_frames: 1,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let sigmas = [0.01, 0.05, 0.1];
    let mut means = [0.0; 3];
    for i in 0..50 {
        let img = generate_sequence(&cfg, i, None)
            .unwrap()
            .frames
            .reshape(&[24, 24, 1])
            .unwrap();
        assert_eq!(ssim(&img, &img).unwrap(), 1.0);
        for (k, &s) in sigmas.iter().enumerate() {
            let normal = Normal::new(0.0, s).unwrap();
            let px: Vec<f32> = img
                .data()
                .iter()
                .map(|&v| (v + normal.sample(&mut rng) as f32).clamp(0.0, 1.0))
                .collect();
            let noisy = Tensor::new(img.shape(), px).unwrap();
            means[k] += ssim(&img, &noisy).unwrap() / 50.0;
        }
    }
    assert!(means[0] > means[1] && means[1] > means[2], "{means:?}");
}

#[test]
fn actions_move_the_controlled_sprite() {
    let cfg = DataConfig {
        height: 32,
        width: 32,
        num_frames: 2,
        num_sprites: 1,
        max_speed: 0.0,
        num_actions: 5,
        ..Default::default()
    };
    let g = cfg.geom();
    let px = g.pixels();
    // joint counts of (action, quantized centroid shift)
    let mut joint = [[0.0f64; 5]; 5];
    let n = 400;
    for i in 0..n {
        let a = i % 5;
        let s = generate_sequence(&cfg, i as u64, Some(&[0, a])).unwrap();
        let (x0, y0) = centroid(&s.frames.data()[..px], &g);
        let (x1, y1) = centroid(&s.frames.data()[px..], &g);
        let (dx, dy) = (x1 - x0, y1 - y0);
        let bin = if dx.abs() < 0.5 && dy.abs() < 0.5 {
            0
        } else if dx.abs() >= dy.abs() {
            if dx > 0.0 {
                1
            } else {
                2
            }
        } else if dy < 0.0 {
            3
        } else {
            4
        };
        joint[a][bin] += 1.0 / n as f64;
    }
    let pa: Vec<f64> = (0..5).map(|a| joint[a].iter().sum()).collect();
    let pb: Vec<f64> = (0..5).map(|b| (0..5).map(|a| joint[a][b]).sum()).collect();
    let mut mi = 0.0;
    for a in 0..5 {
        for b in 0..5 {
            if joint[a][b] > 0.0 {
                mi += joint[a][b] * (joint[a][b] / (pa[a] * pb[b])).ln();
            }
        }
    }
    assert!(mi > 0.5, "mutual information {mi}");
    for a in 0..5 {
        assert!(joint[a][a] > 0.7 * pa[a], "action {a}: {:?}", joint[a]);
    }
}

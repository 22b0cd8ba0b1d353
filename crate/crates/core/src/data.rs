//! Synthetic action-conditioned sprite videos and patch tokenization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Frame shape and patch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameGeom {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch_size: usize,
}

impl FrameGeom {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::config("data.height", "frame dimensions must be positive"));
        }
        if p == 0 || !self.height.is_multiple_of(p) || !self.width.is_multiple_of(p) {
            return Err(Error::config(
                "data.patch_size",
                format!(
                    "patch size {p} must divide height {} and width {}",
                    self.height, self.width
                ),
            ));
        }
        Ok(())
    }

    pub fn grid_h(&self) -> usize {
        self.height / self.patch_size
    }

    pub fn grid_w(&self) -> usize {
        self.width / self.patch_size
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn token_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// `[H, W, C]` pixels to `[tokens, p * p * C]`, tokens in row-major patch
/// order and each token ordered `(dy, dx, c)`.
pub fn patchify<T: Scalar>(frame: &Tensor<T>, geom: &FrameGeom) -> Result<Tensor<T>> {
    geom.validate()?;
    let want = [geom.height, geom.width, geom.channels];
    if frame.shape() != want {
        return Err(Error::Shape {
            op: "patchify",
            lhs: frame.shape().to_vec(),
            rhs: want.to_vec(),
        });
    }
    let (p, c, w) = (geom.patch_size, geom.channels, geom.width);
    let src = frame.data();
    let mut out = Vec::with_capacity(src.len());
    for gy in 0..geom.grid_h() {
        for gx in 0..geom.grid_w() {
            for dy in 0..p {
                let row = ((gy * p + dy) * w + gx * p) * c;
                out.extend_from_slice(&src[row..row + p * c]);
            }
        }
    }
    Tensor::new(&[geom.tokens_per_frame(), geom.token_dim()], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, geom: &FrameGeom) -> Result<Tensor<T>> {
    geom.validate()?;
    let want = [geom.tokens_per_frame(), geom.token_dim()];
    if tokens.shape() != want {
        return Err(Error::Shape {
            op: "unpatchify",
            lhs: tokens.shape().to_vec(),
            rhs: want.to_vec(),
        });
    }
    let (p, c, w) = (geom.patch_size, geom.channels, geom.width);
    let src = tokens.data();
    let mut out = vec![T::zero(); geom.pixels()];
    let mut i = 0;
    for gy in 0..geom.grid_h() {
        for gx in 0..geom.grid_w() {
            for dy in 0..p {
                let row = ((gy * p + dy) * w + gx * p) * c;
                out[row..row + p * c].copy_from_slice(&src[i..i + p * c]);
                i += p * c;
            }
        }
    }
    Tensor::new(&[geom.height, geom.width, geom.channels], out)
}

/// Pixel `[0, 1]` to model range `[-1, 1]`.
pub fn normalize<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let h = T::from_f64(0.5);
    x.map(|v| (v - h) / h)
}

pub fn denormalize<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let h = T::from_f64(0.5);
    x.map(|v| v * h + h)
}

/// Frames `[N, H, W, C]` in pixel range to normalized tokens `[N, P, D]`.
pub fn tokenize_video<T: Scalar>(frames: &Tensor<T>, geom: &FrameGeom) -> Result<Tensor<T>> {
    let n = frames.shape().first().copied().unwrap_or(0);
    let per = frames.reshape(&[n, geom.pixels()])?;
    let mut parts = Vec::with_capacity(n);
    for i in 0..n {
        let f = per.rows(i, 1)?.reshape(&[geom.height, geom.width, geom.channels])?;
        parts.push(normalize(&patchify(&f, geom)?).reshape(&[1, geom.tokens_per_frame() * geom.token_dim()])?);
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Tensor::cat_rows(&refs)?.reshape(&[n, geom.tokens_per_frame(), geom.token_dim()])
}

/// Tokens `[N, P, D]` back to pixel frames `[N, H, W, C]`, clamped to `[0, 1]`.
pub fn detokenize_video<T: Scalar>(tokens: &Tensor<T>, geom: &FrameGeom) -> Result<Tensor<T>> {
    let n = tokens.shape().first().copied().unwrap_or(0);
    let per = tokens.reshape(&[n, geom.tokens_per_frame() * geom.token_dim()])?;
    let mut out = Vec::with_capacity(n * geom.pixels());
    for i in 0..n {
        let t = per.rows(i, 1)?.reshape(&[geom.tokens_per_frame(), geom.token_dim()])?;
        let f = unpatchify(&denormalize(&t), geom)?;
        out.extend(f.data().iter().map(|&v| v.max(T::zero()).min(T::one())));
    }
    Tensor::new(&[n, geom.height, geom.width, geom.channels], out)
}

/// Action symbols: 0 none, 1 right, 2 left, 3 up, 4 down.
pub const ACTION_DIRS: [(f64, f64); 5] = [(0.0, 0.0), (1.0, 0.0), (-1.0, 0.0), (0.0, -1.0), (0.0, 1.0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub num_frames: usize,
    pub num_sequences: usize,
    pub num_sprites: usize,
    pub sprite_size: usize,
    pub max_speed: f64,
    pub action_step: f64,
    pub num_actions: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            height: 32,
            width: 32,
            channels: 1,
            patch_size: 4,
            num_frames: 16,
            num_sequences: 64,
            num_sprites: 2,
            sprite_size: 6,
            max_speed: 1.5,
            action_step: 2.0,
            num_actions: 4,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn geom(&self) -> FrameGeom {
        FrameGeom {
            height: self.height,
            width: self.width,
            channels: self.channels,
            patch_size: self.patch_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geom().validate()?;
        if self.num_frames == 0 {
            return Err(Error::config("data.num_frames", "must be >= 1"));
        }
        if self.num_sprites == 0 {
            return Err(Error::config("data.num_sprites", "must be >= 1"));
        }
        if self.sprite_size == 0 || self.sprite_size > self.height.min(self.width) {
            return Err(Error::config("data.sprite_size", "must fit inside the frame"));
        }
        if !(1..=ACTION_DIRS.len()).contains(&self.num_actions) {
            return Err(Error::config(
                "data.num_actions",
                format!("must be in 1..={}", ACTION_DIRS.len()),
            ));
        }
        if !(self.max_speed >= 0.0) || !(self.action_step >= 0.0) {
            return Err(Error::config("data.max_speed", "speeds must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Sprite {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    color: Vec<f64>,
}

/// One rendered video with its actions.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// `[N, H, W, C]` in `[0, 1]`.
    pub frames: Tensor<f32>,
    /// `actions[i]` drives the transition into frame `i`; `actions[0]` has no effect on pixels.
    pub actions: Vec<usize>,
    pub seed: u64,
}

fn reflect(p: &mut f64, v: &mut f64, hi: f64) {
    if hi <= 0.0 {
        *p = 0.0;
        return;
    }
    loop {
        if *p < 0.0 {
            *p = -*p;
            *v = -*v;
        } else if *p > hi {
            *p = 2.0 * hi - *p;
            *v = -*v;
        } else {
            break;
        }
    }
}

fn render(cfg: &DataConfig, sprites: &[Sprite], out: &mut Vec<f32>) {
    let (h, w, c, s) = (cfg.height, cfg.width, cfg.channels, cfg.sprite_size);
    let start = out.len();
    out.resize(start + h * w * c, 0.0);
    let img = &mut out[start..];
    for sp in sprites {
        let x0 = (sp.x + 0.5).floor() as usize;
        let y0 = (sp.y + 0.5).floor() as usize;
        for y in y0..(y0 + s).min(h) {
            for x in x0..(x0 + s).min(w) {
                for ch in 0..c {
                    let px = &mut img[(y * w + x) * c + ch];
                    *px = px.max(sp.color[ch] as f32);
                }
            }
        }
    }
}

/// Render one sequence. Initial state comes from `seed`; actions are drawn
/// from it too unless given.
pub fn generate_sequence(cfg: &DataConfig, seed: u64, actions: Option<&[usize]>) -> Result<SyntheticSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (max_x, max_y) = (
        (cfg.width - cfg.sprite_size) as f64,
        (cfg.height - cfg.sprite_size) as f64,
    );
    let mut sprites: Vec<Sprite> = (0..cfg.num_sprites)
        .map(|i| {
            let color = (0..cfg.channels)
                .map(|_| if i == 0 { 1.0 } else { rng.random_range(0.3..0.7) })
                .collect();
            Sprite {
                x: rng.random_range(0.0..=max_x),
                y: rng.random_range(0.0..=max_y),
                vx: rng.random_range(-1.0..=1.0) * cfg.max_speed,
                vy: rng.random_range(-1.0..=1.0) * cfg.max_speed,
                color,
            }
        })
        .collect();
    let actions: Vec<usize> = match actions {
        Some(a) => {
            if a.len() != cfg.num_frames {
                return Err(Error::invalid(
                    "generate_sequence",
                    format!("{} actions for {} frames", a.len(), cfg.num_frames),
                ));
            }
            if let Some(&bad) = a.iter().find(|&&x| x >= cfg.num_actions) {
                return Err(Error::invalid(
                    "generate_sequence",
                    format!("action {bad} out of range"),
                ));
            }
            a.to_vec()
        }
        None => (0..cfg.num_frames)
            .map(|_| rng.random_range(0..cfg.num_actions))
            .collect(),
    };
    let mut data = Vec::with_capacity(cfg.num_frames * cfg.height * cfg.width * cfg.channels);
    for (i, &a) in actions.iter().enumerate() {
        if i > 0 {
            for (j, sp) in sprites.iter_mut().enumerate() {
                sp.x += sp.vx;
                sp.y += sp.vy;
                if j == 0 {
                    let (dx, dy) = ACTION_DIRS[a];
                    sp.x += dx * cfg.action_step;
                    sp.y += dy * cfg.action_step;
                }
                reflect(&mut sp.x, &mut sp.vx, max_x);
                reflect(&mut sp.y, &mut sp.vy, max_y);
            }
        }
        render(cfg, &sprites, &mut data);
    }
    Ok(SyntheticSample {
        frames: Tensor::new(&[cfg.num_frames, cfg.height, cfg.width, cfg.channels], data)?,
        actions,
        seed,
    })
}

/// Seed of sequence `index` under dataset seed `seed`.
pub fn sequence_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.random()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub samples: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Normalized tokens `[N, P, D]` of sequence `i`.
    pub fn tokens<T: Scalar>(&self, i: usize) -> Result<Tensor<T>> {
        tokenize_video(&self.samples[i].frames.cast::<T>(), &self.config.geom())
    }
}

impl Dataset {
    /// Frames stacked as `[S, N, H, W, C]`; actions and seeds go in the header.
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new("dataset", serde_json::to_value(&self.config)?);
        let cfg = &self.config;
        let mut frames = Vec::with_capacity(self.len() * cfg.num_frames * cfg.height * cfg.width * cfg.channels);
        for s in &self.samples {
            frames.extend_from_slice(s.frames.data());
        }
        let shape = [self.len(), cfg.num_frames, cfg.height, cfg.width, cfg.channels];
        c.push("frames", &Tensor::new(&shape, frames)?);
        c.meta = serde_json::json!({
            "actions": self.samples.iter().map(|s| &s.actions).collect::<Vec<_>>(),
            "seeds": self.samples.iter().map(|s| s.seed).collect::<Vec<_>>(),
        });
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("dataset")?;
        let config: DataConfig = serde_json::from_value(c.config.clone())?;
        config.validate()?;
        let frames = c.get("frames")?.to::<f32>();
        let actions: Vec<Vec<usize>> = serde_json::from_value(c.meta["actions"].clone())?;
        let seeds: Vec<u64> = serde_json::from_value(c.meta["seeds"].clone())?;
        let per = [config.num_frames, config.height, config.width, config.channels];
        let n = actions.len();
        if seeds.len() != n || frames.shape() != [&[n][..], &per[..]].concat().as_slice() {
            return Err(Error::Format(format!(
                "dataset frames {:?} do not match {n} sequences of {per:?}",
                frames.shape()
            )));
        }
        let stride: usize = per.iter().product();
        let samples = actions
            .into_iter()
            .zip(seeds)
            .enumerate()
            .map(|(i, (actions, seed))| {
                if actions.len() != config.num_frames {
                    return Err(Error::Format(format!("sequence {i} has {} actions", actions.len())));
                }
                let data = frames.data()[i * stride..(i + 1) * stride].to_vec();
                Ok(SyntheticSample {
                    frames: Tensor::new(&per, data)?,
                    actions,
                    seed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { config, samples })
    }
}

pub fn gen_dataset(cfg: &DataConfig, num_sequences: usize, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let samples = (0..num_sequences)
        .map(|i| generate_sequence(cfg, sequence_seed(seed, i), None))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: cfg.clone(),
        samples,
    })
}

/// Intensity-weighted centroid `(x, y)` of channel 0 of one `[H, W, C]` frame.
pub fn centroid(frame: &[f32], geom: &FrameGeom) -> (f64, f64) {
    let (mut sx, mut sy, mut m) = (0.0, 0.0, 0.0);
    for y in 0..geom.height {
        for x in 0..geom.width {
            let v = frame[(y * geom.width + x) * geom.channels] as f64;
            sx += v * x as f64;
            sy += v * y as f64;
            m += v;
        }
    }
    if m == 0.0 {
        (0.0, 0.0)
    } else {
        (sx / m, sy / m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(h: usize, w: usize, c: usize, p: usize) -> FrameGeom {
        FrameGeom {
            height: h,
            width: w,
            channels: c,
            patch_size: p,
        }
    }

    #[test]
    fn dataset_container_round_trip() {
        let cfg = DataConfig {
            height: 8,
            width: 8,
            sprite_size: 2,
            num_frames: 3,
            ..Default::default()
        };
        let ds = gen_dataset(&cfg, 3, 5).unwrap();
        let bytes = ds.to_container().unwrap().to_bytes().unwrap();
        let back = Dataset::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn degenerate_patch_is_one_token() {
        let g = geom(4, 4, 2, 4);
        let f = Tensor::<f32>::from_fn(&[4, 4, 2], |i| i as f32);
        let t = patchify(&f, &g).unwrap();
        assert_eq!(t.shape(), &[1, 32]);
        assert_eq!(t.data(), f.data());
    }

    #[test]
    fn checkerboard_layout() {
        let g = geom(4, 4, 1, 2);
        let f = Tensor::<f32>::from_fn(&[4, 4, 1], |i| ((i / 4 + i % 4) % 2) as f32);
        let t = patchify(&f, &g).unwrap();
        assert_eq!(t.shape(), &[4, 4]);
        for tok in t.data().chunks(4) {
            assert_eq!(tok, &[0.0, 1.0, 1.0, 0.0]);
        }
        let f = Tensor::<f32>::from_fn(&[4, 4, 1], |i| i as f32);
        let t = patchify(&f, &g).unwrap();
        assert_eq!(&t.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn bad_patch_size_names_key() {
        let e = geom(30, 32, 1, 4).validate().unwrap_err().to_string();
        assert!(e.contains("data.patch_size"), "{e}");
    }

    #[test]
    fn static_world_is_constant() {
        let cfg = DataConfig {
            max_speed: 0.0,
            num_frames: 5,
            ..DataConfig::default()
        };
        let s = generate_sequence(&cfg, 3, Some(&[0; 5])).unwrap();
        let per = cfg.height * cfg.width;
        let d = s.frames.data();
        for i in 1..5 {
            assert_eq!(&d[i * per..(i + 1) * per], &d[..per]);
        }
    }
}

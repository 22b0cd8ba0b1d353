//! Pixel-space image quality metrics on `[H, W, C]` frames in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 99.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_pair(op: &'static str, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if a.ndim() != 3 {
        return Err(Error::invalid(op, format!("expected [H, W, C], got {:?}", a.shape())));
    }
    for t in [a, b] {
        if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(op, format!("pixel {v} outside [0, 1]")));
        }
    }
    Ok(())
}

/// `10 log10(1 / mse)`, capped at 99 dB.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_pair("psnr", a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over all valid Gaussian windows and channels. The window is
/// 11x11 (sigma 1.5), shrunk to the smaller image side when needed.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_pair("ssim", a, b)?;
    let (h, w, ch) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let size = SSIM_WINDOW.min(h).min(w);
    let g = gaussian_window(size);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..ch {
        for y0 in 0..=h - size {
            for x0 in 0..=w - size {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (dy, &gy) in g.iter().enumerate() {
                    for (dx, &gx) in g.iter().enumerate() {
                        let wt = gy * gx;
                        let i = ((y0 + dy) * w + x0 + dx) * ch + c;
                        let (x, y) = (ad[i] as f64, bd[i] as f64);
                        mx += wt * x;
                        my += wt * y;
                        xx += wt * x * x;
                        yy += wt * y * y;
                        xy += wt * x * y;
                    }
                }
                let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                let num = (2.0 * mx * my + c1) * (2.0 * cxy + c2);
                let den = (mx * mx + my * my + c1) * (vx + vy + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// One row of a per-frame quality table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameScore {
    pub seq_id: usize,
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Score each frame of two `[N, H, W, C]` videos.
pub fn score_video(seq_id: usize, reference: &Tensor<f32>, generated: &Tensor<f32>) -> Result<Vec<FrameScore>> {
    if reference.shape() != generated.shape() || reference.ndim() != 4 {
        return Err(Error::Shape {
            op: "score_video",
            lhs: reference.shape().to_vec(),
            rhs: generated.shape().to_vec(),
        });
    }
    let per = &reference.shape()[1..];
    (0..reference.shape()[0])
        .map(|f| {
            let a = reference.rows(f, 1)?.reshape(per)?;
            let b = generated.rows(f, 1)?.reshape(per)?;
            Ok(FrameScore {
                seq_id,
                frame: f,
                psnr: psnr(&a, &b)?,
                ssim: ssim(&a, &b)?,
            })
        })
        .collect()
}

pub fn scores_csv(rows: &[FrameScore]) -> String {
    let mut out = String::from("seq_id,frame,psnr,ssim\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.seq_id, r.frame, r.psnr, r.ssim));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: f32) -> Tensor<f32> {
        Tensor::full(&[16, 16, 1], v)
    }

    #[test]
    fn identical_images() {
        let a = Tensor::<f32>::from_fn(&[16, 16, 2], |i| ((i * 37) % 101) as f32 / 100.0);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn black_vs_white_is_zero_db() {
        assert_eq!(psnr(&img(0.0), &img(1.0)).unwrap(), 0.0);
    }

    #[test]
    fn psnr_is_symmetric() {
        let a = Tensor::<f32>::from_fn(&[8, 8, 1], |i| (i % 7) as f32 / 7.0);
        let b = Tensor::<f32>::from_fn(&[8, 8, 1], |i| (i % 5) as f32 / 5.0);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn rejects_out_of_range_and_shape() {
        assert!(psnr(&img(1.5), &img(1.0)).is_err());
        assert!(ssim(&img(0.5), &Tensor::full(&[8, 8, 1], 0.5)).is_err());
    }

    #[test]
    fn small_images_shrink_window() {
        let a = Tensor::<f32>::from_fn(&[4, 6, 1], |i| (i % 3) as f32 / 3.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn score_video_rows() {
        let a = Tensor::<f32>::from_fn(&[2, 4, 4, 1], |i| (i % 7) as f32 / 7.0);
        let rows = score_video(3, &a, &a).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(
            (rows[1].seq_id, rows[1].frame, rows[1].psnr, rows[1].ssim),
            (3, 1, PSNR_CAP_DB, 1.0)
        );
        assert!(scores_csv(&rows).starts_with("seq_id,frame,psnr,ssim\n3,0,99,1\n"));
    }
}

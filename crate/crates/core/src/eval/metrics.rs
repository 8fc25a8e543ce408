//! Foreground/background splitting and pixel metrics.

use ndarray::{s, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::scorer::{ImageTextScorer, PerceptualMetric};
use crate::bboxgen::BBox;
use crate::error::{Result, SwapError};
use crate::pixels::PixelImage;

/// Declared pixel value range.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelRange {
    /// Values in `[0, 1]`.
    #[default]
    Unit,
    /// Values in `[0, 255]`.
    Byte,
}

impl PixelRange {
    pub fn peak(self) -> f64 {
        match self {
            PixelRange::Unit => 1.0,
            PixelRange::Byte => 255.0,
        }
    }
}

fn ensure_same(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(SwapError::shape(format!(
            "image dims differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if a.is_empty() {
        return Err(SwapError::shape("empty image"));
    }
    Ok(())
}

/// Crop of the bbox region and a copy of the image with that region zeroed.
/// The bbox is given in pixel coordinates.
pub fn split_fg_bg(image: &PixelImage, gt_bbox: &BBox) -> Result<(PixelImage, PixelImage)> {
    gt_bbox.ensure_grid((image.height(), image.width()), "ground-truth bbox")?;
    let rows = gt_bbox.row_min..=gt_bbox.row_max;
    let cols = gt_bbox.col_min..=gt_bbox.col_max;
    let fg = image.values().slice(s![rows.clone(), cols.clone(), ..]).to_owned();
    let mut bg = image.values().clone();
    bg.slice_mut(s![rows, cols, ..]).fill(0.0);
    Ok((PixelImage::new(fg), PixelImage::new(bg)))
}

pub fn mse(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    ensure_same(a, b)?;
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// `10 log10(peak² / mse)`; identical images give `+inf`.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub fn psnr(a: &Array3<f64>, b: &Array3<f64>, peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, peak))
}

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_WINDOW: usize = 7;

/// Mean structural similarity with a uniform 7×7 window over fully contained
/// windows, sample covariances, and the mean over channels. Images smaller
/// than 7 pixels on a side use the largest odd window that fits.
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>, peak: f64) -> Result<f64> {
    ensure_same(a, b)?;
    let (h, w, c) = a.dim();
    let mut win = SSIM_WINDOW.min(h).min(w);
    if win % 2 == 0 {
        win -= 1;
    }
    if win < 2 {
        return Err(SwapError::shape(format!("image {h}x{w} too small for ssim")));
    }
    let total: f64 = (0..c)
        .map(|ch| {
            ssim_channel(
                a.index_axis(Axis(2), ch),
                b.index_axis(Axis(2), ch),
                win,
                peak,
            )
        })
        .sum();
    Ok(total / c as f64)
}

fn ssim_channel(a: ArrayView2<f64>, b: ArrayView2<f64>, win: usize, peak: f64) -> f64 {
    let (h, w) = a.dim();
    let np = (win * win) as f64;
    let cov_norm = np / (np - 1.0);
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let mut acc = 0.0;
    let mut count = 0usize;
    for i in 0..=h - win {
        for j in 0..=w - win {
            let wa = a.slice(s![i..i + win, j..j + win]);
            let wb = b.slice(s![i..i + win, j..j + win]);
            let ux = wa.sum() / np;
            let uy = wb.sum() / np;
            let uxx = wa.iter().map(|v| v * v).sum::<f64>() / np;
            let uyy = wb.iter().map(|v| v * v).sum::<f64>() / np;
            let uxy = wa.iter().zip(wb.iter()).map(|(x, y)| x * y).sum::<f64>() / np;
            let vx = cov_norm * (uxx - ux * ux);
            let vy = cov_norm * (uyy - uy * uy);
            let vxy = cov_norm * (uxy - ux * uy);
            acc += ((2.0 * ux * uy + c1) * (2.0 * vxy + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundMetrics {
    #[serde(with = "super::inf_sentinel")]
    pub psnr: f64,
    /// `None` when no perceptual client is configured.
    pub lpips: Option<f64>,
    pub mse: f64,
    pub ssim: f64,
}

/// PSNR, LPIPS, MSE and SSIM between two background images.
pub fn background_metrics(
    a: &PixelImage,
    b: &PixelImage,
    range: PixelRange,
    perceptual: Option<&dyn PerceptualMetric>,
) -> Result<BackgroundMetrics> {
    let peak = range.peak();
    let m = mse(a.values(), b.values())?;
    let lpips = perceptual.map(|p| p.distance(a, b)).transpose()?;
    Ok(BackgroundMetrics {
        psnr: psnr_from_mse(m, peak),
        lpips,
        mse: m,
        ssim: ssim(a.values(), b.values(), peak)?,
    })
}

/// Zeroes `bbox` in both images and compares what is left.
pub fn masked_background_metrics(
    source: &PixelImage,
    generated: &PixelImage,
    gt_bbox: &BBox,
    range: PixelRange,
    perceptual: Option<&dyn PerceptualMetric>,
) -> Result<BackgroundMetrics> {
    let (_, bg_a) = split_fg_bg(source, gt_bbox)?;
    let (_, bg_b) = split_fg_bg(generated, gt_bbox)?;
    background_metrics(&bg_a, &bg_b, range, perceptual)
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(SwapError::shape(format!(
            "embedding lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

/// `(clip_i, clip_t)`: mean foreground-to-concept image similarity and
/// whole-image-to-prompt similarity, both ×100.
pub fn clip_scores(
    generated: &PixelImage,
    concept_images: &[PixelImage],
    target_prompt: &str,
    fg_bbox: &BBox,
    scorer: Option<&dyn ImageTextScorer>,
) -> Result<(f64, f64)> {
    let scorer = scorer.ok_or(SwapError::ScorerUnavailable)?;
    if concept_images.is_empty() {
        return Err(SwapError::param("concept image set is empty"));
    }
    let (fg, _) = split_fg_bg(generated, fg_bbox)?;
    let fg_emb = scorer.embed_image(&fg)?;
    let mut sum = 0.0;
    for img in concept_images {
        sum += cosine(&fg_emb, &scorer.embed_image(img)?)?;
    }
    let clip_i = 100.0 * sum / concept_images.len() as f64;
    let clip_t = 100.0
        * cosine(
            &scorer.embed_image(generated)?,
            &scorer.embed_text(target_prompt)?,
        )?;
    Ok((clip_i, clip_t))
}

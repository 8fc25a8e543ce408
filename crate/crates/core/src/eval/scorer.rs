//! Pluggable embedding clients and deterministic stubs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::backend::prompt_words;
use crate::error::{Result, SwapError};
use crate::pixels::PixelImage;

/// Joint image-text embedding model.
pub trait ImageTextScorer: Send + Sync {
    fn embed_image(&self, image: &PixelImage) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

/// Learned perceptual distance between two images.
pub trait PerceptualMetric: Send + Sync {
    fn distance(&self, a: &PixelImage, b: &PixelImage) -> Result<f64>;
}

/// Area-averages `image` onto a `grid`, channel-major. Cells always cover at
/// least one pixel.
pub fn pool(image: &PixelImage, grid: (usize, usize)) -> Vec<f64> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let span = |i: usize, n: usize, g: usize| {
        let lo = (i * n / g).min(n - 1);
        let hi = ((i + 1) * n / g).max(lo + 1);
        lo..hi
    };
    let v = image.values();
    let mut out = Vec::with_capacity(grid.0 * grid.1 * c);
    for ch in 0..c {
        for gi in 0..grid.0 {
            for gj in 0..grid.1 {
                let (rows, cols) = (span(gi, h, grid.0), span(gj, w, grid.1));
                let n = rows.len() * cols.len();
                let mut sum = 0.0;
                for r in rows {
                    for col in cols.clone() {
                        sum += v[[r, col, ch]];
                    }
                }
                out.push(sum / n as f64);
            }
        }
    }
    out
}

/// Image embedding = pooled pixels; text embedding = sum of per-word seeded
/// Gaussian vectors of the same length.
#[derive(Debug, Clone)]
pub struct StubScorer {
    pub grid: (usize, usize),
    pub channels: usize,
}

impl Default for StubScorer {
    fn default() -> Self {
        Self {
            grid: (4, 4),
            channels: 1,
        }
    }
}

impl StubScorer {
    pub fn new(grid: (usize, usize), channels: usize) -> Self {
        Self { grid, channels }
    }

    fn dim(&self) -> usize {
        self.grid.0 * self.grid.1 * self.channels
    }
}

impl ImageTextScorer for StubScorer {
    fn embed_image(&self, image: &PixelImage) -> Result<Vec<f64>> {
        if image.channels() != self.channels {
            return Err(SwapError::shape(format!(
                "scorer expects {} channels, got {}",
                self.channels,
                image.channels()
            )));
        }
        Ok(pool(image, self.grid))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        for word in prompt_words(text) {
            let digest = Sha256::digest(word.as_bytes());
            let mut seed = [0u8; 32];
            seed.copy_from_slice(&digest);
            let mut rng = ChaCha8Rng::from_seed(seed);
            for v in out.iter_mut() {
                let x: f64 = StandardNormal.sample(&mut rng);
                *v += x;
            }
        }
        Ok(out)
    }
}

/// Mean absolute difference of pooled pixels.
#[derive(Debug, Clone)]
pub struct StubPerceptual {
    pub grid: (usize, usize),
}

impl Default for StubPerceptual {
    fn default() -> Self {
        Self { grid: (8, 8) }
    }
}

impl PerceptualMetric for StubPerceptual {
    fn distance(&self, a: &PixelImage, b: &PixelImage) -> Result<f64> {
        if a.values().dim() != b.values().dim() {
            return Err(SwapError::shape(format!(
                "image dims differ: {:?} vs {:?}",
                a.values().dim(),
                b.values().dim()
            )));
        }
        let (pa, pb) = (pool(a, self.grid), pool(b, self.grid));
        Ok(pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>() / pa.len() as f64)
    }
}

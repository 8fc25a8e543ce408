use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{AttentionRecord, DenoiserBackend, LayerSpec, NoiseSchedule, PassOptions, TextEmbedding};
use crate::error::{Result, SwapError};
use crate::latent::{LatentDims, LatentImage};
use crate::pixels::PixelImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub checkpoint: PathBuf,
    pub image_size: (usize, usize),
    pub latent_channels: usize,
    pub downsample: usize,
    pub token_limit: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::new(),
            image_size: (512, 512),
            latent_channels: 4,
            downsample: 8,
            token_limit: 77,
        }
    }
}

/// Metadata and contract for a weight-backed latent diffusion model
/// (SD 2.1-base layout). Inference runtimes attach behind this type; without
/// one linked, every model call returns a backend error.
pub struct DiffusionAdapter {
    cfg: AdapterConfig,
    dims: LatentDims,
    schedule: NoiseSchedule,
    layers: Vec<LayerSpec>,
}

impl DiffusionAdapter {
    pub fn open(cfg: AdapterConfig) -> Result<Self> {
        let (h, w) = cfg.image_size;
        let f = cfg.downsample;
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(SwapError::param(format!(
                "image {h}x{w} not divisible by downsample {f}"
            )));
        }
        let dims = LatentDims::new(cfg.latent_channels, h / f, w / f);
        let (lh, lw) = dims.grid();
        // down: 2 per level at /1, /2, /4; mid at /8; up: 3 per level at /4, /2, /1
        let levels = [
            ("down", 1, 320, 2),
            ("down", 2, 640, 2),
            ("down", 4, 1280, 2),
            ("mid", 8, 1280, 1),
            ("up", 4, 1280, 3),
            ("up", 2, 640, 3),
            ("up", 1, 320, 3),
        ];
        let mut layers = Vec::new();
        for (name, div, channels, count) in levels {
            for _ in 0..count {
                layers.push(LayerSpec {
                    id: layers.len(),
                    name: format!("{name}/{div}"),
                    grid: (lh.div_ceil(div), lw.div_ceil(div)),
                    channels,
                });
            }
        }
        Ok(Self {
            cfg,
            dims,
            schedule: NoiseSchedule::scaled_linear(1000, 0.00085, 0.012),
            layers,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    pub fn checkpoint_present(&self) -> bool {
        self.cfg.checkpoint.exists()
    }

    fn unavailable<T>(&self) -> Result<T> {
        Err(SwapError::Backend(format!(
            "no inference runtime linked for checkpoint {}",
            self.cfg.checkpoint.display()
        )))
    }
}

impl DenoiserBackend for DiffusionAdapter {
    fn name(&self) -> &str {
        "diffusion-adapter"
    }

    fn latent_dims(&self) -> LatentDims {
        self.dims
    }

    fn image_dims(&self) -> (usize, usize, usize) {
        (self.cfg.image_size.0, self.cfg.image_size.1, 3)
    }

    fn token_limit(&self) -> usize {
        self.cfg.token_limit
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    fn embed_prompt(&self, _prompt: &str) -> Result<TextEmbedding> {
        self.unavailable()
    }

    fn forward(
        &mut self,
        _z_t: &LatentImage,
        _t: usize,
        _cond: &TextEmbedding,
        _pass: PassOptions,
    ) -> Result<(LatentImage, Option<AttentionRecord>)> {
        self.unavailable()
    }

    fn encode_image(&self, image: &PixelImage) -> Result<LatentImage> {
        let (h, w, _) = self.image_dims();
        if !image.height().is_multiple_of(self.cfg.downsample) || !image.width().is_multiple_of(self.cfg.downsample) {
            return Err(SwapError::shape(format!(
                "image {}x{} not divisible by {}",
                image.height(),
                image.width(),
                self.cfg.downsample
            )));
        }
        if (image.height(), image.width()) != (h, w) {
            return Err(SwapError::shape(format!(
                "image {}x{} does not match declared {h}x{w}",
                image.height(),
                image.width()
            )));
        }
        self.unavailable()
    }

    fn decode_latent(&self, z: &LatentImage) -> Result<PixelImage> {
        z.ensure_dims(self.dims, "latent")?;
        self.unavailable()
    }

    fn forward_count(&self) -> u64 {
        0
    }
}

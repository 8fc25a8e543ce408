//! Text-conditioned denoiser abstraction with attention capture and
//! cross-attention hooks.
//!
//! Two implementations live here: [`ToyBackend`], a deterministic closed-form
//! CPU model used by every test, and [`DiffusionAdapter`], the contract a
//! weight-backed latent diffusion model plugs into.

mod adapter;
mod toy;

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::bboxgen::BBox;
use crate::error::{Result, SwapError};
use crate::latent::{LatentDims, LatentImage};
use crate::pixels::PixelImage;

pub use adapter::{AdapterConfig, DiffusionAdapter};
pub use toy::{Plant, SelfAttentionKind, ToyBackend, ToyConfig};

/// Splits a prompt into normalized words: whitespace separated, surrounding
/// punctuation stripped, lowercased.
pub fn prompt_words(prompt: &str) -> Vec<String> {
    prompt
        .split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Token-level text embedding with a word → token index map.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    /// tokens × embed_dim
    pub values: Array2<f64>,
    pub token_spans: BTreeMap<String, Vec<usize>>,
}

impl TextEmbedding {
    pub fn num_tokens(&self) -> usize {
        self.values.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.values.ncols()
    }

    /// Token indices of every word in `phrase`, in order. Fails if any word
    /// of the phrase does not occur in the embedded prompt.
    pub fn phrase_tokens(&self, phrase: &str) -> Result<Vec<usize>> {
        let words = prompt_words(phrase);
        if words.is_empty() {
            return Err(SwapError::Prompt(format!("empty concept phrase {phrase:?}")));
        }
        let mut idx = Vec::new();
        for w in &words {
            match self.token_spans.get(w) {
                Some(span) => idx.extend_from_slice(span),
                None => {
                    return Err(SwapError::Prompt(format!(
                        "concept word {w:?} does not occur in the prompt"
                    )))
                }
            }
        }
        idx.sort_unstable();
        idx.dedup();
        Ok(idx)
    }

    /// Embedding restricted to the given token rows.
    pub fn select_tokens(&self, indices: &[usize]) -> Result<TextEmbedding> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.num_tokens()) {
            return Err(SwapError::shape(format!(
                "token index {bad} out of range for {} tokens",
                self.num_tokens()
            )));
        }
        let values = self.values.select(Axis(0), indices);
        let mut token_spans = BTreeMap::new();
        for (word, span) in &self.token_spans {
            let remapped: Vec<usize> = span
                .iter()
                .filter_map(|t| indices.iter().position(|i| i == t))
                .collect();
            if !remapped.is_empty() {
                token_spans.insert(word.clone(), remapped);
            }
        }
        Ok(TextEmbedding {
            values,
            token_spans,
        })
    }
}

/// Per-timestep signal and noise coefficients: `z_t = alpha_t * z + sigma_t * eps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub alphas: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(alphas: Vec<f64>, sigmas: Vec<f64>) -> Result<Self> {
        if alphas.len() != sigmas.len() || alphas.is_empty() {
            return Err(SwapError::param(format!(
                "schedule needs equal, non-empty alpha/sigma tables (got {} and {})",
                alphas.len(),
                sigmas.len()
            )));
        }
        Ok(Self { alphas, sigmas })
    }

    /// Variance-preserving schedule with `sqrt(beta)` linear in `t`, the
    /// convention of Stable Diffusion checkpoints (`alpha^2 + sigma^2 = 1`).
    pub fn scaled_linear(t_max: usize, beta_start: f64, beta_end: f64) -> Self {
        let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
        let mut cumprod = 1.0;
        let mut alphas = Vec::with_capacity(t_max);
        let mut sigmas = Vec::with_capacity(t_max);
        for i in 0..t_max {
            let frac = if t_max > 1 {
                i as f64 / (t_max - 1) as f64
            } else {
                0.0
            };
            let beta = (a + (b - a) * frac).powi(2);
            cumprod *= 1.0 - beta;
            alphas.push(cumprod.sqrt());
            sigmas.push((1.0 - cumprod).sqrt());
        }
        Self { alphas, sigmas }
    }

    /// Variance-exploding schedule: `alpha_t = 1`, `sigma_t` linear from 0 to `sigma_max`.
    pub fn variance_exploding(t_max: usize, sigma_max: f64) -> Self {
        let denom = t_max.saturating_sub(1).max(1) as f64;
        Self {
            alphas: vec![1.0; t_max],
            sigmas: (0..t_max).map(|t| sigma_max * t as f64 / denom).collect(),
        }
    }

    pub fn t_max(&self) -> usize {
        self.alphas.len()
    }

    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        if t >= self.t_max() {
            return Err(SwapError::Timestep {
                t,
                t_max: self.t_max(),
            });
        }
        Ok((self.alphas[t], self.sigmas[t]))
    }

    pub fn add_noise(&self, z: &LatentImage, t: usize, eps: &LatentImage) -> Result<LatentImage> {
        let (alpha, sigma) = self.coefficients(t)?;
        eps.ensure_dims(z.dims(), "noise")?;
        let mut out = z.values() * alpha;
        out.scaled_add(sigma, eps.values());
        Ok(LatentImage::new(out))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: usize,
    pub name: String,
    /// (height, width) of the layer's spatial grid.
    pub grid: (usize, usize),
    pub channels: usize,
}

impl LayerSpec {
    pub fn positions(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Attention maps captured from one layer during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention {
    pub layer_id: usize,
    pub grid: (usize, usize),
    /// positions × text tokens
    pub cross: Array2<f64>,
    /// positions × positions
    pub self_attn: Array2<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionRecord {
    pub layers: Vec<LayerAttention>,
}

impl AttentionRecord {
    pub fn layer(&self, id: usize) -> Option<&LayerAttention> {
        self.layers.iter().find(|l| l.layer_id == id)
    }

    /// Largest deviation of any attention row sum from 1, across all maps.
    pub fn max_row_sum_error(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| [&l.cross, &l.self_attn])
            .flat_map(|m| m.rows().into_iter().map(|r| (r.sum() - 1.0).abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max)
    }
}

/// Which of the two score-distillation branches a forward pass belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PassOptions {
    pub capture: bool,
    pub branch: Option<Branch>,
}

/// Regional cross-attention replacement for one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct SecrHook {
    pub branch: Branch,
    pub concept: TextEmbedding,
    /// Region on the latent grid; each hooked layer resizes it to its own grid.
    pub bbox: BBox,
    /// Layer ids to hook; `None` hooks every cross-attention layer.
    pub layers: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HookHandle(pub u64);

/// Debug view of an installed hook on one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HookInfo {
    pub handle: HookHandle,
    pub branch: Branch,
    pub layer_id: usize,
    pub bbox: BBox,
}

pub trait DenoiserBackend {
    fn name(&self) -> &str;

    fn latent_dims(&self) -> LatentDims;

    /// (height, width, channels) of images accepted by `encode_image`.
    fn image_dims(&self) -> (usize, usize, usize);

    /// Maximum number of tokens a prompt may occupy, special tokens included.
    fn token_limit(&self) -> usize;

    fn schedule(&self) -> &NoiseSchedule;

    /// Cross-attention layers in forward order.
    fn layers(&self) -> &[LayerSpec];

    fn embed_prompt(&self, prompt: &str) -> Result<TextEmbedding>;

    fn forward(
        &mut self,
        z_t: &LatentImage,
        t: usize,
        cond: &TextEmbedding,
        pass: PassOptions,
    ) -> Result<(LatentImage, Option<AttentionRecord>)>;

    fn encode_image(&self, image: &PixelImage) -> Result<LatentImage>;

    fn decode_latent(&self, z: &LatentImage) -> Result<PixelImage>;

    /// Number of denoiser forward passes run by this instance so far.
    fn forward_count(&self) -> u64;

    fn install_hook(&mut self, _hook: SecrHook) -> Result<HookHandle> {
        Err(SwapError::UnsupportedBackend(format!(
            "cross-attention hooks ({})",
            self.name()
        )))
    }

    /// Removes a hook; returns whether it was installed.
    fn remove_hook(&mut self, _handle: HookHandle) -> bool {
        false
    }

    fn hooks(&self) -> Vec<HookInfo> {
        Vec::new()
    }

    fn predict_noise(
        &mut self,
        z_t: &LatentImage,
        t: usize,
        cond: &TextEmbedding,
        capture: bool,
    ) -> Result<(LatentImage, Option<AttentionRecord>)> {
        self.forward(
            z_t,
            t,
            cond,
            PassOptions {
                capture,
                branch: None,
            },
        )
    }

    fn add_noise(&self, z: &LatentImage, t: usize, eps: &LatentImage) -> Result<LatentImage> {
        z.ensure_dims(self.latent_dims(), "latent")?;
        self.schedule().add_noise(z, t, eps)
    }

    /// Layers at the two coarsest resolutions present.
    fn default_capture_layers(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = self.layers().iter().map(|l| l.positions()).collect();
        sizes.sort_unstable();
        sizes.dedup();
        let keep: Vec<usize> = sizes.into_iter().take(2).collect();
        self.layers()
            .iter()
            .filter(|l| keep.contains(&l.positions()))
            .map(|l| l.id)
            .collect()
    }
}

/// Backend selection, keyed by `kind: toy | diffusion-adapter`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendConfig {
    Toy(ToyConfig),
    DiffusionAdapter(AdapterConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Toy(ToyConfig::default())
    }
}

impl BackendConfig {
    pub fn build(&self) -> Result<Box<dyn DenoiserBackend + Send>> {
        Ok(match self {
            BackendConfig::Toy(cfg) => Box::new(ToyBackend::new(cfg.clone())?),
            BackendConfig::DiffusionAdapter(cfg) => Box::new(DiffusionAdapter::open(cfg.clone())?),
        })
    }
}

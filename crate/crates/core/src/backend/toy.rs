//! Deterministic closed-form denoiser for CPU tests.
//!
//! The predicted noise is `z_t - pattern(cond)`, independent of `t`. The
//! pattern is the average over layers of a fixed linear readout of each
//! layer's cross-attention output, where every layer owns seeded features and
//! projections and the text embedding is derived from word hashes. SECR hooks
//! replace a layer's cross-attention output inside the resized box, so a
//! hooked pattern differs from the plain one only over the box footprint.
//!
//! Captured attention is synthesized rather than computed: each planted word
//! receives a hot logit proportional to how much of a cell its rectangle
//! covers, and self-attention mixes each cell with the cells sharing its
//! planted-region membership.

use std::collections::HashMap;
use std::time::Duration;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    prompt_words, AttentionRecord, Branch, DenoiserBackend, HookHandle, HookInfo, LayerAttention,
    LayerSpec, NoiseSchedule, PassOptions, SecrHook, TextEmbedding,
};
use crate::bboxgen::BBox;
use crate::error::{Result, SwapError};
use crate::latent::{LatentDims, LatentImage};
use crate::pixels::PixelImage;
use crate::secr::{attend, crop, cross_attention, paste_region, resize_bbox, FeatureMap, ProjectionSet};

const BOS: &str = "<|startoftext|>";
const EOS: &str = "<|endoftext|>";
const PAD: &str = "<|pad|>";

/// A word whose cross-attention is hot over `bbox` (latent grid).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plant {
    pub word: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelfAttentionKind {
    Identity,
    /// Half self, half uniform over cells with the same planted-region membership.
    #[default]
    Segment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
    /// Spatial factor of the space-to-depth codec.
    pub downsample: usize,
    pub embed_dim: usize,
    /// Fixed token sequence length, special tokens included.
    pub seq_len: usize,
    pub feature_channels: usize,
    pub key_dim: usize,
    pub t_max: usize,
    pub sigma_max: f64,
    pub hot_logit: f64,
    pub self_attention: SelfAttentionKind,
    pub plants: Vec<Plant>,
    pub seed: u64,
    /// Artificial latency added to every forward pass.
    pub forward_delay_ms: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            image_height: 32,
            image_width: 32,
            image_channels: 1,
            downsample: 2,
            embed_dim: 16,
            seq_len: 16,
            feature_channels: 8,
            key_dim: 8,
            t_max: 1000,
            sigma_max: 1.0,
            hot_logit: 8.0,
            self_attention: SelfAttentionKind::Segment,
            plants: Vec::new(),
            seed: 0,
            forward_delay_ms: 0,
        }
    }
}

impl ToyConfig {
    pub fn latent_dims(&self) -> LatentDims {
        let f = self.downsample.max(1);
        LatentDims::new(
            self.image_channels * f * f,
            self.image_height / f,
            self.image_width / f,
        )
    }

    /// Config whose latent is `channels × height × width` with an identity codec
    /// (`downsample = 1`).
    pub fn with_latent(channels: usize, height: usize, width: usize) -> Self {
        Self {
            image_height: height,
            image_width: width,
            image_channels: channels,
            downsample: 1,
            ..Self::default()
        }
    }

    pub fn plant(mut self, word: &str, bbox: BBox) -> Self {
        self.plants.push(Plant {
            word: word.to_lowercase(),
            bbox,
        });
        self
    }
}

struct LayerWeights {
    features: FeatureMap,
    proj: ProjectionSet,
    /// value width × latent channels
    readout: Array2<f64>,
    self_map: Array2<f64>,
}

pub struct ToyBackend {
    cfg: ToyConfig,
    dims: LatentDims,
    schedule: NoiseSchedule,
    layers: Vec<LayerSpec>,
    weights: Vec<LayerWeights>,
    hooks: Vec<(HookHandle, SecrHook)>,
    next_handle: u64,
    forwards: u64,
}

fn hash_seed(parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update(p.as_bytes());
        hasher.update([0u8]);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn randn2(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    })
}

impl ToyBackend {
    pub fn new(cfg: ToyConfig) -> Result<Self> {
        let f = cfg.downsample;
        if f == 0 || !cfg.image_height.is_multiple_of(f) || !cfg.image_width.is_multiple_of(f) {
            return Err(SwapError::param(format!(
                "image {}x{} not divisible by downsample {f}",
                cfg.image_height, cfg.image_width
            )));
        }
        if cfg.image_height == 0 || cfg.image_width == 0 || cfg.image_channels == 0 {
            return Err(SwapError::param("toy image dims must be positive"));
        }
        if cfg.seq_len < 2 || cfg.embed_dim == 0 || cfg.feature_channels == 0 || cfg.key_dim == 0 {
            return Err(SwapError::param("toy model widths must be positive"));
        }
        if cfg.t_max < 2 {
            return Err(SwapError::param("toy t_max must be at least 2"));
        }
        let dims = cfg.latent_dims();
        for p in &cfg.plants {
            p.bbox.ensure_grid(dims.grid(), "planted rectangle")?;
        }
        if cfg.plants.len() > 64 {
            return Err(SwapError::param("at most 64 planted rectangles"));
        }

        let (h, w) = dims.grid();
        let mut grids = vec![("down", (h, w))];
        if h % 2 == 0 && w % 2 == 0 {
            grids.push(("mid", (h / 2, w / 2)));
        }
        grids.push(("up", (h, w)));
        let layers: Vec<LayerSpec> = grids
            .iter()
            .enumerate()
            .map(|(id, (name, grid))| LayerSpec {
                id,
                name: (*name).to_string(),
                grid: *grid,
                channels: cfg.feature_channels,
            })
            .collect();

        let mut weights = Vec::with_capacity(layers.len());
        for layer in &layers {
            let mut rng =
                ChaCha8Rng::seed_from_u64(hash_seed(&["toy-layer", &cfg.seed.to_string(), &layer.id.to_string()]));
            let (lh, lw) = layer.grid;
            let c = cfg.feature_channels;
            let features = FeatureMap::new(
                Array3::from_shape_simple_fn((lh, lw, c), || {
                    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                }),
                layer.id,
            )?;
            let proj = ProjectionSet::new(
                randn2(&mut rng, c, cfg.key_dim, 1.0 / (c as f64).sqrt()),
                randn2(&mut rng, cfg.embed_dim, cfg.key_dim, 1.0 / (cfg.embed_dim as f64).sqrt()),
                randn2(&mut rng, cfg.embed_dim, c, 1.0 / (cfg.embed_dim as f64).sqrt()),
            )?;
            let readout = randn2(&mut rng, c, dims.channels, 1.0 / (c as f64).sqrt());
            let self_map = Self::synth_self_map(&cfg, dims, layer.grid);
            weights.push(LayerWeights {
                features,
                proj,
                readout,
                self_map,
            });
        }

        let schedule = NoiseSchedule::variance_exploding(cfg.t_max, cfg.sigma_max);
        Ok(Self {
            cfg,
            dims,
            schedule,
            layers,
            weights,
            hooks: Vec::new(),
            next_handle: 1,
            forwards: 0,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    /// Fraction of layer cell `(i, j)` covered by `bbox` (latent grid).
    fn coverage(dims: LatentDims, grid: (usize, usize), i: usize, j: usize, bbox: &BBox) -> f64 {
        let (h, w) = dims.grid();
        let (sh, sw) = (h / grid.0, w / grid.1);
        let overlap = |lo: usize, hi_excl: usize, bmin: usize, bmax: usize| {
            let a = lo.max(bmin);
            let b = hi_excl.min(bmax + 1);
            b.saturating_sub(a)
        };
        let rows = overlap(i * sh, (i + 1) * sh, bbox.row_min, bbox.row_max);
        let cols = overlap(j * sw, (j + 1) * sw, bbox.col_min, bbox.col_max);
        (rows * cols) as f64 / (sh * sw) as f64
    }

    fn synth_self_map(cfg: &ToyConfig, dims: LatentDims, grid: (usize, usize)) -> Array2<f64> {
        let n = grid.0 * grid.1;
        match cfg.self_attention {
            SelfAttentionKind::Identity => Array2::eye(n),
            SelfAttentionKind::Segment => {
                let labels: Vec<u64> = (0..n)
                    .map(|p| {
                        let (i, j) = (p / grid.1, p % grid.1);
                        cfg.plants.iter().enumerate().fold(0u64, |acc, (k, plant)| {
                            if Self::coverage(dims, grid, i, j, &plant.bbox) > 0.0 {
                                acc | (1 << k)
                            } else {
                                acc
                            }
                        })
                    })
                    .collect();
                let mut counts: HashMap<u64, usize> = HashMap::new();
                for l in &labels {
                    *counts.entry(*l).or_default() += 1;
                }
                Array2::from_shape_fn((n, n), |(a, b)| {
                    let same = if labels[a] == labels[b] {
                        0.5 / counts[&labels[a]] as f64
                    } else {
                        0.0
                    };
                    same + if a == b { 0.5 } else { 0.0 }
                })
            }
        }
    }

    fn word_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(hash_seed(&["toy-word", &self.cfg.seed.to_string(), token]));
        (0..self.cfg.embed_dim)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect()
    }

    fn synth_cross_map(&self, grid: (usize, usize), cond: &TextEmbedding) -> Array2<f64> {
        let n = grid.0 * grid.1;
        let k = cond.num_tokens();
        let mut token_word: Vec<Option<&str>> = vec![None; k];
        for (word, span) in &cond.token_spans {
            for &t in span {
                if t < k {
                    token_word[t] = Some(word.as_str());
                }
            }
        }
        let mut logits = Array2::<f64>::zeros((n, k));
        for (t, word) in token_word.iter().enumerate() {
            let Some(word) = word else { continue };
            for plant in self.cfg.plants.iter().filter(|p| p.word == *word) {
                for p in 0..n {
                    let cov = Self::coverage(self.dims, grid, p / grid.1, p % grid.1, &plant.bbox);
                    let v = self.cfg.hot_logit * cov;
                    if v > logits[[p, t]] {
                        logits[[p, t]] = v;
                    }
                }
            }
        }
        for mut row in logits.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let z = row.sum();
            row /= z;
        }
        logits
    }

    /// Noise-free target the toy denoiser pulls toward for `cond` under the
    /// hooks of `branch`.
    pub fn pattern(&self, cond: &TextEmbedding, branch: Option<Branch>) -> Result<LatentImage> {
        let (h, w) = self.dims.grid();
        let mut pattern = Array3::<f64>::zeros((self.dims.channels, h, w));
        let scale = 1.0 / self.layers.len() as f64;
        for (layer, lw) in self.layers.iter().zip(&self.weights) {
            let mut out = cross_attention(&lw.features, cond, &lw.proj)?;
            if let Some(branch) = branch {
                for (_, hook) in self.hooks.iter().filter(|(_, hk)| hk.branch == branch) {
                    if !hook.layers.as_ref().is_none_or(|ls| ls.contains(&layer.id)) {
                        continue;
                    }
                    let bbox_f = resize_bbox(&hook.bbox, layer.grid);
                    let cropped = crop(&lw.features, &bbox_f)?;
                    let region = attend(cropped.view(), hook.concept.values.view(), &lw.proj)?;
                    paste_region(&mut out, &bbox_f, &region)?;
                }
            }
            let contrib = out.dot(&lw.readout);
            let (sh, sw) = (h / layer.grid.0, w / layer.grid.1);
            for r in 0..h {
                for c in 0..w {
                    let cell = (r / sh) * layer.grid.1 + c / sw;
                    for ch in 0..self.dims.channels {
                        pattern[[ch, r, c]] += scale * contrib[[cell, ch]];
                    }
                }
            }
        }
        Ok(LatentImage::new(pattern))
    }
}

impl DenoiserBackend for ToyBackend {
    fn name(&self) -> &str {
        "toy"
    }

    fn latent_dims(&self) -> LatentDims {
        self.dims
    }

    fn image_dims(&self) -> (usize, usize, usize) {
        (self.cfg.image_height, self.cfg.image_width, self.cfg.image_channels)
    }

    fn token_limit(&self) -> usize {
        self.cfg.seq_len
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    fn embed_prompt(&self, prompt: &str) -> Result<TextEmbedding> {
        let words = prompt_words(prompt);
        let needed = words.len() + 2;
        if needed > self.cfg.seq_len {
            return Err(SwapError::TokenLimitExceeded {
                tokens: needed,
                limit: self.cfg.seq_len,
            });
        }
        let mut values = Array2::zeros((self.cfg.seq_len, self.cfg.embed_dim));
        let mut token_spans = std::collections::BTreeMap::<String, Vec<usize>>::new();
        let mut tokens: Vec<&str> = Vec::with_capacity(self.cfg.seq_len);
        tokens.push(BOS);
        for (i, w) in words.iter().enumerate() {
            tokens.push(w);
            token_spans.entry(w.clone()).or_default().push(i + 1);
        }
        tokens.push(EOS);
        while tokens.len() < self.cfg.seq_len {
            tokens.push(PAD);
        }
        for (row, tok) in tokens.iter().enumerate() {
            for (col, v) in self.word_vector(tok).into_iter().enumerate() {
                values[[row, col]] = v;
            }
        }
        Ok(TextEmbedding {
            values,
            token_spans,
        })
    }

    fn forward(
        &mut self,
        z_t: &LatentImage,
        t: usize,
        cond: &TextEmbedding,
        pass: PassOptions,
    ) -> Result<(LatentImage, Option<AttentionRecord>)> {
        z_t.ensure_dims(self.dims, "z_t")?;
        if t >= self.schedule.t_max() {
            return Err(SwapError::Timestep {
                t,
                t_max: self.schedule.t_max(),
            });
        }
        if cond.embed_dim() != self.cfg.embed_dim {
            return Err(SwapError::shape(format!(
                "embedding width {} != {}",
                cond.embed_dim(),
                self.cfg.embed_dim
            )));
        }
        self.forwards += 1;
        if self.cfg.forward_delay_ms > 0 {
            std::thread::sleep(Duration::from_millis(self.cfg.forward_delay_ms));
        }
        let pattern = self.pattern(cond, pass.branch)?;
        let noise = LatentImage::new(z_t.values() - pattern.values());
        let record = pass.capture.then(|| AttentionRecord {
            layers: self
                .layers
                .iter()
                .zip(&self.weights)
                .map(|(layer, lw)| LayerAttention {
                    layer_id: layer.id,
                    grid: layer.grid,
                    cross: self.synth_cross_map(layer.grid, cond),
                    self_attn: lw.self_map.clone(),
                })
                .collect(),
        });
        Ok((noise, record))
    }

    fn encode_image(&self, image: &PixelImage) -> Result<LatentImage> {
        let expected = self.image_dims();
        let got = (image.height(), image.width(), image.channels());
        if got != expected {
            return Err(SwapError::shape(format!(
                "image {got:?} does not match backend image dims {expected:?}"
            )));
        }
        let f = self.cfg.downsample;
        let px = image.values();
        let d = self.dims;
        Ok(LatentImage::new(Array3::from_shape_fn(
            (d.channels, d.height, d.width),
            |(ch, y, x)| {
                let (c, rem) = (ch / (f * f), ch % (f * f));
                px[[y * f + rem / f, x * f + rem % f, c]]
            },
        )))
    }

    fn decode_latent(&self, z: &LatentImage) -> Result<PixelImage> {
        z.ensure_dims(self.dims, "latent")?;
        let f = self.cfg.downsample;
        let (h, w, c) = self.image_dims();
        let v = z.values();
        Ok(PixelImage::new(Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
            v[[ch * f * f + (y % f) * f + x % f, y / f, x / f]]
        })))
    }

    fn forward_count(&self) -> u64 {
        self.forwards
    }

    fn install_hook(&mut self, hook: SecrHook) -> Result<HookHandle> {
        hook.bbox.ensure_grid(self.dims.grid(), "hook bbox")?;
        if hook.concept.embed_dim() != self.cfg.embed_dim {
            return Err(SwapError::shape("hook concept embedding width mismatch"));
        }
        if let Some(ids) = &hook.layers {
            if let Some(bad) = ids.iter().find(|id| !self.layers.iter().any(|l| l.id == **id)) {
                return Err(SwapError::param(format!("no attention layer {bad}")));
            }
        }
        if let Some((handle, _)) = self.hooks.iter().find(|(_, h)| *h == hook) {
            log::warn!("identical SECR hook already installed as {handle:?}; ignoring");
            return Ok(*handle);
        }
        let handle = HookHandle(self.next_handle);
        self.next_handle += 1;
        self.hooks.push((handle, hook));
        Ok(handle)
    }

    fn remove_hook(&mut self, handle: HookHandle) -> bool {
        let before = self.hooks.len();
        self.hooks.retain(|(h, _)| *h != handle);
        before != self.hooks.len()
    }

    fn hooks(&self) -> Vec<HookInfo> {
        let mut out = Vec::new();
        for (handle, hook) in &self.hooks {
            for layer in &self.layers {
                if hook.layers.as_ref().is_none_or(|ls| ls.contains(&layer.id)) {
                    out.push(HookInfo {
                        handle: *handle,
                        branch: hook.branch,
                        layer_id: layer.id,
                        bbox: resize_bbox(&hook.bbox, layer.grid),
                    });
                }
            }
        }
        out
    }
}

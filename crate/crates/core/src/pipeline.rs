//! End-to-end concept swap, insertion, removal and multi-concept swapping.
//!
//! A run encodes the source image, localizes the source concept once, hooks
//! regional cross-attention into both branches, then runs masked DDS under the
//! step-skipping schedule with plain SGD before decoding the result.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{prompt_words, Branch, DenoiserBackend, HookHandle};
use crate::bboxgen::{localize, BBox, LocalizeParams, RefineMode, LOCALIZE_TIMESTEPS};
use crate::distill::{
    bgm_apply, dds_gradient, passes_per_prediction, sds_gradient, BranchInput, NoiseDraw,
};
use crate::error::{Result, SwapError};
use crate::latent::LatentImage;
use crate::pixels::PixelImage;
use crate::secr::{concept_embedding, install_secr_on, uninstall_secr};
use crate::ssgu::{optimize, plan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwapConfig {
    pub source_prompt: String,
    pub target_prompt: String,
    pub source_concept: String,
    pub target_concept: String,
    pub eta: f64,
    pub total_steps: usize,
    pub lambda: usize,
    pub alpha: f64,
    pub beta: f64,
    pub guidance: f64,
    /// Per-iteration timesteps are drawn uniformly from `[t_min, t_max)`.
    pub t_range: (usize, usize),
    pub seed: u64,
    pub bbox_override: Option<BBox>,
    /// Attention layers read for localization; `None` uses the backend default.
    pub localize_layers: Option<Vec<usize>>,
    pub refine: RefineMode,
    /// Layers hooked by SECR; `None` hooks all cross-attention layers.
    pub secr_layers: Option<Vec<usize>>,
    pub trace: bool,
}

impl Default for SwapConfig {
    fn default() -> Self {
        Self {
            source_prompt: String::new(),
            target_prompt: String::new(),
            source_concept: String::new(),
            target_concept: String::new(),
            eta: 0.1,
            total_steps: 550,
            lambda: 5,
            alpha: 2.0,
            beta: 0.5,
            guidance: 7.5,
            t_range: (50, 950),
            seed: 0,
            bbox_override: None,
            localize_layers: None,
            refine: RefineMode::Matrix,
            secr_layers: None,
            trace: false,
        }
    }
}

impl SwapConfig {
    pub fn validate(&self, backend_t_max: usize) -> Result<()> {
        let (lo, hi) = self.t_range;
        if !(0 < lo && lo < hi && hi <= backend_t_max) {
            return Err(SwapError::param(format!(
                "t_range ({lo}, {hi}) must satisfy 0 < t_min < t_max <= {backend_t_max}"
            )));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(SwapError::param(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        if self.lambda == 0 {
            return Err(SwapError::param("lambda must be >= 1"));
        }
        if !(self.alpha >= 1.0) {
            return Err(SwapError::param(format!("alpha must be >= 1, got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(SwapError::param(format!("beta must be in (0, 1), got {}", self.beta)));
        }
        if !(self.guidance >= 0.0) {
            return Err(SwapError::param(format!("guidance must be >= 0, got {}", self.guidance)));
        }
        Ok(())
    }

    pub fn localize_params(&self) -> LocalizeParams {
        LocalizeParams {
            alpha: self.alpha,
            beta: self.beta,
            seed: self.seed,
            timesteps: LOCALIZE_TIMESTEPS.to_vec(),
            layers: self.localize_layers.clone(),
            refine: self.refine,
        }
    }

    /// Forward passes a run is expected to spend: three localization passes
    /// (unless the box is given) plus two branches per anchor, doubled when
    /// guidance needs an unconditional pass.
    pub fn expected_forward_passes(&self) -> u64 {
        let localize = if self.bbox_override.is_some() {
            0
        } else {
            LOCALIZE_TIMESTEPS.len() as u64
        };
        let anchors = self.total_steps.div_ceil(self.lambda.max(1)) as u64;
        localize + 2 * anchors * passes_per_prediction(self.guidance)
    }
}

/// A customized concept: its rare token and where its weights live.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub token: String,
    pub checkpoint_ref: String,
}

impl ConceptSpec {
    pub fn new(token: &str, checkpoint_ref: &str) -> Self {
        Self {
            token: token.to_string(),
            checkpoint_ref: checkpoint_ref.to_string(),
        }
    }

    fn validate(&self, backend: &dyn DenoiserBackend) -> Result<()> {
        if prompt_words(&self.token).is_empty() {
            return Err(SwapError::Prompt(format!(
                "concept token {:?} yields no tokens",
                self.token
            )));
        }
        backend.embed_prompt(&self.token)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub t: Option<usize>,
    pub computed: bool,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct SwapResult {
    pub image: PixelImage,
    pub latent: LatentImage,
    pub bbox_used: BBox,
    pub forward_passes: u64,
    pub wall_clock: f64,
    pub per_step_log: Option<Vec<StepLog>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Swap,
    Insert,
    Remove,
}

pub fn swap(
    source_image: &PixelImage,
    cfg: &SwapConfig,
    concept: &ConceptSpec,
    backend: &mut dyn DenoiserBackend,
) -> Result<SwapResult> {
    concept.validate(backend)?;
    run(source_image, cfg, Mode::Swap, backend)
}

/// Inserts the target concept into `cfg.bbox_override`; there is no source
/// concept, so the source branch is hooked with the null embedding.
pub fn insert(
    source_image: &PixelImage,
    cfg: &SwapConfig,
    concept: &ConceptSpec,
    backend: &mut dyn DenoiserBackend,
) -> Result<SwapResult> {
    if cfg.bbox_override.is_none() {
        return Err(SwapError::param("insertion requires an explicit bbox_override"));
    }
    concept.validate(backend)?;
    run(source_image, cfg, Mode::Insert, backend)
}

/// Removes the source concept by driving the target branch with the null
/// prompt and a null SECR concept.
pub fn remove(
    source_image: &PixelImage,
    cfg: &SwapConfig,
    backend: &mut dyn DenoiserBackend,
) -> Result<SwapResult> {
    let cfg = SwapConfig {
        target_prompt: String::new(),
        target_concept: String::new(),
        ..cfg.clone()
    };
    run(source_image, &cfg, Mode::Remove, backend)
}

/// Applies single-concept swaps in order, each on the previous output.
pub fn multi_swap(
    source_image: &PixelImage,
    cfgs: &[SwapConfig],
    concepts: &[ConceptSpec],
    backend: &mut dyn DenoiserBackend,
) -> Result<SwapResult> {
    if cfgs.len() != concepts.len() {
        return Err(SwapError::param(format!(
            "{} configs but {} concepts",
            cfgs.len(),
            concepts.len()
        )));
    }
    let start = Instant::now();
    if cfgs.is_empty() {
        let latent = backend.encode_image(source_image)?;
        return Ok(SwapResult {
            image: backend.decode_latent(&latent)?,
            bbox_used: BBox::full(latent.dims().grid()),
            latent,
            forward_passes: 0,
            wall_clock: start.elapsed().as_secs_f64(),
            per_step_log: None,
        });
    }
    let mut image = source_image.clone();
    let mut total_passes = 0;
    let mut last = None;
    for (index, (cfg, concept)) in cfgs.iter().zip(concepts).enumerate() {
        let res = swap(&image, cfg, concept, backend).map_err(|e| SwapError::Stage {
            index,
            source: Box::new(e),
        })?;
        total_passes += res.forward_passes;
        image = res.image.clone();
        last = Some(res);
    }
    let mut res = last.expect("at least one stage");
    res.forward_passes = total_passes;
    res.wall_clock = start.elapsed().as_secs_f64();
    Ok(res)
}

fn run(
    source_image: &PixelImage,
    cfg: &SwapConfig,
    mode: Mode,
    backend: &mut dyn DenoiserBackend,
) -> Result<SwapResult> {
    let start = Instant::now();
    let passes_before = backend.forward_count();
    cfg.validate(backend.schedule().t_max())?;

    let source_cond = backend.embed_prompt(&cfg.source_prompt)?;
    if mode != Mode::Insert {
        source_cond.phrase_tokens(&cfg.source_concept)?;
    }
    let target_cond = backend.embed_prompt(&cfg.target_prompt)?;
    let uncond = backend.embed_prompt("")?;

    let z_src = backend.encode_image(source_image)?;
    let bbox = match cfg.bbox_override {
        Some(b) => {
            b.ensure_grid(z_src.dims().grid(), "bbox_override")?;
            b
        }
        None => {
            localize(
                backend,
                &z_src,
                &cfg.source_prompt,
                &cfg.source_concept,
                &cfg.localize_params(),
            )?
            .bbox
        }
    };

    let source_phrase = if mode == Mode::Insert {
        ""
    } else {
        cfg.source_concept.as_str()
    };
    let source_concept = concept_embedding(backend, source_phrase)?;
    let target_concept = concept_embedding(backend, &cfg.target_concept)?;

    let mut handles: Vec<HookHandle> = Vec::with_capacity(2);
    let outcome = (|| {
        handles.push(install_secr_on(
            backend,
            Branch::Source,
            source_concept,
            bbox,
            cfg.secr_layers.clone(),
        )?);
        handles.push(install_secr_on(
            backend,
            Branch::Target,
            target_concept,
            bbox,
            cfg.secr_layers.clone(),
        )?);
        optimize_latent(backend, cfg, &z_src, &bbox, &source_cond, &target_cond, &uncond)
    })();
    for h in handles {
        uninstall_secr(backend, h);
    }
    let (latent, log) = outcome?;

    let image = backend.decode_latent(&latent)?;
    Ok(SwapResult {
        image,
        latent,
        bbox_used: bbox,
        forward_passes: backend.forward_count() - passes_before,
        wall_clock: start.elapsed().as_secs_f64(),
        per_step_log: cfg.trace.then_some(log),
    })
}

fn optimize_latent(
    backend: &mut dyn DenoiserBackend,
    cfg: &SwapConfig,
    z_src: &LatentImage,
    bbox: &BBox,
    source_cond: &crate::backend::TextEmbedding,
    target_cond: &crate::backend::TextEmbedding,
    uncond: &crate::backend::TextEmbedding,
) -> Result<(LatentImage, Vec<StepLog>)> {
    let mut log = Vec::new();
    if cfg.total_steps == 0 {
        return Ok((z_src.clone(), log));
    }
    let schedule = plan(cfg.total_steps, cfg.lambda)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (t_lo, t_hi) = cfg.t_range;
    let source = BranchInput {
        latent: z_src.clone(),
        embedding: source_cond.clone(),
        uncond_embedding: uncond.clone(),
        guidance: cfg.guidance,
        branch: Some(Branch::Source),
    };
    let mut target = BranchInput {
        latent: z_src.clone(),
        embedding: target_cond.clone(),
        uncond_embedding: uncond.clone(),
        guidance: cfg.guidance,
        branch: Some(Branch::Target),
    };
    let latent = optimize(
        z_src.clone(),
        &schedule,
        cfg.eta,
        |step, z| {
            let t = rng.random_range(t_lo..t_hi);
            let eps = LatentImage::randn(z.dims(), &mut rng);
            target.latent = z.clone();
            let g = dds_gradient(backend, &target, &source, &NoiseDraw { t, eps })?;
            let g = bgm_apply(&g, bbox)?;
            if !g.is_finite() {
                return Err(SwapError::Numerical { step });
            }
            Ok(g)
        },
        |step, g, computed| {
            if cfg.trace {
                log.push(StepLog {
                    step,
                    t: computed.then_some(g.t),
                    computed,
                    grad_norm: g.values.values().iter().map(|v| v * v).sum::<f64>().sqrt(),
                });
            }
        },
    )?;
    Ok((latent, log))
}

/// Score-distillation baselines that the step-skipping schedule can accelerate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    Sds,
    Dds,
}

impl std::str::FromStr for Baseline {
    type Err = SwapError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sds" => Ok(Baseline::Sds),
            "dds" => Ok(Baseline::Dds),
            other => Err(SwapError::param(format!("unknown method {other:?} (expected sds or dds)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub latent: LatentImage,
    pub forward_passes: u64,
    pub gradient_evaluations: usize,
    pub wall_clock: f64,
}

/// Unmasked SDS or DDS on the whole latent, with gradients computed every
/// `cfg.lambda` iterations.
pub fn run_baseline(
    method: Baseline,
    source: &LatentImage,
    cfg: &SwapConfig,
    backend: &mut dyn DenoiserBackend,
) -> Result<BaselineRun> {
    let start = Instant::now();
    cfg.validate(backend.schedule().t_max())?;
    let passes_before = backend.forward_count();
    let uncond = backend.embed_prompt("")?;
    let target_cond = backend.embed_prompt(&cfg.target_prompt)?;
    let source_cond = backend.embed_prompt(&cfg.source_prompt)?;
    if cfg.total_steps == 0 {
        return Ok(BaselineRun {
            latent: source.clone(),
            forward_passes: 0,
            gradient_evaluations: 0,
            wall_clock: start.elapsed().as_secs_f64(),
        });
    }
    let schedule = plan(cfg.total_steps, cfg.lambda)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (t_lo, t_hi) = cfg.t_range;
    let mut evaluations = 0;
    let mut target = BranchInput {
        latent: source.clone(),
        embedding: target_cond,
        uncond_embedding: uncond.clone(),
        guidance: cfg.guidance,
        branch: None,
    };
    let src = BranchInput {
        latent: source.clone(),
        embedding: source_cond,
        uncond_embedding: uncond,
        guidance: cfg.guidance,
        branch: None,
    };
    let latent = optimize(
        source.clone(),
        &schedule,
        cfg.eta,
        |step, z| {
            evaluations += 1;
            let t = rng.random_range(t_lo..t_hi);
            let eps = LatentImage::randn(z.dims(), &mut rng);
            target.latent = z.clone();
            let draw = NoiseDraw { t, eps };
            let g = match method {
                Baseline::Sds => sds_gradient(backend, &target, &draw)?,
                Baseline::Dds => dds_gradient(backend, &target, &src, &draw)?,
            };
            if !g.is_finite() {
                return Err(SwapError::Numerical { step });
            }
            Ok(g)
        },
        |_, _, _| {},
    )?;
    Ok(BaselineRun {
        latent,
        forward_passes: backend.forward_count() - passes_before,
        gradient_evaluations: evaluations,
        wall_clock: start.elapsed().as_secs_f64(),
    })
}

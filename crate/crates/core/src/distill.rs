//! Score-distillation gradients (SDS, DDS) and background gradient masking.
//!
//! Gradients skip the denoiser Jacobian: SDS is `w(t) (eps_pred - eps)` and DDS
//! is the difference of the target- and source-branch predictions under a
//! shared noise draw. Each branch applies classifier-free guidance on its own
//! before the difference is taken.

use crate::backend::{Branch, DenoiserBackend, PassOptions, TextEmbedding};
use crate::bboxgen::BBox;
use crate::error::{Result, SwapError};
use crate::latent::LatentImage;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub values: LatentImage,
    pub t: usize,
    pub weight: f64,
}

impl GradientField {
    pub fn is_finite(&self) -> bool {
        self.values.is_finite()
    }
}

/// One branch of a distillation step: a clean latent and its prompt.
#[derive(Debug, Clone)]
pub struct BranchInput {
    pub latent: LatentImage,
    pub embedding: TextEmbedding,
    pub uncond_embedding: TextEmbedding,
    pub guidance: f64,
    /// Selects which installed hooks apply to this branch's passes.
    pub branch: Option<Branch>,
}

/// Timestep and noise shared by the passes of one distillation step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: LatentImage,
}

/// Timestep weighting `w(t)`; constant, so the step size is governed by the
/// learning rate alone.
pub fn weight(_t: usize) -> f64 {
    1.0
}

pub fn cfg_combine(
    eps_uncond: &LatentImage,
    eps_cond: &LatentImage,
    scale: f64,
) -> Result<LatentImage> {
    eps_cond.ensure_dims(eps_uncond.dims(), "conditional prediction")?;
    let mut out = eps_uncond.values().clone();
    out.scaled_add(scale, &(eps_cond.values() - eps_uncond.values()));
    Ok(LatentImage::new(out))
}

/// Noise prediction for an already-noised latent. The unconditional pass is
/// skipped when `guidance == 1`, where guidance reduces to the conditional
/// prediction.
pub fn guided_prediction(
    backend: &mut dyn DenoiserBackend,
    branch: &BranchInput,
    z_t: &LatentImage,
    t: usize,
) -> Result<LatentImage> {
    if !(branch.guidance >= 0.0) {
        return Err(SwapError::param(format!(
            "guidance must be >= 0, got {}",
            branch.guidance
        )));
    }
    let pass = PassOptions {
        capture: false,
        branch: branch.branch,
    };
    let (cond, _) = backend.forward(z_t, t, &branch.embedding, pass)?;
    if branch.guidance == 1.0 {
        return Ok(cond);
    }
    let (uncond, _) = backend.forward(z_t, t, &branch.uncond_embedding, pass)?;
    cfg_combine(&uncond, &cond, branch.guidance)
}

/// Forward passes one guided prediction costs.
pub fn passes_per_prediction(guidance: f64) -> u64 {
    if guidance == 1.0 {
        1
    } else {
        2
    }
}

pub fn sds_gradient(
    backend: &mut dyn DenoiserBackend,
    branch: &BranchInput,
    draw: &NoiseDraw,
) -> Result<GradientField> {
    let z_t = backend.add_noise(&branch.latent, draw.t, &draw.eps)?;
    let pred = guided_prediction(backend, branch, &z_t, draw.t)?;
    let w = weight(draw.t);
    let values = (pred.values() - draw.eps.values()) * w;
    Ok(GradientField {
        values: LatentImage::new(values),
        t: draw.t,
        weight: w,
    })
}

pub fn dds_gradient(
    backend: &mut dyn DenoiserBackend,
    target: &BranchInput,
    source: &BranchInput,
    draw: &NoiseDraw,
) -> Result<GradientField> {
    let z_t = backend.add_noise(&target.latent, draw.t, &draw.eps)?;
    let z_hat_t = backend.add_noise(&source.latent, draw.t, &draw.eps)?;
    let pred_target = guided_prediction(backend, target, &z_t, draw.t)?;
    let pred_source = guided_prediction(backend, source, &z_hat_t, draw.t)?;
    let w = weight(draw.t);
    let values = (pred_target.values() - pred_source.values()) * w;
    Ok(GradientField {
        values: LatentImage::new(values),
        t: draw.t,
        weight: w,
    })
}

/// DDS with a separate draw per branch; the draws must coincide.
pub fn dds_gradient_with(
    backend: &mut dyn DenoiserBackend,
    target: (&BranchInput, &NoiseDraw),
    source: (&BranchInput, &NoiseDraw),
) -> Result<GradientField> {
    let (tgt, tdraw) = target;
    let (src, sdraw) = source;
    if tdraw.t != sdraw.t {
        return Err(SwapError::Contract(format!(
            "branches noised at different timesteps ({} vs {})",
            tdraw.t, sdraw.t
        )));
    }
    if tdraw.eps.dims() != sdraw.eps.dims()
        || tdraw
            .eps
            .values()
            .iter()
            .zip(sdraw.eps.values().iter())
            .any(|(a, b)| a.to_bits() != b.to_bits())
    {
        return Err(SwapError::Contract("branches noised with different eps".into()));
    }
    dds_gradient(backend, tgt, src, tdraw)
}

/// Zeroes every gradient entry whose spatial position lies outside `bbox`,
/// across all channels.
pub fn bgm_apply(grad: &GradientField, bbox: &BBox) -> Result<GradientField> {
    bbox.ensure_grid(grad.values.dims().grid(), "gradient mask")?;
    let mut values = grad.values.values().clone();
    for ((_, r, c), v) in values.indexed_iter_mut() {
        if !bbox.contains(r, c) {
            *v = 0.0;
        }
    }
    Ok(GradientField {
        values: LatentImage::new(values),
        t: grad.t,
        weight: grad.weight,
    })
}

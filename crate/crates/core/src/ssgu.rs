//! Step-skipping gradient updates.
//!
//! Gradients are computed only at anchor iterations `i` with `i % period == 0`
//! and reused verbatim until the next anchor. Iterations are 0-based
//! optimization steps, not diffusion timesteps.

use crate::distill::GradientField;
use crate::error::{Result, SwapError};
use crate::latent::LatentImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SsguSchedule {
    period: usize,
    total_steps: usize,
}

impl SsguSchedule {
    pub fn period(&self) -> usize {
        self.period
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn is_anchor(&self, step: usize) -> bool {
        step < self.total_steps && step.is_multiple_of(self.period)
    }

    pub fn anchors(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.total_steps).step_by(self.period)
    }

    /// Number of gradient computations over the whole run: `ceil(T / period)`.
    pub fn forward_pass_count(&self) -> usize {
        self.total_steps.div_ceil(self.period)
    }
}

pub fn plan(total_steps: usize, period: usize) -> Result<SsguSchedule> {
    if total_steps == 0 || period == 0 {
        return Err(SwapError::param(format!(
            "SSGU needs T >= 1 and period >= 1 (got T={total_steps}, period={period})"
        )));
    }
    Ok(SsguSchedule {
        period,
        total_steps,
    })
}

/// Most recent anchor gradient.
#[derive(Debug, Clone, Default)]
pub struct GradientCache {
    last: Option<(usize, GradientField)>,
}

impl GradientCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn last_anchor_step(&self) -> Option<usize> {
        self.last.as_ref().map(|(s, _)| *s)
    }

    pub fn last_gradient(&self) -> Option<&GradientField> {
        self.last.as_ref().map(|(_, g)| g)
    }
}

/// Gradient to apply at `step`. Anchors invoke `compute` and refresh the
/// cache; other steps return the cached anchor gradient. The flag reports
/// whether `compute` ran.
pub fn gradient_for_step<F>(
    step: usize,
    schedule: &SsguSchedule,
    cache: &mut GradientCache,
    compute: F,
) -> Result<(GradientField, bool)>
where
    F: FnOnce() -> Result<GradientField>,
{
    if step >= schedule.total_steps {
        return Err(SwapError::param(format!(
            "step {step} outside schedule of {} steps",
            schedule.total_steps
        )));
    }
    if schedule.is_anchor(step) {
        let g = compute()?;
        cache.last = Some((step, g.clone()));
        return Ok((g, true));
    }
    match &cache.last {
        Some((anchor, g)) if *anchor <= step => Ok((g.clone(), false)),
        _ => Err(SwapError::Contract(format!(
            "step {step} is not an anchor and no anchor gradient is cached"
        ))),
    }
}

/// Plain SGD step `latent - eta * grad`.
pub fn apply_update(latent: &LatentImage, grad: &GradientField, eta: f64) -> Result<LatentImage> {
    grad.values.ensure_dims(latent.dims(), "gradient")?;
    let mut out = latent.values().clone();
    out.scaled_add(-eta, grad.values.values());
    Ok(LatentImage::new(out))
}

/// Runs the full SGD loop under `schedule`. `compute(step, latent)` is called
/// at anchors only; `observe` sees every applied step.
pub fn optimize<F, O>(
    init: LatentImage,
    schedule: &SsguSchedule,
    eta: f64,
    mut compute: F,
    mut observe: O,
) -> Result<LatentImage>
where
    F: FnMut(usize, &LatentImage) -> Result<GradientField>,
    O: FnMut(usize, &GradientField, bool),
{
    let mut cache = GradientCache::new();
    let mut latent = init;
    for step in 0..schedule.total_steps() {
        let (g, computed) =
            gradient_for_step(step, schedule, &mut cache, || compute(step, &latent))?;
        observe(step, &g, computed);
        latent = apply_update(&latent, &g, eta)?;
    }
    Ok(latent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::LatentDims;
    use std::cell::Cell;

    fn grad(v: f64) -> GradientField {
        GradientField {
            values: LatentImage::filled(LatentDims::new(1, 2, 2), v),
            t: 0,
            weight: 1.0,
        }
    }

    #[test]
    fn plan_examples() {
        let s = plan(10, 1).unwrap();
        assert_eq!(s.anchors().collect::<Vec<_>>(), (0..10).collect::<Vec<_>>());
        assert_eq!(s.forward_pass_count(), 10);
        let s = plan(7, 3).unwrap();
        assert_eq!(s.anchors().collect::<Vec<_>>(), vec![0, 3, 6]);
        assert_eq!(s.forward_pass_count(), 3);
        assert_eq!(plan(550, 5).unwrap().forward_pass_count(), 110);
        assert!(plan(0, 5).is_err());
        assert!(plan(5, 0).is_err());
    }

    #[test]
    fn anchor_count_matches_enumeration() {
        for t in 1..60 {
            for l in 1..12 {
                let s = plan(t, l).unwrap();
                let enumerated = (0..t).filter(|i| i % l == 0).count();
                assert_eq!(s.forward_pass_count(), enumerated);
                assert_eq!(s.anchors().count(), enumerated);
            }
        }
    }

    #[test]
    fn step_zero_computes_and_period_two_reuses() {
        let s = plan(4, 2).unwrap();
        let mut cache = GradientCache::new();
        let (g0, c0) = gradient_for_step(0, &s, &mut cache, || Ok(grad(1.0))).unwrap();
        assert!(c0);
        let (g1, c1) = gradient_for_step(1, &s, &mut cache, || panic!("must not compute")).unwrap();
        assert!(!c1);
        assert_eq!(g1, g0);
        assert_eq!(cache.last_anchor_step(), Some(0));
    }

    #[test]
    fn non_anchor_without_cache_is_contract_error() {
        let s = plan(4, 2).unwrap();
        let mut cache = GradientCache::new();
        assert!(matches!(
            gradient_for_step(1, &s, &mut cache, || Ok(grad(0.0))),
            Err(SwapError::Contract(_))
        ));
    }

    #[test]
    fn compute_invoked_at_anchors_only() {
        let s = plan(10, 5).unwrap();
        let calls = Cell::new(Vec::new());
        let init = LatentImage::zeros(LatentDims::new(1, 2, 2));
        optimize(
            init,
            &s,
            0.1,
            |step, _| {
                let mut v = calls.take();
                v.push(step);
                calls.set(v);
                Ok(grad(1.0))
            },
            |_, _, _| {},
        )
        .unwrap();
        assert_eq!(calls.take(), vec![0, 5]);
    }

    #[test]
    fn update_arithmetic() {
        let d = LatentDims::new(1, 2, 2);
        let ones = LatentImage::filled(d, 1.0);
        assert_eq!(apply_update(&ones, &grad(1.0), 0.0).unwrap(), ones);
        assert_eq!(apply_update(&ones, &grad(0.0), 0.1).unwrap(), ones);
        let out = apply_update(&ones, &grad(1.0), 0.1).unwrap();
        assert!(out.values().iter().all(|&v| (v - 0.9).abs() < 1e-15));
        let wrong = GradientField {
            values: LatentImage::zeros(LatentDims::new(1, 3, 3)),
            t: 0,
            weight: 1.0,
        };
        assert!(matches!(apply_update(&ones, &wrong, 0.1), Err(SwapError::Shape(_))));
    }
}

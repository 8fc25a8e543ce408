//! Automatic source-concept localization from refined attention maps.
//!
//! Cross-attention columns of the concept tokens are sharpened by an
//! elementwise power, propagated through self-attention, fused across layers
//! and passes, thresholded, and converted to the tight bounding box of the
//! foreground points.

use ndarray::{Array2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{DenoiserBackend, PassOptions};
use crate::error::{Result, SwapError};
use crate::latent::LatentImage;

/// Inclusive integer rectangle on a `(height, width)` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawBBox")]
pub struct BBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
    pub grid: (usize, usize),
}

#[derive(Deserialize)]
struct RawBBox {
    row_min: usize,
    col_min: usize,
    row_max: usize,
    col_max: usize,
    grid: (usize, usize),
}

impl TryFrom<RawBBox> for BBox {
    type Error = SwapError;

    fn try_from(r: RawBBox) -> Result<Self> {
        BBox::new(r.row_min, r.col_min, r.row_max, r.col_max, r.grid)
    }
}

impl BBox {
    pub fn new(
        row_min: usize,
        col_min: usize,
        row_max: usize,
        col_max: usize,
        grid: (usize, usize),
    ) -> Result<Self> {
        if row_min > row_max || col_min > col_max || row_max >= grid.0 || col_max >= grid.1 {
            return Err(SwapError::param(format!(
                "invalid bbox ({row_min},{col_min})-({row_max},{col_max}) on {}x{} grid",
                grid.0, grid.1
            )));
        }
        Ok(Self {
            row_min,
            col_min,
            row_max,
            col_max,
            grid,
        })
    }

    pub fn full(grid: (usize, usize)) -> Self {
        Self {
            row_min: 0,
            col_min: 0,
            row_max: grid.0 - 1,
            col_max: grid.1 - 1,
            grid,
        }
    }

    pub fn height(&self) -> usize {
        self.row_max - self.row_min + 1
    }

    pub fn width(&self) -> usize {
        self.col_max - self.col_min + 1
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row_min..=self.row_max).contains(&row) && (self.col_min..=self.col_max).contains(&col)
    }

    pub fn is_full(&self) -> bool {
        *self == BBox::full(self.grid)
    }

    /// Whether `self` lies inside `other` (same grid).
    pub fn within(&self, other: &BBox) -> bool {
        self.grid == other.grid
            && self.row_min >= other.row_min
            && self.col_min >= other.col_min
            && self.row_max <= other.row_max
            && self.col_max <= other.col_max
    }

    pub fn disjoint(&self, other: &BBox) -> bool {
        self.row_max < other.row_min
            || other.row_max < self.row_min
            || self.col_max < other.col_min
            || other.col_max < self.col_min
    }

    pub fn ensure_grid(&self, grid: (usize, usize), what: &str) -> Result<()> {
        if self.grid != grid {
            return Err(SwapError::shape(format!(
                "{what}: bbox grid {}x{} does not match {}x{}",
                self.grid.0, self.grid.1, grid.0, grid.1
            )));
        }
        Ok(())
    }

    /// Binary mask of the rectangle on its grid.
    pub fn to_mask(&self) -> Array2<bool> {
        Array2::from_shape_fn(self.grid, |(r, c)| self.contains(r, c))
    }
}

impl std::fmt::Display for BBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "rows {}..={} cols {}..={} on {}x{}",
            self.row_min, self.row_max, self.col_min, self.col_max, self.grid.0, self.grid.1
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub values: Array2<f64>,
    /// False when the map was constant and could not be min-max normalized.
    pub normalized: bool,
}

impl SaliencyMap {
    /// Min-max normalizes `values`; constant maps are returned unchanged and
    /// flagged as not normalized.
    pub fn normalize(values: Array2<f64>) -> Self {
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let range = hi - lo;
        if !(range > 1e-12 * hi.abs().max(1.0)) {
            return Self {
                values,
                normalized: false,
            };
        }
        Self {
            values: values.mapv(|v| (v - lo) / range),
            normalized: true,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Position of the largest value (first in row-major order on ties).
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for ((r, c), &v) in self.values.indexed_iter() {
            if v > best_v {
                best_v = v;
                best = (r, c);
            }
        }
        best
    }
}

/// How the self-attention map is combined with the powered cross-attention map.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefineMode {
    /// `A_s · A_c^alpha` as a matrix product over positions.
    #[default]
    Matrix,
    /// Elementwise: each position's powered cross row is scaled by the mean
    /// self-attention that position receives.
    Elementwise,
}

pub fn refine_attention(
    self_map: &Array2<f64>,
    cross_map: &Array2<f64>,
    alpha: f64,
) -> Result<Array2<f64>> {
    refine_attention_with(RefineMode::Matrix, self_map, cross_map, alpha)
}

pub fn refine_attention_with(
    mode: RefineMode,
    self_map: &Array2<f64>,
    cross_map: &Array2<f64>,
    alpha: f64,
) -> Result<Array2<f64>> {
    if !(alpha >= 1.0) {
        return Err(SwapError::param(format!("alpha must be >= 1, got {alpha}")));
    }
    let n = cross_map.nrows();
    if self_map.dim() != (n, n) {
        return Err(SwapError::shape(format!(
            "self map {:?} incompatible with cross map {:?}",
            self_map.dim(),
            cross_map.dim()
        )));
    }
    let powered = if alpha == 1.0 {
        cross_map.clone()
    } else {
        cross_map.mapv(|v| v.powf(alpha))
    };
    Ok(match mode {
        RefineMode::Matrix => self_map.dot(&powered),
        RefineMode::Elementwise => {
            let received = self_map.mean_axis(Axis(0)).expect("non-empty self map");
            let mut out = powered;
            Zip::from(out.rows_mut())
                .and(&received)
                .for_each(|mut row, &w| row *= w);
            out
        }
    })
}

/// Mean of the selected token columns reshaped to `grid`, min-max normalized.
pub fn token_saliency(
    refined: &Array2<f64>,
    token_indices: &[usize],
    grid: (usize, usize),
) -> Result<SaliencyMap> {
    if token_indices.is_empty() {
        return Err(SwapError::param("no concept tokens selected"));
    }
    if grid.0 * grid.1 != refined.nrows() {
        return Err(SwapError::shape(format!(
            "grid {}x{} does not hold {} positions",
            grid.0,
            grid.1,
            refined.nrows()
        )));
    }
    if let Some(&bad) = token_indices.iter().find(|&&k| k >= refined.ncols()) {
        return Err(SwapError::param(format!(
            "token index {bad} out of range for {} tokens",
            refined.ncols()
        )));
    }
    let mean = refined
        .select(Axis(1), token_indices)
        .mean_axis(Axis(1))
        .expect("non-empty selection");
    let values = mean
        .into_shape_with_order(grid)
        .map_err(|e| SwapError::shape(e.to_string()))?;
    Ok(SaliencyMap::normalize(values))
}

pub fn threshold_mask(map: &SaliencyMap, beta: f64) -> Result<Array2<bool>> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(SwapError::param(format!("beta must be in (0, 1), got {beta}")));
    }
    if !map.normalized {
        return Err(SwapError::DegenerateAttention);
    }
    Ok(map.values.mapv(|v| v >= beta))
}

pub fn mask_to_bbox(mask: &Array2<bool>) -> Result<BBox> {
    let mut rows = (usize::MAX, 0);
    let mut cols = (usize::MAX, 0);
    let mut any = false;
    for ((r, c), &on) in mask.indexed_iter() {
        if on {
            any = true;
            rows = (rows.0.min(r), rows.1.max(r));
            cols = (cols.0.min(c), cols.1.max(c));
        }
    }
    if !any {
        return Err(SwapError::EmptyMask);
    }
    BBox::new(rows.0, cols.0, rows.1, cols.1, mask.dim())
}

/// Bilinear resize with half-pixel centers and clamped borders.
pub fn upsample_bilinear(src: &Array2<f64>, out: (usize, usize)) -> Array2<f64> {
    let (h, w) = src.dim();
    if (h, w) == out {
        return src.clone();
    }
    let coord = |i: usize, n_in: usize, n_out: usize| {
        let x = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, x - lo as f64)
    };
    Array2::from_shape_fn(out, |(r, c)| {
        let (r0, r1, fr) = coord(r, h, out.0);
        let (c0, c1, fc) = coord(c, w, out.1);
        let top = src[[r0, c0]] * (1.0 - fc) + src[[r0, c1]] * fc;
        let bottom = src[[r1, c0]] * (1.0 - fc) + src[[r1, c1]] * fc;
        top * (1.0 - fr) + bottom * fr
    })
}

/// Settings for [`generate_bbox`].
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizeParams {
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub timesteps: Vec<usize>,
    /// Layer ids to read; `None` uses the backend's default capture set.
    pub layers: Option<Vec<usize>>,
    pub refine: RefineMode,
}

pub const LOCALIZE_TIMESTEPS: [usize; 3] = [541, 521, 501];

impl Default for LocalizeParams {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 0.5,
            seed: 0,
            timesteps: LOCALIZE_TIMESTEPS.to_vec(),
            layers: None,
            refine: RefineMode::Matrix,
        }
    }
}

/// Fused saliency, its mask and the resulting box.
#[derive(Debug, Clone)]
pub struct Localization {
    pub bbox: BBox,
    pub saliency: SaliencyMap,
    pub mask: Array2<bool>,
}

/// Fused, normalized saliency of `concept_word` over the capture passes.
pub fn fused_saliency(
    backend: &mut dyn DenoiserBackend,
    source: &LatentImage,
    source_prompt: &str,
    concept_word: &str,
    params: &LocalizeParams,
) -> Result<SaliencyMap> {
    let latent_grid = backend.latent_dims().grid();
    source.ensure_dims(backend.latent_dims(), "source latent")?;
    let cond = backend.embed_prompt(source_prompt)?;
    let tokens = cond.phrase_tokens(concept_word)?;
    let layers = params
        .layers
        .clone()
        .unwrap_or_else(|| backend.default_capture_layers());
    if layers.is_empty() {
        return Err(SwapError::param("no attention layers selected"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0xb0c5_11f0);
    let mut acc = Array2::<f64>::zeros(latent_grid);
    let mut contributing = 0usize;
    for &t in &params.timesteps {
        let eps = LatentImage::randn(source.dims(), &mut rng);
        let z_t = backend.add_noise(source, t, &eps)?;
        let (_, record) = backend.forward(
            &z_t,
            t,
            &cond,
            PassOptions {
                capture: true,
                branch: None,
            },
        )?;
        let record = record.ok_or_else(|| {
            SwapError::Contract("backend returned no attention for a capture pass".into())
        })?;
        for &id in &layers {
            let layer = record.layer(id).ok_or_else(|| {
                SwapError::param(format!("attention layer {id} was not captured"))
            })?;
            let refined =
                refine_attention_with(params.refine, &layer.self_attn, &layer.cross, params.alpha)?;
            let sal = token_saliency(&refined, &tokens, layer.grid)?;
            if !sal.normalized {
                log::debug!("layer {id} at t={t}: constant saliency, skipped");
                continue;
            }
            acc += &upsample_bilinear(&sal.values, latent_grid);
            contributing += 1;
        }
    }
    if contributing == 0 {
        return Err(SwapError::DegenerateAttention);
    }
    acc /= contributing as f64;
    Ok(SaliencyMap::normalize(acc))
}

pub fn localize(
    backend: &mut dyn DenoiserBackend,
    source: &LatentImage,
    source_prompt: &str,
    concept_word: &str,
    params: &LocalizeParams,
) -> Result<Localization> {
    let saliency = fused_saliency(backend, source, source_prompt, concept_word, params)?;
    let mask = threshold_mask(&saliency, params.beta)?;
    let bbox = mask_to_bbox(&mask)?;
    Ok(Localization {
        bbox,
        saliency,
        mask,
    })
}

/// Bounding box of `concept_word` on the latent grid.
pub fn generate_bbox(
    backend: &mut dyn DenoiserBackend,
    source: &LatentImage,
    source_prompt: &str,
    concept_word: &str,
    params: &LocalizeParams,
) -> Result<BBox> {
    localize(backend, source, source_prompt, concept_word, params).map(|l| l.bbox)
}

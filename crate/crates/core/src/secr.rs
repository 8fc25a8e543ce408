//! Regional cross-attention injection inside the concept box.
//!
//! Inside the (per-layer resized) box, a hooked layer's cross-attention output
//! is replaced by attention between the cropped image features and the
//! concept's own token embeddings; every position outside the box keeps the
//! layer's ordinary output.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use crate::backend::{prompt_words, Branch, DenoiserBackend, HookHandle, SecrHook, TextEmbedding};
use crate::bboxgen::BBox;
use crate::error::{Result, SwapError};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// height × width × channels
    pub values: Array3<f64>,
    pub layer_id: usize,
}

impl FeatureMap {
    pub fn new(values: Array3<f64>, layer_id: usize) -> Result<Self> {
        let (h, w, c) = values.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(SwapError::shape("feature map must have positive dims"));
        }
        Ok(Self { values, layer_id })
    }

    pub fn grid(&self) -> (usize, usize) {
        let (h, w, _) = self.values.dim();
        (h, w)
    }

    pub fn channels(&self) -> usize {
        self.values.dim().2
    }

    /// Positions × channels view in row-major position order.
    pub fn as_matrix(&self) -> ArrayView2<'_, f64> {
        let (h, w, c) = self.values.dim();
        self.values
            .view()
            .into_shape_with_order((h * w, c))
            .expect("standard layout")
    }
}

/// Query/key/value projections of one attention layer (row-vector convention:
/// `Q = f · wq`, `K = c · wk`, `V = c · wv`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    /// channels × d'
    pub wq: Array2<f64>,
    /// embed_dim × d'
    pub wk: Array2<f64>,
    /// embed_dim × value width
    pub wv: Array2<f64>,
}

impl ProjectionSet {
    pub fn new(wq: Array2<f64>, wk: Array2<f64>, wv: Array2<f64>) -> Result<Self> {
        if wq.ncols() != wk.ncols() || wq.ncols() == 0 {
            return Err(SwapError::shape(format!(
                "query width {} and key width {} must agree",
                wq.ncols(),
                wk.ncols()
            )));
        }
        if wk.nrows() != wv.nrows() {
            return Err(SwapError::shape("key and value projections read different embed dims"));
        }
        Ok(Self { wq, wk, wv })
    }

    pub fn d_prime(&self) -> usize {
        self.wq.ncols()
    }

    pub fn in_channels(&self) -> usize {
        self.wq.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.wk.nrows()
    }

    pub fn value_width(&self) -> usize {
        self.wv.ncols()
    }

    fn check(&self, channels: usize, embed_dim: usize) -> Result<()> {
        if channels != self.in_channels() {
            return Err(SwapError::shape(format!(
                "features have {channels} channels, projection expects {}",
                self.in_channels()
            )));
        }
        if embed_dim != self.embed_dim() {
            return Err(SwapError::shape(format!(
                "text embedding width {embed_dim}, projection expects {}",
                self.embed_dim()
            )));
        }
        Ok(())
    }
}

/// `bbox` rescaled onto `to_grid`, rounding mins down and maxes up.
pub fn resize_bbox(bbox: &BBox, to_grid: (usize, usize)) -> BBox {
    let (h, w) = bbox.grid;
    let (th, tw) = to_grid;
    let lo = |v: usize, from: usize, to: usize| v * to / from;
    let hi = |v: usize, from: usize, to: usize| {
        let scaled = (v * to).div_ceil(from);
        let extent = ((v + 1) * to).div_ceil(from).saturating_sub(1);
        scaled.max(extent).min(to - 1)
    };
    BBox {
        row_min: lo(bbox.row_min, h, th).min(th - 1),
        col_min: lo(bbox.col_min, w, tw).min(tw - 1),
        row_max: hi(bbox.row_max, h, th),
        col_max: hi(bbox.col_max, w, tw),
        grid: to_grid,
    }
}

/// Row-stochastic attention weights `softmax(Q Kᵀ / sqrt(d'))`.
pub fn attention_weights(
    queries: ArrayView2<'_, f64>,
    context: ArrayView2<'_, f64>,
    proj: &ProjectionSet,
) -> Result<Array2<f64>> {
    proj.check(queries.ncols(), context.ncols())?;
    if context.nrows() == 0 {
        return Err(SwapError::shape("empty concept embedding"));
    }
    let q = queries.dot(&proj.wq);
    let k = context.dot(&proj.wk);
    let mut scores = q.dot(&k.t()) / (proj.d_prime() as f64).sqrt();
    for mut row in scores.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    Ok(scores)
}

/// `softmax(Q Kᵀ / sqrt(d')) V` for a set of query rows.
pub fn attend(
    queries: ArrayView2<'_, f64>,
    context: ArrayView2<'_, f64>,
    proj: &ProjectionSet,
) -> Result<Array2<f64>> {
    let weights = attention_weights(queries, context, proj)?;
    Ok(weights.dot(&context.dot(&proj.wv)))
}

/// Dense cross-attention over every position of `feat`, evaluated position by
/// position. Returns positions × value width.
pub fn cross_attention(
    feat: &FeatureMap,
    context: &TextEmbedding,
    proj: &ProjectionSet,
) -> Result<Array2<f64>> {
    proj.check(feat.channels(), context.embed_dim())?;
    if context.num_tokens() == 0 {
        return Err(SwapError::shape("empty text embedding"));
    }
    let keys = context.values.dot(&proj.wk);
    let vals = context.values.dot(&proj.wv);
    let scale = 1.0 / (proj.d_prime() as f64).sqrt();
    let fm = feat.as_matrix();
    let mut out = Array2::zeros((fm.nrows(), proj.value_width()));
    let mut logits = vec![0.0; keys.nrows()];
    for (n, f) in fm.rows().into_iter().enumerate() {
        let q = f.dot(&proj.wq);
        for (l, k) in logits.iter_mut().zip(keys.rows()) {
            *l = q.dot(&k) * scale;
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut row = out.row_mut(n);
        for (e, v) in exps.iter().zip(vals.rows()) {
            row.scaled_add(e / z, &v);
        }
    }
    Ok(out)
}

/// Features inside `bbox` as (positions × channels), row-major within the box.
pub fn crop(feat: &FeatureMap, bbox: &BBox) -> Result<Array2<f64>> {
    bbox.ensure_grid(feat.grid(), "crop")?;
    let region = feat.values.slice(s![
        bbox.row_min..=bbox.row_max,
        bbox.col_min..=bbox.col_max,
        ..
    ]);
    Ok(region
        .to_owned()
        .into_shape_with_order((bbox.area(), feat.channels()))
        .expect("contiguous crop"))
}

/// Writes `region` (box positions × channels) into a positions × channels map
/// laid out on `bbox.grid`.
pub fn paste_region(base: &mut Array2<f64>, bbox: &BBox, region: &Array2<f64>) -> Result<()> {
    let (h, w) = bbox.grid;
    if base.nrows() != h * w || region.nrows() != bbox.area() || base.ncols() != region.ncols() {
        return Err(SwapError::shape(format!(
            "cannot paste {:?} region into {:?} map for {bbox}",
            region.dim(),
            base.dim()
        )));
    }
    let mut k = 0;
    for r in bbox.row_min..=bbox.row_max {
        for c in bbox.col_min..=bbox.col_max {
            base.row_mut(r * w + c).assign(&region.row(k));
            k += 1;
        }
    }
    Ok(())
}

/// Replaces the box region of `feat` with regional cross-attention against
/// `concept`; positions outside the box are returned untouched.
pub fn regional_cross_attention(
    feat: &FeatureMap,
    bbox_f: &BBox,
    concept: &TextEmbedding,
    proj: &ProjectionSet,
) -> Result<FeatureMap> {
    if proj.value_width() != feat.channels() {
        return Err(SwapError::shape(format!(
            "value width {} cannot be pasted into {} channels",
            proj.value_width(),
            feat.channels()
        )));
    }
    let cropped = crop(feat, bbox_f)?;
    let f_hat = attend(cropped.view(), concept.values.view(), proj)?;
    let mut out = feat.values.clone();
    let mut k = 0;
    for r in bbox_f.row_min..=bbox_f.row_max {
        for c in bbox_f.col_min..=bbox_f.col_max {
            out.slice_mut(s![r, c, ..]).assign(&f_hat.row(k));
            k += 1;
        }
    }
    FeatureMap::new(out, feat.layer_id)
}

/// Embedding rows of the concept phrase alone. An empty phrase yields the
/// backend's full null-prompt embedding.
pub fn concept_embedding(backend: &dyn DenoiserBackend, phrase: &str) -> Result<TextEmbedding> {
    if prompt_words(phrase).is_empty() {
        return backend.embed_prompt("");
    }
    let full = backend.embed_prompt(phrase)?;
    let idx = full.phrase_tokens(phrase)?;
    full.select_tokens(&idx)
}

/// Hooks every cross-attention layer of `branch`.
pub fn install_secr(
    backend: &mut dyn DenoiserBackend,
    branch: Branch,
    concept: TextEmbedding,
    bbox: BBox,
) -> Result<HookHandle> {
    install_secr_on(backend, branch, concept, bbox, None)
}

pub fn install_secr_on(
    backend: &mut dyn DenoiserBackend,
    branch: Branch,
    concept: TextEmbedding,
    bbox: BBox,
    layers: Option<Vec<usize>>,
) -> Result<HookHandle> {
    bbox.ensure_grid(backend.latent_dims().grid(), "secr bbox")?;
    if concept.num_tokens() == 0 {
        return Err(SwapError::param("concept embedding has no tokens"));
    }
    backend.install_hook(SecrHook {
        branch,
        concept,
        bbox,
        layers,
    })
}

pub fn uninstall_secr(backend: &mut dyn DenoiserBackend, handle: HookHandle) -> bool {
    backend.remove_hook(handle)
}

/// Rows of `m` summing to one within `tol`.
pub fn rows_stochastic(m: &Array2<f64>, tol: f64) -> bool {
    m.sum_axis(Axis(1)).iter().all(|s| (s - 1.0).abs() <= tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn2(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || StandardNormal.sample(rng))
    }

    fn embedding(values: Array2<f64>) -> TextEmbedding {
        TextEmbedding {
            values,
            token_spans: Default::default(),
        }
    }

    fn setup(seed: u64, h: usize, w: usize) -> (FeatureMap, TextEmbedding, ProjectionSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, e, d) = (6, 5, 4);
        let feat = FeatureMap::new(
            Array3::from_shape_simple_fn((h, w, c), || StandardNormal.sample(&mut rng)),
            0,
        )
        .unwrap();
        let concept = embedding(randn2(&mut rng, 3, e));
        let proj =
            ProjectionSet::new(randn2(&mut rng, c, d), randn2(&mut rng, e, d), randn2(&mut rng, e, c))
                .unwrap();
        (feat, concept, proj)
    }

    #[test]
    fn resize_identity_and_quarter() {
        let b = BBox::new(3, 4, 9, 11, (16, 16)).unwrap();
        assert_eq!(resize_bbox(&b, (16, 16)), b);
        let b = BBox::new(8, 8, 23, 23, (64, 64)).unwrap();
        assert_eq!(resize_bbox(&b, (16, 16)), BBox::new(2, 2, 6, 6, (16, 16)).unwrap());
        assert_eq!(resize_bbox(&BBox::full((64, 64)), (16, 16)), BBox::full((16, 16)));
    }

    #[test]
    fn resize_up_covers_pixel_extent() {
        let b = BBox::new(2, 3, 5, 8, (16, 16)).unwrap();
        assert_eq!(resize_bbox(&b, (32, 32)), BBox::new(4, 6, 11, 17, (32, 32)).unwrap());
    }

    #[test]
    fn full_box_matches_dense_attention() {
        let (feat, concept, proj) = setup(1, 5, 7);
        let regional = regional_cross_attention(&feat, &BBox::full((5, 7)), &concept, &proj).unwrap();
        let dense = cross_attention(&feat, &concept, &proj).unwrap();
        let diff = regional
            .as_matrix()
            .iter()
            .zip(dense.iter())
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff <= 1e-6, "max diff {diff}");
    }

    #[test]
    fn outside_box_untouched() {
        let (feat, concept, proj) = setup(2, 6, 6);
        let bbox = BBox::new(1, 2, 3, 4, (6, 6)).unwrap();
        let out = regional_cross_attention(&feat, &bbox, &concept, &proj).unwrap();
        for r in 0..6 {
            for c in 0..6 {
                if !bbox.contains(r, c) {
                    for k in 0..feat.channels() {
                        assert_eq!(out.values[[r, c, k]].to_bits(), feat.values[[r, c, k]].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn scalar_case_by_hand() {
        // one pixel with feature [1], two concept tokens, d' = 1
        let feat = FeatureMap::new(Array3::from_elem((2, 2, 1), 1.0), 0).unwrap();
        let concept = embedding(array![[1.0], [2.0]]);
        let proj = ProjectionSet::new(array![[0.5]], array![[1.0]], array![[3.0]]).unwrap();
        let bbox = BBox::new(1, 1, 1, 1, (2, 2)).unwrap();
        let out = regional_cross_attention(&feat, &bbox, &concept, &proj).unwrap();
        // q = 0.5, keys = [1, 2] -> logits [0.5, 1.0]; values [3, 6]
        let (e1, e2) = (0.5f64.exp(), 1.0f64.exp());
        let expected = (3.0 * e1 + 6.0 * e2) / (e1 + e2);
        assert!((out.values[[1, 1, 0]] - expected).abs() < 1e-12);
        assert_eq!(out.values[[0, 0, 0]], 1.0);
    }

    #[test]
    fn regional_weights_are_row_stochastic() {
        let (feat, concept, proj) = setup(3, 4, 4);
        let bbox = BBox::new(0, 1, 2, 3, (4, 4)).unwrap();
        let w = attention_weights(crop(&feat, &bbox).unwrap().view(), concept.values.view(), &proj)
            .unwrap();
        assert!(rows_stochastic(&w, 1e-5));
        assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn shape_errors() {
        let (feat, concept, mut proj) = setup(4, 3, 3);
        proj.wv = Array2::zeros((5, 2));
        assert!(matches!(
            regional_cross_attention(&feat, &BBox::full((3, 3)), &concept, &proj),
            Err(SwapError::Shape(_))
        ));
        let (feat, concept, proj) = setup(4, 3, 3);
        assert!(matches!(
            regional_cross_attention(&feat, &BBox::full((4, 4)), &concept, &proj),
            Err(SwapError::Shape(_))
        ));
    }
}

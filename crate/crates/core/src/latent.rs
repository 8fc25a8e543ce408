use ndarray::Array3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SwapError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentDims {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for LatentDims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Real-valued latent laid out as (channels, height, width).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentImage(Array3<f64>);

impl LatentImage {
    pub fn new(values: Array3<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dims: LatentDims) -> Self {
        Self(Array3::zeros((dims.channels, dims.height, dims.width)))
    }

    pub fn filled(dims: LatentDims, value: f64) -> Self {
        Self(Array3::from_elem(
            (dims.channels, dims.height, dims.width),
            value,
        ))
    }

    /// Standard normal draw of the given dims.
    pub fn randn<R: Rng + ?Sized>(dims: LatentDims, rng: &mut R) -> Self {
        Self(Array3::from_shape_simple_fn(
            (dims.channels, dims.height, dims.width),
            || rng.sample(StandardNormal),
        ))
    }

    pub fn dims(&self) -> LatentDims {
        let (c, h, w) = self.0.dim();
        LatentDims::new(c, h, w)
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut Array3<f64> {
        &mut self.0
    }

    pub fn into_values(self) -> Array3<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn ensure_dims(&self, expected: LatentDims, what: &str) -> Result<()> {
        if self.dims() != expected {
            return Err(SwapError::shape(format!(
                "{what}: expected {expected}, got {}",
                self.dims()
            )));
        }
        Ok(())
    }

    /// Largest absolute elementwise difference; dims must match.
    pub fn max_abs_diff(&self, other: &LatentImage) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()))
    }
}

impl From<Array3<f64>> for LatentImage {
    fn from(values: Array3<f64>) -> Self {
        Self(values)
    }
}

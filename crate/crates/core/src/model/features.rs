use crate::error::{Error, Result};

/// Per-pixel embeddings, `height x width x dim`, each pixel L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    /// Wraps already-normalized data. Fails if the length is off or any pixel
    /// vector is not unit norm within 1e-6.
    pub fn new(width: usize, height: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || dim == 0 {
            return Err(Error::invalid("feature map must be non-empty"));
        }
        if data.len() != width * height * dim {
            return Err(Error::invalid(format!(
                "feature data has {} entries, expected {}",
                data.len(),
                width * height * dim
            )));
        }
        if let Some(bad) = data.chunks(dim).position(|v| (norm(v) - 1.0).abs() > 1e-6) {
            return Err(Error::invalid(format!("pixel {bad} is not unit norm")));
        }
        Ok(Self {
            width,
            height,
            dim,
            data,
        })
    }

    /// Normalizes every pixel vector of `data`.
    pub fn from_unnormalized(width: usize, height: usize, dim: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * dim {
            return Err(Error::invalid("feature data length mismatch"));
        }
        for v in data.chunks_mut(dim) {
            let n = norm(v);
            if !(n > 1e-12) || !n.is_finite() {
                return Err(Error::NumericalFailure("cannot normalize zero feature".into()));
            }
            v.iter_mut().for_each(|x| *x /= n);
        }
        Self::new(width, height, dim, data)
    }

    pub(crate) fn from_parts_unchecked(width: usize, height: usize, dim: usize, data: Vec<f64>) -> Self {
        Self {
            width,
            height,
            dim,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        self.at(y * self.width + x)
    }

    /// Pixel by flat row-major index.
    pub fn at(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn pixels(&self) -> std::slice::Chunks<'_, f64> {
        self.data.chunks(self.dim)
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

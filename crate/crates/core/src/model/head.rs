use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::features::{dot, norm, FeatureMap};
use crate::error::{Error, Result};
use crate::par;
use crate::raster::LabelMap;

/// Rows within this distance of unit norm are left alone by
/// [`CosineClassifier::project_rows`].
const UNIT_TOLERANCE: f64 = 5e-7;

/// L2-normalized 1x1 classification layer scored by cosine similarity.
///
/// Each row is a unit class template. Imprinted rows remember the class they
/// stand in for (`parents`), which evaluation uses to fold them back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineClassifier {
    dim: usize,
    weights: Vec<f64>,
    margin: f64,
    scale: f64,
    class_names: Vec<String>,
    parents: Vec<Option<usize>>,
}

impl CosineClassifier {
    pub const DEFAULT_MARGIN: f64 = 0.1;
    pub const DEFAULT_SCALE: f64 = 16.0;

    pub fn new(
        dim: usize,
        weights: Vec<f64>,
        margin: f64,
        scale: f64,
        class_names: Vec<String>,
        parents: Vec<Option<usize>>,
    ) -> Result<Self> {
        let classes = class_names.len();
        if classes < 2 {
            return Err(Error::invalid("classifier needs at least two classes"));
        }
        if dim == 0 || weights.len() != classes * dim {
            return Err(Error::invalid(format!(
                "expected {} weights for {classes} classes of dim {dim}, got {}",
                classes * dim,
                weights.len()
            )));
        }
        if parents.len() != classes {
            return Err(Error::invalid("parent table length differs from class count"));
        }
        if parents.iter().flatten().any(|&p| p >= classes) {
            return Err(Error::invalid("parent class out of range"));
        }
        validate_hyper(margin, scale)?;
        if let Some(j) = weights.chunks(dim).position(|w| (norm(w) - 1.0).abs() > 1e-6) {
            return Err(Error::invalid(format!("weight row {j} is not unit norm")));
        }
        Ok(Self {
            dim,
            weights,
            margin,
            scale,
            class_names,
            parents,
        })
    }

    /// Like [`CosineClassifier::new`] but rows are used exactly as given,
    /// unit or not. Scores are then plain dot products; meant for
    /// finite-difference checks.
    pub fn from_raw(
        dim: usize,
        weights: Vec<f64>,
        margin: f64,
        scale: f64,
        class_names: Vec<String>,
        parents: Vec<Option<usize>>,
    ) -> Result<Self> {
        let unit = class_names.len() * dim;
        let mut head = Self::new(
            dim,
            (0..unit).map(|i| if i % dim.max(1) == 0 { 1.0 } else { 0.0 }).collect(),
            margin,
            scale,
            class_names,
            parents,
        )?;
        if weights.len() != unit {
            return Err(Error::invalid("weight count does not match classes and dim"));
        }
        head.weights = weights;
        Ok(head)
    }

    /// Random unit rows, one per name.
    pub fn random(dim: usize, class_names: Vec<String>, margin: f64, scale: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut weights: Vec<f64> = (0..dim * class_names.len())
            .map(|_| StandardNormal.sample(rng))
            .collect();
        for row in weights.chunks_mut(dim.max(1)) {
            let n = norm(row);
            row.iter_mut().for_each(|v| *v = super::to_storage(*v / n));
        }
        let parents = vec![None; class_names.len()];
        Self::new(dim, weights, margin, scale, class_names, parents)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn set_hyper(&mut self, margin: f64, scale: f64) -> Result<()> {
        validate_hyper(margin, scale)?;
        self.margin = margin;
        self.scale = scale;
        Ok(())
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    /// The pre-trained class an imprinted class eventually folds into.
    pub fn root_class(&self, mut class: usize) -> usize {
        while let Some(p) = self.parents.get(class).copied().flatten() {
            class = p;
        }
        class
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.weights[class * self.dim..(class + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Appends a class row. `row` is stored at `f32` precision.
    pub(crate) fn push_class(&mut self, row: &[f64], name: String, parent: Option<usize>) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::invalid(format!(
                "row has dimension {}, classifier has {}",
                row.len(),
                self.dim
            )));
        }
        if parent.is_some_and(|p| p >= self.class_count()) {
            return Err(Error::invalid("parent class out of range"));
        }
        self.weights.extend(row.iter().map(|&v| super::to_storage(v)));
        self.class_names.push(name);
        self.parents.push(parent);
        Ok(())
    }

    /// Projects rows that drifted off the unit sphere back onto it.
    pub(crate) fn project_rows(&mut self) {
        for row in self.weights.chunks_mut(self.dim) {
            let n = norm(row);
            if (n - 1.0).abs() > UNIT_TOLERANCE && n > 0.0 {
                row.iter_mut().for_each(|v| *v = super::to_storage(*v / n));
            }
        }
    }
}

fn validate_hyper(margin: f64, scale: f64) -> Result<()> {
    if !(0.0..=0.5).contains(&margin) {
        return Err(Error::invalid(format!("margin {margin} outside [0, 0.5]")));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("scale {scale} must be positive")));
    }
    Ok(())
}

/// Cosine scores, `height x width x classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    width: usize,
    height: usize,
    classes: usize,
    data: Vec<f64>,
}

impl ScoreMap {
    pub fn new(width: usize, height: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * classes {
            return Err(Error::invalid("score data length mismatch"));
        }
        Ok(Self {
            width,
            height,
            classes,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn at(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn get(&self, x: usize, y: usize, class: usize) -> f64 {
        self.data[(y * self.width + x) * self.classes + class]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// `score(h, w, j) = <feature(h, w), W_j>`.
pub fn cosine_logits(features: &FeatureMap, head: &CosineClassifier) -> Result<ScoreMap> {
    if features.dim() != head.dim() {
        return Err(Error::invalid(format!(
            "feature dimension {} does not match classifier dimension {}",
            features.dim(),
            head.dim()
        )));
    }
    let c = head.class_count();
    let w = features.width();
    let mut data = vec![0.0; features.pixel_count() * c];
    par::for_each_chunk_mut(&mut data, w * c, |y, row| {
        for (x, s) in row.chunks_mut(c).enumerate() {
            let f = features.pixel(x, y);
            for (j, v) in s.iter_mut().enumerate() {
                *v = dot(f, head.row(j));
            }
        }
    });
    ScoreMap::new(w, features.height(), c, data)
}

/// Per-pixel argmax; ties go to the lowest class index.
pub fn predict(scores: &ScoreMap) -> LabelMap {
    let labels = scores
        .data
        .chunks(scores.classes)
        .map(|s| {
            let mut best = 0;
            for (j, &v) in s.iter().enumerate().skip(1) {
                if v > s[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    LabelMap::new(scores.width, scores.height, labels).expect("score map dimensions are consistent")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    fn axis_head() -> CosineClassifier {
        // rows e0, e1, e2 in R^3
        let w = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        CosineClassifier::new(3, w, 0.1, 16.0, names(3), vec![None; 3]).unwrap()
    }

    #[test]
    fn score_examples() {
        let head = axis_head();
        // pixel 0 = W_2, pixel 1 orthogonal to W_1, pixel 2 = -W_0
        let f = FeatureMap::new(3, 1, 3, vec![0.0, 0.0, 1.0, 0.6, 0.0, 0.8, -1.0, 0.0, 0.0]).unwrap();
        let s = cosine_logits(&f, &head).unwrap();
        assert!((s.get(0, 0, 2) - 1.0).abs() < 1e-6);
        assert!(s.get(1, 0, 1).abs() < 1e-6);
        assert!((s.get(2, 0, 0) + 1.0).abs() < 1e-6);
    }

    #[test]
    fn dimension_mismatch() {
        let f = FeatureMap::new(1, 1, 2, vec![1.0, 0.0]).unwrap();
        assert!(matches!(cosine_logits(&f, &axis_head()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn argmax_and_ties() {
        let s = ScoreMap::new(2, 1, 3, vec![0.9, 0.2, 0.1, 0.5, 0.5, 0.1]).unwrap();
        assert_eq!(predict(&s).as_slice(), &[0, 0]);
        let s = ScoreMap::new(1, 1, 3, vec![0.1, 0.3, 0.3]).unwrap();
        assert_eq!(predict(&s).as_slice(), &[1]);
    }

    #[test]
    fn invalid_hyper_parameters() {
        let w = vec![1.0, 0.0, 0.0, 1.0];
        assert!(CosineClassifier::new(2, w.clone(), 0.6, 16.0, names(2), vec![None; 2]).is_err());
        assert!(CosineClassifier::new(2, w.clone(), 0.1, 0.0, names(2), vec![None; 2]).is_err());
        assert!(CosineClassifier::new(2, vec![1.0, 0.0], 0.1, 1.0, names(1), vec![None]).is_err());
        assert!(CosineClassifier::new(2, vec![1.0, 1.0, 0.0, 1.0], 0.1, 1.0, names(2), vec![None; 2]).is_err());
    }

    #[test]
    fn root_class_follows_parents() {
        let mut head = axis_head();
        head.push_class(&[1.0, 0.0, 0.0], "x".into(), Some(1)).unwrap();
        head.push_class(&[0.0, 1.0, 0.0], "y".into(), Some(3)).unwrap();
        assert_eq!(head.root_class(4), 1);
        assert_eq!(head.root_class(2), 2);
    }
}

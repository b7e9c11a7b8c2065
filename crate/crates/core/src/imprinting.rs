//! Prototype pooling over support masks and weight imprinting.
//!
//! [`masked_average_pool`] averages the masked pixel embeddings uniformly.
//! [`robust_average_pool`] first computes that average as a reference
//! direction and then weights every masked embedding by its clipped cosine to
//! the reference, so features pointing away from the bulk of the mask (depth
//! noise, registration error) contribute little or nothing.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CosineClassifier, FeatureMap};
use crate::par;
use crate::raster::BinaryMask;

/// Prototypes with a smaller raw norm are rejected.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMethod {
    Map,
    Rap,
}

impl fmt::Display for PoolingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingMethod::Map => "map",
            PoolingMethod::Rap => "rap",
        })
    }
}

impl FromStr for PoolingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "map" => Ok(PoolingMethod::Map),
            "rap" => Ok(PoolingMethod::Rap),
            other => Err(Error::invalid(format!("unknown pooling method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledPrototype {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub method: PoolingMethod,
    /// RAP only: the weight of every masked pixel, support images in order,
    /// pixels row-major.
    pub pixel_weights: Option<Vec<f64>>,
}

fn check_support(features: &[FeatureMap], masks: &[BinaryMask]) -> Result<(usize, usize)> {
    if features.is_empty() || features.len() != masks.len() {
        return Err(Error::invalid(format!(
            "{} feature maps for {} masks",
            features.len(),
            masks.len()
        )));
    }
    let dim = features[0].dim();
    for (i, (f, m)) in features.iter().zip(masks).enumerate() {
        if f.dim() != dim {
            return Err(Error::invalid("feature maps differ in dimension"));
        }
        if (f.width(), f.height()) != m.dims() {
            return Err(Error::invalid(format!("support pair {i}: mask does not match features")));
        }
    }
    let count: usize = masks.iter().map(BinaryMask::count).sum();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((dim, count))
}

/// Sums `weight(x) * x` over masked pixels of every support image.
fn weighted_sum(features: &[FeatureMap], masks: &[BinaryMask], dim: usize, weight: impl Fn(&[f64]) -> f64 + Sync + Send) -> Vec<f64> {
    let pairs: Vec<_> = features.iter().zip(masks).collect();
    let partials = par::map(&pairs, |(f, m)| {
        let mut acc = vec![0.0; dim];
        for (x, _) in f.pixels().zip(m.as_slice()).filter(|(_, &on)| on) {
            let w = weight(x);
            if w != 0.0 {
                acc.iter_mut().zip(x).for_each(|(a, b)| *a += w * b);
            }
        }
        acc
    });
    let mut sum = vec![0.0; dim];
    for p in partials {
        sum.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    sum
}

fn finish(raw: Vec<f64>, method: PoolingMethod, pixel_weights: Option<Vec<f64>>) -> Result<PooledPrototype> {
    let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n >= DEGENERATE_NORM) || !n.is_finite() {
        return Err(Error::DegeneratePrototype { norm: n });
    }
    let normalized = raw.iter().map(|v| v / n).collect();
    Ok(PooledPrototype {
        raw,
        normalized,
        method,
        pixel_weights,
    })
}

/// Uniform average of the masked embeddings, then L2 normalization.
pub fn masked_average_pool(features: &[FeatureMap], masks: &[BinaryMask]) -> Result<PooledPrototype> {
    let (dim, count) = check_support(features, masks)?;
    let mut raw = weighted_sum(features, masks, dim, |_| 1.0);
    raw.iter_mut().for_each(|v| *v /= count as f64);
    finish(raw, PoolingMethod::Map, None)
}

/// Robust average pooling against an explicit reference direction:
/// `v = max(0, <x, reference>)`, `raw = sum(v M x) / sum(M)`.
pub fn robust_average_pool_with_reference(
    features: &[FeatureMap],
    masks: &[BinaryMask],
    reference: &[f64],
) -> Result<PooledPrototype> {
    let (dim, count) = check_support(features, masks)?;
    if reference.len() != dim {
        return Err(Error::invalid("reference dimension mismatch"));
    }
    let weight = |x: &[f64]| x.iter().zip(reference).map(|(a, b)| a * b).sum::<f64>().max(0.0);
    let mut raw = weighted_sum(features, masks, dim, weight);
    raw.iter_mut().for_each(|v| *v /= count as f64);
    let weights = features
        .iter()
        .zip(masks)
        .flat_map(|(f, m)| f.pixels().zip(m.as_slice()).filter(|(_, &on)| on).map(|(x, _)| weight(x)))
        .collect();
    finish(raw, PoolingMethod::Rap, Some(weights))
}

/// Robust average pooling with the normalized masked average as reference,
/// so every weight lies in `[0, 1]`.
pub fn robust_average_pool(features: &[FeatureMap], masks: &[BinaryMask]) -> Result<PooledPrototype> {
    let reference = masked_average_pool(features, masks)?;
    robust_average_pool_with_reference(features, masks, &reference.normalized)
}

pub fn pool(method: PoolingMethod, features: &[FeatureMap], masks: &[BinaryMask]) -> Result<PooledPrototype> {
    match method {
        PoolingMethod::Map => masked_average_pool(features, masks),
        PoolingMethod::Rap => robust_average_pool(features, masks),
    }
}

/// Returns a copy of `head` with `prototype.normalized` appended as a new
/// class that folds into `parent` for evaluation. Existing rows are copied
/// untouched; the new row is stored at `f32` precision like all weights.
pub fn imprint(head: &CosineClassifier, prototype: &PooledPrototype, parent: usize) -> Result<CosineClassifier> {
    if prototype.normalized.len() != head.dim() {
        return Err(Error::invalid(format!(
            "prototype dimension {} does not match classifier dimension {}",
            prototype.normalized.len(),
            head.dim()
        )));
    }
    if parent >= head.class_count() {
        return Err(Error::invalid(format!("parent class {parent} out of range")));
    }
    let mut out = head.clone();
    let name = format!("{}+{}", head.class_names()[parent], prototype.method);
    out.push_class(&prototype.normalized, name, Some(parent))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(pixels: &[&[f64]]) -> FeatureMap {
        let dim = pixels[0].len();
        FeatureMap::new(pixels.len(), 1, dim, pixels.concat()).unwrap()
    }

    fn all(n: usize) -> BinaryMask {
        BinaryMask::from_fn(n, 1, |_, _| true)
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn single_pixel_is_its_feature() {
        let f = fm(&[&[0.6, 0.8], &[1.0, 0.0]]);
        let m = BinaryMask::from_fn(2, 1, |x, _| x == 0);
        let p = masked_average_pool(&[f], &[m]).unwrap();
        assert!(close(&p.normalized, &[0.6, 0.8], 1e-12));
    }

    #[test]
    fn orthonormal_pair() {
        let f = fm(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        let p = masked_average_pool(&[f], &[all(2)]).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert!(close(&p.normalized, &[h, h, 0.0], 1e-12));
    }

    #[test]
    fn empty_masks() {
        let f = fm(&[&[1.0, 0.0]]);
        let m = BinaryMask::new(1, 1);
        assert!(matches!(masked_average_pool(&[f.clone()], &[m.clone()]), Err(Error::EmptyMask)));
        assert!(matches!(robust_average_pool(&[f], &[m]), Err(Error::EmptyMask)));
    }

    #[test]
    fn cancelling_features_are_degenerate() {
        let f = fm(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        assert!(matches!(masked_average_pool(&[f], &[all(2)]), Err(Error::DegeneratePrototype { .. })));
    }

    #[test]
    fn rap_on_identical_features_equals_map() {
        let f = fm(&[&[0.6, 0.8], &[0.6, 0.8], &[0.6, 0.8]]);
        let map = masked_average_pool(&[f.clone()], &[all(3)]).unwrap();
        let rap = robust_average_pool(&[f], &[all(3)]).unwrap();
        assert!(close(&rap.normalized, &[0.6, 0.8], 1e-12));
        assert!(close(&rap.normalized, &map.normalized, 1e-12));
    }

    #[test]
    fn rap_suppresses_opposite_outlier() {
        let f = fm(&[&[1.0, 0.0], &[1.0, 0.0], &[-1.0, 0.0]]);
        let rap = robust_average_pool(&[f], &[all(3)]).unwrap();
        assert_eq!(rap.normalized, vec![1.0, 0.0]);
        assert_eq!(rap.pixel_weights.unwrap()[2], 0.0);
    }

    #[test]
    fn imprint_appends_row() {
        let head = CosineClassifier::new(
            2,
            vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8],
            0.1,
            16.0,
            vec!["a".into(), "b".into(), "c".into()],
            vec![None; 3],
        )
        .unwrap();
        let f = fm(&[&[-0.8, 0.6]]);
        let proto = robust_average_pool(&[f], &[all(1)]).unwrap();
        let out = imprint(&head, &proto, 0).unwrap();
        assert_eq!(out.class_count(), 4);
        assert_eq!(&out.weights()[..6], head.weights());
        assert_eq!(out.row(3), &[-0.8f32 as f64, 0.6f32 as f64]);
        assert_eq!(out.parents()[3], Some(0));
        let twice = imprint(&out, &proto, 0).unwrap();
        assert_eq!(twice.row(3), twice.row(4));
        assert!(imprint(&head, &proto, 3).is_err());
    }

    #[test]
    fn method_parsing() {
        assert_eq!("RAP".parse::<PoolingMethod>().unwrap(), PoolingMethod::Rap);
        assert!("mean".parse::<PoolingMethod>().is_err());
    }
}

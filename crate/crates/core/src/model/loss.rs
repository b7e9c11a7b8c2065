use serde::{Deserialize, Serialize};

use super::head::{CosineClassifier, ScoreMap};
use crate::error::{Error, Result};
use crate::raster::LabelMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Mean additive-angular-margin loss over all labelled pixels.
    pub loss: f64,
    pub pixels: usize,
    pub extractor_grad_norm: Option<f64>,
    pub head_grad_norm: Option<f64>,
}

/// `cos(theta + m)` for `cos(theta) = c`, and its derivative with respect to
/// `c`.
///
/// `c` is clamped to `[-1, 1]`; once `theta + m` passes `pi` the value is held
/// at `-1` with zero slope so the target logit stays monotone in `theta`.
/// With `m == 0` this is exactly the identity.
pub fn margin_cosine(c: f64, margin: f64) -> (f64, f64) {
    if margin == 0.0 {
        return (c, 1.0);
    }
    let (cos_m, sin_m) = (margin.cos(), margin.sin());
    if c <= -cos_m {
        return (-1.0, 0.0);
    }
    let clamped = c.min(1.0);
    let sin_t = (1.0 - clamped * clamped).max(0.0).sqrt();
    let value = clamped * cos_m - sin_t * sin_m;
    let slope = if c > 1.0 {
        0.0
    } else {
        cos_m + clamped * sin_m / sin_t.max(1e-12)
    };
    (value, slope)
}

/// Plain softmax cross-entropy of `logits` against class `target`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Loss of one pixel given its class cosines. When `dcos` is given the
/// gradient with respect to the cosines is added to it, weighted by `weight`.
pub fn arcface_pixel_terms(
    cosines: &[f64],
    target: usize,
    margin: f64,
    scale: f64,
    dcos: Option<(&mut [f64], f64)>,
) -> f64 {
    let c = cosines.len();
    let mut logits = [0.0f64; 64];
    let mut heap;
    let logits: &mut [f64] = if c <= 64 {
        &mut logits[..c]
    } else {
        heap = vec![0.0; c];
        &mut heap
    };
    let (target_cos, target_slope) = margin_cosine(cosines[target], margin);
    for (j, l) in logits.iter_mut().enumerate() {
        *l = scale * if j == target { target_cos } else { cosines[j] };
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let loss = max + sum.ln() - logits[target];
    if let Some((grad, weight)) = dcos {
        for j in 0..c {
            let p = (logits[j] - max).exp() / sum;
            let dl = p - if j == target { 1.0 } else { 0.0 };
            let dc = scale * dl * if j == target { target_slope } else { 1.0 };
            grad[j] += weight * dc;
        }
    }
    loss
}

/// Sum of per-pixel losses and, if requested, the gradient of
/// `sum / normalizer` with respect to every score.
pub(crate) fn arcface_sum(
    scores: &ScoreMap,
    labels: &LabelMap,
    margin: f64,
    scale: f64,
    grad: Option<(&mut [f64], f64)>,
) -> Result<f64> {
    check_labels(scores, labels)?;
    let c = scores.classes();
    let mut total = 0.0;
    match grad {
        Some((g, normalizer)) => {
            let w = 1.0 / normalizer;
            for (i, &y) in labels.as_slice().iter().enumerate() {
                total += arcface_pixel_terms(scores.at(i), y, margin, scale, Some((&mut g[i * c..(i + 1) * c], w)));
            }
        }
        None => {
            for (i, &y) in labels.as_slice().iter().enumerate() {
                total += arcface_pixel_terms(scores.at(i), y, margin, scale, None);
            }
        }
    }
    Ok(total)
}

pub(crate) fn check_labels(scores: &ScoreMap, labels: &LabelMap) -> Result<()> {
    if labels.dims() != (scores.width(), scores.height()) {
        return Err(Error::invalid("label map does not match score map"));
    }
    if let Some(&bad) = labels.as_slice().iter().find(|&&y| y >= scores.classes()) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {} classes",
            scores.classes()
        )));
    }
    Ok(())
}

/// Mean ArcFace loss of a score map against per-pixel labels, using the
/// head's margin and scale.
pub fn arcface_loss(scores: &ScoreMap, labels: &LabelMap, head: &CosineClassifier) -> Result<LossReport> {
    let total = arcface_sum(scores, labels, head.margin(), head.scale(), None)?;
    let pixels = scores.pixel_count();
    let loss = total / pixels as f64;
    if !loss.is_finite() {
        return Err(Error::NumericalFailure(format!("loss is {loss}")));
    }
    Ok(LossReport {
        loss,
        pixels,
        extractor_grad_norm: None,
        head_grad_norm: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head(margin: f64, scale: f64) -> CosineClassifier {
        CosineClassifier::new(
            2,
            vec![1.0, 0.0, 0.0, 1.0],
            margin,
            scale,
            vec!["a".into(), "b".into()],
            vec![None, None],
        )
        .unwrap()
    }

    fn one_pixel(cos: [f64; 2]) -> (ScoreMap, LabelMap) {
        (
            ScoreMap::new(1, 1, 2, cos.to_vec()).unwrap(),
            LabelMap::new(1, 1, vec![0]).unwrap(),
        )
    }

    #[test]
    fn zero_margin_single_pixel() {
        let (s, l) = one_pixel([1.0, -1.0]);
        let r = arcface_loss(&s, &l, &head(0.0, 1.0)).unwrap();
        // log(1 + e^-2)
        assert!((r.loss - 0.126_928_011_042_973).abs() < 1e-9, "{}", r.loss);
    }

    #[test]
    fn margin_single_pixel() {
        let (s, l) = one_pixel([1.0, -1.0]);
        let r = arcface_loss(&s, &l, &head(0.1, 1.0)).unwrap();
        let c = 0.1f64.cos();
        let expected = -(c.exp() / (c.exp() + (-1.0f64).exp())).ln();
        assert!((r.loss - expected).abs() < 1e-12);
        assert!((c - 0.995_004).abs() < 1e-6);
    }

    #[test]
    fn label_out_of_range() {
        let s = ScoreMap::new(1, 1, 2, vec![0.0, 0.0]).unwrap();
        let l = LabelMap::new(1, 1, vec![2]).unwrap();
        assert!(matches!(arcface_loss(&s, &l, &head(0.1, 1.0)), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn margin_cosine_clamps_past_pi() {
        let m = 0.3;
        // theta = pi - 0.1, theta + m > pi
        let c = (std::f64::consts::PI - 0.1).cos();
        assert_eq!(margin_cosine(c, m), (-1.0, 0.0));
        let (v, _) = margin_cosine(0.5, m);
        assert!((v - (0.5f64.acos() + m).cos()).abs() < 1e-12);
    }

    #[test]
    fn margin_cosine_slope_matches_difference() {
        for &c in &[-0.7, -0.2, 0.0, 0.4, 0.9] {
            let (_, slope) = margin_cosine(c, 0.2);
            let h = 1e-6;
            let fd = (margin_cosine(c + h, 0.2).0 - margin_cosine(c - h, 0.2).0) / (2.0 * h);
            assert!((slope - fd).abs() < 1e-6);
        }
    }
}

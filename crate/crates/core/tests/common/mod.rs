//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use touchprint::model::FeatureMap;
use touchprint::BinaryMask;

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    unit(&v)
}

/// Masked average then normalization, by explicit loops over image, row,
/// column and channel. Returns `(raw, normalized)`.
pub fn oracle_map(features: &[FeatureMap], masks: &[BinaryMask]) -> (Vec<f64>, Vec<f64>) {
    let dim = features[0].dim();
    let mut sum = vec![0.0; dim];
    let mut count = 0.0;
    for i in 0..features.len() {
        for y in 0..features[i].height() {
            for x in 0..features[i].width() {
                if masks[i].get(x, y) {
                    count += 1.0;
                    for d in 0..dim {
                        sum[d] += features[i].pixel(x, y)[d];
                    }
                }
            }
        }
    }
    let raw: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let normalized = raw.iter().map(|v| v / n).collect();
    (raw, normalized)
}

/// Robust pooling: weights are the cosine to the normalized masked
/// average, clipped at zero; the sum is divided by the mask count.
pub fn oracle_rap(features: &[FeatureMap], masks: &[BinaryMask]) -> (Vec<f64>, Vec<f64>) {
    let (_, center) = oracle_map(features, masks);
    let dim = center.len();
    let mut sum = vec![0.0; dim];
    let mut count = 0.0;
    for i in 0..features.len() {
        for y in 0..features[i].height() {
            for x in 0..features[i].width() {
                if !masks[i].get(x, y) {
                    continue;
                }
                count += 1.0;
                let f = features[i].pixel(x, y);
                let mut v = 0.0;
                for d in 0..dim {
                    v += f[d] * center[d];
                }
                if v < 0.0 {
                    v = 0.0;
                }
                for d in 0..dim {
                    sum[d] += v * f[d];
                }
            }
        }
    }
    let raw: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let normalized = raw.iter().map(|v| v / n).collect();
    (raw, normalized)
}

/// Random unit-feature support set with at least one masked pixel.
pub fn random_support(rng: &mut impl Rng) -> (Vec<FeatureMap>, Vec<BinaryMask>) {
    let n = rng.random_range(1..=3);
    let dim = rng.random_range(2..=8);
    let density = rng.random_range(0.1..0.9);
    let mut features = Vec::new();
    let mut masks = Vec::new();
    for _ in 0..n {
        let (w, h) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let data: Vec<f64> = (0..w * h).flat_map(|_| random_unit(dim, rng)).collect();
        features.push(FeatureMap::new(w, h, dim, data).unwrap());
        let bits: Vec<bool> = (0..w * h).map(|_| rng.random_bool(density)).collect();
        masks.push(BinaryMask::from_vec(w, h, bits).unwrap());
    }
    if masks.iter().all(|m| m.count() == 0) {
        masks[0].set(0, 0, true);
    }
    (features, masks)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

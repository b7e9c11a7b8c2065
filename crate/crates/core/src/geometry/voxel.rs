use std::collections::HashSet;

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_VOXEL_SIZE: f64 = 0.03;
pub const DEFAULT_TOUCH_RADIUS: f64 = 0.05;

/// Axis-aligned grid of cubic voxels with a sparse set of "interacted"
/// flags. Voxel `(i, j, k)` spans
/// `origin + [i, i+1) * size` on each axis; queries outside the grid are
/// never interacted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    origin: Point3<f64>,
    voxel_size: f64,
    dims: [usize; 3],
    interacted: HashSet<usize>,
}

impl VoxelGrid {
    pub fn new(origin: Point3<f64>, voxel_size: f64, dims: [usize; 3]) -> Result<Self> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::invalid("voxel size must be positive"));
        }
        if dims.contains(&0) {
            return Err(Error::invalid("voxel grid dimensions must be positive"));
        }
        if dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).is_none() {
            return Err(Error::invalid("voxel grid too large"));
        }
        Ok(Self {
            origin,
            voxel_size,
            dims,
            interacted: HashSet::new(),
        })
    }

    pub fn origin(&self) -> Point3<f64> {
        self.origin
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    /// Voxel containing `p`, if inside the grid.
    pub fn voxel_of(&self, p: &Point3<f64>) -> Option<[usize; 3]> {
        let rel = (p - self.origin) / self.voxel_size;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let f = rel[a].floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            idx[a] = f as usize;
        }
        Some(idx)
    }

    pub fn flat(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.dims[1] + idx[1]) * self.dims[2] + idx[2]
    }

    pub fn unflat(&self, flat: usize) -> [usize; 3] {
        let k = flat % self.dims[2];
        let rest = flat / self.dims[2];
        [rest / self.dims[1], rest % self.dims[1], k]
    }

    pub fn center(&self, idx: [usize; 3]) -> Point3<f64> {
        self.origin + Vector3::new(idx[0] as f64 + 0.5, idx[1] as f64 + 0.5, idx[2] as f64 + 0.5) * self.voxel_size
    }

    pub fn is_interacted(&self, idx: [usize; 3]) -> bool {
        self.interacted.contains(&self.flat(idx))
    }

    /// Whether the voxel containing `p` has been touched.
    pub fn is_interacted_at(&self, p: &Point3<f64>) -> bool {
        self.voxel_of(p).is_some_and(|idx| self.is_interacted(idx))
    }

    pub fn interacted_count(&self) -> usize {
        self.interacted.len()
    }

    /// Flat indices of the touched voxels, sorted.
    pub fn interacted(&self) -> Vec<usize> {
        let mut v: Vec<_> = self.interacted.iter().copied().collect();
        v.sort_unstable();
        v
    }

    pub fn clear(&mut self) {
        self.interacted.clear();
    }

    /// Voxels whose centers lie within `radius` of `p` (inclusive).
    pub fn voxels_within(&self, p: &Point3<f64>, radius: f64) -> Vec<[usize; 3]> {
        let mut out = Vec::new();
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            // centers at origin + (i + 0.5) size
            let l = ((p[a] - radius - self.origin[a]) / self.voxel_size - 0.5).ceil();
            let h = ((p[a] + radius - self.origin[a]) / self.voxel_size - 0.5).floor();
            if !(h >= 0.0) || l > (self.dims[a] - 1) as f64 || l > h {
                return out;
            }
            lo[a] = l.max(0.0) as usize;
            hi[a] = (h as usize).min(self.dims[a] - 1);
        }
        let r2 = radius * radius;
        for i in lo[0]..=hi[0] {
            for j in lo[1]..=hi[1] {
                for k in lo[2]..=hi[2] {
                    let idx = [i, j, k];
                    if (self.center(idx) - p).norm_squared() <= r2 {
                        out.push(idx);
                    }
                }
            }
        }
        out
    }

    /// Flags every voxel whose center lies within `radius` of `hand`.
    /// Returns how many voxels were newly flagged.
    pub fn mark_interacted(&mut self, hand: &Point3<f64>, radius: f64) -> Result<usize> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::invalid("touch radius must be positive"));
        }
        if !hand.coords.iter().all(|c| c.is_finite()) {
            return Err(Error::invalid("hand point must be finite"));
        }
        let mut added = 0;
        for idx in self.voxels_within(hand, radius) {
            if self.interacted.insert(self.flat(idx)) {
                added += 1;
            }
        }
        Ok(added)
    }
}

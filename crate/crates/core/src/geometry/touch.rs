use std::collections::{HashMap, HashSet};

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::camera::deproject;
use super::scene::SyntheticScene;
use super::voxel::{VoxelGrid, DEFAULT_TOUCH_RADIUS};
use crate::classes::PLANT;
use crate::error::{Error, Result};

/// Hand positions in world coordinates, tagged with the frame they were
/// observed in.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HandTrajectory {
    pub points: Vec<(usize, Point3<f64>)>,
}

impl HandTrajectory {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }
}

const POINTS_PER_STROKE: usize = 4;
const WITHHELD_BIAS: f64 = 0.8;
/// Offset of a hand point from the voxel center it was drawn around.
const HAND_JITTER: f64 = 0.004;

#[derive(Default)]
struct VoxelStats {
    plant: u32,
    withheld: u32,
    other: u32,
}

/// Simulates a person touching plants: `strokes` short strokes of hand
/// points on visible plant voxels, preferring plants the training labels
/// got wrong. Hand points are kept where the touch sphere only reaches
/// voxels that contain nothing but plant surface (falling back to any plant
/// voxel when a scene has none of those).
pub fn simulate_touch(scene: &SyntheticScene, grid: &VoxelGrid, seed: u64, strokes: usize) -> Result<HandTrajectory> {
    let points = deproject(&scene.depth, &scene.intrinsics, &scene.pose)?;
    let mut stats: HashMap<usize, VoxelStats> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        let Some(idx) = p.as_ref().and_then(|p| grid.voxel_of(p)) else {
            continue;
        };
        let s = stats.entry(grid.flat(idx)).or_default();
        if scene.gt_labels.as_slice()[i] == PLANT {
            s.plant += 1;
            s.withheld += scene.withheld.as_slice()[i] as u32;
        } else {
            s.other += 1;
        }
    }
    let impure: HashSet<usize> = stats.iter().filter(|(_, s)| s.other > 0).map(|(&f, _)| f).collect();
    let mut plant: Vec<usize> = stats.iter().filter(|(_, s)| s.plant > 0).map(|(&f, _)| f).collect();
    plant.sort_unstable();
    if plant.is_empty() {
        return Err(Error::invalid("scene has no visible plant voxels"));
    }
    let reach = DEFAULT_TOUCH_RADIUS + HAND_JITTER * 3f64.sqrt() + 1e-9;
    let safe: Vec<usize> = plant
        .iter()
        .copied()
        .filter(|&f| {
            grid.voxels_within(&grid.center(grid.unflat(f)), reach)
                .iter()
                .all(|&n| !impure.contains(&grid.flat(n)))
        })
        .collect();
    let candidates = if safe.is_empty() { plant } else { safe };
    let (withheld, normal): (Vec<usize>, Vec<usize>) = candidates
        .iter()
        .partition(|f| 2 * stats[f].withheld > stats[f].plant);
    let withheld_set: HashSet<usize> = withheld.iter().copied().collect();
    let normal_set: HashSet<usize> = normal.iter().copied().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectory = HandTrajectory::default();
    let mut frame = 0;
    for _ in 0..strokes {
        let use_withheld = !withheld.is_empty() && (normal.is_empty() || rng.random_bool(WITHHELD_BIAS));
        let (pool, set) = if use_withheld {
            (&withheld, &withheld_set)
        } else {
            (&normal, &normal_set)
        };
        let mut current = pool[rng.random_range(0..pool.len())];
        for _ in 0..POINTS_PER_STROKE {
            let offset = Vector3::from_fn(|_, _| rng.random_range(-HAND_JITTER..=HAND_JITTER));
            trajectory.points.push((frame, grid.center(grid.unflat(current)) + offset));
            frame += 1;
            let neighbours: Vec<usize> = grid
                .voxels_within(&grid.center(grid.unflat(current)), 2.0 * grid.voxel_size())
                .into_iter()
                .map(|n| grid.flat(n))
                .filter(|f| *f != current && set.contains(f))
                .collect();
            if !neighbours.is_empty() {
                current = neighbours[rng.random_range(0..neighbours.len())];
            }
        }
    }
    Ok(trajectory)
}

//! Ray-cast synthetic RGB-D scenes of plant rows, artificial objects and
//! ground, with ground-truth labels.

use nalgebra::{Point3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::camera::{deproject, CameraIntrinsics, DepthImage, Pose};
use super::voxel::{VoxelGrid, DEFAULT_VOXEL_SIZE};
use crate::classes::{ARTIFICIAL, GROUND, PLANT};
use crate::error::{Error, Result};
use crate::model::LabeledScene;
use crate::par;
use crate::raster::{BinaryMask, LabelMap, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub dims: [usize; 3],
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            origin: [0.0, -3.0, -0.15],
            voxel_size: DEFAULT_VOXEL_SIZE,
            dims: [234, 200, 110],
        }
    }
}

impl GridSpec {
    pub fn build(&self) -> Result<VoxelGrid> {
        VoxelGrid::new(Point3::from(self.origin), self.voxel_size, self.dims)
    }
}

/// Generator parameters. World frame: x forward, y left, z up, ground at
/// `z = 0`, back wall at `x = wall_distance`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    pub camera_height: f64,
    pub camera_pitch_deg: f64,
    pub plant_rows: usize,
    pub plants_per_row: usize,
    /// Lateral distance of each row from the camera axis.
    pub row_offset: f64,
    pub plant_spacing: f64,
    /// Min and max foliage sphere radius.
    pub plant_radius: [f64; 2],
    /// Fraction of plants rendered as the variety that is labelled
    /// "artificial" in the training labels.
    pub withheld_fraction: f64,
    pub artificial_objects: usize,
    pub wall_distance: f64,
    /// Standard deviation of additive depth noise per frame, metres.
    pub depth_noise: f64,
    /// Maximum depth-to-RGB registration offset per frame, pixels.
    pub jitter_px: usize,
    pub grid: GridSpec,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            hfov_deg: 65.0,
            camera_height: 1.1,
            camera_pitch_deg: 25.0,
            plant_rows: 2,
            plants_per_row: 5,
            row_offset: 0.5,
            plant_spacing: 0.7,
            plant_radius: [0.1, 0.2],
            withheld_fraction: 0.4,
            artificial_objects: 4,
            wall_distance: 6.0,
            depth_noise: 0.01,
            jitter_px: 2,
            grid: GridSpec::default(),
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("scene spec: {m}")));
        if self.width < 8 || self.height < 8 {
            return bad("image must be at least 8x8");
        }
        if !(self.hfov_deg > 1.0 && self.hfov_deg < 170.0) {
            return bad("field of view out of range");
        }
        if !(self.camera_height > 0.0) {
            return bad("camera must be above ground");
        }
        if self.plant_rows == 0 || self.plants_per_row == 0 {
            return bad("need at least one plant");
        }
        if !(self.plant_radius[0] > 0.0 && self.plant_radius[0] <= self.plant_radius[1]) {
            return bad("plant radius range invalid");
        }
        if !(0.0..=1.0).contains(&self.withheld_fraction) {
            return bad("withheld fraction outside [0, 1]");
        }
        if !(self.depth_noise >= 0.0 && self.depth_noise.is_finite()) {
            return bad("depth noise must be non-negative");
        }
        if !(self.wall_distance > 1.0) {
            return bad("wall too close");
        }
        self.grid.build().map(|_| ())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::from_fov(self.width, self.height, self.hfov_deg)
    }

    pub fn pose(&self) -> Pose {
        Pose::looking_forward(Point3::new(0.0, 0.0, self.camera_height), self.camera_pitch_deg)
    }

    /// Same scene layout at another resolution.
    pub fn with_resolution(mut self, width: usize, height: usize) -> Self {
        self.width = width;
        self.height = height;
        self
    }

    pub fn noise_free(mut self) -> Self {
        self.depth_noise = 0.0;
        self.jitter_px = 0;
        self
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub seed: u64,
    pub spec: SceneSpec,
    pub rgb: RgbImage,
    /// Noise-free depth registered to `rgb`; see
    /// [`SyntheticScene::render_depth_frame`] for sensor frames.
    pub depth: DepthImage,
    pub gt_labels: LabelMap,
    /// Plant pixels that the training labels mark as artificial.
    pub withheld: BinaryMask,
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
}

#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub scene: SyntheticScene,
    /// Sorted flat indices (in `spec.grid`) of voxels containing visible
    /// plant surface.
    pub plant_voxels: Vec<usize>,
}

impl SyntheticScene {
    /// Ground truth with the withheld plants relabelled as artificial.
    pub fn as_trained_labels(&self) -> LabelMap {
        let data = self
            .gt_labels
            .as_slice()
            .iter()
            .zip(self.withheld.as_slice())
            .map(|(&l, &w)| if w { ARTIFICIAL } else { l })
            .collect();
        LabelMap::new(self.gt_labels.width(), self.gt_labels.height(), data).expect("same dimensions")
    }

    pub fn training_sample(&self) -> LabeledScene {
        LabeledScene {
            image: self.rgb.clone(),
            labels: self.as_trained_labels(),
        }
    }

    pub fn empty_grid(&self) -> Result<VoxelGrid> {
        self.spec.grid.build()
    }

    /// One simulated sensor frame: the depth map shifted by a random
    /// registration offset of up to `jitter_px` pixels, plus Gaussian noise.
    /// Pixels shifted in from outside the image are invalid.
    pub fn render_depth_frame(&self, rng: &mut impl Rng) -> DepthImage {
        let (w, h) = (self.depth.width(), self.depth.height());
        let j = self.spec.jitter_px as i64;
        let (dx, dy) = if j > 0 {
            (rng.random_range(-j..=j), rng.random_range(-j..=j))
        } else {
            (0, 0)
        };
        let noise = (self.spec.depth_noise > 0.0).then(|| Normal::new(0.0, self.spec.depth_noise).expect("positive sigma"));
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (sx, sy) = (x + dx, y + dy);
                let z = if sx >= 0 && sy >= 0 && sx < w as i64 && sy < h as i64 {
                    self.depth.get(sx as usize, sy as usize)
                } else {
                    0.0
                };
                let z = match (&noise, z > 0.0) {
                    (Some(n), true) => (z + n.sample(rng)).max(0.0),
                    _ => z,
                };
                data.push(z);
            }
        }
        DepthImage::new(w, h, data).expect("rendered depth is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Material {
    Ground,
    Wall,
    Plant { withheld: bool },
    Object { color: [f64; 3] },
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Sphere { center: Point3<f64>, radius: f64 },
    Aabb { min: Point3<f64>, max: Point3<f64> },
}

#[derive(Debug, Clone, Copy)]
struct Primitive {
    shape: Shape,
    material: Material,
}

struct Hit {
    t: f64,
    normal: Vector3<f64>,
    material: Material,
}

const OBJECT_COLORS: [[f64; 3]; 5] = [
    [50.0, 80.0, 165.0],
    [165.0, 55.0, 40.0],
    [205.0, 205.0, 198.0],
    [70.0, 70.0, 78.0],
    [200.0, 150.0, 40.0],
];

fn layout(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<Primitive> {
    let mut prims = Vec::new();
    let n_plants = spec.plant_rows * spec.plants_per_row;
    let n_withheld = (spec.withheld_fraction * n_plants as f64).round() as usize;
    let mut withheld = vec![false; n_plants];
    withheld[..n_withheld].iter_mut().for_each(|w| *w = true);
    withheld.shuffle(rng);

    let row_y = |r: usize| (r as f64 - (spec.plant_rows - 1) as f64 / 2.0) * 2.0 * spec.row_offset;
    for r in 0..spec.plant_rows {
        for i in 0..spec.plants_per_row {
            let base_x = 1.4 + i as f64 * spec.plant_spacing + rng.random_range(-0.12..0.12);
            let base_y = row_y(r) + rng.random_range(-0.08..0.08);
            let blobs = rng.random_range(3..=5);
            for _ in 0..blobs {
                let radius = rng.random_range(spec.plant_radius[0]..=spec.plant_radius[1]);
                let center = Point3::new(
                    base_x + rng.random_range(-0.12..0.12),
                    base_y + rng.random_range(-0.12..0.12),
                    rng.random_range(radius * 0.8..0.55),
                );
                prims.push(Primitive {
                    shape: Shape::Sphere { center, radius },
                    material: Material::Plant {
                        withheld: withheld[r * spec.plants_per_row + i],
                    },
                });
            }
        }
    }

    let rows: Vec<f64> = (0..spec.plant_rows).map(row_y).collect();
    let mut placed = 0;
    let mut attempts = 0;
    while placed < spec.artificial_objects && attempts < 200 {
        attempts += 1;
        let x = rng.random_range(1.3..spec.wall_distance - 0.8);
        let y = rng.random_range(-1.8..1.8);
        if rows.iter().any(|ry| (y - ry).abs() < 0.4) {
            continue;
        }
        let (sx, sy, sz) = match rng.random_range(0..3) {
            0 => (0.4, 0.3, 0.3),
            1 => (0.08, 0.08, 1.3),
            _ => (0.3, 0.3, rng.random_range(0.3..0.7)),
        };
        let color = OBJECT_COLORS[rng.random_range(0..OBJECT_COLORS.len())];
        prims.push(Primitive {
            shape: Shape::Aabb {
                min: Point3::new(x - sx / 2.0, y - sy / 2.0, 0.0),
                max: Point3::new(x + sx / 2.0, y + sy / 2.0, sz),
            },
            material: Material::Object { color },
        });
        placed += 1;
    }
    prims
}

fn intersect(shape: &Shape, o: &Point3<f64>, d: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    const EPS: f64 = 1e-6;
    match *shape {
        Shape::Sphere { center, radius } => {
            let oc = o - center;
            let a = d.norm_squared();
            let b = 2.0 * d.dot(&oc);
            let c = oc.norm_squared() - radius * radius;
            let disc = b * b - 4.0 * a * c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t = [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)].into_iter().find(|&t| t > EPS)?;
            let n = (o + d * t - center) / radius;
            Some((t, n))
        }
        Shape::Aabb { min, max } => {
            let mut t_near = f64::NEG_INFINITY;
            let mut t_far = f64::INFINITY;
            let mut axis = 0;
            for a in 0..3 {
                if d[a].abs() < 1e-12 {
                    if o[a] < min[a] || o[a] > max[a] {
                        return None;
                    }
                    continue;
                }
                let t1 = (min[a] - o[a]) / d[a];
                let t2 = (max[a] - o[a]) / d[a];
                let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                if lo > t_near {
                    t_near = lo;
                    axis = a;
                }
                t_far = t_far.min(hi);
            }
            if t_near > t_far || t_near <= EPS {
                return None;
            }
            let mut n = Vector3::zeros();
            n[axis] = -d[axis].signum();
            Some((t_near, n))
        }
    }
}

fn cast(prims: &[Primitive], spec: &SceneSpec, o: &Point3<f64>, d: &Vector3<f64>) -> Hit {
    let mut best = Hit {
        t: f64::INFINITY,
        normal: Vector3::z(),
        material: Material::Wall,
    };
    if d.z < 0.0 {
        let t = -o.z / d.z;
        if t > 0.0 {
            best = Hit {
                t,
                normal: Vector3::z(),
                material: Material::Ground,
            };
        }
    }
    if d.x > 0.0 {
        let t = (spec.wall_distance - o.x) / d.x;
        if t > 0.0 && t < best.t {
            best = Hit {
                t,
                normal: -Vector3::x(),
                material: Material::Wall,
            };
        }
    }
    for p in prims {
        if let Some((t, n)) = intersect(&p.shape, o, d) {
            if t < best.t {
                best = Hit {
                    t,
                    normal: n,
                    material: p.material,
                };
            }
        }
    }
    best
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn lattice(seed: u64, i: i64, j: i64, k: i64) -> f64 {
    let h = splitmix(seed ^ splitmix(i as u64 ^ splitmix(j as u64 ^ splitmix(k as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth value noise in `[0, 1]` at `frequency` cycles per metre.
fn value_noise(seed: u64, p: &Point3<f64>, frequency: f64) -> f64 {
    let q = p.coords * frequency;
    let base = q.map(f64::floor);
    let f = q - base;
    let s = f.map(|t| t * t * (3.0 - 2.0 * t));
    let (i, j, k) = (base.x as i64, base.y as i64, base.z as i64);
    let mut acc = 0.0;
    for (di, wx) in [(0, 1.0 - s.x), (1, s.x)] {
        for (dj, wy) in [(0, 1.0 - s.y), (1, s.y)] {
            for (dk, wz) in [(0, 1.0 - s.z), (1, s.z)] {
                acc += wx * wy * wz * lattice(seed, i + di, j + dj, k + dk);
            }
        }
    }
    acc
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn shade(seed: u64, hit: &Hit, p: &Point3<f64>) -> [f64; 3] {
    let light = Vector3::new(-0.3, 0.4, 1.0).normalize();
    let diffuse = 0.6 + 0.4 * hit.normal.dot(&light).max(0.0);
    let grain = value_noise(seed ^ 0x51, p, 60.0);
    let albedo = match hit.material {
        Material::Ground => {
            let n = value_noise(seed ^ 0x11, p, 6.0);
            lerp([80.0, 58.0, 40.0], [150.0, 118.0, 86.0], 0.6 * n + 0.4 * grain)
        }
        Material::Wall => {
            let seam = if (p.y * 2.0).rem_euclid(1.0) < 0.04 { 0.8 } else { 1.0 };
            let n = value_noise(seed ^ 0x22, p, 3.0);
            lerp([150.0, 156.0, 162.0], [185.0, 190.0, 196.0], n).map(|c| c * seam)
        }
        Material::Object { color } => {
            let n = value_noise(seed ^ 0x33, p, 10.0);
            color.map(|c| c * (0.9 + 0.2 * n))
        }
        Material::Plant { withheld } => {
            let leaf = value_noise(seed ^ 0x44, p, 30.0);
            let green = lerp([22.0, 78.0, 24.0], [95.0, 175.0, 62.0], 0.7 * leaf + 0.3 * grain);
            if withheld {
                let yellow = lerp([105.0, 105.0, 35.0], [190.0, 180.0, 80.0], 0.7 * leaf + 0.3 * grain);
                let mix = value_noise(seed ^ 0x55, p, 14.0);
                let t = ((mix - 0.3) / 0.4).clamp(0.0, 1.0);
                lerp(green, yellow, t)
            } else {
                green
            }
        }
    };
    albedo.map(|c| (c * diffuse).clamp(0.0, 255.0))
}

/// Renders the scene for `seed`. Deterministic in `(seed, spec)`.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<GeneratedScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prims = layout(spec, &mut rng);
    let texture_seed = rng.random::<u64>();
    let intr = spec.intrinsics();
    let pose = spec.pose();
    let origin = pose.position();
    let (w, h) = (spec.width, spec.height);

    let ray = |u: f64, v: f64| pose.rotate(&Vector3::new((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0));
    let pixels = par::map_range(w * h, |i| {
        let (u, v) = ((i % w) as f64, (i / w) as f64);
        let hit = cast(&prims, spec, &origin, &ray(u, v));
        let label = match hit.material {
            Material::Plant { .. } => PLANT,
            Material::Ground => GROUND,
            Material::Wall | Material::Object { .. } => ARTIFICIAL,
        };
        let withheld = matches!(hit.material, Material::Plant { withheld: true });
        // colour: mean of a 2x2 grid of sub-pixel rays
        let mut color = [0.0; 3];
        for (du, dv) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
            let dir = ray(u + du, v + dv);
            let sub = cast(&prims, spec, &origin, &dir);
            let c = shade(texture_seed, &sub, &(origin + dir * sub.t));
            color.iter_mut().zip(c).for_each(|(a, b)| *a += b / 4.0);
        }
        (color, hit.t, label, withheld)
    });

    let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let c = pixels[y as usize * w + x as usize].0;
        image::Rgb(c.map(|v| v.round() as u8))
    });
    let depth = DepthImage::new(w, h, pixels.iter().map(|p| p.1).collect())?;
    let gt_labels = LabelMap::new(w, h, pixels.iter().map(|p| p.2).collect())?;
    let withheld = BinaryMask::from_vec(w, h, pixels.iter().map(|p| p.3).collect())?;

    let grid = spec.grid.build()?;
    let mut plant_voxels: Vec<usize> = deproject(&depth, &intr, &pose)?
        .iter()
        .zip(gt_labels.as_slice())
        .filter(|(_, &l)| l == PLANT)
        .filter_map(|(p, _)| p.as_ref().and_then(|p| grid.voxel_of(p)))
        .map(|idx| grid.flat(idx))
        .collect();
    plant_voxels.sort_unstable();
    plant_voxels.dedup();

    Ok(GeneratedScene {
        scene: SyntheticScene {
            seed,
            spec: *spec,
            rgb,
            depth,
            gt_labels,
            withheld,
            intrinsics: intr,
            pose,
        },
        plant_voxels,
    })
}

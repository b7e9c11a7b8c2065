//! Interactive refinement session. Strokes on scene images stand in for
//! touches; imprinting refines the session's model without gradients.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use touchprint::dataset::{list_scenes, load_scene};
use touchprint::eval::{evaluate, imprint_support, MetricsReport};
use touchprint::geometry::{
    deproject_pixel, frame_interaction_mask, temporal_or, DepthImage, SyntheticScene, VoxelGrid,
    DEFAULT_TOUCH_RADIUS, TEMPORAL_FRAMES,
};
use touchprint::imprinting::PoolingMethod;
use touchprint::model::SegmentationModel;
use touchprint::{checkpoint, BinaryMask, Error as CoreError, LabelMap};

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("{0}")]
    InvalidInput(String),
    #[error("{0}")]
    NotFound(String),
    #[error("the training mask is empty: no stroke covers a pixel the model currently predicts as plant; stroke over plant regions that are already partly recognized")]
    EmptyMask,
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    Internal(String),
}

impl From<CoreError> for SessionError {
    fn from(e: CoreError) -> Self {
        match e.root() {
            CoreError::EmptyMask => SessionError::EmptyMask,
            CoreError::InvalidInput(m) => SessionError::InvalidInput(m.clone()),
            CoreError::DegeneratePrototype { .. } => SessionError::Unprocessable(e.to_string()),
            _ => SessionError::Internal(e.to_string()),
        }
    }
}

pub type SessionResult<T> = Result<T, SessionError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone)]
pub struct SceneEntry {
    pub id: String,
    pub scene: SyntheticScene,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SceneSummary {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub strokes: usize,
}

/// Touch state of one scene: the voxels marked so far, the simulated
/// sensor frames and their interaction masks.
#[derive(Debug, Clone)]
struct Touch {
    grid: VoxelGrid,
    depth_frames: Vec<DepthImage>,
    frame_masks: Vec<BinaryMask>,
    strokes: Vec<Vec<Point>>,
}

#[derive(Debug, Clone)]
pub struct StrokeOutcome {
    /// Five-frame interaction mask of the scene after this stroke.
    pub mask: BinaryMask,
    pub marked_voxels: usize,
    /// Points without a valid depth reading.
    pub skipped: Vec<Point>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ImprintResult {
    pub before: MetricsReport,
    pub after: MetricsReport,
    pub elapsed_ms: f64,
    pub training_pixels: usize,
}

pub struct Session {
    pub id: String,
    pristine: Arc<SegmentationModel>,
    model: Arc<SegmentationModel>,
    scenes: Vec<SceneEntry>,
    test: Vec<SyntheticScene>,
    touches: BTreeMap<usize, Touch>,
    active: Option<usize>,
    pristine_metrics: MetricsReport,
    metrics: MetricsReport,
    seed: u64,
    touch_radius: f64,
}

impl Session {
    /// `test` defaults to the interaction scenes when empty.
    pub fn new(model: SegmentationModel, scenes: Vec<SceneEntry>, test: Vec<SyntheticScene>) -> SessionResult<Self> {
        if scenes.is_empty() {
            return Err(SessionError::InvalidInput("session needs at least one scene".into()));
        }
        let test = if test.is_empty() {
            scenes.iter().map(|s| s.scene.clone()).collect()
        } else {
            test
        };
        let (metrics, _) = evaluate(&model, &test)?;
        let pristine = Arc::new(model);
        Ok(Self {
            id: "default".into(),
            model: pristine.clone(),
            pristine,
            scenes,
            test,
            touches: BTreeMap::new(),
            active: None,
            pristine_metrics: metrics.clone(),
            metrics,
            seed: 0,
            touch_radius: DEFAULT_TOUCH_RADIUS,
        })
    }

    /// Loads a checkpoint and every scene directory under `data`; metrics
    /// are computed on the scenes under `test`, or on `data` without it.
    pub fn open(checkpoint_path: &Path, data: &Path, test: Option<&Path>) -> anyhow::Result<Self> {
        let model = checkpoint::checkpoint_load(checkpoint_path)
            .with_context(|| format!("loading checkpoint {}", checkpoint_path.display()))?;
        let scenes = load_dir(data)?
            .into_iter()
            .map(|(id, scene)| SceneEntry { id, scene })
            .collect();
        let test = match test {
            Some(dir) => load_dir(dir)?.into_iter().map(|(_, s)| s).collect(),
            None => Vec::new(),
        };
        Session::new(model, scenes, test).map_err(|e| anyhow::anyhow!(e))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn model(&self) -> Arc<SegmentationModel> {
        self.model.clone()
    }

    pub fn pristine(&self) -> Arc<SegmentationModel> {
        self.pristine.clone()
    }

    pub fn metrics(&self) -> &MetricsReport {
        &self.metrics
    }

    pub fn pristine_metrics(&self) -> &MetricsReport {
        &self.pristine_metrics
    }

    pub fn active_scene(&self) -> Option<&str> {
        self.active.map(|i| self.scenes[i].id.as_str())
    }

    pub fn scenes(&self) -> Vec<SceneSummary> {
        self.scenes
            .iter()
            .enumerate()
            .map(|(i, e)| SceneSummary {
                id: e.id.clone(),
                width: e.scene.rgb.width() as usize,
                height: e.scene.rgb.height() as usize,
                strokes: self.touches.get(&i).map_or(0, |t| t.strokes.len()),
            })
            .collect()
    }

    pub fn scene(&self, id: &str) -> SessionResult<&SyntheticScene> {
        Ok(&self.scenes[self.index(id)?].scene)
    }

    pub fn stroke_history(&self, id: &str) -> SessionResult<Vec<Vec<Point>>> {
        let i = self.index(id)?;
        Ok(self.touches.get(&i).map(|t| t.strokes.clone()).unwrap_or_default())
    }

    fn index(&self, id: &str) -> SessionResult<usize> {
        self.scenes
            .iter()
            .position(|e| e.id == id)
            .ok_or_else(|| SessionError::NotFound(format!("no scene {id:?}")))
    }

    /// Marks the voxels around every stroke point and returns the scene's
    /// updated interaction mask.
    pub fn apply_stroke(&mut self, id: &str, points: &[Point]) -> SessionResult<StrokeOutcome> {
        let i = self.index(id)?;
        let scene = &self.scenes[i].scene;
        let (w, h) = (scene.depth.width() as f64, scene.depth.height() as f64);
        if let Some(p) = points
            .iter()
            .find(|p| !(p.x >= 0.0 && p.y >= 0.0 && p.x < w && p.y < h))
        {
            return Err(SessionError::InvalidInput(format!(
                "point ({}, {}) lies outside the {w}x{h} image",
                p.x, p.y
            )));
        }
        self.active = Some(i);
        if points.is_empty() {
            let mask = self.touches.get(&i).map_or_else(
                || BinaryMask::new(scene.depth.width(), scene.depth.height()),
                |t| combined(&t.frame_masks),
            );
            return Ok(StrokeOutcome {
                mask,
                marked_voxels: 0,
                skipped: Vec::new(),
            });
        }
        if !self.touches.contains_key(&i) {
            let grid = scene.empty_grid()?;
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let depth_frames: Vec<DepthImage> = (0..TEMPORAL_FRAMES).map(|_| scene.render_depth_frame(&mut rng)).collect();
            let frame_masks = vec![BinaryMask::new(scene.depth.width(), scene.depth.height()); TEMPORAL_FRAMES];
            self.touches.insert(
                i,
                Touch {
                    grid,
                    depth_frames,
                    frame_masks,
                    strokes: Vec::new(),
                },
            );
        }
        let touch = self.touches.get_mut(&i).expect("inserted above");
        let mut marked_voxels = 0;
        let mut skipped = Vec::new();
        for p in points {
            let (u, v) = (p.x.floor(), p.y.floor());
            let z = scene.depth.get(u as usize, v as usize);
            if !(z > 0.0) {
                skipped.push(*p);
                continue;
            }
            let world = deproject_pixel(u, v, z, &scene.intrinsics, &scene.pose);
            marked_voxels += touch.grid.mark_interacted(&world, self.touch_radius)?;
        }
        touch.frame_masks = touch
            .depth_frames
            .iter()
            .map(|d| frame_interaction_mask(d, &scene.intrinsics, &scene.pose, &touch.grid))
            .collect::<Result<_, _>>()?;
        touch.strokes.push(points.to_vec());
        Ok(StrokeOutcome {
            mask: combined(&touch.frame_masks),
            marked_voxels,
            skipped,
        })
    }

    /// Interaction mask of a scene; empty when it has not been stroked.
    pub fn interaction_mask(&self, id: &str) -> SessionResult<BinaryMask> {
        let i = self.index(id)?;
        let s = &self.scenes[i].scene;
        Ok(self.touches.get(&i).map_or_else(
            || BinaryMask::new(s.depth.width(), s.depth.height()),
            |t| combined(&t.frame_masks),
        ))
    }

    /// Pools the stroked scenes' training masks into a new plant prototype
    /// and imprints it into the current model.
    pub fn imprint(&mut self, method: PoolingMethod) -> SessionResult<ImprintResult> {
        if self.touches.is_empty() {
            return Err(SessionError::EmptyMask);
        }
        let (images, masks): (Vec<_>, Vec<_>) = self
            .touches
            .iter()
            .map(|(&i, t)| (self.scenes[i].scene.rgb.clone(), combined(&t.frame_masks)))
            .unzip();
        let out = imprint_support(&self.model, &images, &masks, method)?;
        let (metrics, _) = evaluate(&out.model, &self.test)?;
        self.model = Arc::new(out.model);
        self.metrics = metrics.clone();
        Ok(ImprintResult {
            before: self.pristine_metrics.clone(),
            after: metrics,
            elapsed_ms: out.elapsed_ms,
            training_pixels: out.training_masks.iter().map(BinaryMask::count).sum(),
        })
    }

    /// Back to the pristine checkpoint with no strokes.
    pub fn reset(&mut self) {
        self.model = self.pristine.clone();
        self.metrics = self.pristine_metrics.clone();
        self.touches.clear();
        self.active = None;
    }
}

fn combined(frames: &[BinaryMask]) -> BinaryMask {
    temporal_or(frames).expect("frame buffer always holds the full set of equally sized masks")
}

/// Scene directories under `dir`, keyed by directory name.
pub fn load_dir(dir: &Path) -> anyhow::Result<Vec<(String, SyntheticScene)>> {
    let dirs = list_scenes(dir).with_context(|| format!("listing scenes in {}", dir.display()))?;
    if dirs.is_empty() {
        anyhow::bail!("no scene directories under {}", dir.display());
    }
    dirs.iter()
        .map(|d| {
            let id = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let scene = load_scene(d).with_context(|| format!("loading {}", d.display()))?;
            Ok((id, scene))
        })
        .collect()
}

/// Folded prediction of `model` on a scene.
pub fn segmentation(model: &SegmentationModel, scene: &SyntheticScene) -> SessionResult<LabelMap> {
    Ok(model.predict_folded(&scene.rgb)?)
}

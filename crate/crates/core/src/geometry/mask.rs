use rand::Rng;

use super::camera::{deproject_pixel, CameraIntrinsics, DepthImage, Pose};
use super::scene::SyntheticScene;
use super::touch::HandTrajectory;
use super::voxel::VoxelGrid;
use crate::error::{Error, Result};
use crate::raster::{BinaryMask, LabelMap};

/// Frames OR-ed into one interaction mask.
pub const TEMPORAL_FRAMES: usize = 5;

/// Pixels whose deprojected point lies in a touched voxel. Pixels without a
/// valid depth are never set.
pub fn frame_interaction_mask(
    depth: &DepthImage,
    intr: &CameraIntrinsics,
    pose: &Pose,
    grid: &VoxelGrid,
) -> Result<BinaryMask> {
    intr.validate()?;
    if (depth.width(), depth.height()) != (intr.width, intr.height) {
        return Err(Error::invalid("depth image does not match intrinsics"));
    }
    let (w, h) = (depth.width(), depth.height());
    if grid.interacted_count() == 0 {
        return Ok(BinaryMask::new(w, h));
    }
    Ok(BinaryMask::from_fn(w, h, |x, y| {
        let z = depth.get(x, y);
        z > 0.0 && grid.is_interacted_at(&deproject_pixel(x as f64, y as f64, z, intr, pose))
    }))
}

/// Pixel-wise OR of exactly [`TEMPORAL_FRAMES`] masks.
pub fn temporal_or(masks: &[BinaryMask]) -> Result<BinaryMask> {
    if masks.len() != TEMPORAL_FRAMES {
        return Err(Error::invalid(format!(
            "expected {TEMPORAL_FRAMES} frame masks, got {}",
            masks.len()
        )));
    }
    let dims = masks[0].dims();
    if masks.iter().any(|m| m.dims() != dims) {
        return Err(Error::invalid("frame masks differ in size"));
    }
    let mut out = masks[0].clone();
    for m in &masks[1..] {
        out.or_assign(m);
    }
    Ok(out)
}

/// Keeps only interaction pixels the current model labels as `plant_class`.
pub fn filter_training_mask(interaction: &BinaryMask, predicted: &LabelMap, plant_class: usize) -> Result<BinaryMask> {
    if interaction.dims() != predicted.dims() {
        return Err(Error::invalid("interaction mask and prediction differ in size"));
    }
    let data = interaction
        .as_slice()
        .iter()
        .zip(predicted.as_slice())
        .map(|(&on, &label)| on && label == plant_class)
        .collect();
    BinaryMask::from_vec(interaction.width(), interaction.height(), data)
}

/// Per-frame masks and their OR.
#[derive(Debug, Clone)]
pub struct InteractionMasks {
    pub frames: Vec<BinaryMask>,
    pub combined: BinaryMask,
}

/// Runs the whole touch pipeline on a scene: marks every hand point in
/// `grid`, renders [`TEMPORAL_FRAMES`] noisy depth frames and ORs their
/// interaction masks.
pub fn interaction_mask(
    scene: &SyntheticScene,
    trajectory: &HandTrajectory,
    grid: &mut VoxelGrid,
    radius: f64,
    rng: &mut impl Rng,
) -> Result<InteractionMasks> {
    for (_, p) in &trajectory.points {
        grid.mark_interacted(p, radius)?;
    }
    let frames = (0..TEMPORAL_FRAMES)
        .map(|_| {
            let depth = scene.render_depth_frame(rng);
            frame_interaction_mask(&depth, &scene.intrinsics, &scene.pose, grid)
        })
        .collect::<Result<Vec<_>>>()?;
    let combined = temporal_or(&frames)?;
    Ok(InteractionMasks { frames, combined })
}

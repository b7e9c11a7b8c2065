//! RGB-D geometry: pinhole deprojection, the interaction voxel grid, the
//! touch-to-training-mask pipeline and the synthetic scene generator.

mod camera;
mod mask;
mod scene;
mod touch;
mod voxel;

pub use camera::{deproject, deproject_pixel, CameraIntrinsics, DepthImage, Pose};
pub use mask::{
    filter_training_mask, frame_interaction_mask, interaction_mask, temporal_or, InteractionMasks,
    TEMPORAL_FRAMES,
};
pub use scene::{generate_scene, GeneratedScene, GridSpec, SceneSpec, SyntheticScene};
pub use touch::{simulate_touch, HandTrajectory};
pub use voxel::{VoxelGrid, DEFAULT_TOUCH_RADIUS, DEFAULT_VOXEL_SIZE};

pub use nalgebra::{Point3, Vector3};

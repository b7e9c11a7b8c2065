//! On-disk scene datasets: one directory per scene holding `rgb.png`,
//! `depth.png` (16-bit millimetres), `labels.png` (8-bit ground truth),
//! `train_labels.png` (labels used for pre-training) and `meta.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classes::{ARTIFICIAL, PLANT};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthImage, Pose, SceneSpec, SyntheticScene};
use crate::raster::{BinaryMask, LabelMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub intrinsics: CameraIntrinsics,
    /// Camera-to-world transform, row-major.
    pub pose: Vec<f64>,
    pub seed: u64,
    pub spec: SceneSpec,
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_scene(scene: &SyntheticScene, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("rgb.png");
    scene.rgb.save(&p).map_err(image_err(&p))?;
    let p = dir.join("depth.png");
    scene.depth.to_millimetres().save(&p).map_err(image_err(&p))?;
    let p = dir.join("labels.png");
    scene.gt_labels.to_luma()?.save(&p).map_err(image_err(&p))?;
    let p = dir.join("train_labels.png");
    scene.as_trained_labels().to_luma()?.save(&p).map_err(image_err(&p))?;
    let meta = SceneMeta {
        intrinsics: scene.intrinsics,
        pose: scene.pose.to_row_major().to_vec(),
        seed: scene.seed,
        spec: scene.spec,
    };
    let p = dir.join("meta.json");
    fs::write(&p, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&p, e))
}

/// Loads a scene directory. Without `train_labels.png` the training labels
/// equal the ground truth.
pub fn load_scene(dir: impl AsRef<Path>) -> Result<SyntheticScene> {
    let dir = dir.as_ref();
    let p = dir.join("meta.json");
    let meta: SceneMeta = serde_json::from_slice(&fs::read(&p).map_err(|e| Error::io(&p, e))?)?;
    meta.intrinsics.validate()?;
    let (w, h) = (meta.intrinsics.width, meta.intrinsics.height);

    let p = dir.join("rgb.png");
    let rgb = image::open(&p).map_err(image_err(&p))?.into_rgb8();
    let p = dir.join("depth.png");
    let depth = DepthImage::from_millimetres(&image::open(&p).map_err(image_err(&p))?.into_luma16());
    let p = dir.join("labels.png");
    let gt_labels = LabelMap::from_luma(&image::open(&p).map_err(image_err(&p))?.into_luma8());
    let dims_ok = [
        (rgb.width() as usize, rgb.height() as usize),
        (depth.width(), depth.height()),
        gt_labels.dims(),
    ]
    .iter()
    .all(|&d| d == (w, h));
    if !dims_ok {
        return Err(Error::invalid(format!("{}: image sizes disagree with meta.json", dir.display())));
    }
    let p = dir.join("train_labels.png");
    let withheld = if p.exists() {
        let train = LabelMap::from_luma(&image::open(&p).map_err(image_err(&p))?.into_luma8());
        if train.dims() != (w, h) {
            return Err(Error::invalid(format!("{}: train_labels.png has the wrong size", dir.display())));
        }
        let data = gt_labels
            .as_slice()
            .iter()
            .zip(train.as_slice())
            .map(|(&g, &t)| g == PLANT && t == ARTIFICIAL)
            .collect();
        BinaryMask::from_vec(w, h, data)?
    } else {
        BinaryMask::new(w, h)
    };
    Ok(SyntheticScene {
        seed: meta.seed,
        spec: meta.spec,
        rgb,
        depth,
        gt_labels,
        withheld,
        intrinsics: meta.intrinsics,
        pose: Pose::from_row_major(&meta.pose)?,
    })
}

/// Scene directories under `root` (those containing `meta.json`), sorted
/// by name.
pub fn list_scenes(root: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let root = root.as_ref();
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.join("meta.json").is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

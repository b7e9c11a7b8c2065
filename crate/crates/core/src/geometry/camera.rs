use nalgebra::{Isometry3, Matrix3, Matrix4, Point3, Rotation3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid camera intrinsics {self:?}")))
        }
    }

    /// Intrinsics of an ideal camera with the given horizontal field of view
    /// and square pixels, principal point at the image center.
    pub fn from_fov(width: usize, height: usize, hfov_deg: f64) -> Self {
        let f = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        Self {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose(pub Isometry3<f64>);

impl Pose {
    pub fn identity() -> Self {
        Pose(Isometry3::identity())
    }

    /// Camera at `position` (world z up) looking along world +x, tilted
    /// down by `pitch_deg`. Camera axes: x right, y down, z forward.
    pub fn looking_forward(position: Point3<f64>, pitch_deg: f64) -> Self {
        let (s, c) = pitch_deg.to_radians().sin_cos();
        let right = Vector3::new(0.0, -1.0, 0.0);
        let down = Vector3::new(-s, 0.0, -c);
        let forward = Vector3::new(c, 0.0, -s);
        let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[right, down, forward]));
        Pose(Isometry3::from_parts(
            Translation3::from(position.coords),
            UnitQuaternion::from_rotation_matrix(&rot),
        ))
    }

    pub fn transform(&self, p: &Point3<f64>) -> Point3<f64> {
        self.0.transform_point(p)
    }

    pub fn inverse_transform(&self, p: &Point3<f64>) -> Point3<f64> {
        self.0.inverse_transform_point(p)
    }

    pub fn position(&self) -> Point3<f64> {
        Point3::from(self.0.translation.vector)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0.rotation * v
    }

    /// 4x4 homogeneous matrix, row-major.
    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.0.to_homogeneous();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 16 {
            return Err(Error::invalid("pose needs 16 values"));
        }
        let m = Matrix4::from_row_slice(v);
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        if (r.transpose() * r - Matrix3::identity()).abs().max() > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("pose rotation is not orthonormal"));
        }
        let rot = Rotation3::from_matrix_unchecked(r);
        let t = Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
        Ok(Pose(Isometry3::from_parts(
            Translation3::from(t),
            UnitQuaternion::from_rotation_matrix(&rot),
        )))
    }
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_row_major().to_vec().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        Pose::from_row_major(&v).map_err(serde::de::Error::custom)
    }
}

/// Metric depth along the optical axis; `0` marks a missing measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid("depth data length mismatch"));
        }
        if data.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::invalid("depth values must be finite and non-negative"));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// 16-bit millimetre encoding, saturating at 65.535 m.
    pub fn to_millimetres(&self) -> image::ImageBuffer<image::Luma<u16>, Vec<u16>> {
        image::ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let mm = (self.get(x as usize, y as usize) * 1000.0).round();
            image::Luma([mm.clamp(0.0, u16::MAX as f64) as u16])
        })
    }

    pub fn from_millimetres(img: &image::ImageBuffer<image::Luma<u16>, Vec<u16>>) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.pixels().map(|p| p[0] as f64 / 1000.0).collect(),
        }
    }
}

/// World point of pixel `(u, v)` at depth `z`.
pub fn deproject_pixel(u: f64, v: f64, z: f64, intr: &CameraIntrinsics, pose: &Pose) -> Point3<f64> {
    let cam = Point3::new((u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z);
    pose.transform(&cam)
}

/// World points of every pixel, row-major; `None` where depth is invalid.
pub fn deproject(depth: &DepthImage, intr: &CameraIntrinsics, pose: &Pose) -> Result<Vec<Option<Point3<f64>>>> {
    intr.validate()?;
    if (depth.width, depth.height) != (intr.width, intr.height) {
        return Err(Error::invalid("depth image does not match intrinsics"));
    }
    Ok(depth
        .data
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            (z > 0.0).then(|| deproject_pixel((i % depth.width) as f64, (i / depth.width) as f64, z, intr, pose))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 100.0,
            fy: 120.0,
            cx: 32.0,
            cy: 24.0,
            width: 64,
            height: 48,
        }
    }

    #[test]
    fn principal_ray() {
        let p = deproject_pixel(32.0, 24.0, 2.5, &intr(), &Pose::identity());
        assert_eq!(p, Point3::new(0.0, 0.0, 2.5));
    }

    #[test]
    fn one_focal_length_off_axis() {
        let d = 1.7;
        let p = deproject_pixel(32.0 + 100.0, 24.0, d, &intr(), &Pose::identity());
        assert!((p - Point3::new(d, 0.0, d)).norm() < 1e-12);
    }

    #[test]
    fn invalid_depth_gives_no_point() {
        let mut data = vec![1.0; 64 * 48];
        data[5] = 0.0;
        let depth = DepthImage::new(64, 48, data).unwrap();
        let pts = deproject(&depth, &intr(), &Pose::identity()).unwrap();
        assert!(pts[5].is_none());
        assert!(pts[6].is_some());
    }

    #[test]
    fn bad_intrinsics() {
        let mut i = intr();
        i.cx = 64.0;
        assert!(i.validate().is_err());
        i = intr();
        i.fx = 0.0;
        assert!(i.validate().is_err());
    }

    #[test]
    fn pose_row_major_round_trip() {
        let pose = Pose::looking_forward(Point3::new(0.0, 0.1, 1.2), 17.0);
        let back = Pose::from_row_major(&pose.to_row_major()).unwrap();
        let p = Point3::new(0.3, -0.2, 2.0);
        assert!((pose.transform(&p) - back.transform(&p)).norm() < 1e-12);
        // optical axis points forward and down
        let fwd = pose.rotate(&Vector3::new(0.0, 0.0, 1.0));
        assert!(fwd.x > 0.9 && fwd.z < 0.0);
        // image right is world -y (z up, right-handed)
        let right = pose.rotate(&Vector3::new(1.0, 0.0, 0.0));
        assert!((right - Vector3::new(0.0, -1.0, 0.0)).norm() < 1e-12);
    }
}

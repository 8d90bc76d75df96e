//! Pinhole camera model and depth backprojection.
//!
//! Camera frame convention: +z forward along the optical axis, +x right,
//! +y down. World frame: +z up. Depth values are the z-coordinate of the
//! surface point in the camera frame, not the length of the viewing ray.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Default reliable sensing range in meters.
pub const DEFAULT_MAX_RANGE: f64 = 15.0;

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
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("image size must be non-zero".into()));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::InvalidInput(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics of the same camera after downscaling the image by an
    /// integer factor with area averaging.
    pub fn downscaled(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(Error::InvalidInput(format!(
                "cannot downscale {}x{} by {factor}",
                self.width, self.height
            )));
        }
        let f = factor as f64;
        // pixel centers of block (i*f .. i*f+f-1) average to i*f + (f-1)/2
        Self::new(
            self.fx / f,
            self.fy / f,
            (self.cx - (f - 1.0) / 2.0) / f,
            (self.cy - (f - 1.0) / 2.0) / f,
            self.width / factor,
            self.height / factor,
        )
    }
}

/// Per-pixel depth in meters along the optical axis. Zero (or anything
/// non-finite / non-positive) marks a missing measurement; values beyond the
/// caller's max range are also treated as invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "depth buffer has {} values, expected {}x{}",
                values.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, values })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.width + u]
    }

    #[inline]
    pub fn is_valid_at(&self, idx: usize, max_range: f64) -> bool {
        is_valid_depth(self.values[idx], max_range)
    }

    pub fn valid_count(&self, max_range: f64) -> usize {
        self.values.iter().filter(|&&z| is_valid_depth(z, max_range)).count()
    }

    pub fn check_matches(&self, k: &CameraIntrinsics) -> Result<()> {
        if self.width != k.width || self.height != k.height {
            return Err(Error::InvalidInput(format!(
                "depth image is {}x{} but intrinsics describe {}x{}",
                self.width, self.height, k.width, k.height
            )));
        }
        Ok(())
    }
}

#[inline]
pub fn is_valid_depth(z: f64, max_range: f64) -> bool {
    z.is_finite() && z > 0.0 && z <= max_range
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Pose {
    /// Tolerance on the quaternion norm accepted from external input.
    pub const UNIT_TOLERANCE: f64 = 1e-6;

    /// Builds a pose from quaternion components `(qx, qy, qz, qw)`; the
    /// quaternion must already be unit length.
    pub fn from_components(q: [f64; 4], translation: Vec3) -> Result<Self> {
        let quat = Quaternion::new(q[3], q[0], q[1], q[2]);
        let norm = quat.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > Self::UNIT_TOLERANCE {
            return Err(Error::InvalidInput(format!("pose quaternion norm {norm} is not 1")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("pose translation not finite".into()));
        }
        Ok(Self {
            rotation: UnitQuaternion::new_normalize(quat),
            translation,
        })
    }

    pub fn from_rotation(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    /// `(qx, qy, qz, qw)`
    pub fn quaternion_components(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.i, q.j, q.k, q.w]
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// World +z expressed in the camera frame.
    pub fn up_in_camera(&self) -> Vec3 {
        self.rotation.inverse() * Vec3::z()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    /// Row-major source pixel index (`v * width + u`) of each point.
    pub pixel_index: Vec<usize>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn backproject_pixel(u: f64, v: f64, z: f64, k: &CameraIntrinsics) -> Result<Vec3> {
    if !z.is_finite() || z <= 0.0 {
        return Err(Error::InvalidInput(format!("depth {z} must be positive and finite")));
    }
    if !(0.0..k.width as f64).contains(&u) || !(0.0..k.height as f64).contains(&v) {
        return Err(Error::InvalidInput(format!(
            "pixel ({u}, {v}) outside {}x{} image",
            k.width, k.height
        )));
    }
    Ok(unproject(u, v, z, k))
}

#[inline]
pub(crate) fn unproject(u: f64, v: f64, z: f64, k: &CameraIntrinsics) -> Vec3 {
    Vec3::new((u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z)
}

/// One point per pixel with `0 < depth <= max_range`, in row-major pixel order.
pub fn backproject_image(depth: &DepthImage, k: &CameraIntrinsics, max_range: f64) -> Result<PointCloud> {
    depth.check_matches(k)?;
    let mut cloud = PointCloud::default();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let idx = v * depth.width + u;
            let z = depth.values[idx];
            if is_valid_depth(z, max_range) {
                cloud.points.push(unproject(u as f64, v as f64, z, k));
                cloud.pixel_index.push(idx);
            }
        }
    }
    Ok(cloud)
}

pub fn transform_to_world(cloud: &PointCloud, pose: &Pose) -> Result<PointCloud> {
    let norm = pose.rotation.quaternion().norm();
    if (norm - 1.0).abs() > Pose::UNIT_TOLERANCE {
        return Err(Error::InvalidInput(format!("pose quaternion norm {norm} is not 1")));
    }
    Ok(PointCloud {
        points: cloud.points.iter().map(|p| pose.apply(p)).collect(),
        pixel_index: cloud.pixel_index.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 80.0, 60.0, 160, 120).unwrap()
    }

    fn project(p: &Vec3, k: &CameraIntrinsics) -> (f64, f64) {
        (k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy)
    }

    #[test]
    fn pinhole_examples() {
        let k = k();
        assert_eq!(
            backproject_pixel(80.0, 60.0, 2.0, &k).unwrap(),
            Vec3::new(0.0, 0.0, 2.0)
        );
        // u = 180 lies outside a 160-wide image
        assert!(backproject_pixel(180.0, 60.0, 2.0, &k).is_err());
        let wide = CameraIntrinsics::new(100.0, 100.0, 80.0, 60.0, 320, 240).unwrap();
        assert_eq!(
            backproject_pixel(180.0, 60.0, 2.0, &wide).unwrap(),
            Vec3::new(2.0, 0.0, 2.0)
        );
        assert_eq!(
            backproject_pixel(80.0, 160.0, 0.5, &wide).unwrap(),
            Vec3::new(0.0, 0.5, 0.5)
        );
    }

    #[test]
    fn rejects_bad_depth() {
        let k = k();
        assert!(matches!(
            backproject_pixel(1.0, 1.0, 0.0, &k),
            Err(Error::InvalidInput(_))
        ));
        assert!(backproject_pixel(1.0, 1.0, -1.0, &k).is_err());
        assert!(backproject_pixel(1.0, 1.0, f64::NAN, &k).is_err());
        assert!(backproject_pixel(1.0, 1.0, f64::INFINITY, &k).is_err());
    }

    #[test]
    fn intrinsics_invariants() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, -0.1, 1.0, 4, 4).is_err());
    }

    #[test]
    fn image_backprojection() {
        let k = k();
        let empty = DepthImage::zeros(160, 120);
        assert!(backproject_image(&empty, &k, 15.0).unwrap().is_empty());

        let mut one = DepthImage::zeros(160, 120);
        one.values[60 * 160 + 80] = 1.0;
        let cloud = backproject_image(&one, &k, 15.0).unwrap();
        assert_eq!(cloud.points, vec![Vec3::new(0.0, 0.0, 1.0)]);
        assert_eq!(cloud.pixel_index, vec![60 * 160 + 80]);

        let bad = DepthImage::zeros(80, 60);
        assert!(backproject_image(&bad, &k, 15.0).is_err());
    }

    #[test]
    fn range_cutoff_is_inclusive() {
        let k = k();
        let mut d = DepthImage::zeros(160, 120);
        d.values[0] = 15.0;
        d.values[1] = 15.000001;
        d.values[2] = f64::NAN;
        let cloud = backproject_image(&d, &k, 15.0).unwrap();
        assert_eq!(cloud.pixel_index, vec![0]);
    }

    #[test]
    fn world_transform_examples() {
        let cloud = PointCloud {
            points: vec![Vec3::new(0.0, 0.0, 2.0), Vec3::new(1.0, -2.0, 3.0)],
            pixel_index: vec![0, 1],
        };
        assert_eq!(transform_to_world(&cloud, &Pose::identity()).unwrap(), cloud);

        let shift = Pose::from_components([0.0, 0.0, 0.0, 1.0], Vec3::new(0.0, 0.0, 1.0)).unwrap();
        let out = transform_to_world(&cloud, &shift).unwrap();
        assert_eq!(out.points[0], Vec3::new(0.0, 0.0, 3.0));

        // rotation oracle: v' = q v q* evaluated with explicit Hamilton products
        let h = std::f64::consts::FRAC_PI_4;
        let q = [h.sin(), 0.0, 0.0, h.cos()];
        let rot = Pose::from_components(q, Vec3::zeros()).unwrap();
        let p = Vec3::new(0.0, 0.0, 1.0);
        let got = rot.apply(&p);
        let expect = hamilton_rotate(q, [0.0, 0.0, 1.0]);
        for i in 0..3 {
            assert!((got[i] - expect[i]).abs() < 1e-12);
        }
        assert!((got - Vec3::new(0.0, -1.0, 0.0)).norm() < 1e-12);
    }

    fn hamilton_rotate(q: [f64; 4], v: [f64; 3]) -> [f64; 3] {
        // quaternions as (w, x, y, z)
        fn mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
            [
                a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
                a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
                a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
                a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
            ]
        }
        let qw = [q[3], q[0], q[1], q[2]];
        let qc = [q[3], -q[0], -q[1], -q[2]];
        let r = mul(mul(qw, [0.0, v[0], v[1], v[2]]), qc);
        [r[1], r[2], r[3]]
    }

    #[test]
    fn rejects_non_unit_quaternion() {
        assert!(Pose::from_components([0.0, 0.0, 0.0, 1.1], Vec3::zeros()).is_err());
        assert!(Pose::from_components([0.0, 0.0, 0.0, 1.0 + 5e-7], Vec3::zeros()).is_ok());
    }

    #[test]
    fn downscale_keeps_rays() {
        let k = CameraIntrinsics::new(200.0, 200.0, 159.5, 119.5, 320, 240).unwrap();
        let half = k.downscaled(2).unwrap();
        assert_eq!((half.width, half.height), (160, 120));
        // block (0..=1) center 0.5 maps to output pixel 0
        let a = unproject(0.5, 0.5, 1.0, &k);
        let b = unproject(0.0, 0.0, 1.0, &half);
        assert!((a - b).norm() < 1e-12);
    }

    proptest! {
        #[test]
        fn projection_round_trip(u in 0.0f64..160.0, v in 0.0f64..120.0, z in 0.01f64..100.0) {
            let k = k();
            let p = backproject_pixel(u, v, z, &k).unwrap();
            let (pu, pv) = project(&p, &k);
            prop_assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9);
        }

        #[test]
        fn rigid_transform_preserves_distances(
            axis in prop::array::uniform3(-1.0f64..1.0),
            angle in -3.1f64..3.1,
            t in prop::array::uniform3(-10.0f64..10.0),
            pts in prop::collection::vec(prop::array::uniform3(-20.0f64..20.0), 2..12),
        ) {
            let axis = Vec3::from(axis);
            prop_assume!(axis.norm() > 1e-3);
            let rot = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
            let pose = Pose::from_rotation(rot, Vec3::from(t));
            let cloud = PointCloud {
                points: pts.iter().map(|p| Vec3::from(*p)).collect(),
                pixel_index: (0..pts.len()).collect(),
            };
            let out = transform_to_world(&cloud, &pose).unwrap();
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    let before = (cloud.points[i] - cloud.points[j]).norm();
                    let after = (out.points[i] - out.points[j]).norm();
                    prop_assert!((before - after).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn valid_count_matches_cloud() {
        let k = k();
        let values: Vec<f64> = (0..160 * 120)
            .map(|i| match i % 7 {
                0 => 0.0,
                1 => 20.0,
                _ => 0.5 + (i % 13) as f64,
            })
            .collect();
        let d = DepthImage::new(160, 120, values).unwrap();
        let independent = d.values.iter().filter(|&&z| z > 0.0 && z <= 15.0).count();
        assert_eq!(backproject_image(&d, &k, 15.0).unwrap().len(), independent);
    }
}

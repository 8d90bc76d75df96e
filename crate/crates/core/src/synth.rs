//! Deterministic synthetic RGB-D sequences with exact ground truth.
//!
//! Scenes are a ground plane `z = 0` plus axis-aligned boxes, seen by a
//! pinhole camera that moves along a path. Every pixel ray is intersected
//! with the ground and every active box; the nearest hit decides colour,
//! depth and ground-truth class. Depth is then degraded the way a
//! short-range sensor would be: nothing beyond `max_valid_range`, relative
//! Gaussian noise and random dropout.

use image::RgbImage;
use nalgebra::{Rotation3, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::{CameraIntrinsics, DepthImage, Pose, Vec3, DEFAULT_MAX_RANGE};
use crate::error::{Error, Result};
use crate::labels::{Label, LabelMap};

/// Flat colour in `[0, 1]` RGB plus per-pixel Gaussian texture noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub color: [f64; 3],
    pub noise_sigma: f64,
}

impl Appearance {
    pub const fn new(color: [f64; 3]) -> Self {
        Self {
            color,
            noise_sigma: TEXTURE_SIGMA,
        }
    }
}

pub const TEXTURE_SIGMA: f64 = 0.05;

/// Obstacle appearance families of the benchmark scenes.
pub const FAMILY_A: Appearance = Appearance::new([0.80, 0.18, 0.15]);
pub const FAMILY_B: Appearance = Appearance::new([0.22, 0.50, 0.20]);
/// Ground materials. Family B shares its hue with `GROUND_GRASS`, a material
/// that only occurs in the pretraining scenes.
pub const GROUND_DIRT: Appearance = Appearance::new([0.55, 0.46, 0.30]);
pub const GROUND_GRASS: Appearance = Appearance::new([0.25, 0.52, 0.22]);
/// Obstacle palette of the pretraining scenes: family A plus other hues,
/// none of them green or brown.
pub const GENERIC_OBSTACLES: [Appearance; 5] = [
    FAMILY_A,
    Appearance::new([0.20, 0.30, 0.75]),
    Appearance::new([0.55, 0.25, 0.65]),
    Appearance::new([0.85, 0.80, 0.20]),
    Appearance::new([0.62, 0.62, 0.64]),
];
pub const SKY: Appearance = Appearance::new([0.72, 0.82, 0.95]);

/// Axis-aligned rectangle of the ground plane with its own material.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundPatch {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub appearance: Appearance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundSpec {
    pub appearance: Appearance,
    /// Earlier patches take precedence where they overlap.
    #[serde(default)]
    pub patches: Vec<GroundPatch>,
}

impl GroundSpec {
    fn appearance_at(&self, x: f64, y: f64) -> &Appearance {
        self.patches
            .iter()
            .find(|p| x >= p.x_range[0] && x < p.x_range[1] && y >= p.y_range[0] && y < p.y_range[1])
            .map_or(&self.appearance, |p| &p.appearance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxObstacle {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub appearance: Appearance,
    /// Appearance family tag, e.g. "A" or "B".
    pub family: String,
    /// First frame in which the box exists.
    #[serde(default)]
    pub spawn_frame: usize,
}

impl BoxObstacle {
    fn min(&self) -> Vec3 {
        Vec3::new(
            self.center[0] - self.size[0] / 2.0,
            self.center[1] - self.size[1] / 2.0,
            self.center[2] - self.size[2] / 2.0,
        )
    }

    fn max(&self) -> Vec3 {
        Vec3::new(
            self.center[0] + self.size[0] / 2.0,
            self.center[1] + self.size[1] / 2.0,
            self.center[2] + self.size[2] / 2.0,
        )
    }

    /// Ray parameter of the entry point, if the ray hits the box in front
    /// of its origin.
    fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let (lo, hi) = (self.min(), self.max());
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-15 {
                if origin[a] < lo[a] || origin[a] > hi[a] {
                    return None;
                }
                continue;
            }
            let t1 = (lo[a] - origin[a]) / dir[a];
            let t2 = (hi[a] - origin[a]) / dir[a];
            t_near = t_near.max(t1.min(t2));
            t_far = t_far.min(t1.max(t2));
        }
        (t_far >= t_near && t_near > 0.0).then_some(t_near)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthModel {
    pub max_valid_range: f64,
    /// Depth noise standard deviation per meter of depth.
    pub noise_sigma_per_m: f64,
    pub dropout: f64,
}

impl Default for DepthModel {
    fn default() -> Self {
        Self {
            max_valid_range: DEFAULT_MAX_RANGE,
            noise_sigma_per_m: 0.01,
            dropout: 0.05,
        }
    }
}

impl DepthModel {
    pub fn exact(max_valid_range: f64) -> Self {
        Self {
            max_valid_range,
            noise_sigma_per_m: 0.0,
            dropout: 0.0,
        }
    }
}

/// Serializable camera-to-world pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSpec {
    pub translation: [f64; 3],
    /// `(qx, qy, qz, qw)`
    pub rotation: [f64; 4],
}

impl PoseSpec {
    pub fn to_pose(&self) -> Result<Pose> {
        Pose::from_components(self.rotation, Vec3::from(self.translation))
    }

    pub fn from_pose(p: &Pose) -> Self {
        Self {
            translation: [p.translation.x, p.translation.y, p.translation.z],
            rotation: p.quaternion_components(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub rng_seed: u64,
    pub intrinsics: CameraIntrinsics,
    pub depth_model: DepthModel,
    pub ground: GroundSpec,
    pub sky: Appearance,
    pub obstacles: Vec<BoxObstacle>,
    pub camera_path: Vec<PoseSpec>,
}

impl SceneSpec {
    pub fn frame_count(&self) -> usize {
        self.camera_path.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if let Err(e) = self.intrinsics.validate() {
            return bad(format!("scene intrinsics: {e}"));
        }
        let d = &self.depth_model;
        if !(d.max_valid_range > 0.0) || !(d.noise_sigma_per_m >= 0.0) || !(0.0..=1.0).contains(&d.dropout) {
            return bad("depth model needs max_valid_range > 0, noise >= 0, dropout in [0, 1]".into());
        }
        for (i, b) in self.obstacles.iter().enumerate() {
            if b.size.iter().any(|s| !(*s > 0.0)) {
                return bad(format!("obstacle {i} has non-positive size"));
            }
            if b.min().z < 0.0 {
                return bad(format!("obstacle {i} extends below the ground"));
            }
        }
        for (i, p) in self.camera_path.iter().enumerate() {
            let pose = p
                .to_pose()
                .map_err(|e| Error::Config(format!("camera pose {i}: {e}")))?;
            if !(pose.translation.z > 0.0) {
                return bad(format!("camera pose {i} is not above the ground"));
            }
        }
        Ok(())
    }

    /// Canonical TOML text of the scene.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize scene: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SceneSpec = toml::from_str(text).map_err(|e| Error::Config(format!("bad scene config: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    /// SHA-256 of the canonical TOML text.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

/// Nearest surface along a pixel ray.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Sky,
    Ground,
    Obstacle(usize),
}

#[derive(Debug, Clone)]
pub struct SynthFrame {
    pub index: usize,
    pub rgb: RgbImage,
    /// Sensor depth after the depth model.
    pub depth: DepthImage,
    /// Exact optical-axis depth of every hit (0 for sky).
    pub true_depth: DepthImage,
    pub pose: Pose,
    pub gt: LabelMap,
    pub surface: Vec<Surface>,
}

fn frame_rng(seed: u64, frame: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((frame as u64).to_le_bytes());
    let bytes: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(bytes)
}

fn shade(app: &Appearance, rng: &mut ChaCha8Rng) -> [u8; 3] {
    let mut out = [0u8; 3];
    for (o, c) in out.iter_mut().zip(app.color) {
        let n: f64 = rng.sample(StandardNormal);
        *o = ((c + app.noise_sigma * n).clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    out
}

pub fn render_frame(spec: &SceneSpec, frame_index: usize) -> Result<SynthFrame> {
    spec.validate()?;
    let pose_spec = spec.camera_path.get(frame_index).ok_or_else(|| {
        Error::Config(format!(
            "frame {frame_index} outside camera path of {} poses",
            spec.frame_count()
        ))
    })?;
    let pose = pose_spec.to_pose()?;
    let k = &spec.intrinsics;
    let (w, h) = (k.width, k.height);
    let active: Vec<(usize, &BoxObstacle)> = spec
        .obstacles
        .iter()
        .enumerate()
        .filter(|(_, b)| b.spawn_frame <= frame_index)
        .collect();
    let origin = pose.translation;
    let rot = pose.rotation();
    let dm = &spec.depth_model;
    let mut rng = frame_rng(spec.rng_seed, frame_index);

    let mut rgb = RgbImage::new(w as u32, h as u32);
    let mut depth = vec![0.0; w * h];
    let mut true_depth = vec![0.0; w * h];
    let mut gt = vec![Label::Unknown; w * h];
    let mut surface = vec![Surface::Sky; w * h];

    for v in 0..h {
        for u in 0..w {
            let idx = v * w + u;
            // ray with unit optical-axis component, so the hit parameter is
            // the optical-axis depth
            let dir_cam = Vec3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
            let dir = rot * dir_cam;
            let mut hit: Option<(f64, Surface)> = None;
            if dir.z < 0.0 {
                hit = Some((-origin.z / dir.z, Surface::Ground));
            }
            for &(bi, b) in &active {
                if let Some(t) = b.intersect(&origin, &dir) {
                    if hit.is_none_or(|(best, _)| t < best) {
                        hit = Some((t, Surface::Obstacle(bi)));
                    }
                }
            }
            let (app, label) = match hit {
                None => (&spec.sky, Label::Unknown),
                Some((t, Surface::Ground)) => {
                    let p = origin + dir * t;
                    (spec.ground.appearance_at(p.x, p.y), Label::FreeSpace)
                }
                Some((_, Surface::Obstacle(bi))) => (&spec.obstacles[bi].appearance, Label::Obstacle),
                Some((_, Surface::Sky)) => unreachable!(),
            };
            rgb.put_pixel(u as u32, v as u32, image::Rgb(shade(app, &mut rng)));
            // the noise and dropout draws happen for every pixel so the
            // random stream does not depend on scene content
            let noise: f64 = rng.sample(StandardNormal);
            let drop = rng.random::<f64>() < dm.dropout;
            gt[idx] = label;
            if let Some((t, s)) = hit {
                surface[idx] = s;
                true_depth[idx] = t;
                if t <= dm.max_valid_range && !drop {
                    let z = t + dm.noise_sigma_per_m * t * noise;
                    depth[idx] = if z > 0.0 { z } else { 0.0 };
                }
            }
        }
    }
    Ok(SynthFrame {
        index: frame_index,
        rgb,
        depth: DepthImage::new(w, h, depth)?,
        true_depth: DepthImage::new(w, h, true_depth)?,
        pose,
        gt: LabelMap::new(w, h, gt)?,
        surface,
    })
}

/// Camera-to-world rotation of a camera looking along world +x, pitched
/// down by `pitch_deg`. Camera axes: +z forward, +x right, +y down.
pub fn forward_camera_rotation(pitch_deg: f64) -> UnitQuaternion<f64> {
    let p = pitch_deg.to_radians();
    let forward = Vec3::new(p.cos(), 0.0, -p.sin());
    let right = Vec3::new(0.0, -1.0, 0.0);
    let down = forward.cross(&right);
    let m = nalgebra::Matrix3::from_columns(&[right, down, forward]);
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m))
}

pub const BENCHMARK_FRAMES: usize = 200;
pub const SHIFT_FRAME: usize = 100;
pub const CAMERA_HEIGHT: f64 = 3.0;
pub const CAMERA_PITCH_DEG: f64 = 27.0;
pub const CAMERA_SPEED: f64 = 0.25;

pub fn benchmark_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 110.0,
        fy: 110.0,
        cx: 80.0,
        cy: 60.0,
        width: 160,
        height: 120,
    }
}

fn straight_path(frames: usize) -> Vec<PoseSpec> {
    let rot = forward_camera_rotation(CAMERA_PITCH_DEG);
    (0..frames)
        .map(|i| {
            PoseSpec::from_pose(&Pose::from_rotation(
                rot,
                Vec3::new(i as f64 * CAMERA_SPEED, 0.0, CAMERA_HEIGHT),
            ))
        })
        .collect()
}

fn jitter(app: &Appearance, rng: &mut ChaCha8Rng) -> Appearance {
    let mut out = *app;
    for c in &mut out.color {
        *c = (*c + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0);
    }
    out
}

/// Boxes resting on the ground along the camera corridor, one every
/// `spacing` meters on alternating sides.
#[allow(clippy::too_many_arguments)]
fn corridor_boxes(
    rng: &mut ChaCha8Rng,
    x_start: f64,
    x_end: f64,
    spacing: f64,
    family: &str,
    palette: &[Appearance],
    scale: f64,
    spawn_frame: usize,
) -> Vec<BoxObstacle> {
    let mut out = Vec::new();
    let mut x = x_start;
    let mut side = if rng.random::<bool>() { 1.0 } else { -1.0 };
    while x < x_end {
        let size = [
            scale * rng.random_range(1.0..2.5),
            scale * rng.random_range(1.0..2.5),
            scale * rng.random_range(1.2..3.2),
        ];
        let lateral = side * rng.random_range(2.0..5.5);
        out.push(BoxObstacle {
            center: [x + rng.random_range(-1.0..1.0), lateral, size[2] / 2.0],
            size,
            appearance: jitter(&palette[rng.random_range(0..palette.len())], rng),
            family: family.to_string(),
            spawn_frame,
        });
        side = -side;
        x += spacing * rng.random_range(0.8..1.2);
    }
    out
}

/// Canonical 200-frame distribution-shift benchmark.
///
/// Frames 0-99 contain only family-A obstacles. At frame 100 larger family-B
/// obstacles appear from 12 m out to the end of the corridor. The nearest
/// ones enter sensor range within a few frames, while most of the family is
/// still only visible in the far field.
pub fn make_shift_sequence(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let end = BENCHMARK_FRAMES as f64 * CAMERA_SPEED + 60.0;
    let mut obstacles = corridor_boxes(&mut rng, 6.0, end, 7.0, "A", &[FAMILY_A], 1.0, 0);
    let cam_x = SHIFT_FRAME as f64 * CAMERA_SPEED;
    obstacles.extend(corridor_boxes(
        &mut rng,
        cam_x + 12.0,
        end,
        5.0,
        "B",
        &[FAMILY_B],
        1.4,
        SHIFT_FRAME,
    ));
    SceneSpec {
        rng_seed: seed,
        intrinsics: benchmark_intrinsics(),
        depth_model: DepthModel::default(),
        ground: GroundSpec {
            appearance: GROUND_DIRT,
            patches: Vec::new(),
        },
        sky: SKY,
        obstacles,
        camera_path: straight_path(BENCHMARK_FRAMES),
    }
}

/// Pretraining scene: obstacles of the generic palette over ground that alternates
/// between dirt and grass every 8 m.
pub fn make_pretrain_sequence(seed: u64, frames: usize) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let end = frames as f64 * CAMERA_SPEED + 60.0;
    let obstacles = corridor_boxes(&mut rng, 5.0, end, 5.0, "generic", &GENERIC_OBSTACLES, 1.0, 0);
    let offset = rng.random_range(0.0..8.0);
    let patches = (0..)
        .map(|i| offset + 16.0 * i as f64)
        .take_while(|x| *x < end)
        .map(|x| GroundPatch {
            x_range: [x, x + 8.0],
            y_range: [-1e3, 1e3],
            appearance: GROUND_GRASS,
        })
        .collect();
    SceneSpec {
        rng_seed: seed,
        intrinsics: benchmark_intrinsics(),
        depth_model: DepthModel::default(),
        ground: GroundSpec {
            appearance: GROUND_DIRT,
            patches,
        },
        sky: SKY,
        obstacles,
        camera_path: straight_path(frames),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_scene() -> SceneSpec {
        let mut s = make_shift_sequence(1);
        s.camera_path.truncate(3);
        s
    }

    #[test]
    fn forty_five_degree_central_ray() {
        // camera 1 m up, optical axis 45 deg down: central ray meets the
        // ground at range sqrt(2) with optical-axis depth sqrt(2)
        let k = CameraIntrinsics::new(50.0, 50.0, 20.0, 10.0, 40, 20).unwrap();
        let pose = Pose::from_rotation(forward_camera_rotation(45.0), Vec3::new(0.0, 0.0, 1.0));
        let spec = SceneSpec {
            rng_seed: 0,
            intrinsics: k,
            depth_model: DepthModel::exact(15.0),
            ground: GroundSpec {
                appearance: GROUND_DIRT,
                patches: vec![],
            },
            sky: SKY,
            obstacles: vec![],
            camera_path: vec![PoseSpec::from_pose(&pose)],
        };
        let f = render_frame(&spec, 0).unwrap();
        let z = f.depth.get(20, 10);
        // closed-form ray/plane intersection: t = h / sin(45deg)
        let t = 1.0 / std::f64::consts::FRAC_PI_4.sin();
        assert!((z - t).abs() < 1e-12);
        assert!((z - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(f.gt.get(20, 10), Label::FreeSpace);
    }

    #[test]
    fn far_ground_is_invalid_but_labeled() {
        let mut spec = tiny_scene();
        spec.obstacles.clear();
        let f = render_frame(&spec, 0).unwrap();
        let mut seen_far = false;
        for i in 0..f.surface.len() {
            if f.surface[i] == Surface::Ground && f.true_depth.values[i] > 30.0 {
                seen_far = true;
                assert_eq!(f.depth.values[i], 0.0);
                assert_eq!(f.gt.labels[i], Label::FreeSpace);
            }
            if f.surface[i] == Surface::Sky {
                assert_eq!(f.gt.labels[i], Label::Unknown);
                assert_eq!(f.depth.values[i], 0.0);
            }
        }
        assert!(seen_far);
    }

    #[test]
    fn nearest_hit_wins() {
        let mut spec = tiny_scene();
        spec.depth_model = DepthModel::exact(15.0);
        spec.obstacles = vec![BoxObstacle {
            center: [5.0, 0.0, 1.0],
            size: [1.0, 2.0, 2.0],
            appearance: FAMILY_A,
            family: "A".into(),
            spawn_frame: 0,
        }];
        let f = render_frame(&spec, 0).unwrap();
        let center = 60 * 160 + 80;
        assert_eq!(f.surface[center], Surface::Obstacle(0));
        assert_eq!(f.gt.labels[center], Label::Obstacle);
        // front face at x = 4.5; the central ray is the optical axis, so
        // depth = distance along it to the face
        let p = CAMERA_PITCH_DEG.to_radians();
        assert!((f.depth.values[center] - 4.5 / p.cos()).abs() < 1e-9);
    }

    #[test]
    fn spawn_frame_respected() {
        let spec = make_shift_sequence(7);
        let f50 = render_frame(&spec, 50).unwrap();
        let fam = |f: &SynthFrame, fam: &str| {
            f.surface
                .iter()
                .enumerate()
                .filter(|(_, s)| matches!(s, Surface::Obstacle(i) if spec.obstacles[*i].family == fam))
                .map(|(i, _)| i)
                .collect::<Vec<_>>()
        };
        assert!(fam(&f50, "B").is_empty());
        assert!(!fam(&f50, "A").is_empty());
        // frame 150: family B both inside and beyond the valid-depth range
        let f150 = render_frame(&spec, 150).unwrap();
        let b = fam(&f150, "B");
        let max = spec.depth_model.max_valid_range;
        assert!(b.iter().any(|&i| f150.true_depth.values[i] <= max));
        assert!(b.iter().any(|&i| f150.true_depth.values[i] > max));
    }

    #[test]
    fn deterministic_frames() {
        let a = make_shift_sequence(3);
        let b = make_shift_sequence(3);
        assert_eq!(a, b);
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        assert_ne!(a.digest().unwrap(), make_shift_sequence(4).digest().unwrap());
        let fa = render_frame(&a, 120).unwrap();
        let fb = render_frame(&b, 120).unwrap();
        assert_eq!(fa.rgb, fb.rgb);
        assert_eq!(
            fa.depth.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            fb.depth.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(fa.gt, fb.gt);
    }

    #[test]
    fn gt_ignores_depth_corruption() {
        let mut spec = make_shift_sequence(5);
        let noisy = render_frame(&spec, 130).unwrap();
        spec.depth_model = DepthModel::exact(15.0);
        let clean = render_frame(&spec, 130).unwrap();
        assert_eq!(noisy.gt, clean.gt);
        // total over hits
        for (s, l) in noisy.surface.iter().zip(&noisy.gt.labels) {
            assert_eq!(*s == Surface::Sky, *l == Label::Unknown);
        }
    }

    #[test]
    fn validation() {
        let mut s = tiny_scene();
        s.obstacles[0].center[2] = 0.0;
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let mut s = tiny_scene();
        s.camera_path[0].translation[2] = -1.0;
        assert!(s.validate().is_err());
        let mut s = tiny_scene();
        s.depth_model.max_valid_range = 0.0;
        assert!(s.validate().is_err());
        assert!(render_frame(&tiny_scene(), 3).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let s = make_pretrain_sequence(11, 20);
        let back = SceneSpec::from_toml(&s.to_toml().unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn camera_looks_forward_and_down() {
        let q = forward_camera_rotation(CAMERA_PITCH_DEG);
        let (s, c) = CAMERA_PITCH_DEG.to_radians().sin_cos();
        let fwd = q * Vec3::z();
        assert!((fwd - Vec3::new(c, 0.0, -s)).norm() < 1e-12);
        let down = q * Vec3::y();
        assert!((down - Vec3::new(-s, 0.0, -c)).norm() < 1e-12);
        let right = q * Vec3::x();
        assert!((right - Vec3::new(0.0, -1.0, 0.0)).norm() < 1e-12);
    }
}

//! On-disk sequence layout shared by the synthetic exporter and the
//! pipeline.
//!
//! ```text
//! <dir>/rgb/NNNN.png      8-bit RGB
//! <dir>/depth/NNNN.png    16-bit gray, millimeters, 0 = invalid
//! <dir>/gt/NNNN.png       optional, 8-bit labels (0 free, 1 obstacle, 255 unknown)
//! <dir>/poses.txt         "frame_id tx ty tz qx qy qz qw" per line, camera-to-world
//! <dir>/intrinsics.txt    "key value" lines for fx fy cx cy width height
//! <dir>/scene.toml        optional, scene description of synthetic sequences
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, RgbImage};
use rayon::prelude::*;

use crate::camera::{CameraIntrinsics, DepthImage, Pose, Vec3};
use crate::error::{Error, Result};
use crate::labels::{Label, LabelMap};
use crate::online::SequenceFrame;
use crate::synth::{render_frame, SceneSpec};

pub const POSES_FILE: &str = "poses.txt";
pub const INTRINSICS_FILE: &str = "intrinsics.txt";
pub const SCENE_FILE: &str = "scene.toml";

pub fn frame_file_name(frame_id: usize) -> String {
    format!("{frame_id:04}.png")
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn format_intrinsics(k: &CameraIntrinsics) -> String {
    format!(
        "fx {}\nfy {}\ncx {}\ncy {}\nwidth {}\nheight {}\n",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height
    )
}

/// Parses `key value` lines; `#` starts a comment.
pub fn parse_intrinsics(text: &str, path: &Path) -> Result<CameraIntrinsics> {
    let mut values = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(key), Some(value), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::format(path, format!("line {}: expected `key value`", n + 1)));
        };
        let v: f64 = value
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: bad number {value:?}", n + 1)))?;
        if values.insert(key.to_string(), v).is_some() {
            return Err(Error::format(path, format!("duplicate key {key}")));
        }
    }
    let get = |key: &str| {
        values
            .get(key)
            .copied()
            .ok_or_else(|| Error::format(path, format!("missing key {key}")))
    };
    let size = |key: &str| -> Result<usize> {
        let v = get(key)?;
        if v.fract() != 0.0 || v < 1.0 {
            return Err(Error::format(path, format!("{key} must be a positive integer")));
        }
        Ok(v as usize)
    };
    if let Some(extra) = values
        .keys()
        .find(|k| !["fx", "fy", "cx", "cy", "width", "height"].contains(&k.as_str()))
    {
        return Err(Error::format(path, format!("unknown key {extra}")));
    }
    CameraIntrinsics::new(
        get("fx")?,
        get("fy")?,
        get("cx")?,
        get("cy")?,
        size("width")?,
        size("height")?,
    )
    .map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    parse_intrinsics(&read_text(path)?, path)
}

pub fn format_poses(poses: &[(usize, Pose)]) -> String {
    let mut out = String::new();
    for (id, p) in poses {
        let t = p.translation;
        let q = p.quaternion_components();
        let _ = writeln!(out, "{id} {} {} {} {} {} {} {}", t.x, t.y, t.z, q[0], q[1], q[2], q[3]);
    }
    out
}

pub fn parse_poses(text: &str, path: &Path) -> Result<BTreeMap<usize, Pose>> {
    let mut poses = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(Error::format(
                path,
                format!("line {}: expected 8 fields, found {}", n + 1, fields.len()),
            ));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: bad frame id {:?}", n + 1, fields[0])))?;
        let mut v = [0.0; 7];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse()
                .map_err(|_| Error::format(path, format!("frame {id}: bad number {f:?}")))?;
        }
        let pose = Pose::from_components([v[3], v[4], v[5], v[6]], Vec3::new(v[0], v[1], v[2]))
            .map_err(|e| Error::format(path, format!("frame {id}: {e}")))?;
        if poses.insert(id, pose).is_some() {
            return Err(Error::format(path, format!("frame {id}: duplicate pose")));
        }
    }
    Ok(poses)
}

/// Millimeter encoding: `round(z * 1000)`, 0 for invalid or unrepresentable.
pub fn depth_to_mm(z: f64) -> u16 {
    if !(z.is_finite() && z > 0.0) {
        return 0;
    }
    let mm = (z * 1000.0).round();
    if mm > u16::MAX as f64 {
        0
    } else {
        mm as u16
    }
}

pub fn write_depth_png(path: &Path, depth: &DepthImage) -> Result<()> {
    let buf: Vec<u16> = depth.values.iter().map(|&z| depth_to_mm(z)).collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(depth.width as u32, depth.height as u32, buf).expect("buffer size");
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_depth_png(path: &Path) -> Result<DepthImage> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let img = match img {
        image::DynamicImage::ImageLuma16(i) => i,
        other => {
            return Err(Error::format(
                path,
                format!("expected 16-bit single-channel depth, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = img.dimensions();
    let values = img.into_raw().into_iter().map(|mm| mm as f64 / 1000.0).collect();
    DepthImage::new(w as usize, h as usize, values)
}

pub fn write_label_png(path: &Path, labels: &LabelMap) -> Result<()> {
    let buf: Vec<u8> = labels.labels.iter().map(|l| l.code()).collect();
    let img = GrayImage::from_raw(labels.width as u32, labels.height as u32, buf).expect("buffer size");
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_label_png(path: &Path) -> Result<LabelMap> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let img = match img {
        image::DynamicImage::ImageLuma8(i) => i,
        other => {
            return Err(Error::format(
                path,
                format!("expected 8-bit label image, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = img.dimensions();
    let labels = img
        .into_raw()
        .into_iter()
        .map(|c| Label::from_code(c).ok_or_else(|| Error::format(path, format!("invalid label code {c}"))))
        .collect::<Result<Vec<_>>>()?;
    LabelMap::new(w as usize, h as usize, labels)
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    match img {
        image::DynamicImage::ImageRgb8(i) => Ok(i),
        other => Err(Error::format(
            path,
            format!("expected 8-bit RGB image, found {:?}", other.color()),
        )),
    }
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportSummary {
    pub frames: usize,
    pub digest: String,
}

fn create_dir(path: &Path) -> Result<()> {
    match std::fs::create_dir(path) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists && path.is_dir() => Ok(()),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Renders and writes every frame of `spec`. `out_dir` is created if its
/// parent exists.
pub fn export_sequence(spec: &SceneSpec, out_dir: &Path) -> Result<ExportSummary> {
    spec.validate()?;
    create_dir(out_dir)?;
    for sub in ["rgb", "depth", "gt"] {
        create_dir(&out_dir.join(sub))?;
    }
    let frames: Vec<usize> = (0..spec.frame_count()).collect();
    let poses = frames
        .par_iter()
        .map(|&i| {
            let f = render_frame(spec, i)?;
            let name = frame_file_name(i);
            write_rgb_png(&out_dir.join("rgb").join(&name), &f.rgb)?;
            write_depth_png(&out_dir.join("depth").join(&name), &f.depth)?;
            write_label_png(&out_dir.join("gt").join(&name), &f.gt)?;
            Ok((i, f.pose))
        })
        .collect::<Result<Vec<_>>>()?;
    write_file(&out_dir.join(POSES_FILE), format_poses(&poses))?;
    write_file(&out_dir.join(INTRINSICS_FILE), format_intrinsics(&spec.intrinsics))?;
    write_file(&out_dir.join(SCENE_FILE), spec.to_toml()?)?;
    Ok(ExportSummary {
        frames: frames.len(),
        digest: spec.digest()?,
    })
}

/// A sequence directory opened for lazy, in-order reading.
#[derive(Debug, Clone)]
pub struct SequenceReader {
    dir: PathBuf,
    /// Intrinsics of the yielded (possibly downscaled) frames.
    pub intrinsics: CameraIntrinsics,
    pub native_intrinsics: CameraIntrinsics,
    pub scale: usize,
    pub frame_ids: Vec<usize>,
    poses: BTreeMap<usize, Pose>,
    pub has_gt: bool,
}

fn frame_ids_in(dir: &Path) -> Result<Vec<usize>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let name = e.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".png") {
            let id = stem
                .parse()
                .map_err(|_| Error::format(e.path(), "frame file name must be a number"))?;
            ids.push(id);
        }
    }
    ids.sort_unstable();
    Ok(ids)
}

impl SequenceReader {
    /// Opens `dir` at native resolution.
    pub fn open(dir: &Path) -> Result<Self> {
        Self::open_scaled(dir, 1)
    }

    /// Opens `dir`, block-averaging frames by `scale` in both axes.
    pub fn open_scaled(dir: &Path, scale: usize) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "sequence directory not found"),
            ));
        }
        let native = read_intrinsics(&dir.join(INTRINSICS_FILE))?;
        let intrinsics = native.downscaled(scale)?;
        let poses_path = dir.join(POSES_FILE);
        let poses = parse_poses(&read_text(&poses_path)?, &poses_path)?;
        let frame_ids = frame_ids_in(&dir.join("rgb"))?;
        if frame_ids.is_empty() {
            return Err(Error::format(dir.join("rgb"), "no frames"));
        }
        if let Some(id) = frame_ids.iter().find(|id| !poses.contains_key(id)) {
            return Err(Error::format(&poses_path, format!("no pose line for frame {id}")));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            intrinsics,
            native_intrinsics: native,
            scale,
            frame_ids,
            poses,
            has_gt: dir.join("gt").is_dir(),
        })
    }

    /// Scale that maps the native resolution onto `width` x `height`.
    pub fn scale_for(dir: &Path, width: usize, height: usize) -> Result<usize> {
        let path = dir.join(INTRINSICS_FILE);
        let k = read_intrinsics(&path)?;
        if k.width % width == 0 && k.height % height == 0 && k.width / width == k.height / height {
            Ok(k.width / width)
        } else {
            Err(Error::format(
                path,
                format!(
                    "{}x{} frames cannot be block-downscaled to {width}x{height}",
                    k.width, k.height
                ),
            ))
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }

    /// Seed recorded in `scene.toml`, if the sequence is synthetic.
    pub fn scene_seed(&self) -> Result<Option<u64>> {
        let path = self.dir.join(SCENE_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let spec = SceneSpec::from_toml(&read_text(&path)?).map_err(|e| Error::format(&path, e.to_string()))?;
        Ok(Some(spec.rng_seed))
    }

    pub fn read_gt(&self, frame_id: usize) -> Result<LabelMap> {
        let path = self.dir.join("gt").join(frame_file_name(frame_id));
        let gt = read_label_png(&path)?;
        self.check_size(&path, gt.width, gt.height, frame_id)?;
        Ok(downscale_labels(&gt, self.scale))
    }

    fn check_size(&self, path: &Path, w: usize, h: usize, frame_id: usize) -> Result<()> {
        let k = &self.native_intrinsics;
        if (w, h) != (k.width, k.height) {
            return Err(Error::format(
                path,
                format!(
                    "frame {frame_id}: {w}x{h} does not match intrinsics {}x{}",
                    k.width, k.height
                ),
            ));
        }
        Ok(())
    }

    pub fn read_frame(&self, frame_id: usize) -> Result<SequenceFrame> {
        let name = frame_file_name(frame_id);
        let rgb_path = self.dir.join("rgb").join(&name);
        let rgb = read_rgb_png(&rgb_path)?;
        self.check_size(&rgb_path, rgb.width() as usize, rgb.height() as usize, frame_id)?;
        let depth_path = self.dir.join("depth").join(&name);
        let depth = read_depth_png(&depth_path)?;
        self.check_size(&depth_path, depth.width, depth.height, frame_id)?;
        let gt = if self.has_gt {
            Some(self.read_gt(frame_id)?)
        } else {
            None
        };
        let pose = *self
            .poses
            .get(&frame_id)
            .ok_or_else(|| Error::format(self.dir.join(POSES_FILE), format!("no pose line for frame {frame_id}")))?;
        Ok(SequenceFrame {
            frame_id,
            rgb: downscale_rgb(&rgb, self.scale),
            depth: downscale_depth(&depth, self.scale),
            pose,
            gt,
        })
    }

    /// Frames in id order, decoded one at a time.
    pub fn frames(&self) -> impl Iterator<Item = Result<SequenceFrame>> + '_ {
        self.frame_ids.iter().map(move |&id| self.read_frame(id))
    }
}

/// Block mean of 8-bit RGB.
pub fn downscale_rgb(img: &RgbImage, s: usize) -> Vec<u8> {
    if s == 1 {
        return img.as_raw().clone();
    }
    let (w, h) = (img.width() as usize / s, img.height() as usize / s);
    let mut out = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0u32; 3];
            for dy in 0..s {
                for dx in 0..s {
                    let p = img.get_pixel((x * s + dx) as u32, (y * s + dy) as u32);
                    for c in 0..3 {
                        acc[c] += p[c] as u32;
                    }
                }
            }
            let n = (s * s) as f64;
            out.extend(acc.map(|a| (a as f64 / n).round() as u8));
        }
    }
    out
}

/// Block mean of depth where every sample is present, otherwise invalid.
pub fn downscale_depth(d: &DepthImage, s: usize) -> DepthImage {
    if s == 1 {
        return d.clone();
    }
    let (w, h) = (d.width / s, d.height / s);
    let mut values = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            let mut ok = true;
            for dy in 0..s {
                for dx in 0..s {
                    let z = d.get(x * s + dx, y * s + dy);
                    ok &= z.is_finite() && z > 0.0;
                    sum += z;
                }
            }
            if ok {
                values[y * w + x] = sum / (s * s) as f64;
            }
        }
    }
    DepthImage::new(w, h, values).expect("consistent size")
}

/// A block keeps its label only if all its pixels agree; otherwise Unknown.
pub fn downscale_labels(l: &LabelMap, s: usize) -> LabelMap {
    if s == 1 {
        return l.clone();
    }
    let (w, h) = (l.width / s, l.height / s);
    let mut labels = vec![Label::Unknown; w * h];
    for y in 0..h {
        for x in 0..w {
            let first = l.get(x * s, y * s);
            let uniform = (0..s).all(|dy| (0..s).all(|dx| l.get(x * s + dx, y * s + dy) == first));
            if uniform {
                labels[y * w + x] = first;
            }
        }
    }
    LabelMap::new(w, h, labels).expect("consistent size")
}

//! Self-supervised labels from near-range geometry.

use serde::{Deserialize, Serialize};

use crate::camera::{is_valid_depth, unproject, CameraIntrinsics, DepthImage, DEFAULT_MAX_RANGE};
use crate::error::{Error, Result};
use crate::ground_plane::Plane;

/// Per-pixel supervision class. The discriminants are the on-disk label PNG
/// encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    FreeSpace = 0,
    Obstacle = 1,
    Unknown = 255,
}

impl Label {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Label::FreeSpace),
            1 => Some(Label::Obstacle),
            255 => Some(Label::Unknown),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    /// Network class index, `None` for Unknown.
    pub fn class_index(self) -> Option<usize> {
        match self {
            Label::FreeSpace => Some(0),
            Label::Obstacle => Some(1),
            Label::Unknown => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<Label>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "label buffer has {} entries, expected {}x{}",
                labels.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, labels })
    }

    pub fn filled(width: usize, height: usize, label: Label) -> Self {
        Self {
            width,
            height,
            labels: vec![label; width * height],
        }
    }

    pub fn get(&self, u: usize, v: usize) -> Label {
        self.labels[v * self.width + u]
    }

    pub fn is_all_unknown(&self) -> bool {
        self.labels.iter().all(|&l| l == Label::Unknown)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelingConfig {
    /// Minimum height above the ground plane for an obstacle, meters.
    pub h_obstacle: f64,
    pub max_range: f64,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        Self {
            h_obstacle: 0.15,
            max_range: DEFAULT_MAX_RANGE,
        }
    }
}

impl LabelingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h_obstacle > 0.0) {
            return Err(Error::Config("labeling.h_obstacle must be > 0".into()));
        }
        if !(self.max_range > 0.0) {
            return Err(Error::Config("labeling.max_range must be > 0".into()));
        }
        Ok(())
    }
}

/// Labels every valid-depth pixel as Obstacle (height above `plane` at least
/// `h_obstacle`) or FreeSpace; everything else is Unknown. The plane must be
/// expressed in the camera frame.
pub fn generate_labels(
    depth: &DepthImage,
    k: &CameraIntrinsics,
    plane: &Plane,
    cfg: &LabelingConfig,
) -> Result<LabelMap> {
    depth.check_matches(k)?;
    let mut labels = vec![Label::Unknown; depth.width * depth.height];
    for v in 0..depth.height {
        for u in 0..depth.width {
            let idx = v * depth.width + u;
            let z = depth.values[idx];
            if !is_valid_depth(z, cfg.max_range) {
                continue;
            }
            let p = unproject(u as f64, v as f64, z, k);
            labels[idx] = if plane.signed_height(&p) >= cfg.h_obstacle {
                Label::Obstacle
            } else {
                Label::FreeSpace
            };
        }
    }
    LabelMap::new(depth.width, depth.height, labels)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelHistogram {
    pub free: usize,
    pub obstacle: usize,
    pub unknown: usize,
}

impl LabelHistogram {
    pub fn labeled(&self) -> usize {
        self.free + self.obstacle
    }

    pub fn total(&self) -> usize {
        self.free + self.obstacle + self.unknown
    }

    pub fn merge(&mut self, other: &LabelHistogram) {
        self.free += other.free;
        self.obstacle += other.obstacle;
        self.unknown += other.unknown;
    }
}

pub fn label_histogram(map: &LabelMap) -> LabelHistogram {
    let mut h = LabelHistogram::default();
    for l in &map.labels {
        match l {
            Label::FreeSpace => h.free += 1,
            Label::Obstacle => h.obstacle += 1,
            Label::Unknown => h.unknown += 1,
        }
    }
    h
}

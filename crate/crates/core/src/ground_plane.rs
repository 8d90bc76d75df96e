//! Robust ground-plane estimation from a near-range point cloud.
//!
//! Hypotheses are exact planes through three sampled points. A hypothesis is
//! only scored if its normal lies inside a cone around the up direction (so
//! walls are never taken as ground); the best consensus set is then refined
//! with an orthogonal least-squares fit.

use nalgebra::{Matrix3, SymmetricEigen};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::Vec3;
use crate::error::{Error, Result};

/// Plane `normal · x + offset = 0` with unit normal pointing "up".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    pub normal: [f64; 3],
    pub offset: f64,
    pub inlier_count: usize,
    pub inlier_rms: f64,
}

impl Plane {
    pub fn normal(&self) -> Vec3 {
        Vec3::from(self.normal)
    }

    /// Height of `p` above the plane; positive on the side the normal points to.
    #[inline]
    pub fn signed_height(&self, p: &Vec3) -> f64 {
        self.normal[0] * p.x + self.normal[1] * p.y + self.normal[2] * p.z + self.offset
    }

    /// Number of points within `tau` of the plane, and their RMS distance.
    pub fn consensus(&self, points: &[Vec3], tau: f64) -> (usize, f64) {
        let mut count = 0;
        let mut sq = 0.0;
        for p in points {
            let h = self.signed_height(p);
            if h.abs() <= tau {
                count += 1;
                sq += h * h;
            }
        }
        let rms = if count > 0 { (sq / count as f64).sqrt() } else { 0.0 };
        (count, rms)
    }
}

pub fn signed_height(plane: &Plane, p: &Vec3) -> f64 {
    plane.signed_height(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Point-to-plane inlier distance in meters.
    pub inlier_tau: f64,
    pub min_inliers: usize,
    /// Maximum angle between a hypothesis normal and the up hint.
    pub normal_cone_deg: f64,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            inlier_tau: 0.05,
            min_inliers: 500,
            normal_cone_deg: 30.0,
            rng_seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("ransac.iterations must be >= 1".into()));
        }
        if !(self.inlier_tau > 0.0) {
            return Err(Error::Config("ransac.inlier_tau must be > 0".into()));
        }
        if !(self.normal_cone_deg > 0.0 && self.normal_cone_deg <= 90.0) {
            return Err(Error::Config("ransac.normal_cone_deg must be in (0, 90]".into()));
        }
        Ok(())
    }
}

fn unit_up(up_hint: &Vec3) -> Result<Vec3> {
    let n = up_hint.norm();
    if !n.is_finite() || n < 1e-12 {
        return Err(Error::InvalidInput("up hint must be a non-zero vector".into()));
    }
    Ok(up_hint / n)
}

/// Orthogonal least-squares plane through `points`, oriented along `up_hint`.
///
/// The normal is the eigenvector of the centered scatter matrix with the
/// smallest eigenvalue. Inlier statistics cover all input points (tau = inf).
pub fn refine_plane_lsq(points: &[Vec3], up_hint: &Vec3) -> Result<Plane> {
    let up = unit_up(up_hint)?;
    if points.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "need at least 3 points, got {}",
            points.len()
        )));
    }
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / n;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        scatter += d * d.transpose();
    }
    let eig = SymmetricEigen::new(scatter);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let largest = eig.eigenvalues[order[2]];
    let middle = eig.eigenvalues[order[1]];
    if !(largest > 0.0) || middle <= largest * 1e-12 {
        return Err(Error::DegenerateGeometry("points are collinear or coincident".into()));
    }
    let mut normal: Vec3 = eig.eigenvectors.column(order[0]).into_owned();
    normal /= normal.norm();
    if normal.dot(&up) < 0.0 {
        normal = -normal;
    }
    let offset = -normal.dot(&centroid);
    let mut plane = Plane {
        normal: [normal.x, normal.y, normal.z],
        offset,
        inlier_count: points.len(),
        inlier_rms: 0.0,
    };
    let (count, rms) = plane.consensus(points, f64::INFINITY);
    plane.inlier_count = count;
    plane.inlier_rms = rms;
    Ok(plane)
}

/// Exact plane through three points, or `None` when they are (nearly) collinear.
fn plane_through(a: &Vec3, b: &Vec3, c: &Vec3) -> Option<(Vec3, f64)> {
    let cross = (b - a).cross(&(c - a));
    let len = cross.norm();
    let scale = (b - a).norm() * (c - a).norm();
    if !(len > 1e-12 * scale) || scale == 0.0 {
        return None;
    }
    let normal = cross / len;
    Some((normal, -normal.dot(a)))
}

/// Best-consensus ground plane, refined by least squares on its inliers.
///
/// Deterministic for a given cloud and `cfg.rng_seed`; ties in consensus go
/// to the earliest hypothesis.
pub fn fit_plane_ransac(points: &[Vec3], up_hint: &Vec3, cfg: &RansacConfig) -> Result<Plane> {
    cfg.validate()?;
    let up = unit_up(up_hint)?;
    if points.len() < 3 {
        return Err(Error::NoGroundPlane(format!("only {} points available", points.len())));
    }
    let cos_cone = cfg.normal_cone_deg.to_radians().cos();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let n = points.len();

    let mut best: Option<(usize, Vec3, f64)> = None;
    for _ in 0..cfg.iterations {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        let mut k = rng.random_range(0..n - 2);
        let (lo, hi) = if i < j { (i, j) } else { (j, i) };
        if k >= lo {
            k += 1;
        }
        if k >= hi {
            k += 1;
        }
        let Some((mut normal, mut offset)) = plane_through(&points[i], &points[j], &points[k]) else {
            continue;
        };
        if normal.dot(&up) < 0.0 {
            normal = -normal;
            offset = -offset;
        }
        if normal.dot(&up) < cos_cone {
            continue;
        }
        let count = points
            .iter()
            .filter(|p| (normal.dot(p) + offset).abs() <= cfg.inlier_tau)
            .count();
        if best.as_ref().is_none_or(|(c, _, _)| count > *c) {
            best = Some((count, normal, offset));
        }
    }

    let Some((count, normal, offset)) = best else {
        return Err(Error::NoGroundPlane(
            "no non-degenerate hypothesis inside the normal cone".into(),
        ));
    };
    if count < cfg.min_inliers.max(3) {
        return Err(Error::NoGroundPlane(format!(
            "best consensus {count} below minimum {}",
            cfg.min_inliers
        )));
    }
    let inliers: Vec<Vec3> = points
        .iter()
        .filter(|p| (normal.dot(p) + offset).abs() <= cfg.inlier_tau)
        .copied()
        .collect();
    let mut plane = match refine_plane_lsq(&inliers, &up) {
        Ok(p) => p,
        Err(_) => Plane {
            normal: [normal.x, normal.y, normal.z],
            offset,
            inlier_count: 0,
            inlier_rms: 0.0,
        },
    };
    let (count, rms) = plane.consensus(points, cfg.inlier_tau);
    plane.inlier_count = count;
    plane.inlier_rms = rms;
    Ok(plane)
}

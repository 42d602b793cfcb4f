//! Training-time augmentation and point-count normalization.

use gft_core::pointops::{fps, PointCloud};
use rand::Rng;

use crate::error::{Error, Result};

/// Each flag enables one random transform; all are off by default.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augment {
    /// Rotation about the gravity (`y`) axis by an angle in `[0, 2π)`.
    pub rotate: bool,
    /// Isotropic scale in `[0.8, 1.2]`.
    pub scale: bool,
    /// Translation in `[-0.1, 0.1]³`.
    pub translate: bool,
}

impl Augment {
    pub fn is_identity(&self) -> bool {
        !(self.rotate || self.scale || self.translate)
    }

    pub fn apply<R: Rng>(&self, cloud: &mut PointCloud, rng: &mut R) {
        if self.is_identity() {
            return;
        }
        let (s, c) = if self.rotate {
            rng.gen_range(0.0..core::f64::consts::TAU).sin_cos()
        } else {
            (0.0, 1.0)
        };
        let k = if self.scale { rng.gen_range(0.8..=1.2) } else { 1.0 };
        let t: [f64; 3] = if self.translate {
            [rng.gen_range(-0.1..=0.1), rng.gen_range(-0.1..=0.1), rng.gen_range(-0.1..=0.1)]
        } else {
            [0.0; 3]
        };
        for p in &mut cloud.points {
            let (x, z) = (c * p[0] + s * p[2], -s * p[0] + c * p[2]);
            *p = [k * x + t[0], k * p[1] + t[1], k * z + t[2]];
        }
    }
}

/// Centres a cloud on its centroid and scales it to unit maximum radius.
/// Degenerate clouds (all points equal) are only centred.
pub fn normalize(cloud: &mut PointCloud) {
    let n = cloud.len().max(1) as f64;
    let mut mean = [0.0; 3];
    for p in &cloud.points {
        for k in 0..3 {
            mean[k] += p[k] / n;
        }
    }
    let mut r: f64 = 0.0;
    for p in &mut cloud.points {
        for k in 0..3 {
            p[k] -= mean[k];
        }
        r = r.max((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt());
    }
    if r > 0.0 {
        for p in &mut cloud.points {
            p.iter_mut().for_each(|v| *v /= r);
        }
    }
}

/// Reduces a cloud to exactly `n` points with farthest point sampling,
/// keeping labels aligned. Clouds with fewer than `n` points are an error.
pub fn resample(cloud: &PointCloud, n: usize) -> Result<PointCloud> {
    if cloud.len() == n {
        return Ok(cloud.clone());
    }
    if cloud.len() < n {
        return Err(Error::Argument(format!("cloud has {} points, configuration needs {n}", cloud.len())));
    }
    let idx = fps(&cloud.points, n)?;
    Ok(PointCloud {
        points: idx.iter().map(|&i| cloud.points[i]).collect(),
        point_labels: cloud.point_labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        object_label: cloud.object_label,
    })
}

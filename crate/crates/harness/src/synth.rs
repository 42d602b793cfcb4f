//! Seeded synthetic datasets standing in for real scans.
//!
//! `classification4` draws surface samples of a sphere, a box, a cone and a
//! torus under random rotation and scale; `parts3` is a capped cylinder
//! labelled side/top/bottom.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use gft_core::pointops::{Point, PointCloud};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cloud::write_cloud;
use crate::error::{Error, Result};
use crate::manifest::{Entry, Manifest, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Classification4,
    Parts3,
}

impl SynthKind {
    pub fn num_classes(self) -> usize {
        match self {
            SynthKind::Classification4 => 4,
            SynthKind::Parts3 => 3,
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthKind::Classification4 => "classification4",
            SynthKind::Parts3 => "parts3",
        })
    }
}

impl FromStr for SynthKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "classification4" => Ok(SynthKind::Classification4),
            "parts3" => Ok(SynthKind::Parts3),
            other => Err(format!("unknown dataset kind {other:?}")),
        }
    }
}

pub const SHAPES: [&str; 4] = ["sphere", "box", "cone", "torus"];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n_train: usize,
    pub n_test: usize,
    pub n_points: usize,
    /// Noise std relative to the instance scale.
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(kind: SynthKind, n_train: usize, n_test: usize, n_points: usize, seed: u64) -> Self {
        SynthSpec {
            kind,
            n_train,
            n_test,
            n_points,
            noise: 0.01,
            seed,
        }
    }
}

fn gaussian3(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng)]
}

fn unit(rng: &mut ChaCha8Rng) -> Point {
    loop {
        let v = gaussian3(rng);
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Rotation matrix of a uniformly random unit quaternion.
fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let q = loop {
        let v: [f64; 4] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            break v.map(|x| x / n);
        }
    };
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn apply(r: &[[f64; 3]; 3], p: Point) -> Point {
    [
        r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
        r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
        r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
    ]
}

fn box_surface(rng: &mut ChaCha8Rng, half: [f64; 3]) -> Point {
    let [a, b, c] = half;
    let areas = [b * c, a * c, a * b];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.gen::<f64>() * total;
    let mut axis = 2;
    for (i, &ar) in areas.iter().enumerate() {
        if pick < ar {
            axis = i;
            break;
        }
        pick -= ar;
    }
    let mut p = [
        rng.gen_range(-a..=a),
        rng.gen_range(-b..=b),
        rng.gen_range(-c..=c),
    ];
    p[axis] = if rng.gen::<bool>() { half[axis] } else { -half[axis] };
    p
}

/// Cone of base radius 1 and height 2, apex up, centred on its mid-height.
fn cone_surface(rng: &mut ChaCha8Rng) -> Point {
    let (r, h) = (1.0f64, 2.0f64);
    let side = PI * r * (r * r + h * h).sqrt();
    let base = PI * r * r;
    let theta = rng.gen_range(0.0..2.0 * PI);
    if rng.gen::<f64>() * (side + base) < side {
        // lateral area grows linearly with distance from the apex
        let t = rng.gen::<f64>().sqrt();
        [t * r * theta.cos(), t * r * theta.sin(), h / 2.0 - t * h]
    } else {
        let rho = r * rng.gen::<f64>().sqrt();
        [rho * theta.cos(), rho * theta.sin(), -h / 2.0]
    }
}

fn torus_surface(rng: &mut ChaCha8Rng) -> Point {
    let (big, small) = (1.0f64, 0.35f64);
    loop {
        let u = rng.gen_range(0.0..2.0 * PI);
        let v = rng.gen_range(0.0..2.0 * PI);
        if rng.gen::<f64>() * (big + small) <= big + small * v.cos() {
            let ring = big + small * v.cos();
            return [ring * u.cos(), ring * u.sin(), small * v.sin()];
        }
    }
}

/// Adds `noise·scale·z` with `z` standard normal, clipped to norm 3.
fn jitter(rng: &mut ChaCha8Rng, p: Point, sigma: f64) -> Point {
    let mut z = gaussian3(rng);
    let n = (z[0] * z[0] + z[1] * z[1] + z[2] * z[2]).sqrt();
    if n > 3.0 {
        z = z.map(|v| v * 3.0 / n);
    }
    [p[0] + sigma * z[0], p[1] + sigma * z[1], p[2] + sigma * z[2]]
}

pub fn instance_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// One classification instance and its scale (the sphere's radius).
///
/// Sphere, box and torus are symmetric under `p → −p`, so their surface
/// samples come in antipodal pairs; with an even point count this pins the
/// noise-free centroid to the origin.
pub fn shape_instance(class: usize, n_points: usize, noise: f64, rng: &mut ChaCha8Rng) -> (PointCloud, f64) {
    let rot = random_rotation(rng);
    let scale = rng.gen_range(0.7..1.3);
    let half = [1.0, rng.gen_range(0.4..1.0), rng.gen_range(0.4..1.0)];
    let symmetric = class != 2;
    let mut raw: Vec<Point> = Vec::with_capacity(n_points);
    while raw.len() < n_points {
        let p = match class {
            0 => unit(rng),
            1 => box_surface(rng, half),
            2 => cone_surface(rng),
            _ => torus_surface(rng),
        };
        raw.push(p);
        if symmetric && raw.len() < n_points {
            raw.push([-p[0], -p[1], -p[2]]);
        }
    }
    let points = raw
        .into_iter()
        .map(|p| {
            let p = apply(&rot, p).map(|v| v * scale);
            jitter(rng, p, noise * scale)
        })
        .collect();
    let mut c = PointCloud::new(points);
    c.object_label = Some(class);
    (c, scale)
}

/// Capped cylinder with per-point labels 0 side, 1 top, 2 bottom. The
/// first three points are one of each so every part is present.
pub fn cylinder_instance(n_points: usize, noise: f64, rng: &mut ChaCha8Rng) -> PointCloud {
    let rot = random_rotation(rng);
    let scale = rng.gen_range(0.7..1.3);
    let h = rng.gen_range(1.5..2.5);
    let side = 2.0 * PI * h;
    let cap = PI;
    let mut points = Vec::with_capacity(n_points);
    let mut labels = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let part = if i < 3 {
            i
        } else {
            let t = rng.gen::<f64>() * (side + 2.0 * cap);
            if t < side {
                0
            } else if t < side + cap {
                1
            } else {
                2
            }
        };
        let theta = rng.gen_range(0.0..2.0 * PI);
        let p = match part {
            0 => [theta.cos(), theta.sin(), rng.gen_range(-h / 2.0..h / 2.0)],
            _ => {
                let rho = rng.gen::<f64>().sqrt();
                let z = if part == 1 { h / 2.0 } else { -h / 2.0 };
                [rho * theta.cos(), rho * theta.sin(), z]
            }
        };
        let p = apply(&rot, p).map(|v| v * scale);
        points.push(jitter(rng, p, noise * scale));
        labels.push(part);
    }
    let mut c = PointCloud::new(points);
    c.point_labels = Some(labels);
    c
}

/// All instances, train first. Instance `i` depends only on `(seed, i)`.
pub fn generate(spec: &SynthSpec) -> Result<Vec<(PointCloud, Split)>> {
    if spec.n_points < 64 {
        return Err(Error::Argument(format!("n_points must be at least 64, got {}", spec.n_points)));
    }
    let total = spec.n_train + spec.n_test;
    Ok((0..total)
        .map(|i| {
            let mut rng = instance_rng(spec.seed, i);
            let cloud = match spec.kind {
                SynthKind::Classification4 => shape_instance(i % 4, spec.n_points, spec.noise, &mut rng).0,
                SynthKind::Parts3 => cylinder_instance(spec.n_points, spec.noise, &mut rng),
            };
            let split = if i < spec.n_train { Split::Train } else { Split::Test };
            (cloud, split)
        })
        .collect())
}

/// Writes `cloud_NNNNN.xyzl` files plus `manifest.csv` into `dir`.
pub fn synth_dataset(spec: &SynthSpec, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (i, (cloud, split)) in generate(spec)?.into_iter().enumerate() {
        let name = format!("cloud_{i:05}.xyzl");
        write_cloud(&dir.join(&name), &cloud)?;
        entries.push(Entry {
            path: name.into(),
            label: cloud.object_label,
            split,
        });
    }
    let m = Manifest {
        root: dir.to_path_buf(),
        entries,
    };
    m.save(&dir.join("manifest.csv"))?;
    Ok(m)
}

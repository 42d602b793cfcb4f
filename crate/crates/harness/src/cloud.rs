//! `XYZL 1 <N> <has_labels>` point files.
//!
//! ```text
//! XYZL 1 3 1
//! 0 0 0 2
//! 1 0.5 0 2
//! 0 1 0 0
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use gft_core::pointops::PointCloud;

use crate::error::{Error, Result};

pub fn parse_cloud(path: &Path, text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Err(Error::format(path, "empty file"));
    };
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (n, labelled) = match fields.as_slice() {
        ["XYZL", "1", n, flag] => {
            let n: usize = n.parse().map_err(|_| Error::format(path, format!("bad point count {n:?}")))?;
            let labelled = match *flag {
                "0" => false,
                "1" => true,
                other => return Err(Error::format(path, format!("bad label flag {other:?}"))),
            };
            (n, labelled)
        }
        _ => return Err(Error::format(path, format!("expected `XYZL 1 <N> <0|1>`, found {header:?}"))),
    };
    let width = if labelled { 4 } else { 3 };
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(if labelled { n } else { 0 });
    for (i, line) in lines {
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != width {
            return Err(parse_err(format!("expected {width} columns, found {}", cols.len())));
        }
        let mut p = [0.0f64; 3];
        for (slot, c) in p.iter_mut().zip(&cols) {
            *slot = c.parse().map_err(|_| parse_err(format!("bad coordinate {c:?}")))?;
            if !slot.is_finite() {
                return Err(parse_err(format!("non-finite coordinate {c:?}")));
            }
        }
        if labelled {
            labels.push(cols[3].parse().map_err(|_| parse_err(format!("bad label {:?}", cols[3])))?);
        }
        points.push(p);
    }
    if points.len() != n {
        return Err(Error::format(path, format!("header declares {n} points, found {}", points.len())));
    }
    let mut cloud = PointCloud::new(points);
    if labelled {
        cloud.point_labels = Some(labels);
    }
    Ok(cloud)
}

pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cloud(path, &text)
}

/// Coordinates are written as the shortest `f32` text that round-trips, so
/// files are compact and byte-stable for a given cloud.
pub fn render_cloud(cloud: &PointCloud) -> String {
    let labels = cloud.point_labels.as_ref();
    let mut out = String::with_capacity(cloud.len() * 32);
    let _ = writeln!(out, "XYZL 1 {} {}", cloud.len(), labels.is_some() as u8);
    for (i, p) in cloud.points.iter().enumerate() {
        let _ = write!(out, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32);
        if let Some(l) = labels {
            let _ = write!(out, " {}", l[i]);
        }
        out.push('\n');
    }
    out
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, render_cloud(cloud)).map_err(|e| Error::io(path, e))
}

//! Plain-text XYZ point-cloud I/O.
//!
//! One point per line: `x y z` or `x y z nx ny nz`, whitespace separated.
//! Lines starting with `#` and blank lines are skipped. A file must be
//! consistent: either every data line carries normals or none does.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write → read → write cycle is byte-identical.

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use ndarray::Array2;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Read a point cloud from an XYZ file.
pub fn read_xyz(path: &Path) -> Result<PointCloud> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut coords: Vec<f64> = Vec::new();
    let mut normals: Vec<f64> = Vec::new();
    let mut arity: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        let line_num = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let n = fields.len();
        if n != 3 && n != 6 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: line_num,
                reason: format!("expected 3 or 6 fields, got {n}"),
            });
        }
        match arity {
            None => arity = Some(n),
            Some(a) if a != n => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: line_num,
                    reason: format!("inconsistent field count: file uses {a}, line has {n}"),
                });
            }
            Some(_) => {}
        }
        let mut values = [0.0f64; 6];
        for (i, f) in fields.iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: line_num,
                reason: format!("invalid number {f:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: line_num,
                    reason: format!("non-finite value {f:?}"),
                });
            }
            values[i] = v;
        }
        coords.extend_from_slice(&values[..3]);
        if n == 6 {
            normals.extend_from_slice(&values[3..6]);
        }
    }
    let rows = coords.len() / 3;
    let points = Array2::from_shape_vec((rows, 3), coords).expect("row-major coordinate buffer");
    let cloud = PointCloud::new(points)?;
    if arity == Some(6) {
        let nrm = Array2::from_shape_vec((rows, 3), normals).expect("row-major normal buffer");
        cloud.with_normals(nrm)
    } else {
        Ok(cloud)
    }
}

/// Write a point cloud as an XYZ file (normals included when present).
pub fn write_xyz(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut out = String::new();
    let pts = cloud.points();
    match cloud.normals() {
        Some(nrm) => {
            for i in 0..cloud.len() {
                writeln!(
                    out,
                    "{} {} {} {} {} {}",
                    pts[[i, 0]],
                    pts[[i, 1]],
                    pts[[i, 2]],
                    nrm[[i, 0]],
                    nrm[[i, 1]],
                    nrm[[i, 2]]
                )
                .expect("writing to String cannot fail");
            }
        }
        None => {
            for i in 0..cloud.len() {
                writeln!(out, "{} {} {}", pts[[i, 0]], pts[[i, 1]], pts[[i, 2]])
                    .expect("writing to String cannot fail");
            }
        }
    }
    fs::write(path, out).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

//! ASCII `.xyz` / `.normals` files: one `x y z` triple per line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{PointCloud, Vec3};
use crate::{Error, Result};

/// Parses whitespace-separated triples, one per non-blank line.
///
/// `path` is only used in error messages.
pub fn parse_vectors(text: &str, path: &Path) -> Result<Vec<Vec3>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 values, found {}", fields.len())));
        }
        let mut v = [0.0; 3];
        for (slot, field) in v.iter_mut().zip(&fields) {
            *slot = field
                .parse::<f64>()
                .map_err(|e| err(format!("bad number {field:?}: {e}")))?;
            if !slot.is_finite() {
                return Err(err(format!("non-finite value {field:?}")));
            }
        }
        out.push(Vec3::from(v));
    }
    Ok(out)
}

fn read_vectors(path: &Path) -> Result<Vec<Vec3>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_vectors(&text, path)
}

/// Loads a cloud, plus line-aligned normals when `normals_path` is given.
///
/// Normals are re-normalized to unit length on load.
pub fn load_point_cloud(path: &Path, normals_path: Option<&Path>) -> Result<PointCloud> {
    let points = read_vectors(path)?;
    if points.is_empty() {
        return Err(Error::InvalidInput(format!("{}: no points", path.display())));
    }
    let normals = match normals_path {
        None => None,
        Some(np) => {
            let normals = load_normals(np)?;
            if normals.len() != points.len() {
                return Err(Error::InvalidInput(format!(
                    "{} has {} points but {} has {} normals",
                    path.display(),
                    points.len(),
                    np.display(),
                    normals.len()
                )));
            }
            Some(normals)
        }
    };
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    PointCloud::new(name, points, normals)
}

/// Reads a `.normals` file, scaling every vector to unit length.
pub fn load_normals(path: &Path) -> Result<Vec<Vec3>> {
    read_vectors(path)?
        .into_iter()
        .enumerate()
        .map(|(i, n)| {
            let len = n.norm();
            if len == 0.0 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: "zero-length normal".into(),
                });
            }
            Ok(n / len)
        })
        .collect()
}

fn write_vectors(path: &Path, vectors: &[Vec3]) -> Result<()> {
    let mut text = String::with_capacity(vectors.len() * 64);
    for v in vectors {
        // `{}` on f64 is the shortest round-tripping representation.
        let _ = writeln!(text, "{} {} {}", v.x, v.y, v.z);
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_xyz(path: &Path, points: &[Vec3]) -> Result<()> {
    write_vectors(path, points)
}

pub fn write_normals(path: &Path, normals: &[Vec3]) -> Result<()> {
    write_vectors(path, normals)
}

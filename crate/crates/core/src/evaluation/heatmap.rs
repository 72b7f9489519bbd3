//! ASCII PLY export of per-point angular error.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::geometry::PointCloud;
use crate::{Error, Result};

/// Errors at or above this many degrees get the full red color.
pub const HEATMAP_MAX_DEGREES: f64 = 60.0;

/// Linear blue → red ramp: `t = clamp(deg / 60, 0, 1)`,
/// `rgb = (round(255 t), 0, round(255 (1 − t)))`.
pub fn heatmap_color(error_radians: f64) -> [u8; 3] {
    let t = (error_radians.to_degrees() / HEATMAP_MAX_DEGREES).clamp(0.0, 1.0);
    let t = if t.is_nan() { 1.0 } else { t };
    [(255.0 * t).round() as u8, 0, (255.0 * (1.0 - t)).round() as u8]
}

/// Writes `cloud` with each vertex colored by its error (radians).
/// Coordinates use Rust's shortest round-trip formatting, so parsing them
/// back yields the exact values.
pub fn export_error_heatmap(cloud: &PointCloud, errors: &[f64], path: &Path) -> Result<()> {
    if errors.len() != cloud.len() {
        return Err(Error::InvalidInput(format!(
            "{} errors for {} points",
            errors.len(),
            cloud.len()
        )));
    }
    let mut out = String::with_capacity(64 * cloud.len() + 512);
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "comment normal angular error heatmap for {}", cloud.name());
    let _ = writeln!(
        out,
        "comment color ramp: t = clamp(error_deg / {HEATMAP_MAX_DEGREES}, 0, 1); \
         red = round(255 t), green = 0, blue = round(255 (1 - t))"
    );
    let _ = writeln!(out, "element vertex {}", cloud.len());
    for p in ["x", "y", "z"] {
        let _ = writeln!(out, "property double {p}");
    }
    for c in ["red", "green", "blue"] {
        let _ = writeln!(out, "property uchar {c}");
    }
    out.push_str("end_header\n");
    for (p, &e) in cloud.points().iter().zip(errors) {
        let [r, g, b] = heatmap_color(e);
        let _ = writeln!(out, "{:?} {:?} {:?} {r} {g} {b}", p.x, p.y, p.z);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

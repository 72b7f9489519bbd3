//! Point clouds, exact nearest-neighbor search and the patch pipeline.
//!
//! A query point's neighborhood is pulled out with [`extract_patch`], then
//! canonicalized by [`normalize_patch`]: translated so the query sits at the
//! origin, scaled by the patch radius (max distance from the query) and
//! rotated into its PCA frame. Normals predicted in that frame are mapped
//! back with [`denormalize_normal`].

mod eigen;
mod io;
mod knn;
mod patch;

pub use eigen::{covariance_eigendecomposition, symmetric_eigen3, Eigen3};
pub use io::{load_normals, load_point_cloud, parse_vectors, write_normals, write_xyz};
pub use knn::KnnIndex;
pub use patch::{
    denormalize_normal, extract_patch, normalize_patch, normalize_patch_or_fallback,
    NormalizedPatch, Patch, PatchTransform,
};

use crate::{Error, Result};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

/// Tolerance on the length of stored ground-truth normals.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// A named set of 3D points with optional ground-truth unit normals.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    name: String,
    points: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
}

impl PointCloud {
    pub fn new(
        name: impl Into<String>,
        points: Vec<Vec3>,
        normals: Option<Vec<Vec3>>,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("point cloud is empty".into()));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidInput(format!("point {i} has a non-finite coordinate")));
        }
        if let Some(normals) = &normals {
            if normals.len() != points.len() {
                return Err(Error::InvalidInput(format!(
                    "{} normals for {} points",
                    normals.len(),
                    points.len()
                )));
            }
            if let Some(i) = normals
                .iter()
                .position(|n| !((n.norm() - 1.0).abs() <= UNIT_NORM_TOLERANCE))
            {
                return Err(Error::InvalidInput(format!("normal {i} is not unit length")));
            }
        }
        Ok(Self {
            name: name.into(),
            points,
            normals,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false: construction rejects empty clouds.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn has_normals(&self) -> bool {
        self.normals.is_some()
    }

    /// Replaces the ground-truth normals.
    pub fn with_normals(self, normals: Option<Vec<Vec3>>) -> Result<Self> {
        Self::new(self.name, self.points, normals)
    }

    /// Keeps the points (and matching normals) at `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let normals = self
            .normals
            .as_ref()
            .map(|n| indices.iter().map(|&i| n[i]).collect());
        Self::new(self.name.clone(), points, normals)
    }

    /// Axis-aligned bounding box as `(min, max)`.
    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points[1..] {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }

    pub fn bounding_box_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        (hi - lo).norm()
    }
}

/// Unoriented angle between two directions, in radians within `[0, π/2]`.
///
/// Equal to `acos(clamp(|a·b| / (‖a‖‖b‖), 0, 1))`, but evaluated as
/// `atan2(‖a×b‖, |a·b|)`, which keeps full precision for nearly parallel
/// vectors where `acos` bottoms out around 1.5e-8.
pub fn angular_error(a: &Vec3, b: &Vec3) -> Result<f64> {
    let denom = a.norm() * b.norm();
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::InvalidInput(
            "angular error of a zero-length or non-finite vector".into(),
        ));
    }
    Ok(a.cross(b).norm().atan2(a.dot(b).abs()))
}

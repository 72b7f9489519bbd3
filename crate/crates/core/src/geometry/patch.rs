//! Local patches and their canonical frame.

use super::{covariance_eigendecomposition, KnnIndex, Mat3, PointCloud, Vec3};
use crate::{Error, Result};

/// Ratio of the second to the first covariance eigenvalue below which a patch
/// is treated as collinear.
const COLLINEAR_RATIO: f64 = 1e-12;

/// The k-nearest neighborhood of a query point.
///
/// `indices[0]` is always the query itself; the remainder follow in order of
/// increasing distance (ties by lower index).
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub center_index: usize,
    pub indices: Vec<usize>,
    pub positions: Vec<Vec3>,
    pub gt_normals: Option<Vec<Vec3>>,
}

impl Patch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn query_position(&self) -> Vec3 {
        self.positions[0]
    }
}

/// Maps world coordinates into a patch's canonical frame:
/// `p ↦ rotation · ((p + translation) / scale)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchTransform {
    pub translation: Vec3,
    pub rotation: Mat3,
    pub scale: f64,
}

impl PatchTransform {
    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * ((p + self.translation) / self.scale)
    }

    /// Directions are unaffected by translation and scale.
    pub fn apply_direction(&self, n: &Vec3) -> Vec3 {
        self.rotation * n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedPatch {
    pub positions: Vec<Vec3>,
    pub transform: PatchTransform,
}

impl NormalizedPatch {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

pub fn extract_patch(
    cloud: &PointCloud,
    index: &KnnIndex,
    query_index: usize,
    k: usize,
) -> Result<Patch> {
    if query_index >= cloud.len() {
        return Err(Error::InvalidInput(format!(
            "query index {query_index} out of range for {} points",
            cloud.len()
        )));
    }
    if index.point_count() != cloud.len() {
        return Err(Error::InvalidInput("index was built for a different cloud".into()));
    }
    if k == 0 || k > cloud.len() {
        return Err(Error::InvalidInput(format!(
            "patch size {k} must be in 1..={}",
            cloud.len()
        )));
    }
    let query = cloud.points()[query_index];
    let mut indices = Vec::with_capacity(k);
    indices.push(query_index);
    // Coincident duplicates with a lower index would otherwise push the
    // query itself out of a small patch.
    indices.extend(
        index
            .query(&query, k)
            .into_iter()
            .filter(|&i| i != query_index)
            .take(k - 1),
    );
    let positions = indices.iter().map(|&i| cloud.points()[i]).collect();
    let gt_normals = cloud
        .normals()
        .map(|n| indices.iter().map(|&i| n[i]).collect());
    Ok(Patch {
        center_index: query_index,
        indices,
        positions,
        gt_normals,
    })
}

fn translate_and_scale(patch: &Patch) -> Result<(Vec3, f64, Vec<Vec3>)> {
    if patch.is_empty() {
        return Err(Error::Degenerate("empty patch".into()));
    }
    let translation = -patch.query_position();
    let centered: Vec<Vec3> = patch.positions.iter().map(|p| p + translation).collect();
    let scale = centered.iter().map(|p| p.norm()).fold(0.0, f64::max);
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Degenerate("all patch points coincide with the query".into()));
    }
    Ok((translation, scale, centered.into_iter().map(|p| p / scale).collect()))
}

/// Translates the query to the origin, divides by the patch radius and rotates
/// into the PCA frame of the scaled patch (first axis = largest variance).
///
/// Collinear (or fewer than three point) patches are an error; see
/// [`normalize_patch_or_fallback`].
pub fn normalize_patch(patch: &Patch) -> Result<NormalizedPatch> {
    let (translation, scale, scaled) = translate_and_scale(patch)?;
    if scaled.len() < 3 {
        return Err(Error::Degenerate(format!("patch has only {} points", scaled.len())));
    }
    let eig = covariance_eigendecomposition(&scaled)?;
    if !(eig.values[1] > COLLINEAR_RATIO * eig.values[0]) {
        return Err(Error::Degenerate("patch points are collinear".into()));
    }
    let rotation = eig.vectors.transpose();
    let positions = scaled.iter().map(|p| rotation * p).collect();
    Ok(NormalizedPatch {
        positions,
        transform: PatchTransform {
            translation,
            rotation,
            scale,
        },
    })
}

/// [`normalize_patch`], falling back to translation + scale with an identity
/// rotation (and a logged warning) when the patch is collinear.
pub fn normalize_patch_or_fallback(patch: &Patch) -> Result<NormalizedPatch> {
    match normalize_patch(patch) {
        Err(Error::Degenerate(reason)) => {
            let (translation, scale, positions) = translate_and_scale(patch)?;
            log::warn!(
                "patch around point {}: {reason}; using identity rotation",
                patch.center_index
            );
            Ok(NormalizedPatch {
                positions,
                transform: PatchTransform {
                    translation,
                    rotation: Mat3::identity(),
                    scale,
                },
            })
        }
        other => other,
    }
}

/// Maps a canonical-frame normal back to world orientation, unit length.
pub fn denormalize_normal(transform: &PatchTransform, n: &Vec3) -> Result<Vec3> {
    let len = n.norm();
    if len == 0.0 || !len.is_finite() {
        return Err(Error::InvalidInput("cannot denormalize a zero-length normal".into()));
    }
    let world = transform.rotation.transpose() * n;
    Ok(world / world.norm())
}

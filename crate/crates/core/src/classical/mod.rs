//! Deterministic normal estimators: PCA plane fitting and n-jet height fields.
//!
//! Both return unoriented normals. World-frame results are made deterministic
//! by [`orient_up`], which flips a normal so its first non-zero component
//! among (z, y, x) is positive.

use nalgebra::{DMatrix, DVector};

use crate::geometry::{
    covariance_eigendecomposition, denormalize_normal, normalize_patch, NormalizedPatch, Patch,
    Vec3,
};
use crate::{Error, Result};

/// Ridge added to the jet normal equations.
pub const JET_RIDGE: f64 = 1e-10;

/// Jet order used when none is given.
pub const DEFAULT_JET_ORDER: usize = 3;

const MAX_JET_ORDER: usize = 4;

/// Second-to-first eigenvalue ratio below which a patch counts as collinear.
const COLLINEAR_RATIO: f64 = 1e-12;

/// Flips `n` so that its z component is positive, falling back to y then x
/// when z (then y) is exactly zero.
pub fn orient_up(n: Vec3) -> Vec3 {
    let key = if n.z != 0.0 {
        n.z
    } else if n.y != 0.0 {
        n.y
    } else {
        n.x
    };
    if key < 0.0 {
        -n
    } else {
        n
    }
}

/// Smallest-variance direction of the patch covariance, unit length, in the
/// world frame of the patch coordinates.
pub fn estimate_normal_pca(patch: &Patch) -> Result<Vec3> {
    let eig = covariance_eigendecomposition(&patch.positions)?;
    if !(eig.values[1] > COLLINEAR_RATIO * eig.values[0]) {
        return Err(Error::Degenerate(format!(
            "patch around point {} is collinear",
            patch.center_index
        )));
    }
    let n: Vec3 = eig.vectors.column(2).into_owned();
    Ok(orient_up(n.normalize()))
}

/// Coefficients of `h(u, v) = Σ_{i+j≤order} c_ij uⁱ vʲ`.
///
/// Stored by total degree, and within a degree by decreasing power of `u`:
/// `1, u, v, u², uv, v², u³, …`.
#[derive(Debug, Clone, PartialEq)]
pub struct JetCoefficients {
    pub order: usize,
    pub coeffs: Vec<f64>,
}

impl JetCoefficients {
    pub fn coefficient_count(order: usize) -> usize {
        (order + 1) * (order + 2) / 2
    }

    /// Exponent pairs `(i, j)` in storage order.
    pub fn exponents(order: usize) -> impl Iterator<Item = (usize, usize)> {
        (0..=order).flat_map(|d| (0..=d).map(move |j| (d - j, j)))
    }

    pub fn coefficient(&self, i: usize, j: usize) -> Option<f64> {
        Self::exponents(self.order)
            .position(|e| e == (i, j))
            .map(|p| self.coeffs[p])
    }

    pub fn evaluate(&self, u: f64, v: f64) -> f64 {
        Self::exponents(self.order)
            .zip(&self.coeffs)
            .map(|((i, j), c)| c * u.powi(i as i32) * v.powi(j as i32))
            .sum()
    }

    /// Sum of squared height residuals over `positions` (x = u, y = v, z = h).
    pub fn residual(&self, positions: &[Vec3]) -> f64 {
        positions
            .iter()
            .map(|p| (p.z - self.evaluate(p.x, p.y)).powi(2))
            .sum()
    }
}

/// Least-squares height field over a canonical patch, third axis as height.
pub fn fit_jet(patch: &NormalizedPatch, order: usize) -> Result<JetCoefficients> {
    if !(1..=MAX_JET_ORDER).contains(&order) {
        return Err(Error::InvalidInput(format!(
            "jet order {order} outside 1..={MAX_JET_ORDER}"
        )));
    }
    let m = JetCoefficients::coefficient_count(order);
    let n = patch.positions.len();
    if n < m {
        return Err(Error::InvalidInput(format!(
            "order-{order} jet needs at least {m} points, patch has {n}"
        )));
    }
    let exps: Vec<(usize, usize)> = JetCoefficients::exponents(order).collect();
    let design = DMatrix::from_fn(n, m, |r, c| {
        let p = &patch.positions[r];
        let (i, j) = exps[c];
        p.x.powi(i as i32) * p.y.powi(j as i32)
    });
    let heights = DVector::from_iterator(n, patch.positions.iter().map(|p| p.z));
    let mut normal = design.transpose() * &design;
    for d in 0..m {
        normal[(d, d)] += JET_RIDGE;
    }
    let rhs = design.transpose() * heights;
    let chol = normal.cholesky().ok_or_else(|| {
        Error::Degenerate(format!("order-{order} jet design matrix is rank deficient"))
    })?;
    let coeffs = chol.solve(&rhs);
    if coeffs.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("jet coefficients".into()));
    }
    Ok(JetCoefficients {
        order,
        coeffs: coeffs.iter().copied().collect(),
    })
}

/// Normal of the fitted height field at the origin (the query point), in
/// the patch frame: `normalize(-∂h/∂u, -∂h/∂v, 1)`.
pub fn jet_normal(coeffs: &JetCoefficients) -> Vec3 {
    Vec3::new(-coeffs.coeffs[1], -coeffs.coeffs[2], 1.0).normalize()
}

/// Normalizes `patch`, fits an order-`order` jet and maps its normal back to
/// the world frame.
pub fn estimate_normal_jet(patch: &Patch, order: usize) -> Result<Vec3> {
    let normalized = normalize_patch(patch)?;
    let coeffs = fit_jet(&normalized, order)?;
    let n = denormalize_normal(&normalized.transform, &jet_normal(&coeffs))?;
    Ok(orient_up(n))
}

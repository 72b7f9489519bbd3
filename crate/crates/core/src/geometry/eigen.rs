//! Symmetric 3×3 eigendecomposition by cyclic Jacobi rotations.

use super::{Mat3, Vec3};
use crate::{Error, Result};

const MAX_SWEEPS: usize = 64;

/// Eigenpairs of a symmetric 3×3 matrix.
///
/// `values` are descending; `vectors` holds the matching unit eigenvectors as
/// columns. Each column's largest-magnitude component is positive, except
/// that the third column is negated when needed to make `det(vectors) = +1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eigen3 {
    pub values: [f64; 3],
    pub vectors: Mat3,
}

/// Eigendecomposition of the centered covariance of `points` (normalized by n).
pub fn covariance_eigendecomposition(points: &[Vec3]) -> Result<Eigen3> {
    if points.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "covariance needs at least 3 points, got {}",
            points.len()
        )));
    }
    Ok(symmetric_eigen3(&covariance(points)))
}

pub(crate) fn covariance(points: &[Vec3]) -> Mat3 {
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vec3>() / n;
    let mut cov = Mat3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov / n
}

/// Cyclic Jacobi on a symmetric matrix (only the upper triangle is trusted).
pub fn symmetric_eigen3(m: &Mat3) -> Eigen3 {
    let mut a = *m;
    for r in 0..3 {
        for c in 0..r {
            a[(r, c)] = a[(c, r)];
        }
    }
    let mut v = Mat3::identity();
    for _ in 0..MAX_SWEEPS {
        let off = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
        let diag = a[(0, 0)].powi(2) + a[(1, 1)].powi(2) + a[(2, 2)].powi(2);
        if off == 0.0 || off <= f64::EPSILON * f64::EPSILON * diag * 1e-4 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let apq = a[(p, q)];
            if apq == 0.0 {
                continue;
            }
            let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            // A <- Jᵀ A J with the rotation acting on rows/cols p and q.
            for k in 0..3 {
                let akp = a[(k, p)];
                let akq = a[(k, q)];
                a[(k, p)] = c * akp - s * akq;
                a[(k, q)] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[(p, k)];
                let aqk = a[(q, k)];
                a[(p, k)] = c * apk - s * aqk;
                a[(q, k)] = s * apk + c * aqk;
            }
            a[(p, q)] = 0.0;
            a[(q, p)] = 0.0;
            for k in 0..3 {
                let vkp = v[(k, p)];
                let vkq = v[(k, q)];
                v[(k, p)] = c * vkp - s * vkq;
                v[(k, q)] = s * vkp + c * vkq;
            }
        }
    }

    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]).then(i.cmp(&j)));
    let values = order.map(|i| a[(i, i)]);
    let mut vectors = Mat3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        let mut col: Vec3 = v.column(src).into_owned();
        col.normalize_mut();
        let lead = col.iamax();
        if col[lead] < 0.0 {
            col = -col;
        }
        vectors.set_column(dst, &col);
    }
    if vectors.determinant() < 0.0 {
        let c2 = -vectors.column(2).into_owned();
        vectors.set_column(2, &c2);
    }
    Eigen3 { values, vectors }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Closed-form roots of the characteristic polynomial of a symmetric 3×3
    /// matrix (trigonometric method), descending.
    fn closed_form_eigenvalues(m: &Mat3) -> [f64; 3] {
        let p1 = m[(0, 1)].powi(2) + m[(0, 2)].powi(2) + m[(1, 2)].powi(2);
        let q = m.trace() / 3.0;
        let p2 = (m[(0, 0)] - q).powi(2) + (m[(1, 1)] - q).powi(2) + (m[(2, 2)] - q).powi(2)
            + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let b = (m - Mat3::identity() * q) / p;
        let r = (b.determinant() / 2.0).clamp(-1.0, 1.0);
        let phi = r.acos() / 3.0;
        let e1 = q + 2.0 * p * phi.cos();
        let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
        [e1, 3.0 * q - e1 - e3, e3]
    }

    fn check_decomposition(m: &Mat3, e: &Eigen3, tol: f64) {
        let recon = e.vectors * Mat3::from_diagonal(&Vec3::from(e.values)) * e.vectors.transpose();
        assert!((recon - m).abs().max() < tol, "reconstruction {recon} vs {m}");
        let gram = e.vectors.transpose() * e.vectors;
        assert!((gram - Mat3::identity()).abs().max() < tol);
        assert!((e.vectors.determinant() - 1.0).abs() < tol);
        assert!(e.values[0] >= e.values[1] && e.values[1] >= e.values[2]);
    }

    #[test]
    fn plane_points_have_zero_normal_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec3> = (0..50)
            .map(|_| Vec3::new(rng.random(), rng.random(), 0.0))
            .collect();
        let e = covariance_eigendecomposition(&pts).unwrap();
        assert!(e.values[2].abs() < 1e-12);
        let n = e.vectors.column(2);
        assert!((n.z.abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn line_points_have_two_zero_eigenvalues() {
        let pts: Vec<Vec3> = (0..10)
            .map(|i| Vec3::new(1.0, 2.0, 3.0) * i as f64)
            .collect();
        let e = covariance_eigendecomposition(&pts).unwrap();
        assert!(e.values[1].abs() < 1e-12 && e.values[2].abs() < 1e-12);
        assert!(e.values[0] > 1.0);
    }

    #[test]
    fn too_few_points() {
        assert!(covariance_eigendecomposition(&[Vec3::zeros(), Vec3::x()]).is_err());
    }

    #[test]
    fn isotropic_sample_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec3> = (0..20_000)
            .map(|_| {
                Vec3::new(
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                )
            })
            .collect();
        let e = covariance_eigendecomposition(&pts).unwrap();
        let oracle = closed_form_eigenvalues(&covariance(&pts));
        for i in 0..3 {
            assert!((e.values[i] - oracle[i]).abs() < 1e-10);
            // Sampling tolerance for unit variance with n = 20k.
            assert!((e.values[i] - 1.0).abs() < 0.05);
        }
        check_decomposition(&covariance(&pts), &e, 1e-10);
    }

    #[test]
    fn sign_convention() {
        let m = Mat3::new(2.0, 0.5, 0.1, 0.5, 1.0, 0.2, 0.1, 0.2, 0.3);
        let e = symmetric_eigen3(&m);
        for c in 0..2 {
            let col = e.vectors.column(c);
            assert!(col[col.iamax()] > 0.0);
        }
        assert!(e.vectors.determinant() > 0.0);
    }

    proptest! {
        #[test]
        fn reconstructs_random_symmetric(vals in proptest::array::uniform6(-5.0..5.0f64)) {
            let m = Mat3::new(
                vals[0], vals[1], vals[2],
                vals[1], vals[3], vals[4],
                vals[2], vals[4], vals[5],
            );
            let e = symmetric_eigen3(&m);
            check_decomposition(&m, &e, 1e-10);
            let oracle = closed_form_eigenvalues(&m);
            for i in 0..3 {
                prop_assert!((e.values[i] - oracle[i]).abs() < 1e-8);
            }
        }
    }
}

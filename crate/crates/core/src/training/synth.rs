//! Analytic surfaces with exact normals, and the noise / density corruptions
//! applied to them.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::geometry::{covariance_eigendecomposition, PointCloud, Vec3};
use crate::{Error, Result};

/// Number of bands in the stripes density mode.
pub const STRIPE_BANDS: usize = 8;
/// Keep probability inside the thinned (odd) stripes.
pub const STRIPE_KEEP: f64 = 0.1;
/// Keep probability at the far end of the gradient density ramp.
pub const GRADIENT_END_KEEP: f64 = 0.05;

/// Surface family and its shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// `z = 0` over `[-extent, extent]²`.
    Plane { extent: f64 },
    /// Sphere centered at the origin.
    Sphere { radius: f64 },
    /// Axis along z, `|z| ≤ height / 2`.
    Cylinder { radius: f64, height: f64 },
    /// `z = curvature · x · y` over `[-extent, extent]²`.
    Saddle { extent: f64, curvature: f64 },
    /// Ring around the z axis.
    Torus { major_radius: f64, minor_radius: f64 },
}

impl Shape {
    pub const NAMES: [&'static str; 5] = ["plane", "sphere", "cylinder", "saddle", "torus"];

    /// Default parameters for a family name.
    pub fn named(name: &str) -> Result<Self> {
        Ok(match name {
            "plane" => Shape::Plane { extent: 1.0 },
            "sphere" => Shape::Sphere { radius: 1.0 },
            "cylinder" => Shape::Cylinder { radius: 0.5, height: 2.0 },
            "saddle" => Shape::Saddle { extent: 1.0, curvature: 1.0 },
            "torus" => Shape::Torus { major_radius: 1.0, minor_radius: 0.35 },
            other => return Err(Error::InvalidInput(format!("unknown shape '{other}'"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Shape::Plane { .. } => "plane",
            Shape::Sphere { .. } => "sphere",
            Shape::Cylinder { .. } => "cylinder",
            Shape::Saddle { .. } => "saddle",
            Shape::Torus { .. } => "torus",
        }
    }

    fn validate(&self) -> Result<()> {
        let positive: &[(f64, &str)] = match self {
            Shape::Plane { extent } => &[(*extent, "extent")],
            Shape::Sphere { radius } => &[(*radius, "radius")],
            Shape::Cylinder { radius, height } => &[(*radius, "radius"), (*height, "height")],
            Shape::Saddle { extent, curvature } => {
                if !curvature.is_finite() {
                    return Err(Error::InvalidInput("saddle curvature must be finite".into()));
                }
                &[(*extent, "extent")]
            }
            Shape::Torus { major_radius, minor_radius } => {
                if minor_radius >= major_radius {
                    return Err(Error::InvalidInput(
                        "torus minor radius must be below the major radius".into(),
                    ));
                }
                &[(*major_radius, "major radius"), (*minor_radius, "minor radius")]
            }
        };
        for (value, what) in positive {
            if !(value.is_finite() && *value > 0.0) {
                return Err(Error::InvalidInput(format!("{} {what} must be positive", self.name())));
            }
        }
        Ok(())
    }

    /// One point and its analytic unit normal.
    fn sample(&self, rng: &mut ChaCha8Rng) -> (Vec3, Vec3) {
        match *self {
            Shape::Plane { extent } => {
                let p = Vec3::new(rng.random_range(-extent..extent), rng.random_range(-extent..extent), 0.0);
                (p, Vec3::z())
            }
            Shape::Sphere { radius } => {
                let d = loop {
                    let g = Vec3::new(
                        rng.sample(StandardNormal),
                        rng.sample(StandardNormal),
                        rng.sample(StandardNormal),
                    );
                    let n = g.norm();
                    if n > 1e-9 {
                        break g / n;
                    }
                };
                (d * radius, d)
            }
            Shape::Cylinder { radius, height } => {
                let t = rng.random_range(0.0..std::f64::consts::TAU);
                let z = rng.random_range(-height / 2.0..height / 2.0);
                let n = Vec3::new(t.cos(), t.sin(), 0.0);
                (Vec3::new(radius * n.x, radius * n.y, z), n)
            }
            Shape::Saddle { extent, curvature } => {
                let x = rng.random_range(-extent..extent);
                let y = rng.random_range(-extent..extent);
                (Vec3::new(x, y, curvature * x * y), saddle_normal(curvature, x, y))
            }
            Shape::Torus { major_radius: big, minor_radius: r } => {
                let u = rng.random_range(0.0..std::f64::consts::TAU);
                // Area element ∝ (R + r cos v): rejection-sample v.
                let v = loop {
                    let v: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    if rng.random_range(0.0..big + r) < big + r * v.cos() {
                        break v;
                    }
                };
                let ring = big + r * v.cos();
                let p = Vec3::new(ring * u.cos(), ring * u.sin(), r * v.sin());
                let n = Vec3::new(v.cos() * u.cos(), v.cos() * u.sin(), v.sin());
                (p, n)
            }
        }
    }
}

/// Unit normal of `z = a·x·y` at `(x, y)`.
pub fn saddle_normal(curvature: f64, x: f64, y: f64) -> Vec3 {
    Vec3::new(-curvature * y, -curvature * x, 1.0).normalize()
}

/// A shape, how many points to draw from it and the sampling seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticShape {
    pub shape: Shape,
    pub sample_count: usize,
    pub seed: u64,
}

pub fn generate_synthetic_shape(spec: &SyntheticShape) -> Result<PointCloud> {
    spec.shape.validate()?;
    if spec.sample_count < 100 {
        return Err(Error::InvalidInput(format!(
            "sample count {} is below the minimum of 100",
            spec.sample_count
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (points, normals) = (0..spec.sample_count).map(|_| spec.shape.sample(&mut rng)).unzip();
    PointCloud::new(spec.shape.name(), points, Some(normals))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityMode {
    #[default]
    None,
    /// Alternating bands along the first principal axis thinned to
    /// [`STRIPE_KEEP`].
    Stripes,
    /// Keep probability ramping linearly from 1 to [`GRADIENT_END_KEEP`]
    /// along the first principal axis.
    Gradient,
}

impl fmt::Display for DensityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DensityMode::None => "none",
            DensityMode::Stripes => "stripes",
            DensityMode::Gradient => "gradient",
        })
    }
}

impl FromStr for DensityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DensityMode::None),
            "stripes" => Ok(DensityMode::Stripes),
            "gradient" => Ok(DensityMode::Gradient),
            other => Err(Error::InvalidInput(format!("unknown density mode '{other}'"))),
        }
    }
}

impl DensityMode {
    /// Keep probability at normalized position `t ∈ [0, 1]` along the first
    /// principal axis.
    pub fn keep_probability(self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        match self {
            DensityMode::None => 1.0,
            DensityMode::Stripes => {
                let band = ((t * STRIPE_BANDS as f64) as usize).min(STRIPE_BANDS - 1);
                if band % 2 == 1 {
                    STRIPE_KEEP
                } else {
                    1.0
                }
            }
            DensityMode::Gradient => 1.0 - (1.0 - GRADIENT_END_KEEP) * t,
        }
    }
}

/// How a clean cloud is degraded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    /// Noise standard deviation as a fraction of the bounding-box diagonal.
    pub noise_sigma_fraction: f64,
    pub density_mode: DensityMode,
    pub seed: u64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            noise_sigma_fraction: 0.0,
            density_mode: DensityMode::None,
            seed: 0,
        }
    }
}

/// Isotropic Gaussian offsets with standard deviation
/// `noise_sigma_fraction × bounding-box diagonal`. Normals are left as the
/// clean-surface values.
pub fn add_gaussian_noise(cloud: &PointCloud, spec: &CorruptionSpec) -> Result<PointCloud> {
    let frac = spec.noise_sigma_fraction;
    if !(frac.is_finite() && frac >= 0.0) {
        return Err(Error::InvalidInput(format!("noise fraction {frac} must be ≥ 0")));
    }
    if frac == 0.0 {
        return Ok(cloud.clone());
    }
    let sigma = frac * cloud.bounding_box_diagonal();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let points = cloud
        .points()
        .iter()
        .map(|p| {
            let d = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
            p + d * sigma
        })
        .collect();
    PointCloud::new(cloud.name(), points, cloud.normals().map(<[Vec3]>::to_vec))
}

/// Normalized position of every point along the cloud's first principal
/// axis, 0 at the minimum and 1 at the maximum.
pub fn first_axis_coordinate(cloud: &PointCloud) -> Result<Vec<f64>> {
    let eig = covariance_eigendecomposition(cloud.points())?;
    let axis: Vec3 = eig.vectors.column(0).into_owned();
    let proj: Vec<f64> = cloud.points().iter().map(|p| p.dot(&axis)).collect();
    let lo = proj.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Ok(proj
        .iter()
        .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect())
}

/// Randomly drops points according to `spec.density_mode`. Survivors keep
/// their normals and relative order. Fails if fewer than `3 · patch_size`
/// points remain.
pub fn apply_density_variation(
    cloud: &PointCloud,
    spec: &CorruptionSpec,
    patch_size: usize,
) -> Result<PointCloud> {
    if spec.density_mode == DensityMode::None {
        return Ok(cloud.clone());
    }
    let t = first_axis_coordinate(cloud)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xd3_5e_17);
    let keep: Vec<usize> = t
        .iter()
        .enumerate()
        .filter(|(_, &t)| rng.random::<f64>() < spec.density_mode.keep_probability(t))
        .map(|(i, _)| i)
        .collect();
    if keep.len() < 3 * patch_size {
        return Err(Error::InvalidInput(format!(
            "density variation leaves {} points, need at least {} for patch size {patch_size}",
            keep.len(),
            3 * patch_size
        )));
    }
    cloud.select(&keep)
}

/// Noise then density variation.
pub fn corrupt(cloud: &PointCloud, spec: &CorruptionSpec, patch_size: usize) -> Result<PointCloud> {
    let noisy = add_gaussian_noise(cloud, spec)?;
    apply_density_variation(&noisy, spec, patch_size)
}

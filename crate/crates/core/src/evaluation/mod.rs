//! Scoring normal predictions: unoriented angular RMSE, PGP curves, per-cloud
//! reports, error heatmaps and inference timing.

mod heatmap;

pub use heatmap::{export_error_heatmap, heatmap_color, HEATMAP_MAX_DEGREES};

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classical::{estimate_normal_jet, estimate_normal_pca};
use crate::geometry::{
    angular_error, denormalize_normal, extract_patch, normalize_patch_or_fallback, KnnIndex,
    PointCloud, Vec3,
};
use crate::model::ModelWeights;
use crate::training::CorruptionSpec;
use crate::{Error, Result};

/// Unoriented angle between each prediction and its ground truth, radians.
pub fn angular_errors(predicted: &[Vec3], ground_truth: &[Vec3]) -> Result<Vec<f64>> {
    if predicted.len() != ground_truth.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} ground-truth normals",
            predicted.len(),
            ground_truth.len()
        )));
    }
    predicted.iter().zip(ground_truth).map(|(p, g)| angular_error(p, g)).collect()
}

/// `sqrt(mean θ²)` in degrees, for errors in radians. Empty input gives 0.
pub fn rmse_from_errors(errors: &[f64]) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    let mean_sq = errors.iter().map(|e| e.to_degrees().powi(2)).sum::<f64>() / errors.len() as f64;
    mean_sq.sqrt()
}

/// Angular RMSE in degrees.
pub fn rmse(predicted: &[Vec3], ground_truth: &[Vec3]) -> Result<f64> {
    Ok(rmse_from_errors(&angular_errors(predicted, ground_truth)?))
}

/// `0, 1, …, 30` degrees.
pub fn default_alphas() -> Vec<f64> {
    (0..=30).map(f64::from).collect()
}

/// Fraction of errors (radians) strictly below each threshold (degrees).
pub fn pgp_from_errors(errors: &[f64], alphas_degrees: &[f64]) -> Vec<f64> {
    let mut degrees: Vec<f64> = errors.iter().map(|e| e.to_degrees()).collect();
    degrees.sort_by(f64::total_cmp);
    alphas_degrees
        .iter()
        .map(|&a| {
            if degrees.is_empty() {
                0.0
            } else {
                degrees.partition_point(|&d| d < a) as f64 / degrees.len() as f64
            }
        })
        .collect()
}

/// Percentage of good points at each threshold, as fractions in `[0, 1]`.
pub fn pgp_curve(predicted: &[Vec3], ground_truth: &[Vec3], alphas_degrees: &[f64]) -> Result<Vec<f64>> {
    Ok(pgp_from_errors(&angular_errors(predicted, ground_truth)?, alphas_degrees))
}

/// How normals are estimated at each query point.
#[derive(Debug, Clone, Copy)]
pub enum Estimator<'a> {
    Pca,
    Jet { order: usize },
    /// One patch per query point; only the query's prediction is kept.
    Model(&'a ModelWeights),
}

impl Estimator<'_> {
    pub fn name(&self) -> String {
        match self {
            Estimator::Pca => "pca".into(),
            Estimator::Jet { order } => format!("jet{order}"),
            Estimator::Model(m) => format!("model:{}", m.config().variant),
        }
    }

    /// Normal at `query`, from its `k`-point patch.
    pub fn estimate(&self, cloud: &PointCloud, index: &KnnIndex, query: usize, k: usize) -> Result<Vec3> {
        let patch = extract_patch(cloud, index, query, k)?;
        match self {
            Estimator::Pca => estimate_normal_pca(&patch),
            Estimator::Jet { order } => estimate_normal_jet(&patch, *order),
            Estimator::Model(model) => {
                let normalized = normalize_patch_or_fallback(&patch)?;
                let out = model.predict(&normalized.positions)?;
                denormalize_normal(&normalized.transform, &out[0])
            }
        }
    }
}

/// Indices `0, stride, 2·stride, …` below `n`.
pub fn subsample_indices(n: usize, stride: usize) -> Vec<usize> {
    (0..n).step_by(stride.max(1)).collect()
}

/// Runs `estimator` at each of `queries`, in parallel. Fails if any query
/// fails, listing the failed indices.
pub fn estimate_normals(
    cloud: &PointCloud,
    estimator: &Estimator<'_>,
    k: usize,
    queries: &[usize],
) -> Result<Vec<Vec3>> {
    let index = KnnIndex::build(cloud)?;
    let results: Vec<Result<Vec3>> = queries
        .par_iter()
        .map(|&q| estimator.estimate(cloud, &index, q, k))
        .collect();
    let failed: Vec<(usize, &Error)> = queries
        .iter()
        .zip(&results)
        .filter_map(|(&q, r)| r.as_ref().err().map(|e| (q, e)))
        .collect();
    if let Some(&(_, first)) = failed.first() {
        let shown: Vec<String> = failed.iter().take(20).map(|(q, _)| q.to_string()).collect();
        let msg = format!(
            "{} failed on {} of {} points (indices {}{}); first error: {first}",
            estimator.name(),
            failed.len(),
            queries.len(),
            shown.join(", "),
            if failed.len() > 20 { ", …" } else { "" }
        );
        return Err(if failed.iter().all(|(_, e)| e.is_numerical()) {
            Error::Numerical(msg)
        } else {
            Error::InvalidInput(msg)
        });
    }
    Ok(results.into_iter().map(|r| r.expect("failures handled above")).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgpSample {
    pub alpha_degrees: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub points_per_second: f64,
}

/// Scores for one cloud and one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cloud: String,
    pub method: String,
    /// Patch size, when the predictions came from a patch-based estimator.
    pub k: Option<usize>,
    pub corruption: Option<CorruptionSpec>,
    /// Point indices that were scored, aligned with `per_point_errors`.
    pub indices: Vec<usize>,
    /// Unoriented angular errors, radians.
    pub per_point_errors: Vec<f64>,
    pub rmse_degrees: f64,
    pub pgp: Vec<PgpSample>,
    pub timing: Timing,
}

impl EvalReport {
    /// Builds a report from already computed errors.
    pub fn from_errors(
        cloud: &str,
        method: &str,
        k: Option<usize>,
        indices: Vec<usize>,
        per_point_errors: Vec<f64>,
        total_seconds: f64,
    ) -> Self {
        let alphas = default_alphas();
        let pgp = pgp_from_errors(&per_point_errors, &alphas)
            .into_iter()
            .zip(alphas)
            .map(|(fraction, alpha_degrees)| PgpSample { alpha_degrees, fraction })
            .collect();
        let points_per_second = if total_seconds > 0.0 {
            per_point_errors.len() as f64 / total_seconds
        } else {
            0.0
        };
        Self {
            cloud: cloud.into(),
            method: method.into(),
            k,
            corruption: None,
            indices,
            rmse_degrees: rmse_from_errors(&per_point_errors),
            per_point_errors,
            pgp,
            timing: Timing { total_seconds, points_per_second },
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidInput(format!("serializing report: {e}")))
    }

    /// The report with timing zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            timing: Timing { total_seconds: 0.0, points_per_second: 0.0 },
            ..self.clone()
        }
    }
}

/// Estimates and scores every `stride`-th point of `cloud`.
pub fn evaluate_cloud(
    cloud: &PointCloud,
    estimator: &Estimator<'_>,
    k: usize,
    stride: usize,
) -> Result<EvalReport> {
    let gt = cloud
        .normals()
        .ok_or_else(|| Error::InvalidInput(format!("cloud '{}' has no ground-truth normals", cloud.name())))?;
    let queries = subsample_indices(cloud.len(), stride);
    let start = Instant::now();
    let predicted = estimate_normals(cloud, estimator, k, &queries)?;
    let seconds = start.elapsed().as_secs_f64();
    let targets: Vec<Vec3> = queries.iter().map(|&q| gt[q]).collect();
    let errors = angular_errors(&predicted, &targets)?;
    Ok(EvalReport::from_errors(cloud.name(), &estimator.name(), Some(k), queries, errors, seconds))
}

/// Per-cloud RMSEs plus two ways of combining them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRmse {
    pub per_cloud: Vec<(String, f64)>,
    /// Unweighted mean of the per-cloud RMSEs.
    pub mean_of_clouds: f64,
    /// RMSE over all scored points of all clouds.
    pub pooled: f64,
}

pub fn aggregate_rmse(reports: &[EvalReport]) -> AggregateRmse {
    let per_cloud: Vec<(String, f64)> = reports.iter().map(|r| (r.cloud.clone(), r.rmse_degrees)).collect();
    let mean_of_clouds = if per_cloud.is_empty() {
        0.0
    } else {
        per_cloud.iter().map(|(_, v)| v).sum::<f64>() / per_cloud.len() as f64
    };
    let all: Vec<f64> = reports.iter().flat_map(|r| r.per_point_errors.iter().copied()).collect();
    AggregateRmse { per_cloud, mean_of_clouds, pooled: rmse_from_errors(&all) }
}

/// Wall-clock statistics over repeated runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchStats {
    pub repetitions: usize,
    /// Timed runs in execution order; the warm-up run is not included.
    pub seconds: Vec<f64>,
    pub median_seconds: f64,
    pub min_seconds: f64,
    pub max_seconds: f64,
    pub points: usize,
    pub points_per_second: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Runs `f` once untimed, then `repetitions` timed times.
pub fn time_repeated(repetitions: usize, points: usize, mut f: impl FnMut() -> Result<()>) -> Result<BenchStats> {
    if repetitions < 3 {
        return Err(Error::InvalidInput(format!("{repetitions} repetitions; need at least 3")));
    }
    f()?;
    let mut seconds = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        f()?;
        seconds.push(start.elapsed().as_secs_f64());
    }
    let med = median(&seconds);
    Ok(BenchStats {
        repetitions,
        min_seconds: seconds.iter().copied().fold(f64::INFINITY, f64::min),
        max_seconds: seconds.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        median_seconds: med,
        points,
        points_per_second: if med > 0.0 { points as f64 / med } else { f64::INFINITY },
        seconds,
    })
}

/// Times estimating every point of `cloud`.
pub fn benchmark_inference(
    estimator: &Estimator<'_>,
    cloud: &PointCloud,
    k: usize,
    repetitions: usize,
) -> Result<BenchStats> {
    let queries: Vec<usize> = (0..cloud.len()).collect();
    time_repeated(repetitions, cloud.len(), || {
        estimate_normals(cloud, estimator, k, &queries).map(drop)
    })
}

#[cfg(test)]
mod tests;

use super::*;
use crate::training::{generate_synthetic_shape, Shape, SyntheticShape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if v.norm() > 0.1 && v.norm() < 1.0 {
            return v.normalize();
        }
    }
}

fn rotate_about_x(n: Vec3, degrees: f64) -> Vec3 {
    let (s, c) = degrees.to_radians().sin_cos();
    Vec3::new(n.x, c * n.y - s * n.z, s * n.y + c * n.z)
}

/// Reference scoring with plain arrays and `acos`.
fn brute_force(pred: &[[f64; 3]], gt: &[[f64; 3]], alphas: &[f64]) -> (f64, Vec<f64>) {
    let mut degrees = Vec::new();
    for (p, g) in pred.iter().zip(gt) {
        let dot = (p[0] * g[0] + p[1] * g[1] + p[2] * g[2]).abs().min(1.0);
        degrees.push(dot.acos() * 180.0 / std::f64::consts::PI);
    }
    let mut sq = 0.0;
    for d in &degrees {
        sq += d * d;
    }
    let rmse = (sq / degrees.len() as f64).sqrt();
    let pgp = alphas
        .iter()
        .map(|a| degrees.iter().filter(|d| *d < a).count() as f64 / degrees.len() as f64)
        .collect();
    (rmse, pgp)
}

#[test]
fn rmse_examples() {
    let gt = vec![Vec3::z(); 4];
    assert_eq!(rmse(&gt, &gt).unwrap(), 0.0);
    let orth = vec![Vec3::x(); 4];
    assert!((rmse(&orth, &gt).unwrap() - 90.0).abs() < 1e-12);
    let pred = [rotate_about_x(Vec3::z(), 30.0), rotate_about_x(Vec3::z(), 40.0)];
    let expected = ((30f64.powi(2) + 40f64.powi(2)) / 2.0).sqrt();
    assert!((rmse(&pred, &gt[..2]).unwrap() - expected).abs() < 1e-9);
    assert!((expected - 35.3553).abs() < 1e-4);
    assert!(rmse(&pred, &gt).is_err());
}

#[test]
fn pgp_examples() {
    let gt = vec![Vec3::z(); 3];
    let alphas = default_alphas();
    let perfect = pgp_curve(&gt, &gt, &alphas).unwrap();
    assert_eq!(perfect[0], 0.0);
    assert!(perfect[1..].iter().all(|&f| f == 1.0));
    let pred: Vec<Vec3> = [5.0, 15.0, 25.0].iter().map(|&d| rotate_about_x(Vec3::z(), d)).collect();
    let at20 = pgp_curve(&pred, &gt, &[20.0]).unwrap();
    assert!((at20[0] - 2.0 / 3.0).abs() < 1e-15);
    // Strict inequality excludes boundary points.
    assert_eq!(pgp_from_errors(&[10f64.to_radians()], &[10f64.to_radians().to_degrees()]), vec![0.0]);
}

#[test]
fn metrics_match_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let pred: Vec<Vec3> = (0..1000).map(|_| unit(&mut rng)).collect();
    let gt: Vec<Vec3> = (0..1000).map(|_| unit(&mut rng)).collect();
    let alphas: Vec<f64> = (0..=90).map(f64::from).collect();
    let arr = |v: &[Vec3]| v.iter().map(|n| [n.x, n.y, n.z]).collect::<Vec<_>>();
    let (oracle_rmse, oracle_pgp) = brute_force(&arr(&pred), &arr(&gt), &alphas);
    assert!((rmse(&pred, &gt).unwrap() - oracle_rmse).abs() < 1e-12);
    let pgp = pgp_curve(&pred, &gt, &alphas).unwrap();
    // Thresholds sit on whole degrees, where random errors never land within
    // 1e-12 of the boundary, so the counts agree exactly.
    for (a, b) in pgp.iter().zip(&oracle_pgp) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(pgp.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn scoring_ignores_ground_truth_signs_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pred: Vec<Vec3> = (0..200).map(|_| unit(&mut rng)).collect();
    let gt: Vec<Vec3> = (0..200).map(|_| unit(&mut rng)).collect();
    let flipped: Vec<Vec3> = gt.iter().enumerate().map(|(i, n)| if i % 3 == 0 { -n } else { *n }).collect();
    let alphas = default_alphas();
    assert_eq!(rmse(&pred, &gt).unwrap().to_bits(), rmse(&pred, &flipped).unwrap().to_bits());
    assert_eq!(pgp_curve(&pred, &gt, &alphas).unwrap(), pgp_curve(&pred, &flipped, &alphas).unwrap());
}

proptest! {
    #[test]
    fn pgp_is_monotone_and_bounded(errors in prop::collection::vec(0.0..std::f64::consts::FRAC_PI_2, 1..200)) {
        let alphas: Vec<f64> = (0..=90).map(f64::from).collect();
        let curve = pgp_from_errors(&errors, &alphas);
        prop_assert_eq!(curve[0], 0.0);
        prop_assert!(curve.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(curve.iter().all(|&f| (0.0..=1.0).contains(&f)));
    }
}

fn cloud(name: &str, n: usize) -> PointCloud {
    generate_synthetic_shape(&SyntheticShape { shape: Shape::named(name).unwrap(), sample_count: n, seed: 3 }).unwrap()
}

#[test]
fn pca_on_a_plane_is_exact() {
    let report = evaluate_cloud(&cloud("plane", 1000), &Estimator::Pca, 16, 1).unwrap();
    assert!(report.rmse_degrees < 1e-6);
    assert_eq!(report.per_point_errors.len(), 1000);
}

#[test]
fn report_is_reproducible_and_self_consistent() {
    let c = cloud("saddle", 1003);
    let a = evaluate_cloud(&c, &Estimator::Jet { order: 2 }, 16, 5).unwrap();
    let b = evaluate_cloud(&c, &Estimator::Jet { order: 2 }, 16, 5).unwrap();
    assert_eq!(a.without_timing(), b.without_timing());
    assert_eq!(a.per_point_errors.len(), 1003usize.div_ceil(5));
    assert_eq!(a.indices[1], 5);
    assert!((rmse_from_errors(&a.per_point_errors) - a.rmse_degrees).abs() < 1e-12);
    let json = a.to_json().unwrap();
    let back: EvalReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, a);
}

#[test]
fn evaluation_requires_ground_truth() {
    let c = cloud("plane", 200).with_normals(None).unwrap();
    assert!(evaluate_cloud(&c, &Estimator::Pca, 16, 1).is_err());
}

#[test]
fn failures_report_indices() {
    // Every patch of a straight line is collinear.
    let points = (0..50).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
    let line = PointCloud::new("line", points, None).unwrap();
    match estimate_normals(&line, &Estimator::Pca, 8, &[0, 7]) {
        Err(Error::Numerical(msg)) => assert!(msg.contains("indices 0, 7"), "{msg}"),
        other => panic!("expected a numerical failure, got {other:?}"),
    }
}

#[test]
fn model_estimator_scores_query_rows() {
    let config = crate::model::ModelConfig {
        num_blocks: 1,
        feature_dim: 8,
        num_heads: 2,
        ffn_dim: 8,
        graph_k: 4,
        ..Default::default()
    };
    let model = ModelWeights::init(config, 1).unwrap();
    let c = cloud("sphere", 300);
    let report = evaluate_cloud(&c, &Estimator::Model(&model), 16, 10).unwrap();
    assert_eq!(report.per_point_errors.len(), 30);
    assert!(report.per_point_errors.iter().all(|e| (0.0..=std::f64::consts::FRAC_PI_2 + 1e-12).contains(e)));
}

#[test]
fn aggregate_reports_both_means() {
    let a = EvalReport::from_errors("a", "m", Some(8), vec![0], vec![10f64.to_radians()], 1.0);
    let b = EvalReport::from_errors("b", "m", Some(8), vec![0, 1, 2], vec![20f64.to_radians(); 3], 1.0);
    let agg = aggregate_rmse(&[a, b]);
    assert!((agg.mean_of_clouds - 15.0).abs() < 1e-12);
    assert!((agg.pooled - ((100.0 + 3.0 * 400.0) / 4.0f64).sqrt()).abs() < 1e-12);
}

/// Minimal ASCII PLY reader: header fields and vertex rows.
fn read_ply(text: &str) -> (Vec<String>, Vec<([f64; 3], [u8; 3])>) {
    let (header, body) = text.split_once("end_header\n").unwrap();
    let header: Vec<String> = header.lines().map(String::from).collect();
    let rows = body
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            (
                [f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap()],
                [f[3].parse().unwrap(), f[4].parse().unwrap(), f[5].parse().unwrap()],
            )
        })
        .collect();
    (header, rows)
}

#[test]
fn heatmap_round_trip_and_colors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.ply");
    let c = cloud("torus", 150);
    export_error_heatmap(&c, &vec![0.0; 150], &path).unwrap();
    let (header, rows) = read_ply(&std::fs::read_to_string(&path).unwrap());
    assert_eq!(header[0], "ply");
    assert!(header.contains(&"element vertex 150".to_string()));
    for p in ["double x", "double y", "double z", "uchar red", "uchar green", "uchar blue"] {
        assert!(header.contains(&format!("property {p}")), "{p}");
    }
    assert_eq!(rows.len(), 150);
    for ((xyz, rgb), p) in rows.iter().zip(c.points()) {
        assert_eq!(*xyz, [p.x, p.y, p.z]);
        assert_eq!(*rgb, [0, 0, 255]);
    }
    assert_eq!(heatmap_color(60f64.to_radians()), [255, 0, 0]);
    assert_eq!(heatmap_color(90f64.to_radians()), [255, 0, 0]);
    assert_eq!(heatmap_color(15f64.to_radians()), [64, 0, 191]);
    assert!(export_error_heatmap(&c, &[0.0], &path).is_err());
}

#[test]
fn benchmark_excludes_warm_up() {
    let mut calls = 0;
    let stats = time_repeated(3, 10, || {
        calls += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(calls, 4);
    assert_eq!(stats.seconds.len(), 3);
    assert!(time_repeated(2, 10, || Ok(())).is_err());
    let c = cloud("plane", 200);
    let bench = benchmark_inference(&Estimator::Pca, &c, 16, 3).unwrap();
    assert_eq!(bench.points, 200);
    assert!(bench.min_seconds <= bench.median_seconds && bench.median_seconds <= bench.max_seconds);
}

#[test]
fn median_ignores_order() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[2.0, 3.0, 1.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
}

//! End-to-end runs of the `sne` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sne_core::cli::corruption_seed;
use sne_core::evaluation::{estimate_normals, EvalReport, Estimator};
use sne_core::geometry::{load_point_cloud, write_normals};
use sne_core::model::ModelWeights;
use sne_core::training::{add_gaussian_noise, generate_synthetic_shape, CorruptionSpec, Shape, SyntheticShape};

fn sne(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sne"))
        .args(args)
        .env_remove("SNE_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sne(args);
    assert!(
        out.status.success(),
        "sne {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small training run; every test adds its own `--epochs`.
const TINY_TRAIN: &[&str] = &[
    "--shapes", "sphere,saddle", "--points", "300", "--noise-levels", "0,0.006",
    "--patches-per-epoch", "8", "--batch-size", "4", "--patch-size", "16",
    "--blocks", "1", "--feature-dim", "8", "--heads", "2", "--ffn-dim", "8",
    "--graph-k", "4", "--local-k", "4", "--seed", "3",
];

#[test]
fn synth_is_deterministic_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["synth", "--shape", "sphere", "--n", "20000", "--seed", "7", "--out", s(&a)]);
    ok(&["synth", "--shape", "sphere", "--n", "20000", "--seed", "7", "--out", s(&b)]);
    let xyz = read(&dir.path().join("a.xyz"));
    assert_eq!(String::from_utf8_lossy(&xyz).lines().count(), 20000);
    assert_eq!(xyz, read(&dir.path().join("b.xyz")));
    assert_eq!(read(&dir.path().join("a.normals")), read(&dir.path().join("b.normals")));

    let before = read(&dir.path().join("a.xyz"));
    fs::remove_file(dir.path().join("a.xyz")).unwrap();
    ok(&["replay", s(&dir.path().join("a.manifest.json"))]);
    assert_eq!(read(&dir.path().join("a.xyz")), before);
}

#[test]
fn synth_noise_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("n");
    ok(&["synth", "--shape", "saddle", "--n", "500", "--seed", "4", "--noise", "0.006", "--out", s(&out)]);
    let cli = load_point_cloud(&dir.path().join("n.xyz"), Some(&dir.path().join("n.normals"))).unwrap();
    let clean = generate_synthetic_shape(&SyntheticShape {
        shape: Shape::named("saddle").unwrap(),
        sample_count: 500,
        seed: 4,
    })
    .unwrap();
    let spec = CorruptionSpec { noise_sigma_fraction: 0.006, seed: corruption_seed(4), ..Default::default() };
    let lib = add_gaussian_noise(&clean, &spec).unwrap();
    assert_eq!(cli.points(), lib.points());
}

#[test]
fn estimate_pca_on_a_plane() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = dir.path().join("plane");
    ok(&["synth", "--shape", "plane", "--n", "400", "--out", s(&cloud)]);
    let out = dir.path().join("pca.normals");
    ok(&["estimate", "--input", s(&dir.path().join("plane.xyz")), "--method", "pca", "--k", "16", "--output", s(&out)]);
    let text = String::from_utf8(read(&out)).unwrap();
    assert_eq!(text.lines().count(), 400);
    for line in text.lines() {
        let v: Vec<f64> = line.split_whitespace().map(|f| f.parse().unwrap()).collect();
        assert_eq!((v[0], v[1], v[2].abs()), (0.0, 0.0, 1.0), "{line}");
    }
}

#[test]
fn estimate_jet_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = dir.path().join("t");
    ok(&["synth", "--shape", "torus", "--n", "600", "--seed", "2", "--noise", "0.0012", "--out", s(&cloud)]);
    let xyz = dir.path().join("t.xyz");
    let out = dir.path().join("jet.normals");
    ok(&["estimate", "--input", s(&xyz), "--method", "jet", "--order", "3", "--k", "24", "--output", s(&out)]);

    let c = load_point_cloud(&xyz, None).unwrap();
    let all: Vec<usize> = (0..c.len()).collect();
    let lib = estimate_normals(&c, &Estimator::Jet { order: 3 }, 24, &all).unwrap();
    let expected = dir.path().join("lib.normals");
    write_normals(&expected, &lib).unwrap();
    assert_eq!(read(&out), read(&expected));
}

#[test]
fn evaluate_reports_and_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = dir.path().join("c");
    ok(&["synth", "--shape", "sphere", "--n", "300", "--out", s(&cloud)]);
    let xyz = dir.path().join("c.xyz");
    let gt = dir.path().join("c.normals");
    let report = dir.path().join("r.json");
    ok(&["evaluate", "--pred", s(&gt), "--gt", s(&gt), "--cloud", s(&xyz), "--report", s(&report)]);
    let r: EvalReport = serde_json::from_slice(&read(&report)).unwrap();
    assert_eq!(r.rmse_degrees, 0.0);
    assert!(!dir.path().join("h.ply").exists());

    let pred = dir.path().join("pca.normals");
    ok(&["estimate", "--input", s(&xyz), "--method", "pca", "--output", s(&pred)]);
    let heat = dir.path().join("h.ply");
    ok(&["evaluate", "--pred", s(&pred), "--gt", s(&gt), "--cloud", s(&xyz), "--report", s(&report), "--heatmap", s(&heat)]);
    let r: EvalReport = serde_json::from_slice(&read(&report)).unwrap();
    assert!(r.rmse_degrees > 0.0);
    assert!((sne_core::evaluation::rmse_from_errors(&r.per_point_errors) - r.rmse_degrees).abs() < 1e-12);
    assert!(String::from_utf8(read(&heat)).unwrap().contains("element vertex 300"));

    let short = dir.path().join("short.normals");
    fs::write(&short, "0 0 1\n").unwrap();
    let out = sne(&["evaluate", "--pred", s(&short), "--gt", s(&gt), "--cloud", s(&xyz), "--report", s(&report)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_is_deterministic_resumable_and_matches_library_inference() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--out", s(&out)];
        args.extend_from_slice(TINY_TRAIN);
        args.extend_from_slice(extra);
        ok(&args);
        out
    };
    let a = run("a", &["--epochs", "2"]);
    let b = run("b", &["--epochs", "2", "--threads", "2"]);
    assert_eq!(read(&a.join("model.snew")), read(&b.join("model.snew")));
    assert_eq!(read(&a.join("loss.csv")), read(&b.join("loss.csv")));
    let csv = String::from_utf8(read(&a.join("loss.csv"))).unwrap();
    assert_eq!(csv.lines().next(), Some("epoch,mean_loss,lr"));
    assert_eq!(csv.lines().count(), 3);

    // One epoch, then resume to two.
    let half = run("half", &["--epochs", "1"]);
    let resumed = dir.path().join("resumed");
    let ckpt = half.join("model.snew");
    let mut args = vec!["train", "--epochs", "2", "--out", s(&resumed), "--resume", s(&ckpt)];
    args.extend_from_slice(TINY_TRAIN);
    ok(&args);
    assert_eq!(read(&resumed.join("model.snew")), read(&a.join("model.snew")));

    // Replaying the manifest reproduces the checkpoint.
    let before = read(&a.join("model.snew"));
    fs::remove_file(a.join("model.snew")).unwrap();
    ok(&["replay", s(&a.join("manifest.json"))]);
    assert_eq!(read(&a.join("model.snew")), before);

    // CLI model inference equals the library path.
    let cloud = dir.path().join("c");
    ok(&["synth", "--shape", "torus", "--n", "200", "--out", s(&cloud)]);
    let xyz = dir.path().join("c.xyz");
    let out = dir.path().join("m.normals");
    ok(&["estimate", "--input", s(&xyz), "--method", "model", "--checkpoint", s(&a.join("model.snew")), "--k", "16", "--output", s(&out)]);
    let (model, _) = ModelWeights::load(&a.join("model.snew")).unwrap();
    let c = load_point_cloud(&xyz, None).unwrap();
    let all: Vec<usize> = (0..c.len()).collect();
    let lib = estimate_normals(&c, &Estimator::Model(&model), 16, &all).unwrap();
    let expected = dir.path().join("lib.normals");
    write_normals(&expected, &lib).unwrap();
    assert_eq!(read(&out), read(&expected));
}

#[test]
fn train_variant_flag_selects_the_ablation_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nt");
    let mut args = vec!["train", "--variant", "no_transformer", "--epochs", "1", "--out", s(&out)];
    args.extend_from_slice(TINY_TRAIN);
    ok(&args);
    let (model, _) = ModelWeights::load(&out.join("model.snew")).unwrap();
    assert_eq!(model.config().variant, sne_core::model::Variant::NoTransformer);
    assert!(model.params().iter().all(|(name, _)| !name.contains("attn")));
}

#[test]
fn ablate_table_layout_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let table = |name: &str| {
        let ckpts = dir.path().join(name);
        let mut args = vec![
            "ablate", "--train-all", "--checkpoints", s(&ckpts), "--test-shapes", "torus",
            "--test-points", "300", "--stride", "20", "--epochs", "1",
        ];
        args.extend_from_slice(TINY_TRAIN);
        ok(&args);
        String::from_utf8(read(&ckpts.join("ablation.txt"))).unwrap()
    };
    let t = table("one");
    let lines: Vec<&str> = t.lines().collect();
    let header: Vec<&str> = lines[0].split_whitespace().collect();
    assert_eq!(header, ["setting", "full", "no_transformer", "no_gc", "local_attention"]);
    // The label column is 12 characters wide; labels may contain spaces.
    let rows: Vec<&str> = lines[1..].iter().map(|l| l[..12].trim()).collect();
    for l in &lines[1..] {
        assert_eq!(l[12..].split_whitespace().count(), 4, "{l}");
    }
    for expected in ["noise 0", "noise 0.12%", "noise 0.6%", "noise 1.2%", "stripes", "gradient"] {
        assert!(rows.contains(&expected), "{expected} in {rows:?}");
    }
    assert_eq!(t, table("two"));

    let missing = sne(&["ablate", "--checkpoints", s(&dir.path().join("none"))]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn bench_csv_lists_each_method() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m");
    let mut args = vec!["train", "--epochs", "1", "--out", s(&out)];
    args.extend_from_slice(TINY_TRAIN);
    ok(&args);
    let csv_path = dir.path().join("bench.csv");
    let stdout = ok(&[
        "bench", "--methods", "pca,model", "--checkpoint", s(&out.join("model.snew")), "--k", "16",
        "--n", "300", "--out", s(&csv_path),
    ]);
    assert!(stdout.contains("warm-up"));
    let text = String::from_utf8(read(&csv_path)).unwrap();
    let rows: Vec<Vec<&str>> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(
        rows[0],
        ["method", "k", "points", "repetitions", "median_seconds", "min_seconds", "max_seconds", "points_per_second"]
    );
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[1][0], "pca");
    assert!(rows[2][0].starts_with("model"));
    for row in &rows[1..] {
        assert_eq!(row.len(), 8);
        assert_eq!(row[3], "3");
        let median: f64 = row[4].parse().unwrap();
        let (lo, hi): (f64, f64) = (row[5].parse().unwrap(), row[6].parse().unwrap());
        assert!(lo <= median && median <= hi);
    }
}

#[test]
fn exit_codes() {
    assert_eq!(sne(&["synth"]).status.code(), Some(1));
    assert_eq!(sne(&["bogus"]).status.code(), Some(1));
    assert_eq!(sne(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.xyz");
    let out = dir.path().join("o.normals");
    assert_eq!(sne(&["estimate", "--input", s(&missing), "--method", "pca", "--output", s(&out)]).status.code(), Some(2));
    assert_eq!(sne(&["estimate", "--input", s(&missing), "--method", "model", "--output", s(&out)]).status.code(), Some(1));
    // Every patch of a straight line is degenerate.
    let line = dir.path().join("line.xyz");
    fs::write(&line, (0..40).map(|i| format!("{i} 0 0\n")).collect::<String>()).unwrap();
    assert_eq!(sne(&["estimate", "--input", s(&line), "--method", "pca", "--output", s(&out)]).status.code(), Some(3));
}

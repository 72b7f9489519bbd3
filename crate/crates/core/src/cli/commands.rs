use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use super::{
    AblateArgs, BenchArgs, CliError, Command, EstimateArgs, EvaluateArgs, Method, Preset,
    RunManifest, SynthArgs, TrainArgs, TrainOptions,
};
use crate::evaluation::{
    aggregate_rmse, angular_errors, benchmark_inference, estimate_normals, evaluate_cloud,
    export_error_heatmap, EvalReport, Estimator,
};
use crate::geometry::{load_normals, load_point_cloud, write_normals, write_xyz, PointCloud};
use crate::model::{ModelWeights, Variant};
use crate::training::{
    corrupt, generate_synthetic_shape, noisy_training_clouds, train, CorruptionSpec, DensityMode,
    Shape, SyntheticShape, TrainConfig, TrainOutputs,
};
use crate::{Error, Result};

type CliResult<T> = std::result::Result<T, CliError>;

/// Model variants compared by `ablate`, in column order.
pub const ABLATION_VARIANTS: [Variant; 4] =
    [Variant::Full, Variant::NoTransformer, Variant::NoGraphConv, Variant::LocalAttention];

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Seed of the corruption applied by `synth`, derived from its `--seed`.
pub fn corruption_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// `path` with `suffix` appended to its final component.
fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Path of the ground-truth normals next to a `.xyz` file.
fn sibling_normals(xyz: &Path) -> PathBuf {
    xyz.with_extension("normals")
}

fn shape_from_args(args: &SynthArgs) -> CliResult<Shape> {
    let mut shape = Shape::named(&args.shape)?;
    let mut used = Vec::new();
    let mut set = |slot: &mut f64, value: Option<f64>, flag: &'static str| {
        if let Some(v) = value {
            *slot = v;
            used.push(flag);
        }
    };
    match &mut shape {
        Shape::Plane { extent } => set(extent, args.extent, "extent"),
        Shape::Sphere { radius } => set(radius, args.radius, "radius"),
        Shape::Cylinder { radius, height } => {
            set(radius, args.radius, "radius");
            set(height, args.height, "height");
        }
        Shape::Saddle { extent, curvature } => {
            set(extent, args.extent, "extent");
            set(curvature, args.curvature, "curvature");
        }
        Shape::Torus { major_radius, minor_radius } => {
            set(major_radius, args.major_radius, "major-radius");
            set(minor_radius, args.minor_radius, "minor-radius");
        }
    }
    let given = [
        ("radius", args.radius),
        ("height", args.height),
        ("extent", args.extent),
        ("curvature", args.curvature),
        ("major-radius", args.major_radius),
        ("minor-radius", args.minor_radius),
    ];
    if let Some((flag, _)) = given.iter().find(|(f, v)| v.is_some() && !used.contains(f)) {
        return Err(usage(format!("--{flag} does not apply to shape '{}'", args.shape)));
    }
    Ok(shape)
}

/// Shape and corruption specs `synth` resolves its flags to.
fn synth_specs(args: &SynthArgs) -> CliResult<(SyntheticShape, CorruptionSpec)> {
    let spec = SyntheticShape { shape: shape_from_args(args)?, sample_count: args.n, seed: args.seed };
    let corruption = CorruptionSpec {
        noise_sigma_fraction: args.noise,
        density_mode: args.density,
        seed: corruption_seed(args.seed),
    };
    Ok((spec, corruption))
}

/// The cloud `synth` writes for these arguments.
pub fn synth_cloud(args: &SynthArgs) -> CliResult<PointCloud> {
    let (spec, corruption) = synth_specs(args)?;
    let clean = generate_synthetic_shape(&spec).map_err(|e| usage(e.to_string()))?;
    Ok(corrupt(&clean, &corruption, args.patch_size)?)
}

fn cmd_synth(cmd: &Command, args: &SynthArgs, manifest: Option<&Path>) -> CliResult<()> {
    let xyz = with_suffix(&args.out, ".xyz");
    let normals = with_suffix(&args.out, ".normals");
    let (spec, corruption) = synth_specs(args)?;
    let manifest_path = manifest.map_or_else(|| with_suffix(&args.out, ".manifest.json"), Path::to_path_buf);
    RunManifest::new(
        cmd,
        Some(args.seed),
        json!({ "shape": spec, "corruption": corruption, "patch_size": args.patch_size }),
        vec![xyz.clone(), normals.clone()],
    )
    .write(&manifest_path)?;
    let cloud = synth_cloud(args)?;
    if let Some(dir) = xyz.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_xyz(&xyz, cloud.points())?;
    write_normals(&normals, cloud.normals().expect("synthetic clouds carry normals"))?;
    println!("wrote {} points to {} and {}", cloud.len(), xyz.display(), normals.display());
    Ok(())
}

/// Preset (or config file) with the individual flag overrides applied.
pub fn resolve_train_config(options: &TrainOptions, variant: Option<Variant>) -> CliResult<TrainConfig> {
    let mut c = match &options.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.clone(),
                line: e.line(),
                message: e.to_string(),
            })?
        }
        None => match options.preset {
            Preset::Desk => TrainConfig::desk(),
            Preset::Paper => TrainConfig::paper(),
        },
    };
    c.seed = options.seed;
    macro_rules! apply {
        ($($field:ident => $target:expr),* $(,)?) => {
            $(if let Some(v) = options.$field { $target = v; })*
        };
    }
    apply!(
        epochs => c.epochs,
        patches_per_epoch => c.patches_per_epoch,
        batch_size => c.batch_size,
        patch_size => c.patch_size,
        lr => c.lr,
        lr_decay => c.lr_decay,
        checkpoint_every => c.checkpoint_every,
        blocks => c.model.num_blocks,
        feature_dim => c.model.feature_dim,
        heads => c.model.num_heads,
        ffn_dim => c.model.ffn_dim,
        graph_k => c.model.graph_k,
        local_k => c.model.local_attention_k,
        graph_features => c.model.graph_features,
    );
    if let Some(v) = variant {
        c.model.variant = v;
    }
    c.validate().map_err(|e| usage(e.to_string()))?;
    Ok(c)
}

/// Loads `--data` clouds, or generates the synthetic training shapes at
/// every noise level.
pub fn training_clouds(options: &TrainOptions) -> CliResult<Vec<PointCloud>> {
    if !options.data.is_empty() {
        return options
            .data
            .iter()
            .map(|p| Ok(load_point_cloud(p, Some(&sibling_normals(p)))?))
            .collect();
    }
    if options.noise_levels.is_empty() || options.shapes.is_empty() {
        return Err(usage("need at least one training shape and noise level"));
    }
    let shapes = options
        .shapes
        .iter()
        .enumerate()
        .map(|(i, name)| {
            Ok(SyntheticShape {
                shape: Shape::named(name).map_err(|e| usage(e.to_string()))?,
                sample_count: options.points,
                seed: options.seed.wrapping_add(i as u64),
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(noisy_training_clouds(&shapes, &options.noise_levels, options.seed)?)
}

fn cmd_train(cmd: &Command, args: &TrainArgs, manifest: Option<&Path>) -> CliResult<()> {
    let config = resolve_train_config(&args.options, args.variant)?;
    let checkpoint = args.out.join("model.snew");
    let loss_csv = args.out.join("loss.csv");
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let manifest_path = manifest.map_or_else(|| args.out.join("manifest.json"), Path::to_path_buf);
    RunManifest::new(cmd, Some(config.seed), json!({ "train": config }), vec![checkpoint.clone(), loss_csv.clone()])
        .write(&manifest_path)?;
    let clouds = training_clouds(&args.options)?;
    let outputs = TrainOutputs {
        checkpoint: Some(checkpoint.clone()),
        loss_csv: Some(loss_csv),
        resume: args.resume.clone(),
    };
    let trainer = train(&config, clouds, &outputs)?;
    if let Some(last) = trainer.history().last() {
        println!(
            "trained {} epochs; final mean loss {:.6}; checkpoint {}",
            trainer.epochs_done(),
            last.mean_loss,
            checkpoint.display()
        );
    }
    Ok(())
}

/// Patch size used when `--k` is absent.
pub fn default_k(method: Method) -> usize {
    match method {
        Method::Pca | Method::Jet => 16,
        Method::Model => TrainConfig::desk().patch_size,
    }
}

fn load_model(method: Method, checkpoint: Option<&Path>) -> CliResult<Option<ModelWeights>> {
    match (method, checkpoint) {
        (Method::Model, Some(path)) => Ok(Some(ModelWeights::load(path)?.0)),
        (Method::Model, None) => Err(usage("--method model requires --checkpoint")),
        (_, Some(_)) => Err(usage("--checkpoint is only used with --method model")),
        (_, None) => Ok(None),
    }
}

fn estimator(method: Method, order: usize, model: Option<&ModelWeights>) -> Estimator<'_> {
    match method {
        Method::Pca => Estimator::Pca,
        Method::Jet => Estimator::Jet { order },
        Method::Model => Estimator::Model(model.expect("loaded for the model method")),
    }
}

fn cmd_estimate(cmd: &Command, args: &EstimateArgs, manifest: Option<&Path>) -> CliResult<()> {
    let k = args.k.unwrap_or(default_k(args.method));
    let manifest_path = manifest.map_or_else(|| with_suffix(&args.output, ".manifest.json"), Path::to_path_buf);
    RunManifest::new(
        cmd,
        None,
        json!({ "method": args.method, "k": k, "order": args.order }),
        vec![args.output.clone()],
    )
    .write(&manifest_path)?;
    let model = load_model(args.method, args.checkpoint.as_deref())?;
    let cloud = load_point_cloud(&args.input, None)?;
    let est = estimator(args.method, args.order, model.as_ref());
    let queries: Vec<usize> = (0..cloud.len()).collect();
    let normals = estimate_normals(&cloud, &est, k, &queries)?;
    write_normals(&args.output, &normals)?;
    println!("wrote {} normals to {}", normals.len(), args.output.display());
    Ok(())
}

fn cmd_evaluate(cmd: &Command, args: &EvaluateArgs, manifest: Option<&Path>) -> CliResult<()> {
    let manifest_path = manifest.map_or_else(|| with_suffix(&args.report, ".manifest.json"), Path::to_path_buf);
    let mut outputs = vec![args.report.clone()];
    outputs.extend(args.heatmap.clone());
    RunManifest::new(cmd, None, json!({ "method": args.method, "k": args.k }), outputs).write(&manifest_path)?;
    let cloud = load_point_cloud(&args.cloud, Some(&args.gt))?;
    let predicted = load_normals(&args.pred)?;
    if predicted.len() != cloud.len() {
        return Err(Error::InvalidInput(format!(
            "{} predicted normals for {} points",
            predicted.len(),
            cloud.len()
        ))
        .into());
    }
    let gt = cloud.normals().expect("loaded with normals");
    let errors = angular_errors(&predicted, gt)?;
    let name = args.cloud.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let report = EvalReport::from_errors(&name, &args.method, args.k, (0..cloud.len()).collect(), errors, 0.0);
    fs::write(&args.report, report.to_json()? + "\n").map_err(|e| Error::io(&args.report, e))?;
    if let Some(path) = &args.heatmap {
        export_error_heatmap(&cloud, &report.per_point_errors, path)?;
    }
    println!("rmse {:.4}° over {} points", report.rmse_degrees, report.per_point_errors.len());
    Ok(())
}

/// One row of the ablation table: a corruption setting applied to the
/// held-out shapes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationRow {
    pub label: &'static str,
    pub noise: f64,
    pub density: DensityMode,
}

pub fn ablation_rows() -> Vec<AblationRow> {
    let noise = |label, noise| AblationRow { label, noise, density: DensityMode::None };
    vec![
        noise("noise 0", 0.0),
        noise("noise 0.12%", 0.0012),
        noise("noise 0.6%", 0.006),
        noise("noise 1.2%", 0.012),
        AblationRow { label: "stripes", noise: 0.0, density: DensityMode::Stripes },
        AblationRow { label: "gradient", noise: 0.0, density: DensityMode::Gradient },
    ]
}

fn column_label(v: Variant) -> &'static str {
    match v {
        Variant::NoGraphConv => "no_gc",
        other => other.as_str(),
    }
}

fn cmd_ablate(cmd: &Command, args: &AblateArgs, manifest: Option<&Path>) -> CliResult<()> {
    let base = resolve_train_config(&args.options, None)?;
    let table_path = args.out.clone().unwrap_or_else(|| args.checkpoints.join("ablation.txt"));
    let checkpoint = |v: Variant| args.checkpoints.join(format!("{}.snew", v.as_str()));
    fs::create_dir_all(&args.checkpoints).map_err(|e| Error::io(&args.checkpoints, e))?;
    let manifest_path = manifest.map_or_else(|| args.checkpoints.join("ablate.manifest.json"), Path::to_path_buf);
    let mut outputs = vec![table_path.clone()];
    if args.train_all {
        outputs.extend(ABLATION_VARIANTS.iter().map(|&v| checkpoint(v)));
    }
    RunManifest::new(cmd, Some(base.seed), json!({ "train": base }), outputs).write(&manifest_path)?;

    if args.train_all {
        let clouds = training_clouds(&args.options)?;
        for v in ABLATION_VARIANTS {
            let mut config = base.clone();
            config.model.variant = v;
            log::info!("training {v}");
            let outputs = TrainOutputs { checkpoint: Some(checkpoint(v)), ..Default::default() };
            train(&config, clouds.clone(), &outputs)?;
        }
    }
    let mut models = Vec::new();
    for v in ABLATION_VARIANTS {
        let path = checkpoint(v);
        if !path.exists() {
            return Err(usage(format!("missing checkpoint {} (use --train-all)", path.display())));
        }
        models.push(ModelWeights::load(&path)?.0);
    }
    let test_shapes = args
        .test_shapes
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let spec = SyntheticShape {
                shape: Shape::named(name).map_err(|e| usage(e.to_string()))?,
                sample_count: args.test_points,
                seed: base.seed.wrapping_add(1000 + i as u64),
            };
            Ok(generate_synthetic_shape(&spec)?)
        })
        .collect::<CliResult<Vec<_>>>()?;

    let mut table = String::new();
    let _ = write!(table, "{:<12}", "setting");
    for v in ABLATION_VARIANTS {
        let _ = write!(table, " {:>16}", column_label(v));
    }
    table.push('\n');
    for (r, row) in ablation_rows().iter().enumerate() {
        let _ = write!(table, "{:<12}", row.label);
        let clouds = test_shapes
            .iter()
            .map(|c| {
                let spec = CorruptionSpec {
                    noise_sigma_fraction: row.noise,
                    density_mode: row.density,
                    seed: base.seed.wrapping_add(2000 + r as u64),
                };
                corrupt(c, &spec, base.patch_size)
            })
            .collect::<Result<Vec<_>>>()?;
        for model in &models {
            let reports = clouds
                .iter()
                .map(|c| evaluate_cloud(c, &Estimator::Model(model), base.patch_size, args.stride))
                .collect::<Result<Vec<_>>>()?;
            let _ = write!(table, " {:>16.3}", aggregate_rmse(&reports).mean_of_clouds);
        }
        table.push('\n');
    }
    fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
    print!("{table}");
    Ok(())
}

fn cmd_bench(cmd: &Command, args: &BenchArgs, manifest: Option<&Path>) -> CliResult<()> {
    let manifest_path = manifest.map(Path::to_path_buf).unwrap_or_else(|| match &args.out {
        Some(out) => with_suffix(out, ".manifest.json"),
        None => PathBuf::from("sne-bench.manifest.json"),
    });
    RunManifest::new(cmd, Some(args.seed), json!({ "repetitions": args.repetitions }), args.out.iter().cloned().collect())
        .write(&manifest_path)?;
    if args.repetitions < 3 {
        return Err(usage("--repetitions must be at least 3"));
    }
    let model = if args.methods.contains(&Method::Model) {
        load_model(Method::Model, args.checkpoint.as_deref())?
    } else if args.checkpoint.is_some() {
        return Err(usage("--checkpoint is only used with the model method"));
    } else {
        None
    };
    let cloud = match &args.cloud {
        Some(path) => load_point_cloud(path, None)?,
        None => generate_synthetic_shape(&SyntheticShape {
            shape: Shape::named(&args.shape)?,
            sample_count: args.n,
            seed: args.seed,
        })?,
    };
    let mut csv = String::from("# timings exclude one warm-up run per method\n");
    csv.push_str("method,k,points,repetitions,median_seconds,min_seconds,max_seconds,points_per_second\n");
    for &method in &args.methods {
        let k = args.k.unwrap_or(default_k(method));
        let est = estimator(method, args.order, model.as_ref());
        let stats = benchmark_inference(&est, &cloud, k, args.repetitions)?;
        let _ = writeln!(
            csv,
            "{},{k},{},{},{:.6},{:.6},{:.6},{:.1}",
            est.name(),
            stats.points,
            stats.repetitions,
            stats.median_seconds,
            stats.min_seconds,
            stats.max_seconds,
            stats.points_per_second
        );
    }
    if let Some(out) = &args.out {
        fs::write(out, &csv).map_err(|e| Error::io(out, e))?;
    }
    print!("{csv}");
    Ok(())
}

pub(super) fn dispatch(cmd: &Command, manifest: Option<&Path>) -> CliResult<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(cmd, a, manifest),
        Command::Train(a) => cmd_train(cmd, a, manifest),
        Command::Estimate(a) => cmd_estimate(cmd, a, manifest),
        Command::Evaluate(a) => cmd_evaluate(cmd, a, manifest),
        Command::Ablate(a) => cmd_ablate(cmd, a, manifest),
        Command::Bench(a) => cmd_bench(cmd, a, manifest),
        Command::Replay(a) => {
            let recorded = RunManifest::read(&a.manifest_file)?;
            if matches!(recorded.args, Command::Replay(_)) {
                return Err(usage("a replay manifest cannot be replayed"));
            }
            dispatch(&recorded.args, Some(&a.manifest_file))
        }
    }
}

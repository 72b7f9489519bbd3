use super::*;
use crate::geometry::denormalize_normal;
use crate::model::Variant;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        num_blocks: 1,
        feature_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        graph_k: 4,
        variant: Variant::Full,
        local_attention_k: 4,
        ..Default::default()
    }
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 4,
        epochs: 2,
        patches_per_epoch: 8,
        patch_size: 16,
        lr_decay: 0.9,
        seed: 5,
        model: tiny_model(),
        checkpoint_every: 1,
    }
}

fn clouds() -> Vec<PointCloud> {
    ["sphere", "saddle"]
        .iter()
        .enumerate()
        .map(|(i, name)| {
            generate_synthetic_shape(&SyntheticShape {
                shape: Shape::named(name).unwrap(),
                sample_count: 300,
                seed: i as u64,
            })
            .unwrap()
        })
        .collect()
}

#[test]
fn config_presets_and_validation() {
    let desk = TrainConfig::desk();
    assert_eq!((desk.lr, desk.batch_size, desk.patch_size, desk.lr_decay), (2e-4, 32, 128, 0.995));
    let paper = TrainConfig::paper();
    assert_eq!((paper.patch_size, paper.epochs, paper.patches_per_epoch), (700, 250, 100_000));
    assert!(desk.validate().is_ok() && paper.validate().is_ok());
    for bad in [
        TrainConfig { lr_decay: 0.0, ..tiny_config() },
        TrainConfig { lr_decay: 1.5, ..tiny_config() },
        TrainConfig { batch_size: 0, ..tiny_config() },
        TrainConfig { patch_size: 2, ..tiny_config() },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn lr_schedule_is_geometric_and_decreasing() {
    let c = TrainConfig::desk();
    assert_eq!(c.lr_at(0), 2e-4);
    for e in 0..50 {
        assert!(c.lr_at(e + 1) < c.lr_at(e));
        assert!((c.lr_at(e + 1) / c.lr_at(e) - 0.995).abs() < 1e-12);
    }
}

#[test]
fn batch_shape_and_frame_round_trip() {
    let set = TrainingSet::new(clouds(), 16).unwrap();
    let config = tiny_config();
    let mut rng = epoch_rng(1, 0);
    let batch = sample_training_batch(&set, &config, &mut rng).unwrap();
    assert_eq!(batch.len(), 4);
    for s in &batch {
        assert_eq!(s.patch.len(), 16);
        assert_eq!(s.gt_normals.len(), 16);
        let world = set.clouds()[s.cloud].normals().unwrap();
        let patch = extract_patch(&set.clouds()[s.cloud], &KnnIndex::build(&set.clouds()[s.cloud]).unwrap(), s.point, 16)
            .unwrap();
        for (n_local, &i) in s.gt_normals.iter().zip(&patch.indices) {
            let back = denormalize_normal(&s.patch.transform, n_local).unwrap();
            assert!((back - world[i]).norm() < 1e-12);
        }
    }
}

#[test]
fn batches_are_deterministic_under_seed() {
    let set = TrainingSet::new(clouds(), 16).unwrap();
    let config = tiny_config();
    let a = sample_training_batch(&set, &config, &mut epoch_rng(3, 2)).unwrap();
    let b = sample_training_batch(&set, &config, &mut epoch_rng(3, 2)).unwrap();
    assert_eq!(a, b);
    let c = sample_training_batch(&set, &config, &mut epoch_rng(3, 3)).unwrap();
    assert_ne!(a, c);
}

#[test]
fn training_set_contracts() {
    assert!(TrainingSet::new(Vec::new(), 16).is_err());
    assert!(TrainingSet::new(clouds(), 301).is_err());
    let bare = clouds()[0].clone().with_normals(None).unwrap();
    assert!(TrainingSet::new(vec![bare], 16).is_err());
    let set = TrainingSet::new(clouds(), 16).unwrap();
    assert_eq!(set.locate(0), (0, 0));
    assert_eq!(set.locate(299), (0, 299));
    assert_eq!(set.locate(300), (1, 0));
    assert_eq!(set.locate(599), (1, 299));
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let config = TrainConfig { lr: 0.0, epochs: 1, patches_per_epoch: 4, ..tiny_config() };
    let before = Trainer::new(config.clone()).unwrap();
    let after = train(&config, clouds(), &TrainOutputs::default()).unwrap();
    assert_eq!(after.history().len(), 1);
    assert_eq!(before.model().params(), after.model().params());
    assert_eq!(after.adam().t, 1);
}

#[test]
fn training_is_deterministic() {
    let config = tiny_config();
    let a = train(&config, clouds(), &TrainOutputs::default()).unwrap();
    let b = train(&config, clouds(), &TrainOutputs::default()).unwrap();
    assert_eq!(a.model().params(), b.model().params());
    assert_eq!(a.history(), b.history());
}

#[test]
fn thread_count_does_not_change_results() {
    let config = tiny_config();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train(&config, clouds(), &TrainOutputs::default()).unwrap())
    };
    assert_eq!(run(1).model().params(), run(3).model().params());
}

#[test]
fn resumed_run_matches_unbroken_run_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig { epochs: 3, ..tiny_config() };
    let unbroken = train(&config, clouds(), &TrainOutputs::default()).unwrap();

    let ckpt = dir.path().join("half.snew");
    let first = TrainConfig { epochs: 1, ..config.clone() };
    train(&first, clouds(), &TrainOutputs { checkpoint: Some(ckpt.clone()), ..Default::default() }).unwrap();
    let resumed = train(
        &config,
        clouds(),
        &TrainOutputs { resume: Some(ckpt), ..Default::default() },
    )
    .unwrap();
    assert_eq!(resumed.model().params(), unbroken.model().params());
    assert_eq!(resumed.adam(), unbroken.adam());
    assert_eq!(resumed.history(), unbroken.history());
}

#[test]
fn resume_rejects_a_different_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.snew");
    Trainer::new(tiny_config()).unwrap().save(&ckpt).unwrap();
    let mut other = tiny_config();
    other.model.feature_dim = 4;
    assert!(matches!(Trainer::resume(other, &ckpt), Err(Error::Checkpoint(_))));
}

#[test]
fn outputs_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let outputs = TrainOutputs {
        checkpoint: Some(dir.path().join("m.snew")),
        loss_csv: Some(dir.path().join("loss.csv")),
        resume: None,
    };
    let trainer = train(&tiny_config(), clouds(), &outputs).unwrap();
    let csv = fs::read_to_string(outputs.loss_csv.unwrap()).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,mean_loss,lr");
    assert_eq!(lines.len(), 3);
    let fields: Vec<f64> = lines[2].split(',').map(|f| f.parse().unwrap()).collect();
    assert_eq!(fields[0], 1.0);
    assert_eq!(fields[1], trainer.history()[1].mean_loss);
    assert!((fields[2] - 1e-3 * 0.9).abs() < 1e-18);
    let (model, _) = ModelWeights::load(outputs.checkpoint.as_ref().unwrap()).unwrap();
    assert_eq!(model.params(), trainer.model().params());
}

#[test]
fn non_finite_weights_abort_with_diagnostics() {
    let mut trainer = Trainer::new(tiny_config()).unwrap();
    let first = trainer.model.params_mut().arrays_mut().next().unwrap();
    first.data[0] = f64::NAN;
    let set = TrainingSet::new(clouds(), 16).unwrap();
    match trainer.run_epoch(&set) {
        Err(Error::NonFinite(msg)) => {
            assert!(msg.contains("epoch 0, batch 0"), "{msg}");
            assert!(msg.contains("embed.w1="), "{msg}");
        }
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn single_patch_overfit() {
    let set = TrainingSet::new(clouds(), 16).unwrap();
    let config = TrainConfig { lr: 3e-3, ..tiny_config() };
    let sample = set.sample(1, 17, 16).unwrap();
    let mut trainer = Trainer::new(config).unwrap();
    let batch = [sample];
    let first = trainer.step(&batch, 3e-3).unwrap();
    let mut last = first;
    for _ in 0..499 {
        last = trainer.step(&batch, 3e-3).unwrap();
        if last < 1e-2 {
            break;
        }
    }
    assert!(last < 1e-2, "loss {first} → {last}");
}

#[test]
fn noisy_training_clouds_mix_levels_equally() {
    let shapes = [SyntheticShape { shape: Shape::named("plane").unwrap(), sample_count: 200, seed: 1 }];
    let out = noisy_training_clouds(&shapes, &NOISE_LEVELS, 9).unwrap();
    assert_eq!(out.len(), 4);
    assert!(out.iter().all(|c| c.len() == 200));
    assert_eq!(out[0].points(), generate_synthetic_shape(&shapes[0]).unwrap().points());
    assert_ne!(out[2].points(), out[0].points());
    assert_eq!(out[3].normals(), out[0].normals());
}

#[test]
#[ignore = "timing probe"]
fn desk_step_timing() {
    let set = TrainingSet::new(
        vec![generate_synthetic_shape(&SyntheticShape { shape: Shape::named("sphere").unwrap(), sample_count: 2000, seed: 0 }).unwrap()],
        128,
    )
    .unwrap();
    for model in [ModelConfig::default(), ModelConfig { num_blocks: 2, feature_dim: 32, ffn_dim: 64, ..Default::default() }] {
        let config = TrainConfig { model, ..TrainConfig::desk() };
        let mut trainer = Trainer::new(config.clone()).unwrap();
        let batch = sample_training_batch(&set, &config, &mut epoch_rng(0, 0)).unwrap();
        let t = std::time::Instant::now();
        trainer.step(&batch, 2e-4).unwrap();
        eprintln!("{:?}: batch of 32 in {:?}", config.model.feature_dim, t.elapsed());
    }
}

//! Training data and the optimization loop.
//!
//! Every epoch draws its patches from a generator keyed by `(seed, epoch)`,
//! so a run resumed from an epoch-boundary checkpoint replays exactly the
//! batches an unbroken run would have seen. Per-patch gradients are computed
//! in parallel on independent tapes and summed in batch order, which keeps
//! results independent of the thread count.

mod synth;

pub use synth::{
    add_gaussian_noise, apply_density_variation, corrupt, first_axis_coordinate,
    generate_synthetic_shape, saddle_normal, CorruptionSpec, DensityMode, Shape, SyntheticShape,
    GRADIENT_END_KEEP, STRIPE_BANDS, STRIPE_KEEP,
};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, NdArray, Tape};
use crate::geometry::{
    extract_patch, normalize_patch_or_fallback, KnnIndex, NormalizedPatch, PointCloud, Vec3,
};
use crate::model::{forward, sin_loss, BoundParams, ModelConfig, ModelWeights};
use crate::{Error, Result};

/// Noise levels of the standard corruption table, as bounding-box fractions.
pub const NOISE_LEVELS: [f64; 4] = [0.0, 0.0012, 0.006, 0.012];

/// Optimization hyperparameters plus the architecture being trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patches_per_epoch: usize,
    pub patch_size: usize,
    /// Per-epoch multiplicative learning-rate factor.
    pub lr_decay: f64,
    pub seed: u64,
    pub model: ModelConfig,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Single-machine scale: 128-point patches, 30 epochs of 2048 patches.
    pub fn desk() -> Self {
        Self {
            lr: 2e-4,
            batch_size: 32,
            epochs: 30,
            patches_per_epoch: 2048,
            patch_size: 128,
            lr_decay: 0.995,
            seed: 0,
            model: ModelConfig::default(),
            checkpoint_every: 5,
        }
    }

    /// Full-scale schedule: 700-point patches, 250 epochs of 100k.
    pub fn paper() -> Self {
        Self {
            epochs: 250,
            patches_per_epoch: 100_000,
            patch_size: 700,
            checkpoint_every: 10,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidInput(format!("learning rate {} must be ≥ 0", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidInput(format!("lr decay {} must be in (0, 1]", self.lr_decay)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.patches_per_epoch == 0 {
            return Err(Error::InvalidInput(
                "batch size, epochs and patches per epoch must be positive".into(),
            ));
        }
        if self.patch_size < self.model.min_patch_size().max(3) {
            return Err(Error::InvalidInput(format!(
                "patch size {} is below the model minimum {}",
                self.patch_size,
                self.model.min_patch_size().max(3)
            )));
        }
        Ok(())
    }

    /// `lr · decay^epoch`, epochs counted from 0.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }

    /// Batches per epoch; the last one may be short.
    pub fn batches_per_epoch(&self) -> usize {
        self.patches_per_epoch.div_ceil(self.batch_size)
    }
}

/// Clouds with ground-truth normals and their search indices.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    clouds: Vec<PointCloud>,
    indices: Vec<KnnIndex>,
    /// Prefix sums of cloud sizes, for uniform sampling over all points.
    offsets: Vec<usize>,
}

impl TrainingSet {
    pub fn new(clouds: Vec<PointCloud>, patch_size: usize) -> Result<Self> {
        if clouds.is_empty() {
            return Err(Error::InvalidInput("training set is empty".into()));
        }
        let mut offsets = vec![0];
        for c in &clouds {
            if !c.has_normals() {
                return Err(Error::InvalidInput(format!("training cloud '{}' has no normals", c.name())));
            }
            if c.len() < patch_size {
                return Err(Error::InvalidInput(format!(
                    "training cloud '{}' has {} points, fewer than the patch size {patch_size}",
                    c.name(),
                    c.len()
                )));
            }
            offsets.push(offsets.last().unwrap() + c.len());
        }
        let indices = clouds.iter().map(KnnIndex::build).collect::<Result<_>>()?;
        Ok(Self { clouds, indices, offsets })
    }

    pub fn clouds(&self) -> &[PointCloud] {
        &self.clouds
    }

    pub fn total_points(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Maps a global point number to `(cloud, point)`.
    fn locate(&self, global: usize) -> (usize, usize) {
        let c = self.offsets.partition_point(|&o| o <= global) - 1;
        (c, global - self.offsets[c])
    }

    /// Patch around one point, normalized, with ground-truth normals rotated
    /// into the patch frame.
    pub fn sample(&self, cloud: usize, point: usize, patch_size: usize) -> Result<TrainingSample> {
        let c = &self.clouds[cloud];
        let patch = extract_patch(c, &self.indices[cloud], point, patch_size)?;
        let normalized = normalize_patch_or_fallback(&patch)?;
        let gt = patch
            .gt_normals
            .as_ref()
            .expect("training clouds carry normals")
            .iter()
            .map(|n| normalized.transform.rotation * n)
            .collect();
        Ok(TrainingSample {
            cloud,
            point,
            patch: normalized,
            gt_normals: gt,
        })
    }
}

/// One training patch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub cloud: usize,
    pub point: usize,
    pub patch: NormalizedPatch,
    /// Ground-truth normals in the patch frame, row-aligned with the patch.
    pub gt_normals: Vec<Vec3>,
}

/// Draws `count` query points uniformly over all points of the set.
pub fn sample_queries(set: &TrainingSet, count: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    (0..count)
        .map(|_| set.locate(rng.random_range(0..set.total_points())))
        .collect()
}

/// One batch of `config.batch_size` patches around uniformly random queries.
pub fn sample_training_batch(
    set: &TrainingSet,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<TrainingSample>> {
    sample_queries(set, config.batch_size, rng)
        .into_par_iter()
        .map(|(c, p)| set.sample(c, p, config.patch_size))
        .collect()
}

/// The generator for one epoch's queries.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Every shape at every noise level, equally weighted. Normals stay those of
/// the clean surface.
pub fn noisy_training_clouds(
    shapes: &[SyntheticShape],
    noise_levels: &[f64],
    seed: u64,
) -> Result<Vec<PointCloud>> {
    let mut out = Vec::with_capacity(shapes.len() * noise_levels.len());
    for (i, shape) in shapes.iter().enumerate() {
        let clean = generate_synthetic_shape(shape)?;
        for (j, &level) in noise_levels.iter().enumerate() {
            let spec = CorruptionSpec {
                noise_sigma_fraction: level,
                density_mode: DensityMode::None,
                seed: seed ^ ((i as u64) << 32 | j as u64),
            };
            let mut cloud = add_gaussian_noise(&clean, &spec)?;
            cloud.set_name(format!("{}_noise{level}", clean.name()));
            out.push(cloud);
        }
    }
    Ok(out)
}

/// Loss statistics of one finished epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

const EPOCH_KEY: &str = "train.epoch";
const STEP_KEY: &str = "train.adam_t";
const LOSS_KEY: &str = "train.loss";
const LR_KEY: &str = "train.lr";

/// Model, optimizer state and loss history of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    model: ModelWeights,
    adam: AdamState,
    adam_config: AdamConfig,
    history: Vec<EpochStats>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = ModelWeights::init(config.model.clone(), config.seed)?;
        let adam = AdamState::new(model.params());
        Ok(Self {
            config,
            model,
            adam,
            adam_config: AdamConfig::default(),
            history: Vec::new(),
        })
    }

    /// Restores model, optimizer state and history from a checkpoint written
    /// by [`Trainer::save`]. The checkpoint's architecture must match
    /// `config.model`.
    pub fn resume(config: TrainConfig, checkpoint: &Path) -> Result<Self> {
        config.validate()?;
        let (model, extra) = ModelWeights::load(checkpoint)?;
        if model.config() != &config.model {
            return Err(Error::Checkpoint(format!(
                "{} was trained with a different model config",
                checkpoint.display()
            )));
        }
        let find = |name: &str| {
            extra
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, a)| a)
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing {name}", checkpoint.display())))
        };
        let scalar = |name: &str| -> Result<u64> {
            let a = find(name)?;
            match a.data[..] {
                [v] if v >= 0.0 && v.fract() == 0.0 => Ok(v as u64),
                _ => Err(Error::Checkpoint(format!("{name} is not a count"))),
            }
        };
        let epochs_done = scalar(EPOCH_KEY)? as usize;
        let mut adam = AdamState::new(model.params());
        adam.t = scalar(STEP_KEY)?;
        for (i, (name, param)) in model.params().iter().enumerate() {
            for (slot, kind) in [(&mut adam.m[i], "m"), (&mut adam.v[i], "v")] {
                let a = find(&format!("adam.{kind}.{name}"))?;
                if a.shape != param.shape {
                    return Err(Error::Checkpoint(format!("adam.{kind}.{name}: shape mismatch")));
                }
                slot.clone_from(&a.data);
            }
        }
        let losses = find(LOSS_KEY)?;
        let lrs = find(LR_KEY)?;
        if losses.len() != epochs_done || lrs.len() != epochs_done {
            return Err(Error::Checkpoint("loss history length differs from epoch count".into()));
        }
        let history = losses
            .data
            .iter()
            .zip(&lrs.data)
            .enumerate()
            .map(|(epoch, (&mean_loss, &lr))| EpochStats { epoch, mean_loss, lr })
            .collect();
        Ok(Self {
            config,
            model,
            adam,
            adam_config: AdamConfig::default(),
            history,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &ModelWeights {
        &self.model
    }

    pub fn into_model(self) -> ModelWeights {
        self.model
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn history(&self) -> &[EpochStats] {
        &self.history
    }

    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }

    /// Checkpoint entries beyond the model parameters.
    fn extra_entries(&self) -> Vec<(String, NdArray)> {
        let mut out = Vec::new();
        for (i, (name, param)) in self.model.params().iter().enumerate() {
            out.push((format!("adam.m.{name}"), NdArray { shape: param.shape.clone(), data: self.adam.m[i].clone() }));
            out.push((format!("adam.v.{name}"), NdArray { shape: param.shape.clone(), data: self.adam.v[i].clone() }));
        }
        let n = self.history.len();
        out.push((EPOCH_KEY.into(), NdArray::filled(vec![1], n as f64)));
        out.push((STEP_KEY.into(), NdArray::filled(vec![1], self.adam.t as f64)));
        out.push((LOSS_KEY.into(), NdArray { shape: vec![n], data: self.history.iter().map(|h| h.mean_loss).collect() }));
        out.push((LR_KEY.into(), NdArray { shape: vec![n], data: self.history.iter().map(|h| h.lr).collect() }));
        out
    }

    /// Writes model, optimizer state and history.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.model.save(path, &self.extra_entries())
    }

    /// Mean loss of `batch` and the gradient of that mean, summed over
    /// patches in batch order.
    pub fn batch_gradient(&self, batch: &[TrainingSample]) -> Result<(f64, Vec<Vec<f64>>)> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let per_patch: Vec<(f64, Vec<Vec<f64>>)> = batch
            .par_iter()
            .map(|s| patch_gradient(&self.model, s))
            .collect::<Result<_>>()?;
        let inv = 1.0 / batch.len() as f64;
        let mut grads: Vec<Vec<f64>> = self.model.params().arrays().map(|a| vec![0.0; a.len()]).collect();
        let mut loss = 0.0;
        for (l, g) in &per_patch {
            loss += l;
            for (acc, gi) in grads.iter_mut().zip(g) {
                for (a, v) in acc.iter_mut().zip(gi) {
                    *a += v;
                }
            }
        }
        for acc in &mut grads {
            for a in acc.iter_mut() {
                *a *= inv;
            }
        }
        Ok((loss * inv, grads))
    }

    /// One Adam update on `batch`. Returns the batch loss before the update.
    pub fn step(&mut self, batch: &[TrainingSample], lr: f64) -> Result<f64> {
        let (loss, grads) = self.batch_gradient(batch)?;
        if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("loss {loss} or its gradient is not finite")));
        }
        adam_step(self.model.params_mut(), &grads, &mut self.adam, lr, &self.adam_config)?;
        Ok(loss)
    }

    /// Runs the next epoch over `set`.
    pub fn run_epoch(&mut self, set: &TrainingSet) -> Result<EpochStats> {
        let epoch = self.history.len();
        let lr = self.config.lr_at(epoch);
        let mut rng = epoch_rng(self.config.seed, epoch);
        let queries = sample_queries(set, self.config.patches_per_epoch, &mut rng);
        let mut total = 0.0;
        let batches = queries.chunks(self.config.batch_size);
        let count = batches.len();
        for (b, chunk) in batches.enumerate() {
            let loss = chunk
                .par_iter()
                .map(|&(c, p)| set.sample(c, p, self.config.patch_size))
                .collect::<Result<Vec<_>>>()
                .and_then(|batch| self.step(&batch, lr))
                .map_err(|e| self.diagnose(e, epoch, b))?;
            total += loss;
            log::debug!("epoch {epoch} batch {b}/{count}: loss {loss:.6}");
        }
        let stats = EpochStats { epoch, mean_loss: total / count as f64, lr };
        self.history.push(stats);
        Ok(stats)
    }

    /// Adds the training position and parameter norms to numerical errors.
    fn diagnose(&self, e: Error, epoch: usize, batch: usize) -> Error {
        if !e.is_numerical() {
            return e;
        }
        let mut norms: Vec<(f64, &str)> = self
            .model
            .params()
            .iter()
            .map(|(name, a)| (a.data.iter().map(|v| v * v).sum::<f64>().sqrt(), name))
            .collect();
        norms.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut msg = format!("epoch {epoch}, batch {batch}: {e}; largest parameter norms:");
        for (norm, name) in norms.iter().take(5) {
            let _ = write!(msg, " {name}={norm:.4e}");
        }
        Error::NonFinite(msg)
    }
}

fn patch_gradient(model: &ModelWeights, sample: &TrainingSample) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let leaves = model.register(&mut tape, true)?;
    let params = BoundParams::new(model.params(), &leaves)?;
    let pred = forward(&mut tape, model.config(), params, &sample.patch.positions)?;
    let loss = sin_loss(&mut tape, pred, &sample.gt_normals)?;
    let grads = tape.backward(loss)?;
    let per_param = leaves
        .iter()
        .zip(model.params().arrays())
        .map(|(&t, a)| grads.get(t).map_or_else(|| vec![0.0; a.len()], <[f64]>::to_vec))
        .collect();
    Ok((tape.value(loss)[0], per_param))
}

/// Where a training run writes its outputs.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
    /// Continue from this checkpoint instead of initializing.
    pub resume: Option<PathBuf>,
}

/// `epoch,mean_loss,lr` rows.
pub fn loss_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,mean_loss,lr\n");
    for h in history {
        let _ = writeln!(out, "{},{:e},{:e}", h.epoch, h.mean_loss, h.lr);
    }
    out
}

/// Trains for `config.epochs` epochs in total (counting epochs already in
/// a resumed checkpoint), writing checkpoints at the configured cadence and
/// at the end, and the loss CSV after every epoch.
pub fn train(config: &TrainConfig, clouds: Vec<PointCloud>, outputs: &TrainOutputs) -> Result<Trainer> {
    let set = TrainingSet::new(clouds, config.patch_size)?;
    let mut trainer = match &outputs.resume {
        Some(path) => Trainer::resume(config.clone(), path)?,
        None => Trainer::new(config.clone())?,
    };
    while trainer.epochs_done() < config.epochs {
        let stats = trainer.run_epoch(&set)?;
        log::info!("epoch {}: mean loss {:.6}, lr {:.3e}", stats.epoch, stats.mean_loss, stats.lr);
        if let Some(path) = &outputs.loss_csv {
            fs::write(path, loss_csv(trainer.history())).map_err(|e| Error::io(path, e))?;
        }
        let done = trainer.epochs_done();
        let periodic = config.checkpoint_every > 0 && done % config.checkpoint_every == 0;
        if let Some(path) = &outputs.checkpoint {
            if periodic || done == config.epochs {
                trainer.save(path)?;
            }
        }
    }
    Ok(trainer)
}

#[cfg(test)]
mod tests;

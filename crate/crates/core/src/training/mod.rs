//! Combined cross-entropy and batch-hard triplet training with a step
//! learning-rate schedule, per-epoch checkpoints and resumable runs.

pub mod checkpoint;

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::LstrlNet;
use crate::data::{augment, pk_batch, AugmentConfig, BatchShape, Dataset};
use crate::error::{config_err, Result};
use crate::tensor::param::name_seed;
use crate::tensor::{adam_step, AdamConfig, ParamStore, Real, Tape, Var};
use crate::{Error, Tensor};

/// Mean `-log softmax(logits)[label]` over the rows of `logits [N,K]`.
pub fn cross_entropy<R: Real>(tape: &mut Tape<R>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Batch-hard triplet loss with unnormalized Euclidean distances.
pub fn batch_hard_triplet<R: Real>(
    tape: &mut Tape<R>,
    embeddings: Var,
    labels: &[usize],
    margin: f64,
) -> Result<Var> {
    tape.batch_hard_triplet(embeddings, labels, margin)
}

/// Losses of one batch (or the mean over an epoch's batches).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub ce_loss: f64,
    pub triplet_loss: f64,
    /// `ce_weight * ce_loss + triplet_weight * triplet_loss`.
    pub total: f64,
    pub batch_accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub total_epochs: usize,
}

impl ScheduleConfig {
    /// Full-scale schedule: 3e-4, divided by 10 every 70 of 400 epochs.
    pub fn full_scale() -> Self {
        Self {
            base_lr: 3e-4,
            decay_factor: 0.1,
            decay_every: 70,
            total_epochs: 400,
        }
    }

    /// Desk-scale schedule: 40 epochs, decaying every 7.
    pub fn desk() -> Self {
        Self {
            total_epochs: 40,
            decay_every: 7,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(config_err!("base_lr must be finite and >= 0, got {}", self.base_lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(config_err!("decay_factor must be in (0,1), got {}", self.decay_factor));
        }
        if self.decay_every == 0 {
            return Err(config_err!("decay_every must be at least 1"));
        }
        Ok(())
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// `base_lr * decay_factor^floor(epoch / decay_every)`.
pub fn lr_at(epoch: usize, s: &ScheduleConfig) -> f64 {
    s.base_lr * s.decay_factor.powi((epoch / s.decay_every) as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: BatchShape,
    pub schedule: ScheduleConfig,
    pub augment: AugmentConfig,
    pub batches_per_epoch: usize,
    pub margin: f64,
    pub ce_weight: f64,
    pub triplet_weight: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: BatchShape::default(),
            schedule: ScheduleConfig::desk(),
            augment: AugmentConfig::default(),
            batches_per_epoch: 4,
            margin: 0.3,
            ce_weight: 1.0,
            triplet_weight: 1.0,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.batch.validate()?;
        self.schedule.validate()?;
        if self.batch.k < 2 || self.batch.p < 2 {
            return Err(config_err!(
                "triplet mining needs p >= 2 and k >= 2, got p={} k={}",
                self.batch.p,
                self.batch.k
            ));
        }
        if self.batches_per_epoch == 0 {
            return Err(config_err!("batches_per_epoch must be at least 1"));
        }
        if !(self.margin >= 0.0) || !(self.ce_weight >= 0.0) || !(self.triplet_weight >= 0.0) {
            return Err(config_err!("margin and loss weights must be >= 0"));
        }
        Ok(())
    }
}

/// Seed of batch `batch` in epoch `epoch`; also reported on numerical failure.
pub fn batch_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    name_seed(seed, &format!("batch/{epoch}/{batch}"))
}

/// Forward, loss and backward for one batch of clips. Gradients are
/// accumulated into `store`; no optimizer step is taken.
pub fn batch_loss<R: Real>(
    net: &LstrlNet,
    store: &mut ParamStore<R>,
    clips: &[Tensor<R>],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let mut embeddings = Vec::with_capacity(clips.len());
    let mut logits = Vec::with_capacity(clips.len());
    let dim = net.config.embedding_dim();
    let k = net.config.num_identities;
    for clip in clips {
        let x = tape.constant(clip.clone());
        let out = net.forward(&mut tape, store, x)?;
        embeddings.push(tape.reshape(out.embedding, &[1, dim])?);
        logits.push(tape.reshape(out.logits, &[1, k])?);
    }
    let emb = tape.concat(&embeddings, 0)?;
    let logits = tape.concat(&logits, 0)?;
    let ce = cross_entropy(&mut tape, logits, labels)?;
    let tri = batch_hard_triplet(&mut tape, emb, labels, cfg.margin)?;
    let ce_w = tape.scale(ce, cfg.ce_weight)?;
    let tri_w = tape.scale(tri, cfg.triplet_weight)?;
    let total = tape.add(ce_w, tri_w)?;
    let correct = tape
        .value(logits)
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    let report = LossReport {
        ce_loss: tape.value(ce).item().as_f64(),
        triplet_loss: tape.value(tri).item().as_f64(),
        total: tape.value(total).item().as_f64(),
        batch_accuracy: correct as f64 / labels.len() as f64,
    };
    if !report.total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {}", report.total)));
    }
    tape.backward(total, store)?;
    Ok(report)
}

fn argmax<R: Real>(row: &[R]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-epoch averages, as written to the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean: LossReport,
    pub lr: f64,
}

impl EpochLog {
    /// `epoch ce triplet total acc lr`, tab separated.
    pub fn line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.3e}",
            self.epoch,
            self.mean.ce_loss,
            self.mean.triplet_loss,
            self.mean.total,
            self.mean.batch_accuracy,
            self.lr
        )
    }
}

pub const LOG_HEADER: &str = "epoch\tce\ttriplet\ttotal\tacc\tlr";

/// Runs epochs `start_epoch..cfg.schedule.total_epochs`, writing one log line
/// per epoch to `log` and, if `checkpoint_dir` is given, a checkpoint after
/// every epoch. Every batch is drawn from its own seed, so a run resumed
/// from a checkpoint continues exactly like an uninterrupted one.
pub fn train(
    net: &LstrlNet,
    store: &mut ParamStore<f32>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    start_epoch: usize,
    checkpoint_dir: Option<&Path>,
    log: &mut dyn Write,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if dataset.frame_hw != net.config.input_hw {
        return Err(config_err!(
            "dataset frames are {:?}, network expects {:?}",
            dataset.frame_hw,
            net.config.input_hw
        ));
    }
    if cfg.batch.frame_hw != dataset.frame_hw {
        return Err(config_err!(
            "batch frame size {:?} differs from dataset frames {:?}",
            cfg.batch.frame_hw,
            dataset.frame_hw
        ));
    }
    let labels = dataset.label_map();
    if labels.len() > net.config.num_identities {
        return Err(config_err!(
            "dataset has {} identities, classifier has {}",
            labels.len(),
            net.config.num_identities
        ));
    }
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut logs = Vec::new();
    for epoch in start_epoch..cfg.schedule.total_epochs {
        let lr = lr_at(epoch, &cfg.schedule);
        let mut sum = LossReport {
            ce_loss: 0.0,
            triplet_loss: 0.0,
            total: 0.0,
            batch_accuracy: 0.0,
        };
        for b in 0..cfg.batches_per_epoch {
            let seed = batch_seed(cfg.seed, epoch, b);
            let report = run_batch(net, store, dataset, cfg, seed).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!(
                    "epoch {epoch} batch {b} (batch seed {seed}): {m}"
                )),
                other => other,
            })?;
            if lr > 0.0 {
                adam_step(store, &AdamConfig { lr, ..cfg.adam })?;
            } else {
                store.zero_grad();
            }
            sum.ce_loss += report.ce_loss;
            sum.triplet_loss += report.triplet_loss;
            sum.total += report.total;
            sum.batch_accuracy += report.batch_accuracy;
        }
        let n = cfg.batches_per_epoch as f64;
        let entry = EpochLog {
            epoch,
            mean: LossReport {
                ce_loss: sum.ce_loss / n,
                triplet_loss: sum.triplet_loss / n,
                total: sum.total / n,
                batch_accuracy: sum.batch_accuracy / n,
            },
            lr,
        };
        writeln!(log, "{}", entry.line())?;
        if let Some(dir) = checkpoint_dir {
            checkpoint::save(&checkpoint::epoch_checkpoint_path(dir, epoch + 1), store, epoch + 1)?;
        }
        logs.push(entry);
    }
    Ok(logs)
}

/// Samples, augments and back-propagates one batch drawn from `seed`.
pub fn run_batch(
    net: &LstrlNet,
    store: &mut ParamStore<f32>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<LossReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let refs = pk_batch(dataset, &cfg.batch, &mut rng)?;
    let mut clips = Vec::with_capacity(refs.len());
    let mut labels = Vec::with_capacity(refs.len());
    for r in &refs {
        let clip = dataset.clip(r.tracklet, &r.frames)?;
        clips.push(augment(&clip, &mut rng, &cfg.augment));
        labels.push(r.label);
    }
    batch_loss(net, store, &clips, &labels, cfg)
}

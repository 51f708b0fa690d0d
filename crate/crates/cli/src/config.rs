//! Flat `key = value` run configuration.
//!
//! Every knob of the pipeline has one key. A document may set any subset of
//! keys; blank lines and `#` comments are ignored and an unknown key is an
//! error naming it. [`RunConfig::to_text`] writes every key, so a resolved
//! configuration can be read back unchanged.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lstrl_core::backbone::{BackboneConfig, Variant, NUM_STAGES};
use lstrl_core::bme::{MotionDirection, MotionManner};
use lstrl_core::data::{AugmentConfig, BatchShape, SynthConfig};
use lstrl_core::eval::Metric;
use lstrl_core::mae::Granularity;
use lstrl_core::training::{ScheduleConfig, TrainConfig};
use lstrl_core::{Error, Result};

/// Every setting of a run. Defaults are the desk-scale configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    pub frame_height: usize,
    pub frame_width: usize,
    pub synth_identities: usize,
    pub synth_tracklets: usize,
    pub synth_frames: usize,
    pub synth_confusable_pairs: usize,
    pub synth_cameras: usize,
    pub synth_blob_size: usize,
    pub synth_blob_speed: f64,
    pub synth_horizontal_ratio: f64,
    pub synth_gain_min: f64,
    pub synth_gain_max: f64,
    pub synth_noise_std: f64,
    pub variant: Variant,
    pub channels: [usize; NUM_STAGES],
    pub drop_granularity: Option<Granularity>,
    pub motion: MotionManner,
    pub direction: MotionDirection,
    pub batch_p: usize,
    pub batch_k: usize,
    pub batch_t: usize,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub margin: f64,
    pub ce_weight: f64,
    pub triplet_weight: f64,
    pub augment: bool,
    pub erase_prob: f64,
    pub eval_frames: usize,
    pub eval_metric: Metric,
    pub eval_batch_size: usize,
    pub gradcheck_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_root: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
            frame_height: 32,
            frame_width: 16,
            synth_identities: 20,
            synth_tracklets: 4,
            synth_frames: 16,
            synth_confusable_pairs: 5,
            synth_cameras: 2,
            synth_blob_size: 8,
            synth_blob_speed: 2.0,
            synth_horizontal_ratio: 0.5,
            synth_gain_min: 0.85,
            synth_gain_max: 1.15,
            synth_noise_std: 0.02,
            variant: Variant::MaeBme,
            channels: [8, 16, 32, 64],
            drop_granularity: None,
            motion: MotionManner::Global,
            direction: MotionDirection::Bi,
            batch_p: 8,
            batch_k: 4,
            batch_t: 8,
            epochs: 40,
            batches_per_epoch: 32,
            lr: 1e-3,
            decay_factor: 0.1,
            decay_every: 30,
            margin: 0.3,
            ce_weight: 1.0,
            triplet_weight: 1.0,
            augment: false,
            erase_prob: 0.5,
            eval_frames: 8,
            eval_metric: Metric::Cosine,
            eval_batch_size: 8,
            gradcheck_seeds: 20,
        }
    }
}

/// All recognised keys, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "seed",
    "data.root",
    "out.dir",
    "frame.height",
    "frame.width",
    "synth.identities",
    "synth.tracklets_per_identity",
    "synth.frames_per_tracklet",
    "synth.confusable_pairs",
    "synth.cameras",
    "synth.blob_size",
    "synth.blob_speed",
    "synth.horizontal_ratio",
    "synth.gain_min",
    "synth.gain_max",
    "synth.noise_std",
    "model.variant",
    "model.channels",
    "model.drop_granularity",
    "model.motion",
    "model.direction",
    "batch.p",
    "batch.k",
    "batch.t",
    "train.epochs",
    "train.batches_per_epoch",
    "train.lr",
    "train.decay_factor",
    "train.decay_every",
    "train.margin",
    "train.ce_weight",
    "train.triplet_weight",
    "train.augment",
    "train.erase_prob",
    "eval.frames",
    "eval.metric",
    "eval.batch_size",
    "gradcheck.seeds",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected a boolean, got {other:?}"))),
    }
}

fn parse_channels(key: &str, value: &str) -> Result<[usize; NUM_STAGES]> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|p| parse(key, p))
        .collect::<Result<_>>()?;
    parts.try_into().map_err(|v: Vec<usize>| {
        Error::Config(format!("{key}: expected {NUM_STAGES} comma-separated values, got {}", v.len()))
    })
}

fn parse_granularity(key: &str, value: &str) -> Result<Option<Granularity>> {
    match value.trim() {
        "none" | "" => Ok(None),
        other => Ok(Some(parse(key, other)?)),
    }
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.root" => self.data_root = PathBuf::from(v),
            "out.dir" => self.out_dir = PathBuf::from(v),
            "frame.height" => self.frame_height = parse(key, v)?,
            "frame.width" => self.frame_width = parse(key, v)?,
            "synth.identities" => self.synth_identities = parse(key, v)?,
            "synth.tracklets_per_identity" => self.synth_tracklets = parse(key, v)?,
            "synth.frames_per_tracklet" => self.synth_frames = parse(key, v)?,
            "synth.confusable_pairs" => self.synth_confusable_pairs = parse(key, v)?,
            "synth.cameras" => self.synth_cameras = parse(key, v)?,
            "synth.blob_size" => self.synth_blob_size = parse(key, v)?,
            "synth.blob_speed" => self.synth_blob_speed = parse(key, v)?,
            "synth.horizontal_ratio" => self.synth_horizontal_ratio = parse(key, v)?,
            "synth.gain_min" => self.synth_gain_min = parse(key, v)?,
            "synth.gain_max" => self.synth_gain_max = parse(key, v)?,
            "synth.noise_std" => self.synth_noise_std = parse(key, v)?,
            "model.variant" => self.variant = parse(key, v)?,
            "model.channels" => self.channels = parse_channels(key, v)?,
            "model.drop_granularity" => self.drop_granularity = parse_granularity(key, v)?,
            "model.motion" => self.motion = parse(key, v)?,
            "model.direction" => self.direction = parse(key, v)?,
            "batch.p" => self.batch_p = parse(key, v)?,
            "batch.k" => self.batch_k = parse(key, v)?,
            "batch.t" => self.batch_t = parse(key, v)?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.batches_per_epoch" => self.batches_per_epoch = parse(key, v)?,
            "train.lr" => self.lr = parse(key, v)?,
            "train.decay_factor" => self.decay_factor = parse(key, v)?,
            "train.decay_every" => self.decay_every = parse(key, v)?,
            "train.margin" => self.margin = parse(key, v)?,
            "train.ce_weight" => self.ce_weight = parse(key, v)?,
            "train.triplet_weight" => self.triplet_weight = parse(key, v)?,
            "train.augment" => self.augment = parse_bool(key, v)?,
            "train.erase_prob" => self.erase_prob = parse(key, v)?,
            "eval.frames" => self.eval_frames = parse(key, v)?,
            "eval.metric" => self.eval_metric = parse(key, v)?,
            "eval.batch_size" => self.eval_batch_size = parse(key, v)?,
            "gradcheck.seeds" => self.gradcheck_seeds = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Current value of `key`, formatted as [`RunConfig::set`] accepts it.
    pub fn get(&self, key: &str) -> Result<String> {
        let c = &self.channels;
        Ok(match key {
            "seed" => self.seed.to_string(),
            "data.root" => self.data_root.display().to_string(),
            "out.dir" => self.out_dir.display().to_string(),
            "frame.height" => self.frame_height.to_string(),
            "frame.width" => self.frame_width.to_string(),
            "synth.identities" => self.synth_identities.to_string(),
            "synth.tracklets_per_identity" => self.synth_tracklets.to_string(),
            "synth.frames_per_tracklet" => self.synth_frames.to_string(),
            "synth.confusable_pairs" => self.synth_confusable_pairs.to_string(),
            "synth.cameras" => self.synth_cameras.to_string(),
            "synth.blob_size" => self.synth_blob_size.to_string(),
            "synth.blob_speed" => self.synth_blob_speed.to_string(),
            "synth.horizontal_ratio" => self.synth_horizontal_ratio.to_string(),
            "synth.gain_min" => self.synth_gain_min.to_string(),
            "synth.gain_max" => self.synth_gain_max.to_string(),
            "synth.noise_std" => self.synth_noise_std.to_string(),
            "model.variant" => self.variant.to_string(),
            "model.channels" => format!("{},{},{},{}", c[0], c[1], c[2], c[3]),
            "model.drop_granularity" => self
                .drop_granularity
                .map_or_else(|| "none".to_string(), |g| g.to_string()),
            "model.motion" => self.motion.to_string(),
            "model.direction" => self.direction.to_string(),
            "batch.p" => self.batch_p.to_string(),
            "batch.k" => self.batch_k.to_string(),
            "batch.t" => self.batch_t.to_string(),
            "train.epochs" => self.epochs.to_string(),
            "train.batches_per_epoch" => self.batches_per_epoch.to_string(),
            "train.lr" => self.lr.to_string(),
            "train.decay_factor" => self.decay_factor.to_string(),
            "train.decay_every" => self.decay_every.to_string(),
            "train.margin" => self.margin.to_string(),
            "train.ce_weight" => self.ce_weight.to_string(),
            "train.triplet_weight" => self.triplet_weight.to_string(),
            "train.augment" => self.augment.to_string(),
            "train.erase_prob" => self.erase_prob.to_string(),
            "eval.frames" => self.eval_frames.to_string(),
            "eval.metric" => self.eval_metric.to_string(),
            "eval.batch_size" => self.eval_batch_size.to_string(),
            "gradcheck.seeds" => self.gradcheck_seeds.to_string(),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        })
    }

    /// Applies a `key = value` document on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1))
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override as given to `--set`.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
        self.set(k, v)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Every key with its current value, one `key = value` line each.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            num_identities: self.synth_identities,
            tracklets_per_identity: self.synth_tracklets,
            frames_per_tracklet: self.synth_frames,
            frame_hw: (self.frame_height, self.frame_width),
            confusable_pairs: self.synth_confusable_pairs,
            num_cameras: self.synth_cameras,
            blob_size: self.synth_blob_size,
            blob_speed: self.synth_blob_speed,
            horizontal_ratio: self.synth_horizontal_ratio,
            camera_gain: (self.synth_gain_min, self.synth_gain_max),
            noise_std: self.synth_noise_std,
            seed: self.seed,
        }
    }

    /// Network layout for a classifier over `num_identities` classes.
    pub fn backbone(&self, num_identities: usize) -> BackboneConfig {
        BackboneConfig {
            stage_channels: self.channels,
            input_hw: (self.frame_height, self.frame_width),
            num_identities,
            drop_granularity: self.drop_granularity,
            motion_manner: self.motion,
            motion_direction: self.direction,
            ..BackboneConfig::default()
        }
        .with_variant(self.variant)
    }

    /// Training settings; the augmentation fill colour is set by the caller.
    pub fn train(&self) -> TrainConfig {
        let augment = if self.augment {
            AugmentConfig {
                erase_prob: self.erase_prob,
                ..AugmentConfig::default()
            }
        } else {
            AugmentConfig::off()
        };
        TrainConfig {
            batch: BatchShape {
                p: self.batch_p,
                k: self.batch_k,
                t: self.batch_t,
                frame_hw: (self.frame_height, self.frame_width),
            },
            schedule: ScheduleConfig {
                base_lr: self.lr,
                decay_factor: self.decay_factor,
                decay_every: self.decay_every,
                total_epochs: self.epochs,
            },
            augment,
            batches_per_epoch: self.batches_per_epoch,
            margin: self.margin,
            ce_weight: self.ce_weight,
            triplet_weight: self.triplet_weight,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    /// Range checks that do not need the data on disk.
    pub fn validate(&self) -> Result<()> {
        self.synth().validate()?;
        self.backbone(self.synth_identities).validate()?;
        self.train().validate()?;
        if !(0.0..=1.0).contains(&self.erase_prob) {
            return Err(Error::Config(format!("train.erase_prob must be in [0,1], got {}", self.erase_prob)));
        }
        if self.eval_frames == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("eval.frames and eval.batch_size must be positive".into()));
        }
        if self.gradcheck_seeds == 0 {
            return Err(Error::Config("gradcheck.seeds must be positive".into()));
        }
        Ok(())
    }
}

//! Desk-scale staged encoder with appearance/motion block insertion points,
//! the spatial+temporal average pooling head and the identity classifier.
//!
//! Each stage is a 3x3 convolution with ReLU. The first three stages then halve
//! the resolution by 2x2 mean pooling; the last stage keeps it (the "last
//! stride 1" layout common in re-identification backbones). After a configured
//! stage the features become `F + F^a + F^m`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::bme::{motion_maps, BmeParams, MotionDirection, MotionManner, MotionPair};
use crate::error::{config_err, dim_err, Error, Result};
use crate::layers::{Affine, Conv3x3, WeightInit};
use crate::mae::{mae_forward_traced, Granularity, GranularitySet, MaeParams};
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};

pub const NUM_STAGES: usize = 4;
/// Stages `1..=DOWNSAMPLING_STAGES` halve the spatial resolution.
pub const DOWNSAMPLING_STAGES: usize = 3;
/// Total spatial reduction of the encoder.
pub const TOTAL_STRIDE: usize = 1 << DOWNSAMPLING_STAGES;

/// Ablation rows: backbone only, with appearance blocks, with both blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Mae,
    MaeBme,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Mae => "+mae",
            Variant::MaeBme => "+mae+bme",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "baseline" => Ok(Variant::Baseline),
            "+mae" | "mae" => Ok(Variant::Mae),
            "+mae+bme" | "mae+bme" => Ok(Variant::MaeBme),
            other => Err(config_err!(
                "unknown variant {other:?}, expected baseline|+mae|+mae+bme"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stage_channels: [usize; NUM_STAGES],
    /// `(height, width)` of input frames.
    pub input_hw: (usize, usize),
    pub insert_mae_after: BTreeSet<usize>,
    pub insert_bme_after: BTreeSet<usize>,
    pub num_identities: usize,
    pub drop_granularity: Option<Granularity>,
    pub motion_manner: MotionManner,
    pub motion_direction: MotionDirection,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: [16, 32, 64, 128],
            input_hw: (64, 32),
            insert_mae_after: BTreeSet::from([2, 3]),
            insert_bme_after: BTreeSet::from([2, 3]),
            num_identities: 20,
            drop_granularity: None,
            motion_manner: MotionManner::Global,
            motion_direction: MotionDirection::Bi,
        }
    }
}

impl BackboneConfig {
    /// Sets the insertion points for an ablation row (blocks after stages 2 and 3).
    pub fn with_variant(mut self, v: Variant) -> Self {
        let both = BTreeSet::from([2, 3]);
        (self.insert_mae_after, self.insert_bme_after) = match v {
            Variant::Baseline => (BTreeSet::new(), BTreeSet::new()),
            Variant::Mae => (both, BTreeSet::new()),
            Variant::MaeBme => (both.clone(), both),
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (i, &c) in self.stage_channels.iter().enumerate() {
            if c == 0 || c % 4 != 0 {
                return Err(config_err!(
                    "stage {} has {c} channels; every stage needs a positive multiple of 4",
                    i + 1
                ));
            }
        }
        for &s in self.insert_mae_after.iter().chain(&self.insert_bme_after) {
            if !(1..=NUM_STAGES).contains(&s) {
                return Err(config_err!("insertion stage {s} outside 1..={NUM_STAGES}"));
            }
        }
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % TOTAL_STRIDE != 0 || w % TOTAL_STRIDE != 0 {
            return Err(config_err!(
                "input {h}x{w} must be a positive multiple of {TOTAL_STRIDE} in both dims"
            ));
        }
        if self.num_identities == 0 {
            return Err(config_err!("num_identities must be positive"));
        }
        Ok(())
    }

    /// Spatial size after `stage` (1-based).
    pub fn stage_hw(&self, stage: usize) -> (usize, usize) {
        let down = 1 << stage.min(DOWNSAMPLING_STAGES);
        (self.input_hw.0 / down, self.input_hw.1 / down)
    }

    pub fn embedding_dim(&self) -> usize {
        self.stage_channels[NUM_STAGES - 1]
    }
}

/// What the blocks computed at one insertion point.
#[derive(Clone, Debug)]
pub struct StageTrace {
    pub stage: usize,
    pub appearance: Option<GranularitySet>,
    pub motion: Option<MotionPair>,
}

#[derive(Clone, Debug)]
pub struct ClipOutput {
    /// Video-level representation `[C_final]`.
    pub embedding: Var,
    /// `[num_identities]`
    pub logits: Var,
    /// Features after each stage (including any block residuals), `[T,H,W,C]`.
    pub stage_features: Vec<Var>,
    pub traces: Vec<StageTrace>,
}

/// Materialized embedding of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoEmbedding<R: Real> {
    pub vector: Tensor<R>,
    pub identity_logits: Tensor<R>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LstrlNet {
    pub config: BackboneConfig,
    stages: Vec<Conv3x3>,
    mae: BTreeMap<usize, MaeParams>,
    bme: BTreeMap<usize, BmeParams>,
    classifier: Affine,
}

impl LstrlNet {
    /// Registers all parameters in `store`. Every parameter is seeded from
    /// `(seed, name)`, so backbone weights do not depend on which blocks are
    /// inserted.
    pub fn build<R: Real>(config: BackboneConfig, store: &mut ParamStore<R>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut c_in = 3;
        for (i, &c) in config.stage_channels.iter().enumerate() {
            stages.push(Conv3x3::register(store, &format!("stage{}.conv", i + 1), c_in, c, seed)?);
            c_in = c;
        }
        let mut mae = BTreeMap::new();
        for &s in &config.insert_mae_after {
            let c = config.stage_channels[s - 1];
            mae.insert(
                s,
                MaeParams::register(store, &format!("stage{s}.mae"), c, config.drop_granularity, seed)?,
            );
        }
        let mut bme = BTreeMap::new();
        for &s in &config.insert_bme_after {
            let c = config.stage_channels[s - 1];
            bme.insert(
                s,
                BmeParams::register(
                    store,
                    &format!("stage{s}.bme"),
                    c,
                    config.motion_manner,
                    config.motion_direction,
                    seed,
                )?,
            );
        }
        let classifier = Affine::register(
            store,
            "classifier",
            config.embedding_dim(),
            config.num_identities,
            WeightInit::Glorot,
            seed,
        )?;
        Ok(Self {
            config,
            stages,
            mae,
            bme,
            classifier,
        })
    }

    pub fn mae_params(&self, stage: usize) -> Option<&MaeParams> {
        self.mae.get(&stage)
    }

    pub fn bme_params(&self, stage: usize) -> Option<&BmeParams> {
        self.bme.get(&stage)
    }

    /// Encodes one clip `[T,H,W,3]`.
    pub fn forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        frames: Var,
    ) -> Result<ClipOutput> {
        let s = tape.shape(frames).to_vec();
        if s.len() != 4 || s[3] != 3 {
            return Err(dim_err!("expected frames [T,H,W,3], got {:?}", s));
        }
        if (s[1], s[2]) != self.config.input_hw {
            return Err(config_err!(
                "frames are {}x{}, network expects {}x{}",
                s[1],
                s[2],
                self.config.input_hw.0,
                self.config.input_hw.1
            ));
        }
        let mut f = frames;
        let mut stage_features = Vec::with_capacity(NUM_STAGES);
        let mut traces = Vec::new();
        for (i, conv) in self.stages.iter().enumerate() {
            let stage = i + 1;
            f = conv.apply(tape, store, f)?;
            if stage <= DOWNSAMPLING_STAGES {
                f = tape.avg_pool2(f)?;
            }
            let appearance = match self.mae.get(&stage) {
                Some(p) => Some(mae_forward_traced(tape, store, p, f)?),
                None => None,
            };
            let motion = match self.bme.get(&stage) {
                Some(p) => Some(motion_maps(tape, store, p, f)?),
                None => None,
            };
            if appearance.is_some() || motion.is_some() {
                if let Some((fa, _)) = &appearance {
                    f = tape.add(f, *fa)?;
                }
                if let Some(m) = &motion {
                    f = tape.add(f, m.fused)?;
                }
                traces.push(StageTrace {
                    stage,
                    appearance: appearance.map(|(_, g)| g),
                    motion,
                });
            }
            stage_features.push(f);
        }
        // GAP over space, then TAP over time.
        let spatial = tape.reduce_mean(f, &[1, 2])?;
        let embedding = tape.reduce_mean(spatial, &[0])?;
        let row = tape.reshape(embedding, &[1, self.config.embedding_dim()])?;
        let logits = self.classifier.apply(tape, store, row, false)?;
        let logits = tape.reshape(logits, &[self.config.num_identities])?;
        Ok(ClipOutput {
            embedding,
            logits,
            stage_features,
            traces,
        })
    }
}

/// Runs one clip without keeping the tape, returning the per-stage features
/// and the embedding.
pub fn encode_clip<R: Real>(
    net: &LstrlNet,
    store: &ParamStore<R>,
    frames: &Tensor<R>,
) -> Result<(Vec<Tensor<R>>, VideoEmbedding<R>)> {
    let mut tape = Tape::new();
    let x = tape.constant(frames.clone());
    let out = net.forward(&mut tape, store, x)?;
    let stages = out
        .stage_features
        .iter()
        .map(|&v| tape.value(v).clone())
        .collect();
    Ok((
        stages,
        VideoEmbedding {
            vector: tape.value(out.embedding).clone(),
            identity_logits: tape.value(out.logits).clone(),
        },
    ))
}

/// Analytic model size and per-clip multiply-accumulate count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub params: usize,
    pub macs: u64,
}

/// Counts parameters and MACs for a clip of `frames` frames. MACs cover every
/// multiply of the convolutions, 1x1 layers, attention products and motion
/// products; poolings and normalizations are not counted.
pub fn count_params_and_macs(config: &BackboneConfig, frames: usize) -> Result<CostReport> {
    config.validate()?;
    let t = frames as u64;
    let mut params = 0usize;
    let mut macs = 0u64;
    let mut c_in = 3usize;
    for (i, &c) in config.stage_channels.iter().enumerate() {
        let stage = i + 1;
        let (h_in, w_in) = config.stage_hw(stage - 1);
        params += 9 * c_in * c + c;
        macs += t * (h_in * w_in * 9 * c_in * c) as u64;
        let (h, w) = config.stage_hw(stage);
        let hw = (h * w) as u64;
        let n = t * hw;
        let c64 = c as u64;
        if config.insert_mae_after.contains(&stage) {
            params += MaeParams::param_count(c, config.drop_granularity);
            let q = c64 / 4;
            let rows = [n, hw, t, 1];
            let enabled: Vec<usize> = (0..4)
                .filter(|&i| config.drop_granularity.map_or(true, |g| g.index() != i))
                .collect();
            macs += n * c64 * q;
            for &i in &enabled {
                macs += 2 * rows[i] * n * q;
            }
            macs += n * (enabled.len() as u64 * q) * c64;
        }
        if config.insert_bme_after.contains(&stage) {
            params += BmeParams::param_count(c, config.motion_direction);
            let half = c64 / 2;
            let directions: u64 = match config.motion_direction {
                MotionDirection::Bi => 2,
                MotionDirection::Single => 1,
            };
            macs += n * c64 * half; // psi
            match config.motion_manner {
                MotionManner::Global => {
                    macs += t * c64 * half; // phi on the global vector
                    macs += directions * n * half;
                }
                MotionManner::Local => {
                    macs += n * c64 * half;
                    macs += directions * t * 2 * hw * hw * half;
                }
            }
            macs += n * (directions * half) * c64;
        }
        c_in = c;
    }
    let k = config.num_identities;
    params += c_in * k + k;
    macs += (c_in * k) as u64;
    Ok(CostReport { params, macs })
}

//! Synthetic walking-person generator.
//!
//! Each identity is a two-colour figure (torso over legs) on a grey
//! background with a small bright blob that travels across the frame at an
//! identity-specific constant velocity, wrapping at the borders. Identities
//! `2j` and `2j+1` for `j < confusable_pairs` share every colour and move in
//! opposite directions, so only the order of the frames tells them apart.
//! Each tracklet starts the blob at a random point of the displacement grid
//! and is seen through one camera, which scales the colour channels and adds
//! Gaussian noise. All tracklets of a confusable pair start on one shared
//! line of the grid and differ only in their phase along it, so the blob
//! positions themselves carry no identity information within the pair.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{frame_file_name, tracklet_dir, SPLITS};
use crate::error::{config_err, data_err, Result};
use crate::tensor::io::save_tensor;
use crate::Tensor;

const BACKGROUND: f32 = 0.45;
/// The moving marker has the same colour for every identity.
const MARKER: [f32; 3] = [0.95, 0.95, 0.95];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub tracklets_per_identity: usize,
    pub frames_per_tracklet: usize,
    pub frame_hw: (usize, usize),
    /// Number of same-appearance, opposite-motion identity pairs.
    pub confusable_pairs: usize,
    pub num_cameras: usize,
    /// Side of the square blob in pixels.
    pub blob_size: usize,
    /// Blob speed along the vertical axis in pixels per frame.
    pub blob_speed: f64,
    /// Horizontal speed as a fraction of the vertical speed.
    pub horizontal_ratio: f64,
    /// Per-channel camera gains are drawn from this range.
    pub camera_gain: (f64, f64),
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_identities: 20,
            tracklets_per_identity: 4,
            frames_per_tracklet: 16,
            frame_hw: (64, 32),
            confusable_pairs: 5,
            num_cameras: 2,
            blob_size: 8,
            blob_speed: 2.0,
            horizontal_ratio: 0.5,
            camera_gain: (0.85, 1.15),
            noise_std: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(config_err!("synthetic data needs at least 2 identities"));
        }
        if self.confusable_pairs == 0 || 2 * self.confusable_pairs > self.num_identities {
            return Err(config_err!(
                "confusable_pairs must be in 1..={}, got {}",
                self.num_identities / 2,
                self.confusable_pairs
            ));
        }
        if self.tracklets_per_identity < 3 {
            return Err(config_err!(
                "tracklets_per_identity must be at least 3 (train, query, gallery), got {}",
                self.tracklets_per_identity
            ));
        }
        if self.frames_per_tracklet == 0 {
            return Err(config_err!("frames_per_tracklet must be positive"));
        }
        if self.num_cameras < 2 {
            return Err(config_err!("num_cameras must be at least 2"));
        }
        let (h, w) = self.frame_hw;
        if h < 8 || w < 8 {
            return Err(config_err!("frames must be at least 8x8, got {h}x{w}"));
        }
        if self.blob_size == 0 || self.blob_size > h.min(w) {
            return Err(config_err!("blob_size must be in 1..={}", h.min(w)));
        }
        let (lo, hi) = self.camera_gain;
        if !(lo > 0.0 && lo <= hi) {
            return Err(config_err!("camera_gain range must satisfy 0 < lo <= hi"));
        }
        if !(self.noise_std >= 0.0) || !self.blob_speed.is_finite() || !self.horizontal_ratio.is_finite() {
            return Err(config_err!("noise_std must be >= 0 and blob speeds finite"));
        }
        Ok(())
    }

    /// Split of tracklet `k` of an identity: all but the last two train.
    pub fn split_of(&self, k: usize) -> &'static str {
        let n = self.tracklets_per_identity;
        if k + 2 < n {
            SPLITS[0]
        } else if k + 2 == n {
            SPLITS[1]
        } else {
            SPLITS[2]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityStyle {
    pub torso: [f32; 3],
    pub legs: [f32; 3],
    pub blob: [f32; 3],
    /// `(dy, dx)` in pixels per frame.
    pub velocity: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackletLayout {
    pub identity: usize,
    pub index: usize,
    pub camera: usize,
    /// Blob top-left corner at frame 0.
    pub start: (f64, f64),
    pub gain: [f32; 3],
}

fn colour(rng: &mut impl Rng) -> [f32; 3] {
    [
        rng.gen_range(0.05..0.95),
        rng.gen_range(0.05..0.95),
        rng.gen_range(0.05..0.95),
    ]
}

fn sign(rng: &mut impl Rng) -> f64 {
    if rng.gen_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

/// Draws identity appearances/motions, camera gains and tracklet layouts.
pub fn draw_layouts(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (Vec<IdentityStyle>, Vec<TrackletLayout>) {
    let mut ids = Vec::with_capacity(cfg.num_identities);
    while ids.len() < cfg.num_identities {
        let base = IdentityStyle {
            torso: colour(rng),
            legs: colour(rng),
            blob: MARKER,
            velocity: (
                sign(rng) * cfg.blob_speed,
                sign(rng) * cfg.blob_speed * cfg.horizontal_ratio,
            ),
        };
        if ids.len() < 2 * cfg.confusable_pairs {
            let mirrored = IdentityStyle {
                velocity: (-base.velocity.0, -base.velocity.1),
                ..base.clone()
            };
            ids.push(base);
            ids.push(mirrored);
        } else {
            ids.push(base);
        }
    }
    let (lo, hi) = cfg.camera_gain;
    let cameras: Vec<[f32; 3]> = (0..cfg.num_cameras)
        .map(|_| {
            let mut g = [0f32; 3];
            for v in &mut g {
                *v = if hi > lo { rng.gen_range(lo..hi) } else { lo } as f32;
            }
            g
        })
        .collect();
    let (h, w) = cfg.frame_hw;
    let step = (cfg.blob_speed.abs(), (cfg.blob_speed * cfg.horizontal_ratio).abs());
    let mut tracklets = Vec::new();
    let mut pair_line = (0.0, 0.0);
    for identity in 0..cfg.num_identities {
        let paired = identity < 2 * cfg.confusable_pairs;
        if paired && identity % 2 == 0 {
            pair_line = (lattice_start(rng, h, step.0), lattice_start(rng, w, step.1));
        }
        for index in 0..cfg.tracklets_per_identity {
            let camera = index % cfg.num_cameras;
            let start = if paired {
                let slots = line_slots(h, w, step);
                let k = rng.gen_range(0..slots) as f64;
                let v = ids[identity].velocity;
                (pair_line.0 + k * v.0, pair_line.1 + k * v.1)
            } else {
                (lattice_start(rng, h, step.0), lattice_start(rng, w, step.1))
            };
            tracklets.push(TrackletLayout {
                identity,
                index,
                camera,
                start,
                gain: cameras[camera],
            });
        }
    }
    (ids, tracklets)
}

/// Number of distinct phases along a wrapped line of per-frame steps `step`.
fn line_slots(h: usize, w: usize, step: (f64, f64)) -> usize {
    let along = |extent: usize, s: f64| if s > 0.0 { (extent as f64 / s).floor() as usize } else { 1 };
    along(h, step.0).max(along(w, step.1)).max(1)
}

/// A start coordinate on the grid of per-frame displacements, so every
/// tracklet visits the same set of blob positions and only the order of the
/// visits differs between identities of a confusable pair.
fn lattice_start(rng: &mut impl Rng, extent: usize, step: f64) -> f64 {
    let step = step.abs();
    if step == 0.0 {
        return rng.gen_range(0.0..extent as f64);
    }
    let slots = ((extent as f64 / step).floor() as usize).max(1);
    rng.gen_range(0..slots) as f64 * step
}

/// Blob top-left corner at `frame`, wrapped into the frame.
pub fn blob_position(id: &IdentityStyle, tr: &TrackletLayout, frame: usize, hw: (usize, usize)) -> (usize, usize) {
    let y = (tr.start.0 + id.velocity.0 * frame as f64).rem_euclid(hw.0 as f64);
    let x = (tr.start.1 + id.velocity.1 * frame as f64).rem_euclid(hw.1 as f64);
    ((y.floor() as usize) % hw.0, (x.floor() as usize) % hw.1)
}

/// Noise-free frame `[H,W,3]` before the camera gain.
pub fn render_frame(id: &IdentityStyle, tr: &TrackletLayout, frame: usize, cfg: &SynthConfig) -> Tensor<f32> {
    let (h, w) = cfg.frame_hw;
    let torso_rows = (h * 15 / 100)..(h / 2);
    let leg_rows = (h / 2)..(h * 95 / 100);
    let cols = (w / 4)..(w * 3 / 4);
    let (by, bx) = blob_position(id, tr, frame, cfg.frame_hw);
    let b = cfg.blob_size;
    let in_blob = |y: usize, x: usize| (y + h - by) % h < b && (x + w - bx) % w < b;
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let px = if in_blob(y, x) {
                id.blob
            } else if cols.contains(&x) && torso_rows.contains(&y) {
                id.torso
            } else if cols.contains(&x) && leg_rows.contains(&y) {
                id.legs
            } else {
                [BACKGROUND; 3]
            };
            data.extend_from_slice(&px);
        }
    }
    Tensor::new(vec![h, w, 3], data).expect("frame shape")
}

/// Writes one frame file.
pub fn write_frame(path: &Path, frame: &Tensor<f32>) -> Result<()> {
    save_tensor(path, frame)
}

fn is_non_empty_dir(p: &Path) -> Result<bool> {
    Ok(p.is_dir() && fs::read_dir(p)?.next().is_some())
}

/// Renders the whole dataset under `root`. A non-empty `root` is refused
/// unless `force` is set, in which case the split directories are replaced.
pub fn generate_synthetic(cfg: &SynthConfig, root: &Path, force: bool) -> Result<usize> {
    cfg.validate()?;
    if is_non_empty_dir(root)? {
        if !force {
            return Err(data_err!(
                "target directory {} is not empty (use --force to overwrite)",
                root.display()
            ));
        }
        for split in SPLITS {
            let d = root.join(split);
            if d.exists() {
                fs::remove_dir_all(&d)?;
            }
        }
    }
    fs::create_dir_all(root)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (ids, tracklets) = draw_layouts(cfg, &mut rng);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| config_err!("noise_std: {e}"))?;
    for tr in &tracklets {
        let dir = tracklet_dir(
            root,
            cfg.split_of(tr.index),
            tr.identity as u32,
            tr.camera as u32,
            tr.index as u32,
        );
        fs::create_dir_all(&dir)?;
        for f in 0..cfg.frames_per_tracklet {
            let mut frame = render_frame(&ids[tr.identity], tr, f, cfg);
            for px in frame.data_mut().chunks_exact_mut(3) {
                for c in 0..3 {
                    let v = px[c] * tr.gain[c] + noise.sample(&mut rng) as f32;
                    px[c] = v.clamp(0.0, 1.0);
                }
            }
            write_frame(&dir.join(frame_file_name(f)), &frame)?;
        }
    }
    Ok(tracklets.len())
}

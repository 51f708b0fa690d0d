//! Tracklet datasets: on-disk layout, clip sampling, identity-balanced
//! batches, augmentation and the synthetic generator.
//!
//! Layout: `root/<split>/<identity>/<camera>/<tracklet>/frame_00000.lst`,
//! each frame a portable `[H,W,3]` tensor with values in `[0,1]`.

mod augment;
mod sampling;
mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{data_err, Result};
use crate::tensor::io::load_tensor;
use crate::Tensor;

pub use augment::{augment, crop_with_offset, erase_rect, AugmentConfig, CROP_PAD};
pub use sampling::{pk_batch, rrs_sample, BatchShape, ClipRef, SampleMode};
pub use synth::{
    blob_position, draw_layouts, generate_synthetic, render_frame, write_frame, IdentityStyle,
    SynthConfig, TrackletLayout,
};

/// Retrieval split names.
pub const SPLITS: [&str; 3] = ["train", "query", "gallery"];

/// One person under one camera.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tracklet {
    pub identity_id: u32,
    pub camera_id: u32,
    pub tracklet_id: u32,
    pub frame_paths: Vec<PathBuf>,
}

impl Tracklet {
    pub fn len(&self) -> usize {
        self.frame_paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_paths.is_empty()
    }
}

/// Formats the frame file name for index `i`.
pub fn frame_file_name(i: usize) -> String {
    format!("frame_{i:05}.lst")
}

/// Path of a tracklet directory inside a dataset root.
pub fn tracklet_dir(root: &Path, split: &str, identity: u32, camera: u32, tracklet: u32) -> PathBuf {
    root.join(split)
        .join(format!("{identity:04}"))
        .join(format!("{camera:02}"))
        .join(format!("{tracklet:03}"))
}

fn numbered_subdirs(dir: &Path) -> Result<Vec<(u32, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let name = entry.file_name();
        let name = name.to_string_lossy();
        let n: u32 = name
            .parse()
            .map_err(|_| data_err!("unexpected directory {:?} in {}", name, dir.display()))?;
        out.push((n, entry.path()));
    }
    out.sort();
    Ok(out)
}

/// Enumerates the tracklets of one split, ordered by (identity, camera, tracklet).
pub fn list_tracklets(root: &Path, split: &str) -> Result<Vec<Tracklet>> {
    let split_dir = root.join(split);
    if !split_dir.is_dir() {
        return Err(data_err!("missing split directory {}", split_dir.display()));
    }
    let mut out = Vec::new();
    for (identity_id, id_dir) in numbered_subdirs(&split_dir)? {
        for (camera_id, cam_dir) in numbered_subdirs(&id_dir)? {
            for (tracklet_id, tr_dir) in numbered_subdirs(&cam_dir)? {
                let mut frames: Vec<PathBuf> = fs::read_dir(&tr_dir)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| {
                        p.file_name()
                            .and_then(|n| n.to_str())
                            .is_some_and(|n| n.starts_with("frame_") && n.ends_with(".lst"))
                    })
                    .collect();
                frames.sort();
                if frames.is_empty() {
                    return Err(data_err!("tracklet {} has no frames", tr_dir.display()));
                }
                out.push(Tracklet {
                    identity_id,
                    camera_id,
                    tracklet_id,
                    frame_paths: frames,
                });
            }
        }
    }
    Ok(out)
}

/// A split with every frame loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub split: String,
    pub tracklets: Vec<Tracklet>,
    /// `frames[i][j]` is frame `j` of tracklet `i`, `[H,W,3]`.
    pub frames: Vec<Vec<Tensor<f32>>>,
    pub frame_hw: (usize, usize),
}

impl Dataset {
    pub fn load(root: &Path, split: &str) -> Result<Self> {
        let tracklets = list_tracklets(root, split)?;
        if tracklets.is_empty() {
            return Err(data_err!("split {split} of {} is empty", root.display()));
        }
        let mut frames = Vec::with_capacity(tracklets.len());
        let mut frame_hw = None;
        for t in &tracklets {
            let mut fs = Vec::with_capacity(t.len());
            for p in &t.frame_paths {
                let f: Tensor<f32> = load_tensor(p)?.into_real();
                let s = f.shape();
                if s.len() != 3 || s[2] != 3 {
                    return Err(data_err!("frame {} has shape {:?}, expected [H,W,3]", p.display(), s));
                }
                match frame_hw {
                    None => frame_hw = Some((s[0], s[1])),
                    Some(hw) if hw != (s[0], s[1]) => {
                        return Err(data_err!(
                            "frame {} is {}x{}, others are {}x{}",
                            p.display(),
                            s[0],
                            s[1],
                            hw.0,
                            hw.1
                        ))
                    }
                    _ => {}
                }
                fs.push(f);
            }
            frames.push(fs);
        }
        Ok(Self {
            split: split.to_string(),
            tracklets,
            frames,
            frame_hw: frame_hw.expect("non-empty split"),
        })
    }

    pub fn len(&self) -> usize {
        self.tracklets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracklets.is_empty()
    }

    /// Tracklet indices grouped by identity, identities ascending.
    pub fn by_identity(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut m: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, t) in self.tracklets.iter().enumerate() {
            m.entry(t.identity_id).or_default().push(i);
        }
        m
    }

    /// Dense class labels `0..n` assigned to identities in ascending order.
    pub fn label_map(&self) -> BTreeMap<u32, usize> {
        self.by_identity()
            .keys()
            .enumerate()
            .map(|(i, &id)| (id, i))
            .collect()
    }

    /// Stacks the selected frames of tracklet `index` into `[T,H,W,3]`.
    pub fn clip(&self, index: usize, frame_indices: &[usize]) -> Result<Tensor<f32>> {
        let frames = &self.frames[index];
        let picked: Vec<Tensor<f32>> = frame_indices
            .iter()
            .map(|&j| {
                frames.get(j).cloned().ok_or_else(|| {
                    data_err!("frame {j} out of range for tracklet of length {}", frames.len())
                })
            })
            .collect::<Result<_>>()?;
        Tensor::stack(&picked)
    }

    /// Per-channel mean over every loaded frame.
    pub fn channel_mean(&self) -> [f32; 3] {
        let mut sum = [0f64; 3];
        let mut n = 0usize;
        for f in self.frames.iter().flatten() {
            for px in f.data().chunks_exact(3) {
                for c in 0..3 {
                    sum[c] += px[c] as f64;
                }
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        [(sum[0] / n) as f32, (sum[1] / n) as f32, (sum[2] / n) as f32]
    }
}

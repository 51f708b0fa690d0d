//! Restricted random sampling and identity-balanced batches.

use rand::seq::SliceRandom;
use rand::Rng;

use super::Dataset;
use crate::error::{config_err, data_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// One uniformly random frame per chunk.
    Train,
    /// The middle frame of each chunk.
    Eval,
}

/// Picks `t` frame indices from a tracklet of `len` frames.
///
/// Chunk `i` covers `[floor(i*len/t), floor((i+1)*len/t))`, so chunk sizes
/// differ by at most one. Tracklets shorter than `t` repeat cyclically.
pub fn rrs_sample(len: usize, t: usize, mode: SampleMode, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if t == 0 {
        return Err(config_err!("frames per clip must be positive"));
    }
    if len == 0 {
        return Err(data_err!("cannot sample from an empty tracklet"));
    }
    if len < t {
        return Ok((0..t).map(|i| i % len).collect());
    }
    Ok((0..t)
        .map(|i| {
            let start = i * len / t;
            let end = (i + 1) * len / t;
            match mode {
                SampleMode::Eval => start + (end - start) / 2,
                SampleMode::Train => rng.gen_range(start..end),
            }
        })
        .collect())
}

/// Batch geometry: `p` identities with `k` clips of `t` frames each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchShape {
    pub p: usize,
    pub k: usize,
    pub t: usize,
    pub frame_hw: (usize, usize),
}

impl Default for BatchShape {
    fn default() -> Self {
        Self {
            p: 8,
            k: 4,
            t: 8,
            frame_hw: (64, 32),
        }
    }
}

impl BatchShape {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.k == 0 {
            return Err(config_err!("batch needs p >= 1 and k >= 1, got p={} k={}", self.p, self.k));
        }
        if self.t < 2 {
            return Err(config_err!("frames per clip must be at least 2, got {}", self.t));
        }
        if self.frame_hw.0 == 0 || self.frame_hw.1 == 0 {
            return Err(config_err!("frame size must be positive"));
        }
        Ok(())
    }

    pub fn clips(&self) -> usize {
        self.p * self.k
    }
}

/// A sampled clip: which tracklet, which of its frames, and its class label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipRef {
    pub tracklet: usize,
    pub frames: Vec<usize>,
    pub label: usize,
}

/// Draws `p` distinct identities and `k` clips for each. Tracklets are drawn
/// without replacement when an identity has at least `k`, otherwise with
/// replacement; every clip gets its own train-mode frame draw.
pub fn pk_batch(dataset: &Dataset, shape: &BatchShape, rng: &mut impl Rng) -> Result<Vec<ClipRef>> {
    shape.validate()?;
    let groups: Vec<(u32, Vec<usize>)> = dataset.by_identity().into_iter().collect();
    if groups.len() < shape.p {
        return Err(data_err!(
            "batch needs {} identities, split {} has {}",
            shape.p,
            dataset.split,
            groups.len()
        ));
    }
    let labels = dataset.label_map();
    let chosen: Vec<&(u32, Vec<usize>)> = groups.choose_multiple(rng, shape.p).collect();
    let mut out = Vec::with_capacity(shape.clips());
    for (identity, members) in chosen {
        let picks: Vec<usize> = if members.len() >= shape.k {
            members.choose_multiple(rng, shape.k).copied().collect()
        } else {
            (0..shape.k)
                .map(|_| members[rng.gen_range(0..members.len())])
                .collect()
        };
        for tracklet in picks {
            let frames = rrs_sample(dataset.tracklets[tracklet].len(), shape.t, SampleMode::Train, rng)?;
            out.push(ClipRef {
                tracklet,
                frames,
                label: labels[identity],
            });
        }
    }
    Ok(out)
}

//! Bi-direction motion estimator.
//!
//! For each frame `t`, the frame's global feature (spatial mean) is projected
//! by `phi` and multiplied channelwise against the `psi` projection of every
//! position of the next frame (forward motion) and of the previous frame
//! (backward motion). The two maps are concatenated and fused by `upsilon`
//! with ReLU. Temporal boundaries replicate the edge frame.
//!
//! Two ablation variants are available: a local-to-local manner that pairs
//! every position against every neighbour position, and a single-direction
//! variant that keeps only the forward map.

use std::fmt;
use std::str::FromStr;

use crate::error::{config_err, dim_err, Error, Result};
use crate::features::ClipDims;
use crate::layers::{Affine, WeightInit};
use crate::tensor::{count, ParamStore, Real, Tape, Var};

/// Label under which the estimation (pairing) multiplies are counted.
pub const PAIRING_SCOPE: &str = "bme.pairing";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MotionManner {
    /// Frame-global vector against neighbour positions.
    #[default]
    Global,
    /// Every position against every neighbour position.
    Local,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MotionDirection {
    Single,
    #[default]
    Bi,
}

impl fmt::Display for MotionManner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MotionManner::Global => "global",
            MotionManner::Local => "local",
        })
    }
}

impl FromStr for MotionManner {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "global" => Ok(MotionManner::Global),
            "local" => Ok(MotionManner::Local),
            other => Err(config_err!("unknown motion manner {other:?}, expected global|local")),
        }
    }
}

impl fmt::Display for MotionDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MotionDirection::Single => "single",
            MotionDirection::Bi => "bi",
        })
    }
}

impl FromStr for MotionDirection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "single" => Ok(MotionDirection::Single),
            "bi" => Ok(MotionDirection::Bi),
            other => Err(config_err!("unknown motion direction {other:?}, expected single|bi")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BmeParams {
    /// `C -> C/2`, applied to the frame-global feature.
    pub phi: Affine,
    /// `C -> C/2`, applied to neighbour positions.
    pub psi: Affine,
    /// `(C or C/2) -> C` with ReLU, zero-initialized.
    pub upsilon: Affine,
    pub channels: usize,
    pub manner: MotionManner,
    pub direction: MotionDirection,
}

impl BmeParams {
    pub fn register<R: Real>(
        store: &mut ParamStore<R>,
        prefix: &str,
        channels: usize,
        manner: MotionManner,
        direction: MotionDirection,
        seed: u64,
    ) -> Result<Self> {
        if channels == 0 || channels % 2 != 0 {
            return Err(config_err!(
                "motion estimator needs an even channel count, got {channels}"
            ));
        }
        let half = channels / 2;
        let fused_in = match direction {
            MotionDirection::Bi => channels,
            MotionDirection::Single => half,
        };
        Ok(Self {
            phi: Affine::register(store, &format!("{prefix}.phi"), channels, half, WeightInit::Glorot, seed)?,
            psi: Affine::register(store, &format!("{prefix}.psi"), channels, half, WeightInit::Glorot, seed)?,
            upsilon: Affine::register(
                store,
                &format!("{prefix}.upsilon"),
                fused_in,
                channels,
                WeightInit::Zeros,
                seed,
            )?,
            channels,
            manner,
            direction,
        })
    }

    pub fn param_count(channels: usize, direction: MotionDirection) -> usize {
        let half = channels / 2;
        let fused_in = match direction {
            MotionDirection::Bi => channels,
            MotionDirection::Single => half,
        };
        2 * (channels * half + half) + (fused_in * channels + channels)
    }
}

/// Forward/backward motion maps and their fusion, as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct MotionPair {
    /// `[T,H,W,C/2]` (or `[H,W,C/2]` for a single frame).
    pub m_fwd: Var,
    /// Absent in the single-direction variant.
    pub m_bwd: Option<Var>,
    /// `[T,H,W,C]`, non-negative.
    pub fused: Var,
}

/// Spatial mean of one frame: `[H,W,C] -> [1,1,C]`.
pub fn frame_global<R: Real>(tape: &mut Tape<R>, f_t: Var) -> Result<Var> {
    let s = tape.shape(f_t).to_vec();
    if s.len() != 3 {
        return Err(dim_err!("frame_global expects [H,W,C], got {:?}", s));
    }
    let g = tape.reduce_mean(f_t, &[0, 1])?;
    tape.reshape(g, &[1, 1, s[2]])
}

/// Global-to-local motion of one frame against one neighbour:
/// `phi(GAP(F_t)) ⊙ psi(F_nbr)`, `[H,W,C] -> [H,W,C/2]`.
pub fn estimate_motion<R: Real>(
    tape: &mut Tape<R>,
    store: &ParamStore<R>,
    p: &BmeParams,
    f_t: Var,
    f_nbr: Var,
) -> Result<Var> {
    let (st, sn) = (tape.shape(f_t).to_vec(), tape.shape(f_nbr).to_vec());
    if st != sn || st.len() != 3 {
        return Err(dim_err!(
            "estimate_motion expects equal [H,W,C] frames, got {:?} and {:?}",
            st,
            sn
        ));
    }
    if st[2] % 2 != 0 {
        return Err(config_err!("motion estimation needs even channels, got {}", st[2]));
    }
    let g = frame_global(tape, f_t)?;
    let pg = p.phi.apply(tape, store, g, false)?;
    let pl = p.psi.apply(tape, store, f_nbr, false)?;
    let _scope = count::scope(PAIRING_SCOPE);
    tape.broadcast_hadamard(pg, pl)
}

/// Successor and predecessor of every frame, replicating the edges.
pub fn neighbor_indices(t: usize) -> (Vec<usize>, Vec<usize>) {
    let next = (0..t).map(|i| (i + 1).min(t - 1)).collect();
    let prev = (0..t).map(|i| i.saturating_sub(1)).collect();
    (next, prev)
}

/// Motion maps for a whole clip `[T,H,W,C]`.
pub fn motion_maps<R: Real>(
    tape: &mut Tape<R>,
    store: &ParamStore<R>,
    p: &BmeParams,
    f: Var,
) -> Result<MotionPair> {
    let dims = ClipDims::of(tape.shape(f))?;
    if dims.c != p.channels {
        return Err(config_err!(
            "motion estimator built for {} channels, got {}",
            p.channels,
            dims.c
        ));
    }
    let (next, prev) = neighbor_indices(dims.t);
    let keys = p.psi.apply(tape, store, f, false)?;
    let (m_fwd, m_bwd) = match p.manner {
        MotionManner::Global => {
            let g = tape.reduce_mean(f, &[1, 2])?;
            let g = tape.reshape(g, &[dims.t, 1, 1, dims.c])?;
            let pg = p.phi.apply(tape, store, g, false)?;
            let fwd_keys = tape.gather_frames(keys, &next)?;
            let m_fwd = {
                let _scope = count::scope(PAIRING_SCOPE);
                tape.broadcast_hadamard(pg, fwd_keys)?
            };
            let m_bwd = match p.direction {
                MotionDirection::Bi => {
                    let bwd_keys = tape.gather_frames(keys, &prev)?;
                    let _scope = count::scope(PAIRING_SCOPE);
                    Some(tape.broadcast_hadamard(pg, bwd_keys)?)
                }
                MotionDirection::Single => None,
            };
            (m_fwd, m_bwd)
        }
        MotionManner::Local => {
            let queries = p.phi.apply(tape, store, f, false)?;
            let m_fwd = local_motion(tape, dims, queries, keys, &next)?;
            let m_bwd = match p.direction {
                MotionDirection::Bi => Some(local_motion(tape, dims, queries, keys, &prev)?),
                MotionDirection::Single => None,
            };
            (m_fwd, m_bwd)
        }
    };
    let parts: Vec<Var> = std::iter::once(m_fwd).chain(m_bwd).collect();
    let cat = tape.concat_channels(&parts)?;
    let fused = p.upsilon.apply(tape, store, cat, true)?;
    Ok(MotionPair {
        m_fwd,
        m_bwd,
        fused,
    })
}

/// Local-to-local pairing: for each frame, every query position attends over
/// all positions of its neighbour, `softmax(Q K^T) K`.
fn local_motion<R: Real>(
    tape: &mut Tape<R>,
    dims: ClipDims,
    queries: Var,
    keys: Var,
    neighbor: &[usize],
) -> Result<Var> {
    let half = dims.c / 2;
    let mut frames = Vec::with_capacity(dims.t);
    for (t, &n) in neighbor.iter().enumerate() {
        let q = tape.gather_frames(queries, &[t])?;
        let q = tape.reshape(q, &[dims.hw(), half])?;
        let k = tape.gather_frames(keys, &[n])?;
        let k = tape.reshape(k, &[dims.hw(), half])?;
        let kt = tape.transpose(k)?;
        let m = {
            let _scope = count::scope(PAIRING_SCOPE);
            let affinity = tape.matmul(q, kt)?;
            let weights = tape.softmax_rows(affinity)?;
            tape.matmul(weights, k)?
        };
        frames.push(tape.reshape(m, &[1, dims.h, dims.w, half])?);
    }
    tape.concat(&frames, 0)
}

/// `F^m = upsilon([M^f, M^b])` for every frame, stacked to `[T,H,W,C]`.
pub fn bme_forward<R: Real>(
    tape: &mut Tape<R>,
    store: &ParamStore<R>,
    p: &BmeParams,
    f: Var,
) -> Result<Var> {
    Ok(motion_maps(tape, store, p, f)?.fused)
}

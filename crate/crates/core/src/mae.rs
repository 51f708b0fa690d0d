//! Multi-granularity appearance extractor.
//!
//! A 1x1 layer reduces `F [T,H,W,C]` to a quarter of its channels, giving the
//! per-position features `X1 [THW, C/4]`. Pooling `X1` yields three coarser
//! granularities: per spatial position over time (`X2 [HW, C/4]`), per frame
//! (`X3 [T, C/4]`) and per clip (`X4 [1, C/4]`). Each granularity attends over
//! all positions, `D_i = softmax_rows(X_i X1^T)`, aggregates `D_i X1`, and is
//! broadcast back to `[THW, C/4]` along the pooled axes. The four aggregates
//! are concatenated along channels and fused by a second 1x1 layer.

use std::fmt;
use std::str::FromStr;

use crate::error::{config_err, Error, Result};
use crate::features::ClipDims;
use crate::layers::{Affine, WeightInit};
use crate::tensor::{ParamStore, Real, Tape, Var};

/// The four pooling levels, `A1`..`A4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Granularity {
    /// Every position of every frame.
    Local,
    /// Each spatial position, pooled over time.
    Spatial,
    /// Each frame, pooled over space.
    Frame,
    /// The whole clip.
    Clip,
}

impl Granularity {
    pub const ALL: [Granularity; 4] = [
        Granularity::Local,
        Granularity::Spatial,
        Granularity::Frame,
        Granularity::Clip,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "A{}", self.index() + 1)
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A1" => Ok(Granularity::Local),
            "A2" => Ok(Granularity::Spatial),
            "A3" => Ok(Granularity::Frame),
            "A4" => Ok(Granularity::Clip),
            other => Err(config_err!("unknown granularity {other:?}, expected A1..A4")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaeParams {
    /// `C -> C/4`
    pub omega1: Affine,
    /// `(#enabled · C/4) -> C`, zero-initialized.
    pub omega2: Affine,
    pub channels: usize,
    pub enabled: [bool; 4],
}

impl MaeParams {
    pub fn register<R: Real>(
        store: &mut ParamStore<R>,
        prefix: &str,
        channels: usize,
        drop: Option<Granularity>,
        seed: u64,
    ) -> Result<Self> {
        if channels == 0 || channels % 4 != 0 {
            return Err(config_err!(
                "appearance extractor needs channels divisible by 4, got {channels}"
            ));
        }
        let mut enabled = [true; 4];
        if let Some(g) = drop {
            enabled[g.index()] = false;
        }
        let quarter = channels / 4;
        let fused = enabled.iter().filter(|&&e| e).count() * quarter;
        let omega1 = Affine::register(
            store,
            &format!("{prefix}.omega1"),
            channels,
            quarter,
            WeightInit::Glorot,
            seed,
        )?;
        let omega2 = Affine::register(
            store,
            &format!("{prefix}.omega2"),
            fused,
            channels,
            WeightInit::Zeros,
            seed,
        )?;
        Ok(Self {
            omega1,
            omega2,
            channels,
            enabled,
        })
    }

    /// Closed-form parameter count of the block at `channels`.
    pub fn param_count(channels: usize, drop: Option<Granularity>) -> usize {
        let quarter = channels / 4;
        let branches = if drop.is_some() { 3 } else { 4 };
        (channels * quarter + quarter) + (branches * quarter * channels + channels)
    }
}

/// The pooled features `X_i`, their dependency matrices `D_i` and the
/// extended aggregates `A_i`, as tape handles.
#[derive(Clone, Debug)]
pub struct GranularitySet {
    pub dims: ClipDims,
    pub x: [Var; 4],
    pub d: [Option<Var>; 4],
    pub a: [Option<Var>; 4],
}

/// Reduces channels with `omega1` and pools the result into `X1..X4`.
pub fn build_granularities<R: Real>(
    tape: &mut Tape<R>,
    store: &ParamStore<R>,
    p: &MaeParams,
    f: Var,
) -> Result<GranularitySet> {
    let dims = ClipDims::of(tape.shape(f))?;
    if dims.c != p.channels {
        return Err(config_err!(
            "appearance extractor built for {} channels, got {}",
            p.channels,
            dims.c
        ));
    }
    let quarter = dims.c / 4;
    let flat = tape.reshape(f, &[dims.thw(), dims.c])?;
    let x1 = p.omega1.apply(tape, store, flat, false)?;
    let grid = tape.reshape(x1, &[dims.t, dims.hw(), quarter])?;
    let x2 = tape.reduce_mean(grid, &[0])?;
    let x3 = tape.reduce_mean(grid, &[1])?;
    let x4 = tape.reduce_mean(grid, &[0, 1])?;
    let x4 = tape.reshape(x4, &[1, quarter])?;
    Ok(GranularitySet {
        dims,
        x: [x1, x2, x3, x4],
        d: [None; 4],
        a: [None; 4],
    })
}

fn dependencies_for<R: Real>(
    tape: &mut Tape<R>,
    g: &mut GranularitySet,
    enabled: [bool; 4],
) -> Result<()> {
    let x1t = tape.transpose(g.x[0])?;
    for i in (0..4).filter(|&i| enabled[i]) {
        let logits = tape.matmul(g.x[i], x1t)?;
        g.d[i] = Some(tape.softmax_rows(logits)?);
    }
    Ok(())
}

/// `D_i = softmax_rows(X_i · X1^T)` for all four granularities.
pub fn compute_dependencies<R: Real>(tape: &mut Tape<R>, g: &mut GranularitySet) -> Result<()> {
    dependencies_for(tape, g, [true; 4])
}

/// `A1 = D1 X1`; `A_i = E(D_i X1)` for the pooled granularities, where `E`
/// repeats the aggregate along the axes its granularity pooled away.
pub fn aggregate_appearances<R: Real>(tape: &mut Tape<R>, g: &mut GranularitySet) -> Result<()> {
    let ClipDims { t, .. } = g.dims;
    let hw = g.dims.hw();
    let quarter = tape.shape(g.x[0])[1];
    let full = [t, hw, quarter];
    for i in 0..4 {
        let Some(d) = g.d[i] else { continue };
        let agg = tape.matmul(d, g.x[0])?;
        let grid = match i {
            0 => agg,
            1 => {
                let r = tape.reshape(agg, &[1, hw, quarter])?;
                tape.expand(r, &full)?
            }
            2 => {
                let r = tape.reshape(agg, &[t, 1, quarter])?;
                tape.expand(r, &full)?
            }
            _ => {
                let r = tape.reshape(agg, &[1, 1, quarter])?;
                tape.expand(r, &full)?
            }
        };
        g.a[i] = Some(tape.reshape(grid, &[g.dims.thw(), quarter])?);
    }
    Ok(())
}

/// Full block: returns the appearance representation `[T,H,W,C]` together
/// with the intermediate granularity set.
pub fn mae_forward_traced<R: Real>(
    tape: &mut Tape<R>,
    store: &ParamStore<R>,
    p: &MaeParams,
    f: Var,
) -> Result<(Var, GranularitySet)> {
    let mut g = build_granularities(tape, store, p, f)?;
    dependencies_for(tape, &mut g, p.enabled)?;
    aggregate_appearances(tape, &mut g)?;
    let parts: Vec<Var> = g.a.iter().flatten().copied().collect();
    let cat = tape.concat_channels(&parts)?;
    let fused = p.omega2.apply(tape, store, cat, false)?;
    let out = tape.reshape(fused, &g.dims.shape())?;
    Ok((out, g))
}

/// `F^a = omega2([A1, A2, A3, A4])`, reshaped to the input's `[T,H,W,C]`.
pub fn mae_forward<R: Real>(
    tape: &mut Tape<R>,
    store: &ParamStore<R>,
    p: &MaeParams,
    f: Var,
) -> Result<Var> {
    Ok(mae_forward_traced(tape, store, p, f)?.0)
}

//! Parameterized layers built from tape ops.

use crate::error::Result;
use crate::tensor::param::{init_tensor, Init};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Var};

/// How the weight matrix of an [`Affine`] starts out. Biases always start at zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightInit {
    Glorot,
    Zeros,
}

/// Per-position affine map over channels (a 1x1 convolution) with bias.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl Affine {
    /// Registers `{name}.w [c_in, c_out]` and `{name}.b [c_out]`.
    pub fn register<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        init: WeightInit,
        seed: u64,
    ) -> Result<Self> {
        let w_name = format!("{name}.w");
        let w_init = match init {
            WeightInit::Glorot => Init::Glorot {
                fan_in: c_in,
                fan_out: c_out,
            },
            WeightInit::Zeros => Init::Zeros,
        };
        let w = store.add(
            w_name.clone(),
            init_tensor(&[c_in, c_out], w_init, seed, &w_name),
        )?;
        let b_name = format!("{name}.b");
        let b = store.add(
            b_name.clone(),
            init_tensor(&[c_out], Init::Zeros, seed, &b_name),
        )?;
        Ok(Self { w, b, c_in, c_out })
    }

    pub fn apply<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        x: Var,
        relu: bool,
    ) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.affine(x, w, b, relu)
    }

    pub fn num_params(&self) -> usize {
        self.c_in * self.c_out + self.c_out
    }
}

/// 3x3 "same" convolution with ReLU: unfold then affine over `9 * c_in` channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conv3x3 {
    pub affine: Affine,
}

impl Conv3x3 {
    pub fn register<R: Real>(
        store: &mut ParamStore<R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            affine: Affine::register(store, name, 9 * c_in, c_out, WeightInit::Glorot, seed)?,
        })
    }

    /// `[N,H,W,C_in] -> [N,H,W,C_out]`
    pub fn apply<R: Real>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        x: Var,
    ) -> Result<Var> {
        let cols = tape.unfold3x3(x)?;
        self.affine.apply(tape, store, cols, true)
    }
}

//! Shape bookkeeping for per-clip feature stacks.

use crate::error::{dim_err, Result};

/// Dimensions of a frame feature block `F [T, H, W, C]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClipDims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl ClipDims {
    pub fn of(shape: &[usize]) -> Result<Self> {
        match shape {
            &[t, h, w, c] => Ok(Self { t, h, w, c }),
            other => Err(dim_err!(
                "expected a [T,H,W,C] feature block, got {:?}",
                other
            )),
        }
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn thw(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.t, self.h, self.w, self.c]
    }
}

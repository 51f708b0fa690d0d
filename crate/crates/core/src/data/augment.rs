//! Clip augmentation: padded random crop with one offset per clip, and
//! per-frame random erasing filled with the dataset mean.

use rand::Rng;

use crate::Tensor;

/// Zero padding added on each side before cropping back.
pub const CROP_PAD: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub crop: bool,
    pub erase: bool,
    /// Chance that a given frame gets a rectangle erased.
    pub erase_prob: f64,
    /// Range of the erased area as a fraction of the frame.
    pub erase_area: (f64, f64),
    /// Range of the rectangle's height/width ratio (sampled log-uniformly).
    pub erase_aspect: (f64, f64),
    /// Fill colour for erased pixels.
    pub fill: [f32; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop: true,
            erase: true,
            erase_prob: 0.5,
            erase_area: (0.02, 0.25),
            erase_aspect: (0.3, 3.3),
            fill: [0.5; 3],
        }
    }
}

impl AugmentConfig {
    pub fn off() -> Self {
        Self {
            crop: false,
            erase: false,
            ..Default::default()
        }
    }
}

/// Pads every frame by [`CROP_PAD`] zeros and crops back at `(oy, ox)`, so
/// `out[t,y,x] = clip[t, y+oy-4, x+ox-4]` (zero outside the frame).
pub fn crop_with_offset(clip: &Tensor<f32>, oy: usize, ox: usize) -> Tensor<f32> {
    let s = clip.shape();
    let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
    let src = clip.data();
    let mut out = vec![0f32; clip.len()];
    for f in 0..t {
        for y in 0..h {
            let sy = (y + oy) as isize - CROP_PAD as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + ox) as isize - CROP_PAD as isize;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                let d = ((f * h + y) * w + x) * c;
                let s = ((f * h + sy as usize) * w + sx as usize) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

/// Fills rows `y0..y0+h`, columns `x0..x0+w` of frame `frame` with `fill`.
pub fn erase_rect(clip: &mut Tensor<f32>, frame: usize, y0: usize, x0: usize, h: usize, w: usize, fill: [f32; 3]) {
    let s = clip.shape().to_vec();
    let (fh, fw, c) = (s[1], s[2], s[3]);
    let data = clip.data_mut();
    for y in y0..(y0 + h).min(fh) {
        for x in x0..(x0 + w).min(fw) {
            let base = ((frame * fh + y) * fw + x) * c;
            for ch in 0..c.min(3) {
                data[base + ch] = fill[ch];
            }
        }
    }
}

/// Applies the configured augmentations to a clip `[T,H,W,3]`.
pub fn augment(clip: &Tensor<f32>, rng: &mut impl Rng, cfg: &AugmentConfig) -> Tensor<f32> {
    let mut out = if cfg.crop {
        let oy = rng.gen_range(0..=2 * CROP_PAD);
        let ox = rng.gen_range(0..=2 * CROP_PAD);
        crop_with_offset(clip, oy, ox)
    } else {
        clip.clone()
    };
    if cfg.erase {
        let s = out.shape().to_vec();
        let (t, h, w) = (s[0], s[1], s[2]);
        for f in 0..t {
            if !rng.gen_bool(cfg.erase_prob.clamp(0.0, 1.0)) {
                continue;
            }
            let frac = sample_range(rng, cfg.erase_area);
            let (lo, hi) = (cfg.erase_aspect.0.ln(), cfg.erase_aspect.1.ln());
            let aspect = sample_range(rng, (lo, hi)).exp();
            let area = frac * (h * w) as f64;
            let eh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
            let ew = ((area / aspect).sqrt().round() as usize).clamp(1, w);
            let y0 = rng.gen_range(0..=h - eh);
            let x0 = rng.gen_range(0..=w - ew);
            erase_rect(&mut out, f, y0, x0, eh, ew, cfg.fill);
        }
    }
    out
}

fn sample_range(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

//! Explicit-loop reference for the motion block, written from the
//! definitions independently of the tape implementation.
#![allow(dead_code)]

use lstrl_core::bme::{motion_maps, BmeParams, MotionDirection, MotionManner};
use lstrl_core::tensor::{ParamStore, Tape};
use lstrl_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rand_t(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn random_block(c: usize, manner: MotionManner, direction: MotionDirection, seed: u64) -> (ParamStore<f32>, BmeParams) {
    let mut store = ParamStore::new();
    let p = BmeParams::register(&mut store, "bme", c, manner, direction, seed).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, rand_t(&shape, seed * 17 + k as u64)).unwrap();
    }
    (store, p)
}

pub struct Maps {
    pub fwd: Tensor<f32>,
    pub bwd: Option<Tensor<f32>>,
    pub fused: Tensor<f32>,
}

pub fn run(store: &ParamStore<f32>, p: &BmeParams, f: &Tensor<f32>) -> Maps {
    let mut tape = Tape::new();
    let x = tape.constant(f.clone());
    let m = motion_maps(&mut tape, store, p, x).unwrap();
    Maps {
        fwd: tape.value(m.m_fwd).clone(),
        bwd: m.m_bwd.map(|v| tape.value(v).clone()),
        fused: tape.value(m.fused).clone(),
    }
}

pub fn affine(x: &[f64], w: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f64> {
    let (ci, co) = (w.shape()[0], w.shape()[1]);
    (0..co)
        .map(|o| b.data()[o] as f64 + (0..ci).map(|k| x[k] * w.at(&[k, o]) as f64).sum::<f64>())
        .collect()
}

/// Loop reference: returns `(M^f, M^b, fused)` as `[t][s][channel]`.
#[allow(clippy::type_complexity)]
pub fn oracle(f: &Tensor<f32>, store: &ParamStore<f32>, p: &BmeParams) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>) {
    let s = f.shape();
    let (t, hw, c) = (s[0], s[1] * s[2], s[3]);
    let pix = |ti: usize, si: usize| -> Vec<f64> { (0..c).map(|k| f.data()[(ti * hw + si) * c + k] as f64).collect() };
    let (wphi, bphi) = (store.value(p.phi.w), store.value(p.phi.b));
    let (wpsi, bpsi) = (store.value(p.psi.w), store.value(p.psi.b));
    let keys: Vec<Vec<Vec<f64>>> = (0..t).map(|ti| (0..hw).map(|si| affine(&pix(ti, si), wpsi, bpsi)).collect()).collect();
    let pair = |ti: usize, nb: usize| -> Vec<Vec<f64>> {
        match p.manner {
            MotionManner::Global => {
                let mut g = vec![0.0; c];
                for si in 0..hw {
                    for (k, v) in pix(ti, si).iter().enumerate() {
                        g[k] += v / hw as f64;
                    }
                }
                let pg = affine(&g, wphi, bphi);
                keys[nb].iter().map(|key| key.iter().zip(&pg).map(|(a, b)| a * b).collect()).collect()
            }
            MotionManner::Local => (0..hw)
                .map(|si| {
                    let q = affine(&pix(ti, si), wphi, bphi);
                    let logits: Vec<f64> = keys[nb].iter().map(|k| k.iter().zip(&q).map(|(a, b)| a * b).sum()).collect();
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    let mut out = vec![0.0; c / 2];
                    for (w, key) in e.iter().zip(&keys[nb]) {
                        for (o, kv) in out.iter_mut().zip(key) {
                            *o += w / z * kv;
                        }
                    }
                    out
                })
                .collect(),
        }
    };
    let mut fwd = Vec::new();
    let mut bwd = Vec::new();
    let mut fused = Vec::new();
    for ti in 0..t {
        let next = if ti + 1 < t { ti + 1 } else { ti };
        let prev = if ti > 0 { ti - 1 } else { 0 };
        let mf = pair(ti, next);
        let mb = pair(ti, prev);
        let frame: Vec<Vec<f64>> = (0..hw)
            .map(|si| {
                let mut cat = mf[si].clone();
                if p.direction == MotionDirection::Bi {
                    cat.extend(&mb[si]);
                }
                affine(&cat, store.value(p.upsilon.w), store.value(p.upsilon.b))
                    .into_iter()
                    .map(|v| v.max(0.0))
                    .collect()
            })
            .collect();
        fwd.push(mf);
        bwd.push(mb);
        fused.push(frame);
    }
    (fwd, bwd, fused)
}

pub fn assert_close(got: &Tensor<f32>, want: &[Vec<Vec<f64>>], tol: f64, what: &str) {
    let flat: Vec<f64> = want.iter().flatten().flatten().copied().collect();
    assert_eq!(got.len(), flat.len(), "{what}: size");
    for (i, (a, b)) in got.data().iter().zip(&flat).enumerate() {
        assert!((*a as f64 - b).abs() <= tol, "{what}[{i}]: {a} vs {b}");
    }
}

/// Largest absolute difference between `got` and `want`, or infinity when the
/// sizes differ.
pub fn max_err(got: &Tensor<f32>, want: &[Vec<Vec<f64>>]) -> f64 {
    let flat: Vec<f64> = want.iter().flatten().flatten().copied().collect();
    if got.len() != flat.len() {
        return f64::INFINITY;
    }
    got.data().iter().zip(&flat).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max)
}

//! Explicit-loop reference for the appearance block, written from the
//! definitions independently of the tape implementation.
#![allow(dead_code)]

use lstrl_core::mae::MaeParams;
use lstrl_core::mae::Granularity;
use lstrl_core::tensor::ParamStore;
use lstrl_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rand_t(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f32> {
    Tensor::uniform(shape.to_vec(), lo, hi, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Registers the block and overwrites every parameter with random values.
pub fn random_block(c: usize, drop: Option<Granularity>, seed: u64) -> (ParamStore<f32>, MaeParams) {
    let mut store = ParamStore::new();
    let p = MaeParams::register(&mut store, "mae", c, drop, seed).unwrap();
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let shape = store.value(id).shape().to_vec();
        store
            .set_value(id, rand_t(&shape, seed * 31 + k as u64, -0.8, 0.8))
            .unwrap();
    }
    (store, p)
}

pub fn mat(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    let cols = *t.shape().last().unwrap();
    t.data()
        .chunks(cols)
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

pub struct Oracle {
    pub x: [Vec<Vec<f64>>; 4],
    pub d: [Vec<Vec<f64>>; 4],
    pub a: [Vec<Vec<f64>>; 4],
    pub out: Vec<Vec<f64>>,
}

/// Single-function reference written from the definitions with plain loops.
pub fn oracle(f: &Tensor<f32>, store: &ParamStore<f32>, p: &MaeParams) -> Oracle {
    let s = f.shape();
    let (t, hw, c) = (s[0], s[1] * s[2], s[3]);
    let q = c / 4;
    let n = t * hw;
    let fm = mat(&f.clone().reshape(vec![n, c]).unwrap());
    let w1 = mat(store.value(p.omega1.w));
    let b1: Vec<f64> = store.value(p.omega1.b).data().iter().map(|&v| v as f64).collect();
    let w2 = mat(store.value(p.omega2.w));
    let b2: Vec<f64> = store.value(p.omega2.b).data().iter().map(|&v| v as f64).collect();

    let mut x1 = vec![vec![0.0; q]; n];
    for i in 0..n {
        for j in 0..q {
            let mut acc = b1[j];
            for k in 0..c {
                acc += fm[i][k] * w1[k][j];
            }
            x1[i][j] = acc;
        }
    }
    let mut x2 = vec![vec![0.0; q]; hw];
    let mut x3 = vec![vec![0.0; q]; t];
    let mut x4 = vec![vec![0.0; q]; 1];
    for ti in 0..t {
        for si in 0..hw {
            for j in 0..q {
                let v = x1[ti * hw + si][j];
                x2[si][j] += v / t as f64;
                x3[ti][j] += v / hw as f64;
                x4[0][j] += v / n as f64;
            }
        }
    }
    let xs = [x1.clone(), x2, x3, x4];
    let mut ds: [Vec<Vec<f64>>; 4] = Default::default();
    let mut aggs: [Vec<Vec<f64>>; 4] = Default::default();
    for g in 0..4 {
        for row in &xs[g] {
            let logits: Vec<f64> = x1
                .iter()
                .map(|key| (0..q).map(|j| row[j] * key[j]).sum::<f64>())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let drow: Vec<f64> = e.iter().map(|v| v / z).collect();
            let mut agg = vec![0.0; q];
            for (k, w) in drow.iter().enumerate() {
                for j in 0..q {
                    agg[j] += w * x1[k][j];
                }
            }
            ds[g].push(drow);
            aggs[g].push(agg);
        }
    }
    let mut a: [Vec<Vec<f64>>; 4] = Default::default();
    for ti in 0..t {
        for si in 0..hw {
            a[0].push(aggs[0][ti * hw + si].clone());
            a[1].push(aggs[1][si].clone());
            a[2].push(aggs[2][ti].clone());
            a[3].push(aggs[3][0].clone());
        }
    }
    let enabled: Vec<usize> = (0..4).filter(|&g| p.enabled[g]).collect();
    let mut out = vec![vec![0.0; c]; n];
    for i in 0..n {
        let cat: Vec<f64> = enabled.iter().flat_map(|&g| a[g][i].iter().copied()).collect();
        for o in 0..c {
            let mut acc = b2[o];
            for (k, v) in cat.iter().enumerate() {
                acc += v * w2[k][o];
            }
            out[i][o] = acc;
        }
    }
    Oracle { x: xs, d: ds, a, out }
}

pub fn assert_close(got: &Tensor<f32>, want: &[Vec<f64>], tol: f64, what: &str) {
    let g = mat(got);
    assert_eq!(g.len(), want.len(), "{what}: row count");
    for (r, (gr, wr)) in g.iter().zip(want).enumerate() {
        assert_eq!(gr.len(), wr.len(), "{what}: column count");
        for (k, (a, b)) in gr.iter().zip(wr).enumerate() {
            assert!((a - b).abs() <= tol, "{what}[{r},{k}]: {a} vs {b}");
        }
    }
}

/// Largest absolute difference between `got` and `want`, or infinity when the
/// sizes differ.
pub fn max_err(got: &Tensor<f32>, want: &[Vec<f64>]) -> f64 {
    let flat: Vec<f64> = want.iter().flatten().copied().collect();
    if got.len() != flat.len() {
        return f64::INFINITY;
    }
    got.data().iter().zip(&flat).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max)
}

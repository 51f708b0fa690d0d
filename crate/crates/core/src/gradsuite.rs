//! Finite-difference gradient suites for every tape operation, both blocks
//! and a tiny end-to-end network, run at f64 over many seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneConfig, LstrlNet, Variant};
use crate::bme::{bme_forward, BmeParams, MotionDirection, MotionManner};
use crate::error::Result;
use crate::mae::{mae_forward, MaeParams};
use crate::tensor::gradcheck::{check_gradients, CheckOutcome, DEFAULT_EPS};
use crate::tensor::{ParamStore, Tape, Var};
use crate::Tensor;

/// Tolerance for single operations and blocks.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the end-to-end network.
pub const NETWORK_TOLERANCE: f64 = 1e-3;

type SuiteFn = fn(u64) -> Result<CheckOutcome>;

#[derive(Clone, Copy, Debug)]
pub struct Suite {
    pub name: &'static str,
    pub tolerance: f64,
    pub run: SuiteFn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub tolerance: f64,
    pub max_rel_err: f64,
    /// Where the worst error occurred, with its seed.
    pub worst: String,
    pub seeds: usize,
    /// Entries compared and entries skipped at kinks, over all seeds.
    pub entries: usize,
    pub kinks: usize,
    pub passed: bool,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, r)
}

/// Overwrites every parameter with uniform values, so zero-initialized
/// fusion layers do not hide the paths behind them.
pub fn randomize(store: &mut ParamStore<f64>, r: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store
            .set_value(id, Tensor::uniform(shape, -scale, scale, r))
            .expect("same shape");
    }
}

fn check(
    inputs: &[Tensor<f64>],
    store: &ParamStore<f64>,
    seed: u64,
    build: impl Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
) -> Result<CheckOutcome> {
    check_gradients(inputs, store, DEFAULT_EPS, seed ^ 0x5eed, build)
}

fn matmul(seed: u64) -> Result<CheckOutcome> {
    let mut r = rng(seed);
    let ins = [rand_t(&[3, 4], &mut r), rand_t(&[4, 2], &mut r)];
    check(&ins, &ParamStore::new(), seed, |t, _, v| t.matmul(v[0], v[1]))
}

fn transpose(seed: u64) -> Result<CheckOutcome> {
    let mut r = rng(seed);
    check(&[rand_t(&[3, 4], &mut r)], &ParamStore::new(), seed, |t, _, v| {
        t.transpose(v[0])
    })
}

fn softmax_rows(seed: u64) -> Result<CheckOutcome> {
    let mut r = rng(seed);
    let x = rand_t(&[3, 5], &mut r);
    check(&[x], &ParamStore::new(), seed, |t, _, v| t.softmax_rows(v[0]))
}

fn reduce_mean(seed: u64) -> Result<CheckOutcome> {
    let mut r = rng(seed);
    check(&[rand_t(&[2, 3, 4], &mut r)], &ParamStore::new(), seed, |t, _, v| {
        let a = t.reduce_mean(v[0], &[1, 2])?;
        let b = t.reduce_mean(v[0], &[0])?;
        let b = t.reduce_mean(b, &[1])?;
        let a2 = t.reshape(a, &[2, 1])?;
        let b2 = t.reshape(b, &[3, 1])?;
        t.concat(&[a2, b2], 0)
    })
}

fn pointwise_affine(seed: u64) -> Result<CheckOutcome> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let w = store.add("w", rand_t(&[4, 5], &mut r))?;
    let b = store.add("b", rand_t(&[5], &mut r))?;
    let x = rand_t(&[2, 3, 4], &mut r);
    check(&[x], &store, seed, move |t, s, v| {
        let (wv, bv) = (t.param(s, w), t.param(s, b));
        let y = t.affine(v[0], wv, bv, true)?;
        let z = t.affine(v[0], wv, bv, false)?;
        t.add(y, z)
    })
}

fn concat(seed: u64) -> Result<CheckOutcome> {
    let mut r = rng(seed);
    let ins = [
        rand_t(&[2, 2, 3], &mut r),
        rand_t(&[2, 2, 1], &mut r),
        rand_t(&[1, 2, 4], &mut r),
    ];
    check(&ins, &ParamStore::new(), seed, |t, _, v| {
        let c = t.concat_channels(&[v[0], v[1]])?;
        t.concat(&[c, v[2]], 0)
    })
}

fn broadcast_hadamard(seed: u64) -> Result<CheckOutcome> {
    let mut r = rng(seed);
    let ins = [
        rand_t(&[1, 1, 3], &mut r),
        rand_t(&[2, 3, 3], &mut r),
        rand_t(&[2, 1, 1, 3], &mut r),
        rand_t(&[2, 2, 2, 3], &mut r),
    ];
    check(&ins, &ParamStore::new(), seed, |t, _, v| {
        let a = t.broadcast_hadamard(v[0], v[1])?;
        let b = t.broadcast_hadamard(v[2], v[3])?;
        let a = t.reshape(a, &[18])?;
        let b = t.reshape(b, &[24])?;
        t.concat(&[a, b], 0)
    })
}

fn reshape_expand(seed: u64) -> Result<CheckOutcome> {
    let mut r = rng(seed);
    check(&[rand_t(&[2, 3], &mut r)], &ParamStore::new(), seed, |t, _, v| {
        let x = t.reshape(v[0], &[2, 1, 3])?;
        t.expand(x, &[2, 4, 3])
    })
}

fn add_scale_sum(seed: u64) -> Result<CheckOutcome> {
    let mut r = rng(seed);
    let ins = [rand_t(&[2, 3], &mut r), rand_t(&[2, 3], &mut r)];
    check(&ins, &ParamStore::new(), seed, |t, _, v| {
        let a = t.add(v[0], v[1])?;
        let s = t.scale(a, -1.7)?;
        let total = t.sum(s)?;
        let total = t.reshape(total, &[1])?;
        let flat = t.reshape(s, &[6])?;
        t.concat(&[flat, total], 0)
    })
}

fn unfold3x3(seed: u64) -> Result<CheckOutcome> {
    let mut r = rng(seed);
    check(&[rand_t(&[2, 3, 4, 2], &mut r)], &ParamStore::new(), seed, |t, _, v| {
        t.unfold3x3(v[0])
    })
}

fn avg_pool2(seed: u64) -> Result<CheckOutcome> {
    let mut r = rng(seed);
    check(&[rand_t(&[2, 4, 6, 2], &mut r)], &ParamStore::new(), seed, |t, _, v| {
        t.avg_pool2(v[0])
    })
}

fn gather_frames(seed: u64) -> Result<CheckOutcome> {
    let mut r = rng(seed);
    check(&[rand_t(&[3, 2, 2, 2], &mut r)], &ParamStore::new(), seed, |t, _, v| {
        t.gather_frames(v[0], &[1, 2, 2, 0])
    })
}

fn cross_entropy(seed: u64) -> Result<CheckOutcome> {
    let mut r = rng(seed);
    let x = Tensor::uniform(vec![4, 5], -3.0, 3.0, &mut r);
    let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
    check(&[x], &ParamStore::new(), seed, move |t, _, v| {
        t.cross_entropy(v[0], &labels)
    })
}

fn batch_hard_triplet(seed: u64) -> Result<CheckOutcome> {
    let mut r = rng(seed);
    let x = rand_t(&[8, 4], &mut r);
    let labels = [0, 0, 1, 1, 2, 2, 3, 3];
    check(&[x], &ParamStore::new(), seed, move |t, _, v| {
        t.batch_hard_triplet(v[0], &labels, 1.0)
    })
}

fn mae_block(seed: u64) -> Result<CheckOutcome> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let p = MaeParams::register(&mut store, "mae", 4, None, seed)?;
    randomize(&mut store, &mut r, 0.8);
    let x = rand_t(&[2, 2, 2, 4], &mut r);
    check(&[x], &store, seed, move |t, s, v| mae_forward(t, s, &p, v[0]))
}

fn bme_variant(seed: u64, manner: MotionManner, direction: MotionDirection) -> Result<CheckOutcome> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let p = BmeParams::register(&mut store, "bme", 4, manner, direction, seed)?;
    randomize(&mut store, &mut r, 0.8);
    let x = rand_t(&[3, 2, 2, 4], &mut r);
    check(&[x], &store, seed, move |t, s, v| bme_forward(t, s, &p, v[0]))
}

fn bme_block(seed: u64) -> Result<CheckOutcome> {
    bme_variant(seed, MotionManner::Global, MotionDirection::Bi)
}

fn bme_local(seed: u64) -> Result<CheckOutcome> {
    bme_variant(seed, MotionManner::Local, MotionDirection::Bi)
}

fn bme_single(seed: u64) -> Result<CheckOutcome> {
    bme_variant(seed, MotionManner::Global, MotionDirection::Single)
}

/// Tiny configuration: 8x8 frames, 4 channels per stage, both blocks after
/// stages 2 and 3, four identities.
pub fn tiny_config() -> BackboneConfig {
    BackboneConfig {
        stage_channels: [4, 4, 4, 4],
        input_hw: (8, 8),
        num_identities: 4,
        ..BackboneConfig::default()
    }
    .with_variant(Variant::MaeBme)
}

fn tiny_network(seed: u64) -> Result<CheckOutcome> {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let net = LstrlNet::build(tiny_config(), &mut store, seed)?;
    randomize(&mut store, &mut r, 0.6);
    let clip = Tensor::uniform(vec![2, 8, 8, 3], 0.0, 1.0, &mut r);
    check(&[clip], &store, seed, move |t, s, v| {
        let out = net.forward(t, s, v[0])?;
        t.concat(&[out.embedding, out.logits], 0)
    })
}

pub fn suites() -> Vec<Suite> {
    let op = |name, run| Suite {
        name,
        tolerance: OP_TOLERANCE,
        run,
    };
    vec![
        op("matmul", matmul as SuiteFn),
        op("transpose", transpose),
        op("softmax_rows", softmax_rows),
        op("reduce_mean", reduce_mean),
        op("pointwise_affine", pointwise_affine),
        op("concat", concat),
        op("broadcast_hadamard", broadcast_hadamard),
        op("reshape_expand", reshape_expand),
        op("add_scale_sum", add_scale_sum),
        op("unfold3x3", unfold3x3),
        op("avg_pool2", avg_pool2),
        op("gather_frames", gather_frames),
        op("cross_entropy", cross_entropy),
        op("batch_hard_triplet", batch_hard_triplet),
        op("mae", mae_block),
        op("bme", bme_block),
        op("bme_local", bme_local),
        op("bme_single", bme_single),
        Suite {
            name: "tiny_network",
            tolerance: NETWORK_TOLERANCE,
            run: tiny_network,
        },
    ]
}

/// Runs every suite (or those whose name contains `filter`) over `seeds`.
/// A suite passes when its worst error is within tolerance and at most 1% of
/// the entries (or a single entry, for suites under 100 entries) had to be
/// skipped at kinks.
pub fn run_suites(seeds: &[u64], filter: Option<&str>) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    for s in suites() {
        if filter.is_some_and(|f| !s.name.contains(f)) {
            continue;
        }
        let mut worst = (0.0f64, String::from("-"));
        let (mut entries, mut kinks) = (0, 0);
        for &seed in seeds {
            let o = (s.run)(seed)?;
            entries += o.entries;
            kinks += o.kinks;
            if o.max_rel_err > worst.0 || o.max_rel_err.is_nan() {
                worst = (o.max_rel_err, format!("{} (seed {seed})", o.worst));
            }
        }
        out.push(SuiteResult {
            name: s.name,
            tolerance: s.tolerance,
            max_rel_err: worst.0,
            worst: worst.1,
            seeds: seeds.len(),
            entries,
            kinks,
            passed: worst.0 <= s.tolerance && kinks * 100 <= entries.max(100),
        });
    }
    Ok(out)
}

//! Forward values of every tape op against plain-loop oracles, plus
//! property tests for the algebraic facts the blocks rely on.

use lstrl_core::tensor::io::{decode_checkpoint, encode_checkpoint, load_tensor, save_tensor, AnyTensor, Checkpoint};
use lstrl_core::tensor::{count, ParamStore, Tape};
use lstrl_core::{Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "entry {i}: {x} vs {y}");
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let (m, k, n) = (5, 7, 3);
    let (a, b) = (rand_t(&[m, k], 1), rand_t(&[k, n], 2));
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = tape.matmul(va, vb).unwrap();
    let mut expected = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                expected[i * n + j] += a.at(&[i, p]) * b.at(&[p, j]);
            }
        }
    }
    assert_eq!(tape.shape(out), &[m, n]);
    close(tape.value(out).data(), &expected, 1e-12);
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![4, 2]));
    assert!(matches!(tape.matmul(a, b), Err(Error::Dim(_))));
}

#[test]
fn transpose_swaps_indices() {
    let a = rand_t(&[3, 4], 3);
    let mut tape = Tape::new();
    let va = tape.constant(a.clone());
    let t = tape.transpose(va).unwrap();
    for i in 0..3 {
        for j in 0..4 {
            assert_eq!(tape.value(t).at(&[j, i]), a.at(&[i, j]));
        }
    }
}

#[test]
fn softmax_rows_matches_naive_exponentials() {
    let x = rand_t(&[4, 6], 4);
    let mut tape = Tape::new();
    let vx = tape.constant(x.clone());
    let s = tape.softmax_rows(vx).unwrap();
    for r in 0..4 {
        let z: f64 = (0..6).map(|c| x.at(&[r, c]).exp()).sum();
        for c in 0..6 {
            assert!((tape.value(s).at(&[r, c]) - x.at(&[r, c]).exp() / z).abs() < 1e-15);
        }
    }
}

#[test]
fn softmax_is_stable_for_large_logits() {
    let x = Tensor::new(vec![1, 3], vec![1000.0f64, 1000.0, -1000.0]).unwrap();
    let mut tape = Tape::new();
    let vx = tape.constant(x);
    let s = tape.softmax_rows(vx).unwrap();
    close(tape.value(s).data(), &[0.5, 0.5, 0.0], 1e-15);
}

#[test]
fn reduce_mean_matches_loops_for_every_axis_set() {
    let x = rand_t(&[2, 3, 4, 5], 5);
    let shape = [2, 3, 4, 5];
    for axes in [vec![0], vec![1, 2], vec![0, 1, 2], vec![3], vec![0, 3]] {
        let mut tape = Tape::new();
        let vx = tape.constant(x.clone());
        let m = tape.reduce_mean(vx, &axes).unwrap();
        let kept: Vec<usize> = (0..4).filter(|a| !axes.contains(a)).collect();
        let out_shape: Vec<usize> = kept.iter().map(|&a| shape[a]).collect();
        assert_eq!(tape.shape(m), out_shape.as_slice());
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        let mut sums = vec![0.0; out_shape.iter().product()];
        for i0 in 0..2 {
            for i1 in 0..3 {
                for i2 in 0..4 {
                    for i3 in 0..5 {
                        let idx = [i0, i1, i2, i3];
                        let mut flat = 0;
                        for &a in &kept {
                            flat = flat * shape[a] + idx[a];
                        }
                        sums[flat] += x.at(&idx);
                    }
                }
            }
        }
        let expected: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
        close(tape.value(m).data(), &expected, 1e-14);
    }
}

#[test]
fn unfold_then_affine_is_a_zero_padded_convolution() {
    let (n, h, w, ci, co) = (2, 4, 3, 2, 3);
    let x = rand_t(&[n, h, w, ci], 6);
    let wt = rand_t(&[9 * ci, co], 7);
    let bias = rand_t(&[co], 8);
    let mut tape = Tape::new();
    let vx = tape.constant(x.clone());
    let vw = tape.constant(wt.clone());
    let vb = tape.constant(bias.clone());
    let u = tape.unfold3x3(vx).unwrap();
    let y = tape.affine(u, vw, vb, false).unwrap();
    let mut expected = Vec::new();
    for f in 0..n {
        for yy in 0..h {
            for xx in 0..w {
                for o in 0..co {
                    let mut acc = bias.data()[o];
                    for dy in 0..3i64 {
                        for dx in 0..3i64 {
                            let (sy, sx) = (yy as i64 + dy - 1, xx as i64 + dx - 1);
                            if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                                continue;
                            }
                            for c in 0..ci {
                                let row = ((dy * 3 + dx) as usize) * ci + c;
                                acc += x.at(&[f, sy as usize, sx as usize, c]) * wt.at(&[row, o]);
                            }
                        }
                    }
                    expected.push(acc);
                }
            }
        }
    }
    assert_eq!(tape.shape(y), &[n, h, w, co]);
    close(tape.value(y).data(), &expected, 1e-12);
}

#[test]
fn affine_relu_clamps_negatives() {
    let x = Tensor::new(vec![1, 2], vec![1.0f64, -1.0]).unwrap();
    let w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b = Tensor::new(vec![2], vec![0.0, 0.5]).unwrap();
    let mut tape = Tape::new();
    let (vx, vw, vb) = (tape.constant(x), tape.constant(w), tape.constant(b));
    let y = tape.affine(vx, vw, vb, true).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
}

#[test]
fn avg_pool2_averages_each_window() {
    let x = rand_t(&[2, 4, 6, 3], 9);
    let mut tape = Tape::new();
    let vx = tape.constant(x.clone());
    let p = tape.avg_pool2(vx).unwrap();
    assert_eq!(tape.shape(p), &[2, 2, 3, 3]);
    for f in 0..2 {
        for y in 0..2 {
            for xx in 0..3 {
                for c in 0..3 {
                    let s = x.at(&[f, 2 * y, 2 * xx, c])
                        + x.at(&[f, 2 * y + 1, 2 * xx, c])
                        + x.at(&[f, 2 * y, 2 * xx + 1, c])
                        + x.at(&[f, 2 * y + 1, 2 * xx + 1, c]);
                    assert!((tape.value(p).at(&[f, y, xx, c]) - s / 4.0).abs() < 1e-15);
                }
            }
        }
    }
}

#[test]
fn gather_concat_expand_and_hadamard_match_index_arithmetic() {
    let x = rand_t(&[3, 2, 2, 4], 10);
    let g = rand_t(&[3, 1, 1, 4], 11);
    let mut tape = Tape::new();
    let (vx, vg) = (tape.constant(x.clone()), tape.constant(g.clone()));
    let gathered = tape.gather_frames(vx, &[2, 0, 2]).unwrap();
    for (i, &src) in [2usize, 0, 2].iter().enumerate() {
        assert_eq!(tape.value(gathered).index_axis0(i), x.index_axis0(src));
    }
    let cat = tape.concat_channels(&[vx, vx]).unwrap();
    assert_eq!(tape.shape(cat), &[3, 2, 2, 8]);
    assert_eq!(tape.value(cat).at(&[1, 1, 0, 5]), x.at(&[1, 1, 0, 1]));
    let ex = tape.expand(vg, &[3, 2, 2, 4]).unwrap();
    assert_eq!(tape.value(ex).at(&[2, 1, 1, 3]), g.at(&[2, 0, 0, 3]));
    let had = tape.broadcast_hadamard(vg, vx).unwrap();
    for t in 0..3 {
        for y in 0..2 {
            for xx in 0..2 {
                for c in 0..4 {
                    let e = g.at(&[t, 0, 0, c]) * x.at(&[t, y, xx, c]);
                    assert_eq!(tape.value(had).at(&[t, y, xx, c]), e);
                }
            }
        }
    }
}

#[test]
fn cross_entropy_matches_log_sum_exp() {
    let logits = rand_t(&[3, 5], 12);
    let labels = [4usize, 0, 2];
    let mut tape = Tape::new();
    let v = tape.constant(logits.clone());
    let l = tape.cross_entropy(v, &labels).unwrap();
    let mut expected = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let lse = (0..5).map(|c| logits.at(&[r, c]).exp()).sum::<f64>().ln();
        expected += lse - logits.at(&[r, y]);
    }
    assert!((tape.value(l).item() - expected / 3.0).abs() < 1e-14);
}

#[test]
fn non_finite_forward_value_is_a_numerical_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(vec![2], 1e200));
    let y = tape.scale(x, 1e200);
    assert!(matches!(y, Err(Error::Numerical(_))));
}

#[test]
fn matmul_counts_m_k_n_multiplies() {
    let (_, counts) = count::measure(|| {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(vec![3, 4]));
        let b = tape.constant(Tensor::zeros(vec![4, 5]));
        tape.matmul(a, b).unwrap();
    });
    assert_eq!(counts.op("matmul"), 60);
}

#[test]
fn backward_accumulates_into_parameters() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
    for _ in 0..2 {
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let loss = tape.weighted_sum(w, Tensor::new(vec![2], vec![3.0, -1.0]).unwrap()).unwrap();
        tape.backward(loss, &mut store).unwrap();
    }
    assert_eq!(store.get(id).grad.data(), &[6.0, -2.0]);
}

#[test]
fn tensor_file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let t = rand_t(&[2, 3, 4], 13).cast::<f32>();
    let p = dir.path().join("t.lstt");
    save_tensor(&p, &t).unwrap();
    assert_eq!(load_tensor(&p).unwrap(), AnyTensor::F32(t));
}

#[test]
fn truncated_tensor_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.lstt");
    save_tensor(&p, &rand_t(&[4], 14)).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_tensor(&p).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_stochastic(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut x = rand_t(&[rows, cols], seed);
        x.data_mut().iter_mut().for_each(|v| *v *= scale);
        let mut tape = Tape::new();
        let vx = tape.constant(x);
        let s = tape.softmax_rows(vx).unwrap();
        for r in tape.value(s).data().chunks(cols) {
            prop_assert!(r.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_is_associative(m in 1usize..5, k in 1usize..5, n in 1usize..5, p in 1usize..5, seed in any::<u64>()) {
        let (a, b, c) = (rand_t(&[m, k], seed), rand_t(&[k, n], seed ^ 1), rand_t(&[n, p], seed ^ 2));
        let mut tape = Tape::new();
        let (va, vb, vc) = (tape.constant(a), tape.constant(b), tape.constant(c));
        let ab = tape.matmul(va, vb).unwrap();
        let left = tape.matmul(ab, vc).unwrap();
        let bc = tape.matmul(vb, vc).unwrap();
        let right = tape.matmul(va, bc).unwrap();
        prop_assert!(tape.value(left).max_abs_diff(tape.value(right)) < 1e-12);
    }

    #[test]
    fn reshape_round_trip_preserves_data(a in 1usize..5, b in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
        let x = rand_t(&[a, b, c], seed);
        let mut tape = Tape::new();
        let vx = tape.constant(x.clone());
        let flat = tape.reshape(vx, &[a * b * c]).unwrap();
        let back = tape.reshape(flat, &[a, b, c]).unwrap();
        prop_assert_eq!(tape.value(back), &x);
    }

    #[test]
    fn checkpoint_encoding_round_trips(n in 0usize..5, seed in any::<u64>()) {
        let mut ck = Checkpoint::new();
        for i in 0..n {
            let t = rand_t(&[i + 1, 2], seed.wrapping_add(i as u64));
            if i % 2 == 0 {
                ck.insert(format!("p{i}.w"), AnyTensor::F64(t));
            } else {
                ck.insert(format!("p{i}.b"), AnyTensor::F32(t.cast()));
            }
        }
        let bytes = encode_checkpoint(&ck).unwrap();
        prop_assert_eq!(decode_checkpoint(&bytes).unwrap(), ck);
    }
}

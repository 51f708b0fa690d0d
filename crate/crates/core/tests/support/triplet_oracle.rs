//! Batch-hard triplet loss mined by scanning every pair.
#![allow(dead_code)]

use lstrl_core::Tensor;

pub fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let c = t.shape()[1];
    t.data().chunks_exact(c).map(<[f64]>::to_vec).collect()
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Loss and gradient of the batch-hard triplet objective, mined by scanning
/// every (anchor, other) pair.
pub fn exhaustive_triplet(x: &[Vec<f64>], labels: &[usize], margin: f64) -> (f64, Vec<Vec<f64>>) {
    let n = x.len();
    let c = x[0].len();
    let mut loss = 0.0;
    let mut grad = vec![vec![0.0; c]; n];
    for a in 0..n {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for o in 0..n {
            if o == a {
                continue;
            }
            let d = euclid(&x[a], &x[o]);
            if labels[o] == labels[a] {
                if pos.map_or(true, |(_, best)| d > best) {
                    pos = Some((o, d));
                }
            } else if neg.map_or(true, |(_, best)| d < best) {
                neg = Some((o, d));
            }
        }
        let ((p, dp), (q, dq)) = (pos.unwrap(), neg.unwrap());
        let hinge = margin + dp - dq;
        if hinge > 0.0 {
            loss += hinge;
            for j in 0..c {
                let gp = (x[a][j] - x[p][j]) / dp / n as f64;
                let gq = (x[a][j] - x[q][j]) / dq / n as f64;
                grad[a][j] += gp - gq;
                grad[p][j] -= gp;
                grad[q][j] += gq;
            }
        }
    }
    (loss / n as f64, grad)
}

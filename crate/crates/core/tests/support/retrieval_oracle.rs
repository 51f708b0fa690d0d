//! CMC and mAP computed by comparing gallery entries pairwise.
#![allow(dead_code)]

use lstrl_core::eval::SplitEmbeddings;
use lstrl_core::Tensor;

pub fn split(ids: Vec<u32>, cams: Vec<u32>) -> SplitEmbeddings {
    SplitEmbeddings { embeddings: Tensor::zeros(vec![ids.len(), 1]), ids, cams }
}

pub struct Oracle {
    pub hits1: usize,
    pub hits5: usize,
    pub ap_sum: f64,
    pub valid: usize,
}

/// Scores each query by comparing every pair of gallery entries directly: an
/// entry outranks another when its distance is smaller, or equal with a
/// smaller index. Entries sharing identity and camera with the query are
/// skipped.
pub fn brute_force(q: &SplitEmbeddings, g: &SplitEmbeddings, d: &[Vec<f64>]) -> Oracle {
    let mut o = Oracle { hits1: 0, hits5: 0, ap_sum: 0.0, valid: 0 };
    for qi in 0..q.ids.len() {
        let junk = |gi: usize| g.ids[gi] == q.ids[qi] && g.cams[gi] == q.cams[qi];
        let valid: Vec<usize> = (0..g.ids.len()).filter(|&gi| !junk(gi)).collect();
        let before = |a: usize, b: usize| d[qi][a] < d[qi][b] || (d[qi][a] == d[qi][b] && a < b);
        let position = |gi: usize| valid.iter().filter(|&&o| before(o, gi)).count();
        let mut matches: Vec<(usize, usize)> = valid
            .iter()
            .filter(|&&gi| g.ids[gi] == q.ids[qi])
            .map(|&gi| (position(gi), gi))
            .collect();
        if matches.is_empty() {
            continue;
        }
        matches.sort();
        o.valid += 1;
        let first = matches[0].0;
        o.hits1 += usize::from(first < 1);
        o.hits5 += usize::from(first < 5);
        let mut sum = 0.0;
        for (found, &(pos, _)) in matches.iter().enumerate() {
            sum += (found + 1) as f64 / (pos + 1) as f64;
        }
        o.ap_sum += sum / matches.len() as f64;
    }
    o
}

//! Retrieval evaluation: tracklet embeddings, pairwise distances, CMC and mAP
//! under the query/gallery protocol that ignores gallery entries sharing both
//! identity and camera with the query.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::LstrlNet;
use crate::data::{rrs_sample, Dataset, SampleMode};
use crate::error::{config_err, data_err, dim_err, Result};
use crate::tensor::{ParamStore, Tape};
use crate::{Error, Tensor};

/// Ranks reported by [`cmc_map`].
pub const RANKS: [usize; 2] = [1, 5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Metric {
    /// `1 - cos(q, g)`.
    #[default]
    Cosine,
    Euclidean,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(config_err!("unknown metric {other:?}, expected cosine|euclidean")),
        }
    }
}

/// Embeddings and labels of one split, in dataset enumeration order.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitEmbeddings {
    /// `[N, C]`
    pub embeddings: Tensor<f64>,
    pub ids: Vec<u32>,
    pub cams: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalTable {
    pub query: SplitEmbeddings,
    pub gallery: SplitEmbeddings,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// CMC accuracy at each of [`RANKS`].
    pub rank_k: BTreeMap<usize, f64>,
    pub map_score: f64,
    pub num_valid_queries: usize,
    pub num_queries: usize,
}

impl EvalReport {
    pub fn rank(&self, k: usize) -> f64 {
        self.rank_k.get(&k).copied().unwrap_or(f64::NAN)
    }

    /// `R1=… R5=… mAP=… valid=…`
    pub fn key_values(&self) -> String {
        format!(
            "R1={:.6} R5={:.6} mAP={:.6} valid={}",
            self.rank(1),
            self.rank(5),
            self.map_score,
            self.num_valid_queries
        )
    }

    /// Two-column tab-separated table.
    pub fn tsv(&self) -> String {
        format!(
            "metric\tvalue\nR1\t{:.6}\nR5\t{:.6}\nmAP\t{:.6}\nvalid\t{}\nqueries\t{}\n",
            self.rank(1),
            self.rank(5),
            self.map_score,
            self.num_valid_queries,
            self.num_queries
        )
    }
}

/// Embeds every tracklet of `dataset` from `t` eval-mode frames, encoding
/// `batch_size` clips per tape.
pub fn embed_split(
    net: &LstrlNet,
    store: &ParamStore<f32>,
    dataset: &Dataset,
    t: usize,
    batch_size: usize,
) -> Result<SplitEmbeddings> {
    if dataset.is_empty() {
        return Err(data_err!("split {} has no tracklets", dataset.split));
    }
    if batch_size == 0 {
        return Err(config_err!("batch_size must be at least 1"));
    }
    // Eval-mode sampling never draws from the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dim = net.config.embedding_dim();
    let mut rows = Vec::with_capacity(dataset.len() * dim);
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let mut tape = Tape::new();
        let mut outs = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let frames = rrs_sample(dataset.tracklets[i].len(), t, SampleMode::Eval, &mut rng)?;
            let clip = dataset.clip(i, &frames)?;
            let x = tape.constant(clip);
            outs.push(net.forward(&mut tape, store, x)?.embedding);
        }
        for v in outs {
            rows.extend(tape.value(v).data().iter().map(|&x| x as f64));
        }
    }
    Ok(SplitEmbeddings {
        embeddings: Tensor::new(vec![dataset.len(), dim], rows)?,
        ids: dataset.tracklets.iter().map(|t| t.identity_id).collect(),
        cams: dataset.tracklets.iter().map(|t| t.camera_id).collect(),
    })
}

/// Pairwise distances plus the rows whose embedding had zero norm (their
/// cosine distances are set to 1).
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    /// `[Q, G]`
    pub values: Tensor<f64>,
    pub zero_norm_queries: Vec<usize>,
    pub zero_norm_gallery: Vec<usize>,
}

pub fn distance_matrix(q: &Tensor<f64>, g: &Tensor<f64>, metric: Metric) -> Result<DistanceMatrix> {
    let (qs, gs) = (q.shape(), g.shape());
    if qs.len() != 2 || gs.len() != 2 || qs[1] != gs[1] {
        return Err(dim_err!("distance_matrix needs [Q,C] and [G,C], got {:?} and {:?}", qs, gs));
    }
    let c = qs[1];
    let qrows: Vec<&[f64]> = q.data().chunks_exact(c).collect();
    let grows: Vec<&[f64]> = g.data().chunks_exact(c).collect();
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let qn: Vec<f64> = qrows.iter().map(|r| norm(r)).collect();
    let gn: Vec<f64> = grows.iter().map(|r| norm(r)).collect();
    let mut out = Vec::with_capacity(qrows.len() * grows.len());
    for (qi, qr) in qrows.iter().enumerate() {
        for (gi, gr) in grows.iter().enumerate() {
            let d = match metric {
                Metric::Cosine => {
                    if qn[qi] == 0.0 || gn[gi] == 0.0 {
                        1.0
                    } else {
                        let dot: f64 = qr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                        1.0 - dot / (qn[qi] * gn[gi])
                    }
                }
                Metric::Euclidean => qr
                    .iter()
                    .zip(gr.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt(),
            };
            out.push(d);
        }
    }
    let zeros = |n: &[f64]| n.iter().enumerate().filter(|(_, &v)| v == 0.0).map(|(i, _)| i).collect();
    Ok(DistanceMatrix {
        values: Tensor::new(vec![qrows.len(), grows.len()], out)?,
        zero_norm_queries: if metric == Metric::Cosine { zeros(&qn) } else { Vec::new() },
        zero_norm_gallery: if metric == Metric::Cosine { zeros(&gn) } else { Vec::new() },
    })
}

/// Gallery indices by ascending distance, ties broken by gallery index.
pub fn ranking(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    order
}

/// Average precision of a relevance list in rank order.
pub fn average_precision(relevant: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// CMC at [`RANKS`] and mAP. Queries without any same-identity gallery entry
/// under another camera are skipped.
pub fn cmc_map(table: &RetrievalTable, dists: &Tensor<f64>) -> Result<EvalReport> {
    let q = &table.query;
    let g = &table.gallery;
    for s in [q, g] {
        let n = s.embeddings.shape().first().copied().unwrap_or(0);
        if s.ids.len() != n || s.cams.len() != n {
            return Err(dim_err!("label lists do not match {} embedding rows", n));
        }
    }
    let (nq, ng) = (q.ids.len(), g.ids.len());
    if dists.shape() != [nq, ng] {
        return Err(dim_err!("distances are {:?}, table is {}x{}", dists.shape(), nq, ng));
    }
    let mut hits_at = [0usize; RANKS.len()];
    let mut ap_sum = 0.0;
    let mut valid = 0usize;
    for (qi, row) in dists.data().chunks_exact(ng.max(1)).enumerate().take(nq) {
        let relevant: Vec<bool> = ranking(row)
            .into_iter()
            .filter(|&gi| !(g.ids[gi] == q.ids[qi] && g.cams[gi] == q.cams[qi]))
            .map(|gi| g.ids[gi] == q.ids[qi])
            .collect();
        let Some(first) = relevant.iter().position(|&r| r) else {
            continue;
        };
        valid += 1;
        for (slot, &k) in hits_at.iter_mut().zip(RANKS.iter()) {
            if first < k {
                *slot += 1;
            }
        }
        ap_sum += average_precision(&relevant);
    }
    if valid == 0 {
        return Err(Error::Protocol(format!(
            "none of the {nq} queries has a match in the gallery under another camera"
        )));
    }
    Ok(EvalReport {
        rank_k: RANKS
            .iter()
            .zip(hits_at)
            .map(|(&k, h)| (k, h as f64 / valid as f64))
            .collect(),
        map_score: ap_sum / valid as f64,
        num_valid_queries: valid,
        num_queries: nq,
    })
}

/// Embeds query and gallery splits and scores them.
pub fn evaluate(
    net: &LstrlNet,
    store: &ParamStore<f32>,
    query: &Dataset,
    gallery: &Dataset,
    t: usize,
    metric: Metric,
) -> Result<(RetrievalTable, EvalReport)> {
    let table = RetrievalTable {
        query: embed_split(net, store, query, t, 8)?,
        gallery: embed_split(net, store, gallery, t, 8)?,
    };
    let d = distance_matrix(&table.query.embeddings, &table.gallery.embeddings, metric)?;
    let report = cmc_map(&table, &d.values)?;
    Ok((table, report))
}

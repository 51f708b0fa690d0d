//! Retrieval metrics against brute-force oracles, distances and split
//! embedding.

use lstrl_core::backbone::{BackboneConfig, LstrlNet, Variant};
use lstrl_core::data::{generate_synthetic, Dataset, SynthConfig};
use lstrl_core::eval::{
    average_precision, cmc_map, distance_matrix, embed_split, evaluate, ranking, Metric, RetrievalTable,
    SplitEmbeddings,
};
use lstrl_core::tensor::ParamStore;
use lstrl_core::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod support;

use support::retrieval_oracle::{brute_force, split};

#[test]
fn average_precision_of_hit_miss_hit() {
    let ap = average_precision(&[true, false, true]);
    assert!((ap - 5.0 / 6.0).abs() <= 1e-9, "{ap}");
    assert!((ap - 0.833_333_333_3).abs() <= 1e-9);
    assert_eq!(average_precision(&[false, false]), 0.0);
    assert_eq!(average_precision(&[true]), 1.0);
}

fn random_case(seed: u64, nq: usize, ng: usize) -> (RetrievalTable, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = rng.gen_range(1..6);
    let mut labels = |n| {
        let i: Vec<u32> = (0..n).map(|_| rng.gen_range(0..ids)).collect();
        let c: Vec<u32> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        (i, c)
    };
    let (qi, qc) = labels(nq);
    let (gi, gc) = labels(ng);
    // Small integer distances force plenty of ties.
    let d: Vec<Vec<f64>> = (0..nq).map(|_| (0..ng).map(|_| rng.gen_range(0..4) as f64).collect()).collect();
    (RetrievalTable { query: split(qi, qc), gallery: split(gi, gc) }, d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn cmc_and_map_match_the_brute_force_oracle(seed in any::<u64>(), nq in 1usize..=20, ng in 1usize..=20) {
        let (table, d) = random_case(seed, nq, ng);
        let flat = Tensor::new(vec![nq, ng], d.concat()).unwrap();
        let oracle = brute_force(&table.query, &table.gallery, &d);
        match cmc_map(&table, &flat) {
            Ok(r) => {
                prop_assert_eq!(r.num_valid_queries, oracle.valid);
                prop_assert_eq!(r.num_queries, nq);
                prop_assert_eq!(r.rank(1), oracle.hits1 as f64 / oracle.valid as f64);
                prop_assert_eq!(r.rank(5), oracle.hits5 as f64 / oracle.valid as f64);
                prop_assert_eq!(r.map_score, oracle.ap_sum / oracle.valid as f64);
            }
            Err(Error::Protocol(_)) => prop_assert_eq!(oracle.valid, 0),
            Err(e) => prop_assert!(false, "unexpected {}", e),
        }
    }

    #[test]
    fn gallery_order_does_not_change_scores_without_ties(seed in any::<u64>(), nq in 1usize..=10, ng in 2usize..=15) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (table, _) = random_case(seed, nq, ng);
        let d: Vec<Vec<f64>> = (0..nq).map(|_| (0..ng).map(|_| rng.gen::<f64>()).collect()).collect();
        let mut perm: Vec<usize> = (0..ng).collect();
        perm.reverse();
        perm.rotate_left(seed as usize % ng);
        let pg = SplitEmbeddings {
            embeddings: table.gallery.embeddings.clone(),
            ids: perm.iter().map(|&i| table.gallery.ids[i]).collect(),
            cams: perm.iter().map(|&i| table.gallery.cams[i]).collect(),
        };
        let pd: Vec<f64> = d.iter().flat_map(|r| perm.iter().map(move |&i| r[i])).collect();
        let a = cmc_map(&table, &Tensor::new(vec![nq, ng], d.concat()).unwrap());
        let b = cmc_map(&RetrievalTable { query: table.query.clone(), gallery: pg }, &Tensor::new(vec![nq, ng], pd).unwrap());
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.rank_k, b.rank_k);
                prop_assert!((a.map_score - b.map_score).abs() < 1e-12);
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "validity changed under permutation"),
        }
    }
}

#[test]
fn same_camera_matches_are_ignored() {
    let table = RetrievalTable {
        query: split(vec![0], vec![0]),
        gallery: split(vec![0, 1, 0], vec![0, 1, 1]),
    };
    let d = Tensor::new(vec![1, 3], vec![0.0, 1.0, 2.0]).unwrap();
    let r = cmc_map(&table, &d).unwrap();
    assert_eq!(r.rank(1), 0.0);
    assert_eq!(r.rank(5), 1.0);
    assert_eq!(r.map_score, 0.5);
    let only_junk = RetrievalTable { query: split(vec![0], vec![0]), gallery: split(vec![0], vec![0]) };
    let d = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
    assert!(matches!(cmc_map(&only_junk, &d), Err(Error::Protocol(_))));
}

#[test]
fn ranking_breaks_ties_by_index() {
    assert_eq!(ranking(&[1.0, 0.5, 1.0, 0.5]), vec![1, 3, 0, 2]);
}

#[test]
fn distances_match_direct_formulas() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = Tensor::<f64>::uniform(vec![3, 5], -1.0, 1.0, &mut rng);
    let g = Tensor::<f64>::uniform(vec![4, 5], -1.0, 1.0, &mut rng);
    let cos = distance_matrix(&q, &g, Metric::Cosine).unwrap();
    let euc = distance_matrix(&q, &g, Metric::Euclidean).unwrap();
    for i in 0..3 {
        for j in 0..4 {
            let a: Vec<f64> = (0..5).map(|c| q.at(&[i, c])).collect();
            let b: Vec<f64> = (0..5).map(|c| g.at(&[j, c])).collect();
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((cos.values.at(&[i, j]) - (1.0 - dot / (na * nb))).abs() < 1e-12);
            let e = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!((euc.values.at(&[i, j]) - e).abs() < 1e-12);
        }
    }
    let zero = Tensor::<f64>::zeros(vec![1, 5]);
    let z = distance_matrix(&zero, &g, Metric::Cosine).unwrap();
    assert_eq!(z.zero_norm_queries, vec![0]);
    assert!(z.values.data().iter().all(|&v| v == 1.0));
    assert!(distance_matrix(&q, &Tensor::zeros(vec![2, 4]), Metric::Cosine).is_err());
    assert_eq!("euclidean".parse::<Metric>().unwrap(), Metric::Euclidean);
    assert!("manhattan".parse::<Metric>().is_err());
}

#[test]
fn embedding_does_not_depend_on_batch_size_and_scores_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        num_identities: 6,
        confusable_pairs: 1,
        frames_per_tracklet: 5,
        frame_hw: (16, 8),
        blob_size: 3,
        ..SynthConfig::default()
    };
    generate_synthetic(&synth, dir.path(), false).unwrap();
    let query = Dataset::load(dir.path(), "query").unwrap();
    let gallery = Dataset::load(dir.path(), "gallery").unwrap();
    let cfg = BackboneConfig {
        stage_channels: [4, 8, 8, 12],
        input_hw: (16, 8),
        num_identities: 6,
        ..BackboneConfig::default()
    }
    .with_variant(Variant::MaeBme);
    let mut store = ParamStore::new();
    let net = LstrlNet::build(cfg, &mut store, 2).unwrap();
    let one = embed_split(&net, &store, &query, 4, 1).unwrap();
    let many = embed_split(&net, &store, &query, 4, 4).unwrap();
    assert_eq!(one, many);
    assert_eq!(one.embeddings.shape(), &[6, 12]);
    assert_eq!(one.ids, (0..6).collect::<Vec<u32>>());
    assert!(embed_split(&net, &store, &query, 4, 0).is_err());
    let a = evaluate(&net, &store, &query, &gallery, 4, Metric::Cosine).unwrap().1;
    let b = evaluate(&net, &store, &query, &gallery, 4, Metric::Cosine).unwrap().1;
    assert_eq!(a, b);
    assert_eq!(a.num_valid_queries, 6);
    assert!(a.tsv().starts_with("metric\tvalue\nR1\t"));
}

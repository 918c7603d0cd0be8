use neural_search::index::{exact_knn, EmbeddingIndex, IndexConfig};
use neural_search::rng::{rng, Rng};
use neural_search::Error;
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn unit(r: &mut Rng, d: usize) -> Vec<f32> {
    let v: Vec<f32> = (0..d).map(|_| StandardNormal.sample(r)).collect();
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn corpus(n: usize, d: usize, seed: u64) -> Vec<(u32, Vec<f32>)> {
    let mut r = rng(seed);
    (0..n as u32)
        .map(|i| (i * 3 + 1, unit(&mut r, d)))
        .collect()
}

#[test]
fn single_vector_is_always_returned() {
    let idx = EmbeddingIndex::build(vec![(9, vec![1.0f32, 2.0])], IndexConfig::default()).unwrap();
    for q in [[1.0, 0.0], [-3.0, 0.5], [0.0, 0.0]] {
        let n = idx.query(&q, 5).unwrap();
        assert_eq!(n.ids(), vec![9]);
        assert!(n.k_exceeds_corpus);
    }
}

#[test]
fn build_is_deterministic_per_seed() {
    let items = corpus(500, 8, 1);
    let a = EmbeddingIndex::build(
        items.clone(),
        IndexConfig {
            seed: 4,
            ..IndexConfig::default()
        },
    )
    .unwrap();
    let b = EmbeddingIndex::build(
        items.clone(),
        IndexConfig {
            seed: 4,
            ..IndexConfig::default()
        },
    )
    .unwrap();
    let c = EmbeddingIndex::build(
        items,
        IndexConfig {
            seed: 5,
            ..IndexConfig::default()
        },
    )
    .unwrap();
    assert_eq!(a.structure_hash(), b.structure_hash());
    assert_ne!(a.structure_hash(), c.structure_hash());
}

#[test]
fn stored_vector_ranks_itself_first_and_full_k_is_exact() {
    let items = corpus(300, 6, 2);
    let idx = EmbeddingIndex::build(
        items.clone(),
        IndexConfig {
            search_k: Some(40),
            ..IndexConfig::default()
        },
    )
    .unwrap();
    for (id, v) in items.iter().step_by(37) {
        assert_eq!(idx.query(v, 5).unwrap().hits[0].0, *id);
    }
    let q = unit(&mut rng(99), 6);
    assert_eq!(
        idx.query(&q, 300).unwrap(),
        exact_knn(&items, &q, 300).unwrap()
    );
}

#[test]
fn orthogonal_decoys_rank_last() {
    let mut items: Vec<(u32, Vec<f64>)> = (0..20)
        .map(|i| (i, vec![1.0, 0.1 * f64::from(i), 0.0]))
        .collect();
    items.extend((20..40).map(|i| (i, vec![0.0, 0.0, 1.0 + f64::from(i)])));
    let idx = EmbeddingIndex::build(
        items,
        IndexConfig {
            leaf_size: 4,
            ..IndexConfig::default()
        },
    )
    .unwrap();
    let ids = idx.query(&[1.0, 0.0, 0.0], 40).unwrap().ids();
    assert!(ids[..20].iter().all(|&i| i < 20));
    assert_eq!(&ids[20..], (20..40).collect::<Vec<_>>());
}

#[test]
fn contract_errors() {
    assert!(matches!(
        EmbeddingIndex::<f32>::build(vec![], IndexConfig::default()),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        EmbeddingIndex::build(
            vec![(1, vec![1.0f32, 0.0]), (2, vec![1.0])],
            IndexConfig::default()
        ),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        exact_knn::<f32>(&[], &[1.0], 3),
        Err(Error::Contract(_))
    ));
    let idx = EmbeddingIndex::build(corpus(10, 4, 1), IndexConfig::default()).unwrap();
    assert!(matches!(idx.query(&[1.0, 0.0], 3), Err(Error::Contract(_))));
}

#[test]
fn serialization_round_trip_is_bit_exact() {
    let items = corpus(2000, 16, 3);
    let idx = EmbeddingIndex::build(items, IndexConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("products.idx");
    idx.save(&path).unwrap();
    let back = EmbeddingIndex::<f32>::load(&path).unwrap();
    assert_eq!(back, idx);
    let mut r = rng(8);
    for _ in 0..20 {
        let q = unit(&mut r, 16);
        let (a, b) = (idx.query(&q, 50).unwrap(), back.query(&q, 50).unwrap());
        assert_eq!(a.hits.len(), b.hits.len());
        for (x, y) in a.hits.iter().zip(&b.hits) {
            assert_eq!((x.0, x.1.to_bits()), (y.0, y.1.to_bits()));
        }
    }
    assert!(EmbeddingIndex::<f64>::load(&path).is_err());
    let bytes = std::fs::read(&path).unwrap();
    assert!(EmbeddingIndex::<f32>::read(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn recall_on_small_random_corpus() {
    let items = corpus(2000, 32, 5);
    let idx = EmbeddingIndex::build(items.clone(), IndexConfig::default()).unwrap();
    let mut r = rng(6);
    let mut hits = 0;
    for _ in 0..100 {
        let q = unit(&mut r, 32);
        let exact = exact_knn(&items, &q, 10).unwrap().ids();
        let approx = idx.query(&q, 10).unwrap().ids();
        hits += exact.iter().filter(|i| approx.contains(i)).count();
    }
    assert!(hits as f64 / 1000.0 >= 0.95, "{hits}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn hits_are_exactly_scored_and_ordered(seed in any::<u64>(), n in 1usize..200, budget in 1usize..100, k in 1usize..30) {
        let items = corpus(n, 5, seed);
        let idx = EmbeddingIndex::build(items.clone(), IndexConfig { leaf_size: 8, n_trees: 3, seed, ..IndexConfig::default() }).unwrap();
        let q = unit(&mut rng(seed ^ 1), 5);
        let got = idx.query_with_budget(&q, k, budget).unwrap();
        let full = exact_knn(&items, &q, n).unwrap();
        let restricted: Vec<_> = full.hits.iter().filter(|h| got.hits.iter().any(|g| g.0 == h.0)).cloned().collect();
        prop_assert_eq!(&got.hits, &restricted);
        prop_assert!(got.hits.len() <= k);
    }
}

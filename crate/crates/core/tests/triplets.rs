use neural_search::catalog::{
    gen_catalog, gen_clicklog, AttributeVocabulary, Catalog, ClickModel, SyntheticQuery,
};
use neural_search::graphs::{
    build_pp_graph, build_qp_graph, classify_all, dedup_queries, random_walks, top_k_positives,
    QueryClass, QueryProductGraph, WalkConfig, BROAD_THRESHOLD,
};
use neural_search::triplets::{
    sample_pp_triplets, sample_qp_triplets, split_queries, SamplerConfig, Triplet,
};
use std::collections::{BTreeMap, BTreeSet};

struct Fixture {
    catalog: Catalog,
    queries: Vec<SyntheticQuery>,
    qp: QueryProductGraph,
    classes: BTreeMap<u32, QueryClass>,
    walks: BTreeMap<u32, BTreeSet<u32>>,
}

fn fixture() -> Fixture {
    let catalog = gen_catalog(&AttributeVocabulary::default(), 2000, 1).unwrap();
    let (queries, log) = gen_clicklog(&catalog, 3000, 20000, &ClickModel::default(), 1).unwrap();
    let log = dedup_queries(&queries, &log);
    let qp = build_qp_graph(&log);
    let classes = classify_all(&qp, &catalog, BROAD_THRESHOLD);
    let walks = random_walks(&build_pp_graph(&log, &catalog), &WalkConfig::default(), 1);
    Fixture {
        catalog,
        queries,
        qp,
        classes,
        walks,
    }
}

/// |p_hat - p| within three binomial standard deviations.
fn within_3_sigma(hits: usize, n: usize, p: f64) -> bool {
    let p_hat = hits as f64 / n as f64;
    (p_hat - p).abs() <= 3.0 * (p * (1.0 - p) / n as f64).sqrt()
}

fn collect_qp(f: &Fixture, anchors: &[u32], min: usize) -> Vec<Triplet> {
    let mut all = Vec::new();
    let mut epoch = 0;
    while all.len() < min {
        let (t, _) = sample_qp_triplets(
            anchors,
            &f.qp,
            &f.classes,
            &f.queries,
            &f.catalog,
            &SamplerConfig::default(),
            epoch,
        )
        .unwrap();
        assert!(!t.is_empty());
        all.extend(t);
        epoch += 1;
    }
    all
}

#[test]
fn negative_rules_hold_on_ten_thousand_draws() {
    let f = fixture();
    let of_class = |broad: bool| -> Vec<u32> {
        f.classes
            .iter()
            .filter(|(_, c)| {
                matches!(c, QueryClass::Broad(_)) == broad && !matches!(c, QueryClass::Unnamed)
            })
            .map(|(q, _)| *q)
            .collect()
    };
    let same_atg = |t: &Triplet, anchor_product: Option<u32>| {
        let reference = anchor_product.unwrap_or(t.positive_id);
        f.catalog.product(reference).atg == f.catalog.product(t.negative_id).atg
    };

    let broad = collect_qp(&f, &of_class(true), 10_000);
    assert!(
        broad.iter().all(|t| !same_atg(t, None)),
        "broad negative shares the ATG"
    );

    let narrow = collect_qp(&f, &of_class(false), 10_000);
    let hits = narrow.iter().filter(|t| same_atg(t, None)).count();
    assert!(
        within_3_sigma(hits, narrow.len(), 0.5),
        "narrow same-ATG {hits}/{}",
        narrow.len()
    );

    let (pp, _) = sample_pp_triplets(&f.walks, &f.catalog, &SamplerConfig::default(), 0).unwrap();
    assert!(pp.len() >= 10_000);
    let hits = pp.iter().filter(|t| same_atg(t, Some(t.anchor_id))).count();
    assert!(
        within_3_sigma(hits, pp.len(), 0.5),
        "pp same-ATG {hits}/{}",
        pp.len()
    );

    for t in &pp {
        assert_ne!(t.negative_id, t.anchor_id);
        assert!(!f.walks[&t.anchor_id].contains(&t.negative_id));
        assert!(f.walks[&t.anchor_id].contains(&t.positive_id));
    }
    for t in narrow.iter().chain(&broad) {
        assert!(!top_k_positives(t.anchor_id, &f.qp, 100).contains(&t.negative_id));
        assert_ne!(t.positive_id, t.negative_id);
        assert!(f.catalog.get(t.negative_id).is_some() && f.catalog.get(t.positive_id).is_some());
        assert!(!t.anchor_text.is_empty() && !t.positive_text.is_empty());
    }
}

#[test]
fn test_queries_never_anchor_training_triplets() {
    let f = fixture();
    let eligible: Vec<u32> = f
        .classes
        .iter()
        .filter(|(_, c)| !matches!(c, QueryClass::Unnamed))
        .map(|(q, _)| *q)
        .collect();
    let (train, test) = split_queries(&eligible, 0.85, 1).unwrap();
    let test_texts: BTreeSet<&str> = test
        .iter()
        .map(|q| f.queries[*q as usize].text.as_str())
        .collect();
    let (t, _) = sample_qp_triplets(
        &train,
        &f.qp,
        &f.classes,
        &f.queries,
        &f.catalog,
        &SamplerConfig::default(),
        0,
    )
    .unwrap();
    assert!(t
        .iter()
        .all(|t| !test_texts.contains(t.anchor_text.as_str())));
}

#[test]
fn sampling_is_deterministic_and_resamples_per_epoch() {
    let f = fixture();
    let anchors: Vec<u32> = f.classes.keys().copied().take(200).collect();
    let cfg = SamplerConfig::default();
    let a =
        sample_qp_triplets(&anchors, &f.qp, &f.classes, &f.queries, &f.catalog, &cfg, 0).unwrap();
    let b =
        sample_qp_triplets(&anchors, &f.qp, &f.classes, &f.queries, &f.catalog, &cfg, 0).unwrap();
    let c =
        sample_qp_triplets(&anchors, &f.qp, &f.classes, &f.queries, &f.catalog, &cfg, 1).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
}

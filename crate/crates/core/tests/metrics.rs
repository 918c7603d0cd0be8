use neural_search::catalog::{gen_catalog, gen_clicklog, AttributeVocabulary, ClickModel};
use neural_search::graphs::{
    build_qp_graph, classify_all, dedup_queries, QueryClass, BROAD_THRESHOLD,
};
use neural_search::metrics::{
    average_precision, make_ranking_sets, make_retrieval_cases, ndcg, precision_recall_at_k,
    rank_candidates, reciprocal_rank, RankingSetConfig,
};
use neural_search::rng::{rng, Rng};
use neural_search::Error;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeSet;

/// Direct-definition oracles over 0/1 relevance labels in rank order.
mod oracle {
    pub fn rr(labels: &[bool]) -> f64 {
        let mut before = 0.0;
        for &l in labels {
            if l {
                return 1.0 / (before + 1.0);
            }
            before += 1.0;
        }
        panic!("no positive");
    }

    pub fn ap(labels: &[bool]) -> f64 {
        let r = labels.iter().filter(|&&l| l).count() as f64;
        let mut total = 0.0;
        for k in 1..=labels.len() {
            if labels[k - 1] {
                let p_at_k = labels[..k].iter().filter(|&&l| l).count() as f64 / k as f64;
                total += p_at_k;
            }
        }
        total / r
    }

    fn dcg(labels: &[bool]) -> f64 {
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                if l {
                    1.0 / ((i + 2) as f64).log2()
                } else {
                    0.0
                }
            })
            .sum()
    }

    fn permutations(items: &mut Vec<bool>, k: usize, best: &mut f64) {
        if k == items.len() {
            *best = best.max(dcg(items));
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permutations(items, k + 1, best);
            items.swap(k, i);
        }
    }

    /// Ideal DCG found by trying every ordering.
    pub fn ndcg(labels: &[bool]) -> f64 {
        let mut best = 0.0;
        permutations(&mut labels.to_vec(), 0, &mut best);
        dcg(labels) / best
    }
}

fn random_case(r: &mut Rng) -> (Vec<u32>, BTreeSet<u32>) {
    let n = r.random_range(1..=8);
    let mut ids: Vec<u32> = (0..100).collect();
    ids.shuffle(r);
    ids.truncate(n);
    let mut positives: BTreeSet<u32> = ids.iter().filter(|_| r.random_bool(0.4)).copied().collect();
    if positives.is_empty() {
        positives.insert(ids[r.random_range(0..n)]);
    }
    (ids, positives)
}

#[test]
fn metrics_match_direct_definitions_on_random_cases() {
    let mut r = rng(2024);
    for _ in 0..1000 {
        let (ranking, positives) = random_case(&mut r);
        let labels: Vec<bool> = ranking.iter().map(|p| positives.contains(p)).collect();
        assert!((average_precision(&ranking, &positives) - oracle::ap(&labels)).abs() < 1e-12);
        assert!((ndcg(&ranking, &positives) - oracle::ndcg(&labels)).abs() < 1e-12);
        let first = *ranking.iter().find(|p| positives.contains(p)).unwrap();
        let single: Vec<bool> = ranking.iter().map(|&p| p == first).collect();
        assert!((reciprocal_rank(&ranking, first).unwrap() - oracle::rr(&single)).abs() < 1e-12);
        let k = r.random_range(1..=8);
        let top: BTreeSet<u32> = ranking.iter().take(k).copied().collect();
        let inter = top.intersection(&positives).count() as f64;
        let (p, rec) = precision_recall_at_k(&ranking, &positives, k);
        assert!((p - inter / k as f64).abs() < 1e-12);
        assert!((rec - inter / positives.len() as f64).abs() < 1e-12);
    }
}

#[test]
fn hand_computed_values() {
    let rr: Vec<f64> = [1, 2, 4]
        .iter()
        .map(|&rank| reciprocal_rank(&[10, 11, 12, 13], 9 + rank).unwrap())
        .collect();
    assert!((rr.iter().sum::<f64>() / 3.0 - 0.583_333_333_333_333_3).abs() < 1e-12);
    assert!(matches!(
        reciprocal_rank(&[1, 2], 3),
        Err(Error::Contract(_))
    ));
    let one: BTreeSet<u32> = [2].into();
    assert_eq!(average_precision(&[1, 2, 3, 4], &one), 0.5);
    assert!((ndcg(&[1, 2, 3], &one) - 1.0 / 3f64.log2()).abs() < 1e-12);
    let ideal: BTreeSet<u32> = [1, 2].into();
    assert_eq!(
        (
            average_precision(&[1, 2, 3], &ideal),
            ndcg(&[2, 1, 3], &ideal)
        ),
        (1.0, 1.0)
    );
    let truth: BTreeSet<u32> = (0..200).collect();
    let retrieved: Vec<u32> = (0..50).collect();
    assert_eq!(precision_recall_at_k(&retrieved, &truth, 50), (1.0, 0.25));
    assert_eq!(precision_recall_at_k(&[500, 501], &truth, 2), (0.0, 0.0));
}

#[test]
fn metrics_are_invariant_to_id_relabeling_and_negative_order() {
    let mut r = rng(9);
    for _ in 0..200 {
        let (ranking, positives) = random_case(&mut r);
        let mut relabel: Vec<u32> = (0..100).collect();
        relabel.shuffle(&mut r);
        let ranking2: Vec<u32> = ranking
            .iter()
            .map(|&p| relabel[p as usize] + 1000)
            .collect();
        let positives2: BTreeSet<u32> = positives
            .iter()
            .map(|&p| relabel[p as usize] + 1000)
            .collect();
        assert_eq!(
            average_precision(&ranking, &positives),
            average_precision(&ranking2, &positives2)
        );
        assert_eq!(ndcg(&ranking, &positives), ndcg(&ranking2, &positives2));
        // Permuting negatives among their own slots leaves every metric unchanged.
        let slots: Vec<usize> = (0..ranking.len())
            .filter(|&i| !positives.contains(&ranking[i]))
            .collect();
        let mut negs: Vec<u32> = slots.iter().map(|&i| ranking[i]).collect();
        negs.shuffle(&mut r);
        let mut shuffled = ranking.clone();
        slots.iter().zip(negs).for_each(|(&i, p)| shuffled[i] = p);
        assert_eq!(ndcg(&ranking, &positives), ndcg(&shuffled, &positives));
        assert_eq!(
            average_precision(&ranking, &positives),
            average_precision(&shuffled, &positives)
        );
    }
}

fn gaussian(r: &mut Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(r)).collect()
}

#[test]
fn random_embeddings_give_chance_mrr() {
    let harmonic_21: f64 = (1..=21).map(|i| 1.0 / f64::from(i)).sum();
    let mut r = rng(17);
    let mut total = 0.0;
    let cases = 10_000;
    for _ in 0..cases {
        let q = gaussian(&mut r, 16);
        let cands: Vec<(u32, Vec<f64>)> = (0..21).map(|i| (i, gaussian(&mut r, 16))).collect();
        let view: Vec<(u32, &[f64])> = cands.iter().map(|(i, v)| (*i, v.as_slice())).collect();
        total += reciprocal_rank(&rank_candidates(&q, &view), 0).unwrap();
    }
    let mrr = total / cases as f64;
    assert!((mrr - harmonic_21 / 21.0).abs() < 0.01, "{mrr}");
}

#[test]
fn ranking_is_scale_invariant_with_id_tie_break() {
    let mut r = rng(3);
    let q = gaussian(&mut r, 8);
    let cands: Vec<(u32, Vec<f64>)> = (0..30).map(|i| (i, gaussian(&mut r, 8))).collect();
    let view: Vec<(u32, &[f64])> = cands.iter().map(|(i, v)| (*i, v.as_slice())).collect();
    let scaled: Vec<(u32, Vec<f64>)> = cands
        .iter()
        .map(|(i, v)| (*i, v.iter().map(|x| x * 7.5).collect()))
        .collect();
    let sview: Vec<(u32, &[f64])> = scaled.iter().map(|(i, v)| (*i, v.as_slice())).collect();
    assert_eq!(rank_candidates(&q, &view), rank_candidates(&q, &sview));
    let qs: Vec<f64> = q.iter().map(|x| x * 0.01).collect();
    assert_eq!(rank_candidates(&q, &view), rank_candidates(&qs, &view));
    let tie = [1.0, 0.0];
    assert_eq!(
        rank_candidates(&[1.0, 0.0], &[(5, &tie[..]), (2, &tie[..])]),
        vec![2, 5]
    );
}

#[test]
fn ranking_sets_follow_the_construction_rules() {
    let catalog = gen_catalog(&AttributeVocabulary::default(), 400, 3).unwrap();
    let (queries, log) = gen_clicklog(&catalog, 300, 3000, &ClickModel::default(), 3).unwrap();
    let log = dedup_queries(&queries, &log);
    let qp = build_qp_graph(&log);
    let test: Vec<u32> = qp.queries().take(150).collect();
    let cfg = RankingSetConfig {
        seed: 5,
        ..RankingSetConfig::default()
    };
    let sets = make_ranking_sets(&test, &qp, &catalog, &queries, &cfg).unwrap();
    assert_eq!(sets.mrr.len() + sets.skipped, test.len());
    for case in &sets.mrr {
        assert_eq!((case.positives.len(), case.negatives.len()), (1, 20));
        assert_eq!(case.candidates().len(), 21);
    }
    for case in &sets.map {
        assert_eq!(case.negatives.len(), 3 * case.positives.len());
        let clicked: BTreeSet<u32> = qp
            .neighbors(case.query_id)
            .unwrap()
            .keys()
            .copied()
            .collect();
        assert!(case.negatives.iter().all(|n| !clicked.contains(n)));
        let uniq: BTreeSet<u32> = case.negatives.iter().copied().collect();
        assert_eq!(uniq.len(), case.negatives.len());
    }
    assert_eq!(
        sets,
        make_ranking_sets(&test, &qp, &catalog, &queries, &cfg).unwrap()
    );

    let same = RankingSetConfig {
        same_atg_negatives: true,
        ..cfg
    };
    for case in make_ranking_sets(&test, &qp, &catalog, &queries, &same)
        .unwrap()
        .mrr
    {
        let atg = &catalog.product(case.positives[0]).atg;
        assert!(case
            .negatives
            .iter()
            .all(|&n| &catalog.product(n).atg == atg));
    }

    let classes = classify_all(&qp, &catalog, BROAD_THRESHOLD);
    let retrieval = make_retrieval_cases(&test, &qp, &classes, &queries).unwrap();
    assert!(!retrieval.is_empty());
    for case in &retrieval {
        assert!(!matches!(classes[&case.query_id], QueryClass::Unnamed));
        assert!(case
            .truth
            .iter()
            .all(|&p| catalog.product(p).atg == case.atg));
    }
}

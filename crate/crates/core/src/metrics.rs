//! Ranking and retrieval test sets and the metrics computed on them.

use crate::catalog::{Atg, Catalog, ProductId, QueryId, SyntheticQuery};
use crate::encoders::Encoder;
use crate::error::{Error, Result};
use crate::graphs::{top_k_positives, QueryClass, QueryProductGraph};
use crate::index::EmbeddingIndex;
use crate::rng::{self, derive_index, derive_seed};
use crate::scalar::Scalar;
use crate::tokenizer::BpeVocab;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingCase {
    pub query_id: QueryId,
    pub query_text: String,
    pub positives: Vec<ProductId>,
    pub negatives: Vec<ProductId>,
}

impl RankingCase {
    /// Candidates in ascending id order.
    pub fn candidates(&self) -> Vec<ProductId> {
        let mut c: Vec<ProductId> = self
            .positives
            .iter()
            .chain(&self.negatives)
            .copied()
            .collect();
        c.sort_unstable();
        c
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalCase {
    pub query_id: QueryId,
    pub query_text: String,
    pub truth: BTreeSet<ProductId>,
    pub atg: Atg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingSetConfig {
    /// Negatives per single-positive reciprocal-rank case.
    pub mrr_negatives: usize,
    /// Negatives per positive in average-precision / NDCG cases.
    pub negatives_per_positive: usize,
    /// Positives taken per query for average-precision / NDCG cases.
    pub max_positives: usize,
    /// Draw negatives from the positive's ATG instead of the whole catalog.
    pub same_atg_negatives: bool,
    pub seed: u64,
}

impl Default for RankingSetConfig {
    fn default() -> Self {
        Self {
            mrr_negatives: 20,
            negatives_per_positive: 3,
            max_positives: 100,
            same_atg_negatives: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingSets {
    pub mrr: Vec<RankingCase>,
    pub map: Vec<RankingCase>,
    /// Queries dropped because too few products were left to draw negatives from.
    pub skipped: usize,
}

fn query_texts(queries: &[SyntheticQuery]) -> BTreeMap<QueryId, &str> {
    queries
        .iter()
        .map(|q| (q.query_id, q.text.as_str()))
        .collect()
}

/// Build the reciprocal-rank cases (top clicked product against
/// `mrr_negatives` unclicked ones) and the average-precision cases (clicked
/// products against `negatives_per_positive` unclicked ones each).
pub fn make_ranking_sets(
    test_queries: &[QueryId],
    qp: &QueryProductGraph,
    catalog: &Catalog,
    queries: &[SyntheticQuery],
    cfg: &RankingSetConfig,
) -> Result<RankingSets> {
    let texts = query_texts(queries);
    let base = derive_seed(cfg.seed, "ranking-sets");
    let mut sets = RankingSets::default();
    for &q in test_queries {
        let text = *texts
            .get(&q)
            .ok_or_else(|| Error::NotFound(format!("query {q}")))?;
        let clicked: BTreeSet<ProductId> = qp
            .neighbors(q)
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default();
        let positives = top_k_positives(q, qp, cfg.max_positives);
        if positives.is_empty() {
            continue;
        }
        let pool: Vec<ProductId> = (0..catalog.len() as ProductId)
            .filter(|p| !clicked.contains(p))
            .filter(|&p| {
                !cfg.same_atg_negatives
                    || catalog.product(p).atg == catalog.product(positives[0]).atg
            })
            .collect();
        let n_map = cfg.negatives_per_positive * positives.len();
        if pool.len() < cfg.mrr_negatives || pool.len() < n_map {
            sets.skipped += 1;
            continue;
        }
        let mut r = rng::rng(derive_index(base, u64::from(q)));
        let mut draw = |n: usize| -> Vec<ProductId> {
            sample(&mut r, pool.len(), n)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        };
        sets.mrr.push(RankingCase {
            query_id: q,
            query_text: text.into(),
            positives: vec![positives[0]],
            negatives: draw(cfg.mrr_negatives),
        });
        sets.map.push(RankingCase {
            query_id: q,
            query_text: text.into(),
            negatives: draw(n_map),
            positives,
        });
    }
    Ok(sets)
}

/// Single-ATG test queries with every clicked product as ground truth.
pub fn make_retrieval_cases(
    test_queries: &[QueryId],
    qp: &QueryProductGraph,
    classes: &BTreeMap<QueryId, QueryClass>,
    queries: &[SyntheticQuery],
) -> Result<Vec<RetrievalCase>> {
    let texts = query_texts(queries);
    let mut cases = Vec::new();
    for &q in test_queries {
        let Some(atg) = classes.get(&q).and_then(QueryClass::atg) else {
            continue;
        };
        let truth: BTreeSet<ProductId> = qp
            .neighbors(q)
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default();
        if truth.is_empty() {
            continue;
        }
        let text = *texts
            .get(&q)
            .ok_or_else(|| Error::NotFound(format!("query {q}")))?;
        cases.push(RetrievalCase {
            query_id: q,
            query_text: text.into(),
            truth,
            atg: atg.clone(),
        });
    }
    Ok(cases)
}

fn cosine<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Order candidates by descending cosine similarity to `query`, ties by ascending id.
pub fn rank_candidates<T: Scalar>(query: &[T], candidates: &[(ProductId, &[T])]) -> Vec<ProductId> {
    let mut scored: Vec<(ProductId, f64)> = candidates
        .iter()
        .map(|(id, v)| (*id, cosine(query, v)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.into_iter().map(|s| s.0).collect()
}

/// `1 / rank` of the (single) positive.
pub fn reciprocal_rank(ranking: &[ProductId], positive: ProductId) -> Result<f64> {
    ranking
        .iter()
        .position(|&p| p == positive)
        .map(|i| 1.0 / (i + 1) as f64)
        .ok_or_else(|| Error::Contract(format!("positive {positive} missing from the ranking")))
}

/// Mean over positives of the precision at each positive's rank.
pub fn average_precision(ranking: &[ProductId], positives: &BTreeSet<ProductId>) -> f64 {
    if positives.is_empty() {
        return 0.0;
    }
    let (mut found, mut sum) = (0usize, 0.0);
    for (i, p) in ranking.iter().enumerate() {
        if positives.contains(p) {
            found += 1;
            sum += found as f64 / (i + 1) as f64;
        }
    }
    sum / positives.len() as f64
}

/// Binary-gain NDCG with a `1 / log2(rank + 1)` discount over the whole ranking.
pub fn ndcg(ranking: &[ProductId], positives: &BTreeSet<ProductId>) -> f64 {
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = ranking
        .iter()
        .enumerate()
        .filter(|(_, p)| positives.contains(p))
        .map(|(i, _)| discount(i))
        .sum();
    let ideal: f64 = (0..positives.len()).map(discount).sum();
    if ideal == 0.0 {
        0.0
    } else {
        dcg / ideal
    }
}

/// `(|retrieved ∩ truth| / k, |retrieved ∩ truth| / |truth|)`.
pub fn precision_recall_at_k(
    retrieved: &[ProductId],
    truth: &BTreeSet<ProductId>,
    k: usize,
) -> (f64, f64) {
    let hits = retrieved
        .iter()
        .take(k)
        .filter(|p| truth.contains(p))
        .count() as f64;
    let recall = if truth.is_empty() {
        0.0
    } else {
        hits / truth.len() as f64
    };
    (if k == 0 { 0.0 } else { hits / k as f64 }, recall)
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: QueryId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reciprocal_rank: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub average_precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ndcg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub mrr: f64,
    pub map: f64,
    pub ndcg: f64,
    pub mrr_cases: usize,
    pub map_cases: usize,
    pub per_query: Vec<QueryMetrics>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub k: usize,
    pub precision_at_k: f64,
    pub recall_at_k: f64,
    pub cases: usize,
    pub per_query: Vec<QueryMetrics>,
}

/// Which product text is embedded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProductText {
    #[default]
    Description,
    Title,
}

/// Encoder plus tokenizer, with batched embedding of texts.
pub struct Embedder<'a, T: Scalar> {
    pub encoder: &'a dyn Encoder<T>,
    pub vocab: &'a BpeVocab,
    pub max_len: usize,
    pub batch: usize,
}

impl<T: Scalar> Embedder<'_, T> {
    pub fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Vec<T>>> {
        let ids: Vec<Vec<u32>> = texts
            .iter()
            .map(|t| {
                let mut ids = self.vocab.encode_truncated(t, self.max_len).ids;
                if ids.is_empty() {
                    ids.push(crate::tokenizer::UNK);
                }
                ids
            })
            .collect();
        self.encoder.embed(&ids, self.batch)
    }

    /// Embeddings of every catalog product, indexed by product id.
    pub fn embed_catalog(&self, catalog: &Catalog, text: ProductText) -> Result<Vec<Vec<T>>> {
        let texts: Vec<&str> = catalog
            .products
            .iter()
            .map(|p| match text {
                ProductText::Description => p.description.as_str(),
                ProductText::Title => p.title.as_str(),
            })
            .collect();
        self.embed_texts(&texts)
    }
}

/// Rank every case's candidates by the model and compute MRR, MAP and NDCG.
pub fn evaluate_ranking<T: Scalar>(
    embedder: &Embedder<'_, T>,
    products: &[Vec<T>],
    sets: &RankingSets,
) -> Result<RankingReport> {
    let mut per_query: BTreeMap<QueryId, QueryMetrics> = BTreeMap::new();
    let rank_case = |case: &RankingCase, q: &[T]| -> Result<Vec<ProductId>> {
        let cands: Vec<(ProductId, &[T])> = case
            .candidates()
            .into_iter()
            .map(|p| {
                products
                    .get(p as usize)
                    .map(|v| (p, v.as_slice()))
                    .ok_or_else(|| Error::NotFound(format!("product {p}")))
            })
            .collect::<Result<_>>()?;
        Ok(rank_candidates(q, &cands))
    };
    let mrr_q = embedder.embed_texts(
        &sets
            .mrr
            .iter()
            .map(|c| c.query_text.as_str())
            .collect::<Vec<_>>(),
    )?;
    for (case, q) in sets.mrr.iter().zip(&mrr_q) {
        let rr = reciprocal_rank(&rank_case(case, q)?, case.positives[0])?;
        per_query
            .entry(case.query_id)
            .or_insert_with(|| QueryMetrics {
                query_id: case.query_id,
                ..Default::default()
            })
            .reciprocal_rank = Some(rr);
    }
    let map_q = embedder.embed_texts(
        &sets
            .map
            .iter()
            .map(|c| c.query_text.as_str())
            .collect::<Vec<_>>(),
    )?;
    for (case, q) in sets.map.iter().zip(&map_q) {
        let ranking = rank_case(case, q)?;
        let pos: BTreeSet<ProductId> = case.positives.iter().copied().collect();
        let m = per_query
            .entry(case.query_id)
            .or_insert_with(|| QueryMetrics {
                query_id: case.query_id,
                ..Default::default()
            });
        m.average_precision = Some(average_precision(&ranking, &pos));
        m.ndcg = Some(ndcg(&ranking, &pos));
    }
    let per_query: Vec<QueryMetrics> = per_query.into_values().collect();
    Ok(RankingReport {
        mrr: mean(per_query.iter().filter_map(|m| m.reciprocal_rank)),
        map: mean(per_query.iter().filter_map(|m| m.average_precision)),
        ndcg: mean(per_query.iter().filter_map(|m| m.ndcg)),
        mrr_cases: sets.mrr.len(),
        map_cases: sets.map.len(),
        per_query,
    })
}

/// Retrieve the top `k` products for each case from `index` and compute P@k / R@k.
pub fn evaluate_retrieval<T: Scalar>(
    embedder: &Embedder<'_, T>,
    index: &EmbeddingIndex<T>,
    cases: &[RetrievalCase],
    k: usize,
) -> Result<RetrievalReport> {
    let qs = embedder.embed_texts(
        &cases
            .iter()
            .map(|c| c.query_text.as_str())
            .collect::<Vec<_>>(),
    )?;
    let mut per_query = Vec::with_capacity(cases.len());
    for (case, q) in cases.iter().zip(&qs) {
        let retrieved = index.query(q, k)?.ids();
        let (p, r) = precision_recall_at_k(&retrieved, &case.truth, k);
        per_query.push(QueryMetrics {
            query_id: case.query_id,
            precision: Some(p),
            recall: Some(r),
            ..Default::default()
        });
    }
    Ok(RetrievalReport {
        k,
        precision_at_k: mean(per_query.iter().filter_map(|m| m.precision)),
        recall_at_k: mean(per_query.iter().filter_map(|m| m.recall)),
        cases: cases.len(),
        per_query,
    })
}

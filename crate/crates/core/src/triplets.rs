//! Triplet mining from the click graphs: query splits, negative sampling
//! by query class, product-product augmentation and TSV I/O.

use crate::catalog::{Atg, Catalog, ProductId, QueryId, SyntheticQuery};
use crate::error::{Error, Result};
use crate::graphs::{top_k_positives, QueryClass, QueryProductGraph};
use crate::rng::{self, Rng};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TripletSource {
    Qp,
    Pp,
}

impl TripletSource {
    pub fn as_str(self) -> &'static str {
        match self {
            TripletSource::Qp => "qp",
            TripletSource::Pp => "pp",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor_text: String,
    pub positive_text: String,
    pub negative_text: String,
    pub source: TripletSource,
    /// Query id for query anchors, product id for product anchors.
    pub anchor_id: u32,
    pub positive_id: ProductId,
    pub negative_id: ProductId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PositiveSampling {
    Uniform,
    /// Proportional to click-graph edge weight (query anchors only).
    Weighted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Probability that a narrow query's negative shares the positive's ATG.
    pub narrow_same_atg: f64,
    /// Probability that a product anchor's negative shares the anchor's ATG.
    pub pp_same_atg: f64,
    pub top_k: usize,
    /// `None` emits one triplet per (anchor, positive) pair; `Some(n)` draws
    /// `n` positives per anchor with replacement.
    pub positives_per_anchor: Option<usize>,
    pub positive_sampling: PositiveSampling,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            narrow_same_atg: 0.5,
            pp_same_atg: 0.5,
            top_k: 100,
            positives_per_anchor: None,
            positive_sampling: PositiveSampling::Uniform,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("narrow_same_atg", self.narrow_same_atg),
            ("pp_same_atg", self.pp_same_atg),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// Counts of emitted triplets and of draws skipped because no product
/// satisfied the negative rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SampleStats {
    pub emitted: usize,
    pub skipped: usize,
}

/// Partition query ids by query; the first `round(ratio * n)` of a seeded
/// shuffle go to training.
pub fn split_queries(
    ids: &[QueryId],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<QueryId>, Vec<QueryId>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!(
            "split ratio must lie in (0, 1), got {ratio}"
        )));
    }
    let mut ids: Vec<QueryId> = ids
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    ids.shuffle(&mut rng::stage_rng(seed, "split"));
    let n_train = (ratio * ids.len() as f64).round() as usize;
    let test = ids.split_off(n_train);
    ids.sort_unstable();
    let mut test = test;
    test.sort_unstable();
    Ok((ids, test))
}

/// Catalog products grouped by ATG for negative sampling.
struct NegativePool<'a> {
    catalog: &'a Catalog,
    by_atg: HashMap<&'a Atg, Vec<ProductId>>,
}

impl<'a> NegativePool<'a> {
    fn new(catalog: &'a Catalog) -> Self {
        let mut by_atg: HashMap<&Atg, Vec<ProductId>> = HashMap::new();
        for p in &catalog.products {
            by_atg.entry(&p.atg).or_default().push(p.product_id);
        }
        Self { catalog, by_atg }
    }

    /// Uniform product with (`same`) or without the given ATG, outside `exclude`.
    fn draw(
        &self,
        atg: &Atg,
        same: bool,
        exclude: &dyn Fn(ProductId) -> bool,
        rng: &mut Rng,
    ) -> Option<ProductId> {
        let ok = |p: ProductId| (self.catalog.product(p).atg == *atg) == same && !exclude(p);
        let candidates: &[ProductId] = if same {
            self.by_atg.get(atg).map(Vec::as_slice).unwrap_or(&[])
        } else {
            &[]
        };
        let n = if same {
            candidates.len()
        } else {
            self.catalog.len()
        };
        if n == 0 {
            return None;
        }
        let at = |i: usize| if same { candidates[i] } else { i as ProductId };
        for _ in 0..64 {
            let p = at(rng.random_range(0..n));
            if ok(p) {
                return Some(p);
            }
        }
        let eligible: Vec<ProductId> = (0..n).map(at).filter(|&p| ok(p)).collect();
        (!eligible.is_empty()).then(|| eligible[rng.random_range(0..eligible.len())])
    }
}

fn pick_positives(
    ranked: &[(ProductId, u32)],
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Vec<ProductId> {
    match cfg.positives_per_anchor {
        None => ranked.iter().map(|(p, _)| *p).collect(),
        Some(_) if ranked.is_empty() => Vec::new(),
        Some(n) => (0..n)
            .map(|_| match cfg.positive_sampling {
                PositiveSampling::Uniform => ranked[rng.random_range(0..ranked.len())].0,
                PositiveSampling::Weighted => {
                    let total: u64 = ranked.iter().map(|(_, w)| *w as u64).sum();
                    let mut r = rng.random_range(0..total.max(1));
                    for &(p, w) in ranked {
                        if r < w as u64 {
                            return p;
                        }
                        r -= w as u64;
                    }
                    ranked[ranked.len() - 1].0
                }
            })
            .collect(),
    }
}

/// Query-anchored triplets for the given anchors (training queries).
///
/// Broad queries always get a negative from another ATG; narrow queries get
/// a same-ATG negative with probability `narrow_same_atg`. Unnamed and
/// unclassified anchors are ignored. `epoch` selects a fresh negative draw.
pub fn sample_qp_triplets(
    anchors: &[QueryId],
    qp: &QueryProductGraph,
    classes: &BTreeMap<QueryId, QueryClass>,
    queries: &[SyntheticQuery],
    catalog: &Catalog,
    cfg: &SamplerConfig,
    epoch: u64,
) -> Result<(Vec<Triplet>, SampleStats)> {
    cfg.validate()?;
    let pool = NegativePool::new(catalog);
    let mut rng = rng::rng(rng::derive_index(
        rng::derive_seed(cfg.seed, "qp-triplets"),
        epoch,
    ));
    let mut out = Vec::new();
    let mut stats = SampleStats::default();
    for &q in anchors {
        let Some(class) = classes.get(&q) else {
            continue;
        };
        if matches!(class, QueryClass::Unnamed) {
            continue;
        }
        let query = queries
            .get(q as usize)
            .filter(|x| x.query_id == q)
            .ok_or_else(|| Error::NotFound(format!("query {q}")))?;
        let top = top_k_positives(q, qp, cfg.top_k);
        let positive_set: BTreeSet<ProductId> = top.iter().copied().collect();
        let ranked: Vec<(ProductId, u32)> = top.iter().map(|&p| (p, qp.weight(q, p))).collect();
        for pos in pick_positives(&ranked, cfg, &mut rng) {
            let pos_atg = &catalog.product(pos).atg;
            let same = match class {
                QueryClass::Broad(_) => false,
                _ => rng.random_bool(cfg.narrow_same_atg),
            };
            match pool.draw(pos_atg, same, &|p| positive_set.contains(&p), &mut rng) {
                Some(neg) => {
                    stats.emitted += 1;
                    out.push(Triplet {
                        anchor_text: query.text.clone(),
                        positive_text: catalog.product(pos).description.clone(),
                        negative_text: catalog.product(neg).description.clone(),
                        source: TripletSource::Qp,
                        anchor_id: q,
                        positive_id: pos,
                        negative_id: neg,
                    });
                }
                None => stats.skipped += 1,
            }
        }
    }
    Ok((out, stats))
}

/// Product-anchored triplets from random-walk neighbourhoods. Negatives
/// avoid the anchor and its whole visited set.
pub fn sample_pp_triplets(
    walk_sets: &BTreeMap<ProductId, BTreeSet<ProductId>>,
    catalog: &Catalog,
    cfg: &SamplerConfig,
    epoch: u64,
) -> Result<(Vec<Triplet>, SampleStats)> {
    cfg.validate()?;
    let pool = NegativePool::new(catalog);
    let mut rng = rng::rng(rng::derive_index(
        rng::derive_seed(cfg.seed, "pp-triplets"),
        epoch,
    ));
    let mut out = Vec::new();
    let mut stats = SampleStats::default();
    let uniform = SamplerConfig {
        positive_sampling: PositiveSampling::Uniform,
        ..cfg.clone()
    };
    for (&anchor, visited) in walk_sets {
        let a = catalog
            .get(anchor)
            .ok_or_else(|| Error::NotFound(format!("product {anchor}")))?;
        let ranked: Vec<(ProductId, u32)> = visited.iter().map(|&p| (p, 1)).collect();
        for pos in pick_positives(&ranked, &uniform, &mut rng) {
            let same = rng.random_bool(cfg.pp_same_atg);
            match pool.draw(
                &a.atg,
                same,
                &|p| p == anchor || visited.contains(&p),
                &mut rng,
            ) {
                Some(neg) => {
                    stats.emitted += 1;
                    out.push(Triplet {
                        anchor_text: a.description.clone(),
                        positive_text: catalog.product(pos).description.clone(),
                        negative_text: catalog.product(neg).description.clone(),
                        source: TripletSource::Pp,
                        anchor_id: anchor,
                        positive_id: pos,
                        negative_id: neg,
                    });
                }
                None => stats.skipped += 1,
            }
        }
    }
    Ok((out, stats))
}

/// Concatenate and shuffle with a seeded stream.
pub fn augment(qp: Vec<Triplet>, pp: Vec<Triplet>, seed: u64) -> Vec<Triplet> {
    let mut all = qp;
    all.extend(pp);
    all.shuffle(&mut rng::stage_rng(seed, "augment"));
    all
}

fn clean(field: &str) -> Result<&str> {
    if field.contains(['\t', '\n', '\r']) {
        return Err(Error::Contract(format!(
            "triplet text contains a tab or newline: {field:?}"
        )));
    }
    Ok(field)
}

/// `anchor<TAB>positive<TAB>negative<TAB>source<TAB>anchor_id<TAB>positive_id<TAB>negative_id`.
pub fn write_triplets_tsv<W: Write>(triplets: &[Triplet], mut out: W) -> Result<()> {
    for t in triplets {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            clean(&t.anchor_text)?,
            clean(&t.positive_text)?,
            clean(&t.negative_text)?,
            t.source.as_str(),
            t.anchor_id,
            t.positive_id,
            t.negative_id
        )?;
    }
    Ok(())
}

pub fn read_triplets_tsv<R: BufRead>(input: R) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |d: &str| Error::format("triplet file", format!("line {}: {d}", i + 1));
        if f.len() != 7 {
            return Err(bad(&format!("expected 7 fields, got {}", f.len())));
        }
        let source = match f[3] {
            "qp" => TripletSource::Qp,
            "pp" => TripletSource::Pp,
            other => return Err(bad(&format!("unknown source {other:?}"))),
        };
        let id = |s: &str| s.parse::<u32>().map_err(|_| bad(&format!("bad id {s:?}")));
        out.push(Triplet {
            anchor_text: f[0].into(),
            positive_text: f[1].into(),
            negative_text: f[2].into(),
            source,
            anchor_id: id(f[4])?,
            positive_id: id(f[5])?,
            negative_id: id(f[6])?,
        });
    }
    Ok(out)
}

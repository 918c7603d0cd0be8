//! Query-product and product-product click graphs, query classification
//! and random-walk neighbourhoods.

use crate::catalog::{Atg, Catalog, ClickLog, ProductId, QueryId, SyntheticQuery};
use crate::error::{Error, Result};
use crate::rng;
use rand::Rng as _;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

/// Bipartite graph weighted by the number of sessions in which a query led
/// to a click on a product.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct QueryProductGraph {
    adjacency: BTreeMap<QueryId, BTreeMap<ProductId, u32>>,
}

impl QueryProductGraph {
    pub fn from_edges(edges: impl IntoIterator<Item = (QueryId, ProductId, u32)>) -> Result<Self> {
        let mut g = Self::default();
        for (q, p, w) in edges {
            if w == 0 {
                return Err(Error::Contract(format!("edge ({q}, {p}) has zero weight")));
            }
            *g.adjacency.entry(q).or_default().entry(p).or_insert(0) += w;
        }
        Ok(g)
    }

    pub fn weight(&self, q: QueryId, p: ProductId) -> u32 {
        self.adjacency
            .get(&q)
            .and_then(|m| m.get(&p))
            .copied()
            .unwrap_or(0)
    }

    pub fn neighbors(&self, q: QueryId) -> Option<&BTreeMap<ProductId, u32>> {
        self.adjacency.get(&q)
    }

    pub fn queries(&self) -> impl Iterator<Item = QueryId> + '_ {
        self.adjacency.keys().copied()
    }

    pub fn edges(&self) -> impl Iterator<Item = (QueryId, ProductId, u32)> + '_ {
        self.adjacency
            .iter()
            .flat_map(|(&q, m)| m.iter().map(move |(&p, &w)| (q, p, w)))
    }

    pub fn num_edges(&self) -> usize {
        self.adjacency.values().map(BTreeMap::len).sum()
    }
}

/// Undirected co-click graph restricted to same-ATG product pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ProductProductGraph {
    adjacency: BTreeMap<ProductId, BTreeMap<ProductId, u32>>,
    node_atg: BTreeMap<ProductId, Atg>,
}

impl ProductProductGraph {
    /// Nodes are every catalog product; edges must join distinct same-ATG products.
    pub fn from_edges(
        catalog: &Catalog,
        edges: impl IntoIterator<Item = (ProductId, ProductId, u32)>,
    ) -> Result<Self> {
        let mut g = Self {
            adjacency: BTreeMap::new(),
            node_atg: catalog
                .products
                .iter()
                .map(|p| (p.product_id, p.atg.clone()))
                .collect(),
        };
        for (a, b, w) in edges {
            let (pa, pb) = match (catalog.get(a), catalog.get(b)) {
                (Some(x), Some(y)) => (x, y),
                _ => {
                    return Err(Error::Contract(format!(
                        "edge ({a}, {b}) references an unknown product"
                    )))
                }
            };
            if a == b || pa.atg != pb.atg || w == 0 {
                return Err(Error::Contract(format!(
                    "invalid product edge ({a}, {b}, {w})"
                )));
            }
            g.add(a, b, w);
        }
        Ok(g)
    }

    fn add(&mut self, a: ProductId, b: ProductId, w: u32) {
        *self.adjacency.entry(a).or_default().entry(b).or_insert(0) += w;
        *self.adjacency.entry(b).or_default().entry(a).or_insert(0) += w;
    }

    pub fn weight(&self, a: ProductId, b: ProductId) -> u32 {
        self.adjacency
            .get(&a)
            .and_then(|m| m.get(&b))
            .copied()
            .unwrap_or(0)
    }

    pub fn neighbors(&self, p: ProductId) -> impl Iterator<Item = (ProductId, u32)> + '_ {
        self.adjacency
            .get(&p)
            .into_iter()
            .flat_map(|m| m.iter().map(|(&q, &w)| (q, w)))
    }

    pub fn atg(&self, p: ProductId) -> Option<&Atg> {
        self.node_atg.get(&p)
    }

    pub fn nodes(&self) -> impl Iterator<Item = ProductId> + '_ {
        self.node_atg.keys().copied()
    }

    /// Each undirected edge once, with `a < b`.
    pub fn edges(&self) -> impl Iterator<Item = (ProductId, ProductId, u32)> + '_ {
        self.adjacency.iter().flat_map(|(&a, m)| {
            m.iter()
                .filter(move |(&b, _)| a < b)
                .map(move |(&b, &w)| (a, b, w))
        })
    }

    pub fn num_edges(&self) -> usize {
        self.edges().count()
    }
}

/// Rewrite every session's query id to the first query with the same text.
pub fn dedup_queries(queries: &[SyntheticQuery], log: &ClickLog) -> ClickLog {
    let mut first: HashMap<&str, QueryId> = HashMap::new();
    let canonical: HashMap<QueryId, QueryId> = queries
        .iter()
        .map(|q| {
            (
                q.query_id,
                *first.entry(q.text.as_str()).or_insert(q.query_id),
            )
        })
        .collect();
    let mut out = log.clone();
    for s in &mut out.sessions {
        if let Some(q) = s.query_id.as_mut() {
            *q = canonical.get(q).copied().unwrap_or(*q);
        }
    }
    out
}

fn distinct(clicks: &[ProductId]) -> BTreeSet<ProductId> {
    clicks.iter().copied().collect()
}

pub fn build_qp_graph(log: &ClickLog) -> QueryProductGraph {
    let mut g = QueryProductGraph::default();
    for s in &log.sessions {
        if let Some(q) = s.query_id {
            let row = g.adjacency.entry(q).or_default();
            for p in distinct(&s.clicked_product_ids) {
                *row.entry(p).or_insert(0) += 1;
            }
        }
    }
    g
}

/// Co-click counts over all sessions (with or without a query).
pub fn build_pp_graph(log: &ClickLog, catalog: &Catalog) -> ProductProductGraph {
    let mut g = ProductProductGraph {
        adjacency: BTreeMap::new(),
        node_atg: catalog
            .products
            .iter()
            .map(|p| (p.product_id, p.atg.clone()))
            .collect(),
    };
    for s in &log.sessions {
        let clicked: Vec<ProductId> = distinct(&s.clicked_product_ids).into_iter().collect();
        for (i, &a) in clicked.iter().enumerate() {
            for &b in &clicked[i + 1..] {
                if catalog.product(a).atg == catalog.product(b).atg {
                    g.add(a, b, 1);
                }
            }
        }
    }
    g
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum QueryClass {
    /// Clicks span several ATGs; such queries are dropped from training.
    Unnamed,
    /// Single ATG, clicks cover more than the threshold fraction of it.
    Broad(Atg),
    Narrow(Atg),
}

impl QueryClass {
    pub fn atg(&self) -> Option<&Atg> {
        match self {
            QueryClass::Unnamed => None,
            QueryClass::Broad(a) | QueryClass::Narrow(a) => Some(a),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            QueryClass::Unnamed => "unnamed",
            QueryClass::Broad(_) => "broad",
            QueryClass::Narrow(_) => "narrow",
        }
    }
}

pub const BROAD_THRESHOLD: f64 = 0.3;

/// Coverage counts distinct clicked products, not click mass.
pub fn classify_query(
    q: QueryId,
    qp: &QueryProductGraph,
    catalog: &Catalog,
    atg_sizes: &BTreeMap<Atg, usize>,
    broad_threshold: f64,
) -> Result<QueryClass> {
    let nbrs = qp
        .neighbors(q)
        .filter(|m| !m.is_empty())
        .ok_or_else(|| Error::NotFound(format!("query {q}")))?;
    let atgs: BTreeSet<&Atg> = nbrs
        .keys()
        .map(|p| {
            catalog
                .get(*p)
                .map(|x| &x.atg)
                .ok_or_else(|| Error::NotFound(format!("product {p}")))
        })
        .collect::<Result<_>>()?;
    if atgs.len() > 1 {
        return Ok(QueryClass::Unnamed);
    }
    let atg = atgs.into_iter().next().expect("non-empty").clone();
    let size = atg_sizes.get(&atg).copied().unwrap_or(0).max(1);
    let coverage = nbrs.len() as f64 / size as f64;
    Ok(if coverage > broad_threshold {
        QueryClass::Broad(atg)
    } else {
        QueryClass::Narrow(atg)
    })
}

pub fn classify_all(
    qp: &QueryProductGraph,
    catalog: &Catalog,
    broad_threshold: f64,
) -> BTreeMap<QueryId, QueryClass> {
    let sizes = catalog.atg_sizes();
    qp.queries()
        .filter_map(|q| {
            classify_query(q, qp, catalog, &sizes, broad_threshold)
                .ok()
                .map(|c| (q, c))
        })
        .collect()
}

/// Neighbours by descending weight; equal weights in ascending product id.
pub fn top_k_positives(q: QueryId, qp: &QueryProductGraph, k: usize) -> Vec<ProductId> {
    let mut v: Vec<(ProductId, u32)> = qp
        .neighbors(q)
        .map(|m| m.iter().map(|(&p, &w)| (p, w)).collect())
        .unwrap_or_default();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().take(k).map(|(p, _)| p).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WalkConfig {
    pub walks_per_node: usize,
    pub walk_length: usize,
    /// Step to neighbours proportionally to co-click weight rather than uniformly.
    pub weighted: bool,
}

impl Default for WalkConfig {
    fn default() -> Self {
        Self {
            walks_per_node: 5,
            walk_length: 5,
            weighted: true,
        }
    }
}

/// Union of nodes visited by short walks from every product, without the
/// start node and without repeats. Each start node uses its own stream.
pub fn random_walks(
    pp: &ProductProductGraph,
    cfg: &WalkConfig,
    seed: u64,
) -> BTreeMap<ProductId, BTreeSet<ProductId>> {
    let base = rng::derive_seed(seed, "walks");
    let neighbor_lists: BTreeMap<ProductId, Vec<(ProductId, u32)>> = pp
        .adjacency
        .iter()
        .map(|(&p, m)| (p, m.iter().map(|(&q, &w)| (q, w)).collect()))
        .collect();
    pp.nodes()
        .map(|start| {
            let mut visited = BTreeSet::new();
            let mut rng = rng::rng(rng::derive_index(base, start as u64));
            for _ in 0..cfg.walks_per_node {
                let mut cur = start;
                for _ in 0..cfg.walk_length {
                    let Some(nbrs) = neighbor_lists.get(&cur).filter(|n| !n.is_empty()) else {
                        break;
                    };
                    cur = if cfg.weighted {
                        let total: u64 = nbrs.iter().map(|(_, w)| *w as u64).sum();
                        let mut r = rng.random_range(0..total);
                        let mut pick = nbrs[nbrs.len() - 1].0;
                        for &(n, w) in nbrs {
                            if r < w as u64 {
                                pick = n;
                                break;
                            }
                            r -= w as u64;
                        }
                        pick
                    } else {
                        nbrs[rng.random_range(0..nbrs.len())].0
                    };
                    if cur != start {
                        visited.insert(cur);
                    }
                }
            }
            (start, visited)
        })
        .collect()
}

fn parse_field<T: std::str::FromStr>(
    field: Option<&str>,
    line: usize,
    what: &'static str,
) -> Result<T> {
    field
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::format(what, format!("line {line}: bad or missing field")))
}

/// `src<TAB>dst<TAB>weight` rows.
pub fn write_edges_tsv<W: Write>(
    edges: impl Iterator<Item = (u32, u32, u32)>,
    mut out: W,
) -> Result<()> {
    for (a, b, w) in edges {
        writeln!(out, "{a}\t{b}\t{w}")?;
    }
    Ok(())
}

pub fn read_edges_tsv<R: BufRead>(input: R) -> Result<Vec<(u32, u32, u32)>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut f = line.split('\t');
        out.push((
            parse_field(f.next(), i + 1, "edge list")?,
            parse_field(f.next(), i + 1, "edge list")?,
            parse_field(f.next(), i + 1, "edge list")?,
        ));
    }
    Ok(out)
}

/// `product<TAB>visited ids separated by spaces` rows.
pub fn write_walks_tsv<W: Write>(
    walks: &BTreeMap<ProductId, BTreeSet<ProductId>>,
    mut out: W,
) -> Result<()> {
    for (p, set) in walks {
        let ids: Vec<String> = set.iter().map(u32::to_string).collect();
        writeln!(out, "{p}\t{}", ids.join(" "))?;
    }
    Ok(())
}

pub fn read_walks_tsv<R: BufRead>(input: R) -> Result<BTreeMap<ProductId, BTreeSet<ProductId>>> {
    let mut out = BTreeMap::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (p, rest) = line.split_once('\t').unwrap_or((line.as_str(), ""));
        let p: ProductId = parse_field(Some(p), i + 1, "walk list")?;
        let set = rest
            .split_whitespace()
            .map(|s| parse_field(Some(s), i + 1, "walk list"))
            .collect::<Result<BTreeSet<ProductId>>>()?;
        out.insert(p, set);
    }
    Ok(out)
}

/// `query<TAB>class<TAB>article_type<TAB>gender` rows; unnamed rows have empty ATG fields.
pub fn write_classes_tsv<W: Write>(
    classes: &BTreeMap<QueryId, QueryClass>,
    mut out: W,
) -> Result<()> {
    for (q, c) in classes {
        let (at, g) = c
            .atg()
            .map(|a| (a.article_type.as_str(), a.gender.as_str()))
            .unwrap_or(("", ""));
        writeln!(out, "{q}\t{}\t{at}\t{g}", c.label())?;
    }
    Ok(())
}

pub fn read_classes_tsv<R: BufRead>(input: R) -> Result<BTreeMap<QueryId, QueryClass>> {
    let mut out = BTreeMap::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let q: QueryId = parse_field(f.first().copied(), i + 1, "class list")?;
        let atg = || match (f.get(2), f.get(3)) {
            (Some(a), Some(g)) if !a.is_empty() => Ok(Atg::new(a, g)),
            _ => Err(Error::format(
                "class list",
                format!("line {}: missing ATG", i + 1),
            )),
        };
        let class = match f.get(1).copied() {
            Some("unnamed") => QueryClass::Unnamed,
            Some("broad") => QueryClass::Broad(atg()?),
            Some("narrow") => QueryClass::Narrow(atg()?),
            other => {
                return Err(Error::format(
                    "class list",
                    format!("line {}: unknown class {other:?}", i + 1),
                ))
            }
        };
        out.insert(q, class);
    }
    Ok(out)
}

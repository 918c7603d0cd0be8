//! Synthetic fashion catalog and click-stream log with a known relevance
//! oracle.
//!
//! Products belong to an article-type/gender group (ATG) and carry one
//! brand, colour, fit and fabric. Queries state a set of attribute terms
//! (their intent); a product is relevant iff it carries every intent term.
//! Clicks follow a multinomial-logit choice over the whole catalog whose
//! utility rewards relevance, the query's intended ATG and brand matches;
//! the Gumbel noise of that choice plays the role of position noise.

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

pub type ProductId = u32;
pub type QueryId = u32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeVocabulary {
    pub brands: Vec<String>,
    pub article_types: Vec<String>,
    pub genders: Vec<String>,
    pub colors: Vec<String>,
    pub fits: Vec<String>,
    pub fabrics: Vec<String>,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

impl Default for AttributeVocabulary {
    fn default() -> Self {
        Self {
            brands: words(
                "nike adidas puma reebok roadster hrx levis mango biba wrogn libas jockey fabindia spykar mufti highlander",
            ),
            article_types: words("tshirts shirts jeans trousers dresses kurtas jackets sweatshirts shoes shorts"),
            genders: words("men women boys girls"),
            colors: words("black white blue navy red green grey pink yellow maroon olive beige"),
            fits: words("slim regular relaxed skinny oversized tapered"),
            fabrics: words("cotton denim linen polyester wool viscose fleece silk"),
        }
    }
}

impl AttributeVocabulary {
    fn lists(&self) -> [(&'static str, &Vec<String>); 6] {
        [
            ("brands", &self.brands),
            ("article_types", &self.article_types),
            ("genders", &self.genders),
            ("colors", &self.colors),
            ("fits", &self.fits),
            ("fabrics", &self.fabrics),
        ]
    }

    /// Lists must be non-empty and hold distinct lowercase single words;
    /// a term may appear in only one list so that intents are unambiguous.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (name, list) in self.lists() {
            if list.is_empty() {
                return Err(Error::Config(format!("attribute list `{name}` is empty")));
            }
            for term in list {
                if term.is_empty() || term.chars().any(|c| c.is_whitespace() || c.is_uppercase()) {
                    return Err(Error::Config(format!(
                        "attribute `{term}` in `{name}` must be a lowercase word"
                    )));
                }
                if !seen.insert(term.as_str()) {
                    return Err(Error::Config(format!("attribute `{term}` appears twice")));
                }
            }
        }
        Ok(())
    }

    pub fn atgs(&self) -> Vec<Atg> {
        let mut out = Vec::with_capacity(self.article_types.len() * self.genders.len());
        for at in &self.article_types {
            for g in &self.genders {
                out.push(Atg::new(at, g));
            }
        }
        out
    }

    pub fn all_terms(&self) -> BTreeSet<String> {
        self.lists()
            .iter()
            .flat_map(|(_, l)| l.iter().cloned())
            .collect()
    }
}

/// Article-type/gender group.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Atg {
    pub article_type: String,
    pub gender: String,
}

impl Atg {
    pub fn new(article_type: &str, gender: &str) -> Self {
        Self {
            article_type: article_type.into(),
            gender: gender.into(),
        }
    }
}

impl std::fmt::Display for Atg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.article_type, self.gender)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Product {
    pub product_id: ProductId,
    pub atg: Atg,
    pub brand: String,
    pub attributes: BTreeSet<String>,
    pub title: String,
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticQuery {
    pub query_id: QueryId,
    pub text: String,
    pub intent: BTreeSet<String>,
    pub intended_atg: Option<Atg>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: u32,
    pub query_id: Option<QueryId>,
    pub clicked_product_ids: Vec<ProductId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClickLog {
    pub sessions: Vec<Session>,
}

/// Products indexed by id; ids are dense `0..len`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Catalog {
    pub products: Vec<Product>,
}

impl Catalog {
    pub fn new(products: Vec<Product>) -> Result<Self> {
        for (i, p) in products.iter().enumerate() {
            if p.product_id as usize != i {
                return Err(Error::Contract(format!(
                    "product at position {i} has id {}",
                    p.product_id
                )));
            }
        }
        Ok(Self { products })
    }

    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }

    pub fn get(&self, id: ProductId) -> Option<&Product> {
        self.products.get(id as usize)
    }

    pub fn product(&self, id: ProductId) -> &Product {
        &self.products[id as usize]
    }

    pub fn atg_sizes(&self) -> std::collections::BTreeMap<Atg, usize> {
        let mut m = std::collections::BTreeMap::new();
        for p in &self.products {
            *m.entry(p.atg.clone()).or_insert(0) += 1;
        }
        m
    }
}

/// True iff the product carries every intent term of the query.
pub fn relevance(query: &SyntheticQuery, product: &Product) -> bool {
    !query.intent.is_empty() && query.intent.is_subset(&product.attributes)
}

const FILLER: &[&str] = &[
    "crafted for a comfortable feel all day",
    "perfect for everyday wear and weekend outings",
    "machine wash cold with similar colours",
    "styled with a modern look and classic design",
    "soft breathable fabric with durable stitching",
    "pair it with your favourite accessories",
    "designed to keep you at ease",
    "a versatile pick for casual occasions",
    "the finish adds a refined touch",
    "easy care and long lasting quality",
    "made to hold its shape wash after wash",
    "an easy choice for travel and work",
];

/// Generate `n_products` products with balanced ATG counts.
pub fn gen_catalog(vocab: &AttributeVocabulary, n_products: usize, seed: u64) -> Result<Catalog> {
    vocab.validate()?;
    if n_products == 0 {
        return Err(Error::Config("n_products must be at least 1".into()));
    }
    for f in FILLER {
        if let Some(w) = f
            .split_whitespace()
            .find(|w| vocab.all_terms().contains(*w))
        {
            return Err(Error::Config(format!(
                "attribute `{w}` collides with description filler"
            )));
        }
    }
    let mut rng = rng::stage_rng(seed, "catalog");
    let atgs = vocab.atgs();
    // Balanced assignment: every ATG gets floor or ceil of n / |ATGs|.
    let mut slots: Vec<usize> = (0..n_products).map(|i| i % atgs.len()).collect();
    let mut order: Vec<usize> = (0..atgs.len()).collect();
    order.shuffle(&mut rng);
    slots.iter_mut().for_each(|s| *s = order[*s]);
    if n_products > atgs.len() {
        slots[atgs.len()..].shuffle(&mut rng);
    }

    let products = slots
        .into_iter()
        .enumerate()
        .map(|(i, slot)| {
            let atg = atgs[slot].clone();
            let pick =
                |list: &Vec<String>, rng: &mut Rng| list[rng.random_range(0..list.len())].clone();
            let brand = pick(&vocab.brands, &mut rng);
            let color = pick(&vocab.colors, &mut rng);
            let fit = pick(&vocab.fits, &mut rng);
            let fabric = pick(&vocab.fabrics, &mut rng);
            let title = format!("{brand} {} {color} {fit} {}", atg.gender, atg.article_type);
            let mut desc: Vec<String> = words(&title);
            desc.extend(words(&format!(
                "by {brand} in {color} {fit} fit made of {fabric} for {} {}",
                atg.gender, atg.article_type
            )));
            let target = rng.random_range(30..=80);
            let mut filler: Vec<&str> = FILLER.to_vec();
            filler.shuffle(&mut rng);
            let mut k = 0;
            while desc.len() < target {
                desc.extend(words(filler[k % filler.len()]));
                k += 1;
            }
            desc.truncate(target);
            let attributes: BTreeSet<String> = [
                brand.clone(),
                atg.article_type.clone(),
                atg.gender.clone(),
                color,
                fit,
                fabric,
            ]
            .into_iter()
            .collect();
            Product {
                product_id: i as ProductId,
                atg,
                brand,
                attributes,
                title,
                description: desc.join(" "),
            }
        })
        .collect();
    Catalog::new(products)
}

/// Parameters of the simulated search and browse behaviour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClickModel {
    /// Utility bonus for products satisfying the relevance oracle.
    pub relevance_weight: f64,
    /// Utility bonus for products in the query's intended ATG.
    pub atg_weight: f64,
    /// Utility bonus when the product brand is an intent term.
    pub brand_weight: f64,
    /// Mean of the Poisson number of extra clicks in a query session.
    pub extra_query_clicks: f64,
    /// Fraction of sessions without a query (pure browsing).
    pub browse_fraction: f64,
    /// Mean of the Poisson number of extra clicks in a browse session.
    pub extra_browse_clicks: f64,
    /// Co-click utility for sharing the first click's ATG.
    pub coclick_atg_weight: f64,
    /// Co-click utility per shared non-ATG attribute.
    pub coclick_attribute_weight: f64,
    /// Zipf exponent of query popularity.
    pub popularity_exponent: f64,
    /// Popularity multiplier applied to broad (article type + gender) queries.
    pub broad_popularity_boost: f64,
    /// Query mix: fraction of broad and of ATG-less queries; the rest are narrow.
    pub broad_fraction: f64,
    pub unnamed_fraction: f64,
}

impl Default for ClickModel {
    fn default() -> Self {
        Self {
            relevance_weight: 9.0,
            atg_weight: 5.0,
            brand_weight: 1.0,
            extra_query_clicks: 0.8,
            browse_fraction: 0.3,
            extra_browse_clicks: 2.5,
            coclick_atg_weight: 6.0,
            coclick_attribute_weight: 1.0,
            popularity_exponent: 0.8,
            broad_popularity_boost: 12.0,
            broad_fraction: 0.08,
            unnamed_fraction: 0.12,
        }
    }
}

fn gen_queries(
    catalog: &Catalog,
    n_queries: usize,
    model: &ClickModel,
    seed: u64,
) -> Result<Vec<SyntheticQuery>> {
    let mut rng = rng::stage_rng(seed, "queries");
    let mut seen: HashSet<BTreeSet<String>> = HashSet::new();
    let mut queries = Vec::with_capacity(n_queries);
    let mut attempts = 0usize;
    while queries.len() < n_queries {
        attempts += 1;
        if attempts > 200 * n_queries + 1000 {
            return Err(Error::Config(format!(
                "could only generate {} distinct queries out of {n_queries}; the catalog is too small",
                queries.len()
            )));
        }
        // Anchor every intent on a real product so it has a relevant match.
        let p = catalog.product(rng.random_range(0..catalog.len() as u32));
        let extras: Vec<&String> = p
            .attributes
            .iter()
            .filter(|a| **a != p.atg.article_type && **a != p.atg.gender)
            .collect();
        let roll: f64 = rng.random();
        let (mut intent, atg) = if roll < model.broad_fraction {
            (
                vec![p.atg.article_type.clone(), p.atg.gender.clone()],
                Some(p.atg.clone()),
            )
        } else if roll < model.broad_fraction + model.unnamed_fraction {
            let mut v = vec![p.atg.article_type.clone()];
            if rng.random_bool(0.5) {
                v.push(extras[rng.random_range(0..extras.len())].clone());
            }
            (v, None)
        } else {
            let mut v = vec![p.atg.article_type.clone(), p.atg.gender.clone()];
            let n_extra = rng.random_range(1..=2);
            let mut pool = extras.clone();
            pool.shuffle(&mut rng);
            v.extend(pool.into_iter().take(n_extra).cloned());
            (v, Some(p.atg.clone()))
        };
        let set: BTreeSet<String> = intent.iter().cloned().collect();
        if !seen.insert(set.clone()) {
            continue;
        }
        intent.shuffle(&mut rng);
        queries.push(SyntheticQuery {
            query_id: queries.len() as QueryId,
            text: intent.join(" "),
            intent: set,
            intended_atg: atg,
        });
    }
    Ok(queries)
}

/// Draw an index with probability proportional to `weights`, then zero its
/// weight so a session never clicks the same product twice.
fn draw_without_replacement(
    weights: &mut [f64],
    total: &mut f64,
    rng: &mut Rng,
) -> Option<ProductId> {
    if *total <= 0.0 {
        return None;
    }
    let mut r = rng.random::<f64>() * *total;
    let mut chosen = None;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            chosen = Some(i);
            if r < *w {
                break;
            }
            r -= w;
        }
    }
    let i = chosen?;
    *total -= weights[i];
    weights[i] = 0.0;
    if weights.iter().all(|w| *w <= 0.0) {
        *total = 0.0;
    }
    Some(i as ProductId)
}

/// Multinomial-logit weights `exp(u - max u)`.
fn logit_weights(utilities: impl Iterator<Item = f64>) -> (Vec<f64>, f64) {
    let u: Vec<f64> = utilities.collect();
    let max = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = u.iter().map(|x| (x - max).exp()).collect();
    let total = w.iter().sum();
    (w, total)
}

/// Attribute sets as bitsets over the catalog's term table.
struct TermBits {
    index: std::collections::HashMap<String, usize>,
    words: usize,
}

impl TermBits {
    fn new(catalog: &Catalog, queries: &[SyntheticQuery]) -> Self {
        let mut index = std::collections::HashMap::new();
        let terms = catalog
            .products
            .iter()
            .flat_map(|p| p.attributes.iter())
            .chain(queries.iter().flat_map(|q| q.intent.iter()));
        for t in terms {
            let n = index.len();
            index.entry(t.clone()).or_insert(n);
        }
        let words = index.len().div_ceil(64).max(1);
        Self { index, words }
    }

    fn bits(&self, set: &BTreeSet<String>) -> Vec<u64> {
        let mut b = vec![0u64; self.words];
        for t in set {
            let i = self.index[t];
            b[i / 64] |= 1 << (i % 64);
        }
        b
    }
}

fn is_subset(a: &[u64], b: &[u64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x & !y == 0)
}

fn shared(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x & y).count_ones()).sum()
}

fn extra_clicks(mean: f64, rng: &mut Rng) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean)
        .map(|d| d.sample(rng) as usize)
        .unwrap_or(0)
}

/// Generate queries and a session log over `catalog`.
///
/// Sessions `0..n_queries` each issue a distinct query so every query is
/// observed; later sessions either browse or draw a query by popularity.
/// Each session uses its own stream derived from `(seed, session_id)`.
pub fn gen_clicklog(
    catalog: &Catalog,
    n_queries: usize,
    n_sessions: usize,
    model: &ClickModel,
    seed: u64,
) -> Result<(Vec<SyntheticQuery>, ClickLog)> {
    if catalog.is_empty() {
        return Err(Error::Config("catalog is empty".into()));
    }
    if n_sessions < n_queries {
        return Err(Error::Config(format!(
            "n_sessions ({n_sessions}) must be >= n_queries ({n_queries})"
        )));
    }
    let queries = gen_queries(catalog, n_queries, model, seed)?;

    // Popularity: Zipf over a random ranking, boosted for broad queries.
    let mut rank: Vec<usize> = (0..queries.len()).collect();
    rank.shuffle(&mut rng::stage_rng(seed, "popularity"));
    let mut cumulative = Vec::with_capacity(queries.len());
    let mut total = 0.0;
    for (q, &r) in queries.iter().zip(&rank) {
        let broad = q.intended_atg.is_some() && q.intent.len() == 2;
        let boost = if broad {
            model.broad_popularity_boost
        } else {
            1.0
        };
        total += boost / ((r + 1) as f64).powf(model.popularity_exponent);
        cumulative.push(total);
    }

    let n = catalog.len();
    let bits = TermBits::new(catalog, &queries);
    let product_bits: Vec<Vec<u64>> = catalog
        .products
        .iter()
        .map(|p| bits.bits(&p.attributes))
        .collect();
    // Non-ATG attributes, used for browse co-click affinity.
    let style_bits: Vec<Vec<u64>> = catalog
        .products
        .iter()
        .map(|p| {
            let mut a = p.attributes.clone();
            a.remove(&p.atg.article_type);
            a.remove(&p.atg.gender);
            bits.bits(&a)
        })
        .collect();
    let query_bits: Vec<Vec<u64>> = queries.iter().map(|q| bits.bits(&q.intent)).collect();

    let session_seed = rng::derive_seed(seed, "sessions");
    let sessions = (0..n_sessions)
        .map(|s| {
            let mut rng = rng::rng(rng::derive_index(session_seed, s as u64));
            let query = if s < queries.len() {
                Some(&queries[s])
            } else if rng.random::<f64>() < model.browse_fraction || queries.is_empty() {
                None
            } else {
                let r = rng.random::<f64>() * total;
                let i = cumulative
                    .partition_point(|&c| c <= r)
                    .min(queries.len() - 1);
                Some(&queries[i])
            };
            let mut clicks: Vec<ProductId> = Vec::new();
            match query {
                Some(q) => {
                    let qb = &query_bits[q.query_id as usize];
                    let (mut w, mut t) =
                        logit_weights(catalog.products.iter().zip(&product_bits).map(|(p, pb)| {
                            let mut u = 0.0;
                            if is_subset(qb, pb) {
                                u += model.relevance_weight;
                            }
                            if q.intended_atg.as_ref() == Some(&p.atg) {
                                u += model.atg_weight;
                            }
                            if q.intent.contains(&p.brand) {
                                u += model.brand_weight;
                            }
                            u
                        }));
                    let want = 1 + extra_clicks(model.extra_query_clicks, &mut rng);
                    for _ in 0..want.min(n) {
                        match draw_without_replacement(&mut w, &mut t, &mut rng) {
                            Some(p) => clicks.push(p),
                            None => break,
                        }
                    }
                }
                None => {
                    let first = rng.random_range(0..n as ProductId);
                    clicks.push(first);
                    let anchor = catalog.product(first);
                    let ab = &style_bits[first as usize];
                    let (mut w, mut t) =
                        logit_weights(catalog.products.iter().zip(&style_bits).map(|(p, pb)| {
                            let same = if p.atg == anchor.atg {
                                model.coclick_atg_weight
                            } else {
                                0.0
                            };
                            same + model.coclick_attribute_weight * shared(ab, pb) as f64
                        }));
                    t -= w[first as usize];
                    w[first as usize] = 0.0;
                    let want = extra_clicks(model.extra_browse_clicks, &mut rng);
                    for _ in 0..want.min(n - 1) {
                        match draw_without_replacement(&mut w, &mut t, &mut rng) {
                            Some(p) => clicks.push(p),
                            None => break,
                        }
                    }
                }
            }
            Session {
                session_id: s as u32,
                query_id: query.map(|q| q.query_id),
                clicked_product_ids: clicks,
            }
        })
        .collect();
    Ok((queries, ClickLog { sessions }))
}

/// Check referential integrity and the one-click-per-session invariant.
pub fn validate_log(log: &ClickLog, catalog: &Catalog, queries: &[SyntheticQuery]) -> Result<()> {
    for s in &log.sessions {
        if s.clicked_product_ids.is_empty() {
            return Err(Error::Contract(format!(
                "session {} has no clicks",
                s.session_id
            )));
        }
        if let Some(q) = s.query_id {
            if queries.get(q as usize).map(|x| x.query_id) != Some(q) {
                return Err(Error::Contract(format!(
                    "session {} references unknown query {q}",
                    s.session_id
                )));
            }
        }
        if let Some(p) = s
            .clicked_product_ids
            .iter()
            .find(|p| catalog.get(**p).is_none())
        {
            return Err(Error::Contract(format!(
                "session {} references unknown product {p}",
                s.session_id
            )));
        }
    }
    Ok(())
}

pub fn write_jsonl<T: Serialize, W: Write>(items: &[T], mut out: W) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>, R: BufRead>(input: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn save_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_jsonl(items, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn load_catalog(path: &Path) -> Result<Catalog> {
    Catalog::new(load_jsonl(path)?)
}

pub fn load_clicklog(path: &Path) -> Result<ClickLog> {
    Ok(ClickLog {
        sessions: load_jsonl(path)?,
    })
}

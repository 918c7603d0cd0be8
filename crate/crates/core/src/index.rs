//! Approximate nearest-neighbour search by cosine similarity over a forest
//! of random-hyperplane trees, plus the brute-force scan it is judged against.

use crate::catalog::ProductId;
use crate::error::{Error, Result};
use crate::rng::{self, derive_index, derive_seed};
use crate::scalar::Scalar;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"NSANNIDX";
const VERSION: u32 = 1;
/// Attempts at a two-point split before falling back to a random partition.
const SPLIT_ATTEMPTS: usize = 8;
const TWO_MEANS_ROUNDS: usize = 200;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexConfig {
    pub n_trees: usize,
    pub leaf_size: usize,
    /// Candidates gathered per query before exact re-scoring; `None` uses
    /// `max(n_trees * leaf_size, corpus / 2)`.
    pub search_k: Option<usize>,
    pub seed: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            n_trees: 16,
            leaf_size: 32,
            search_k: None,
            seed: 0,
        }
    }
}

impl IndexConfig {
    pub fn effective_search_k(&self, corpus: usize) -> usize {
        self.search_k
            .unwrap_or((self.n_trees * self.leaf_size).max(corpus.div_ceil(2)))
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Node<T> {
    Split {
        normal: Vec<T>,
        offset: T,
        left: u32,
        right: u32,
    },
    Leaf(Vec<u32>),
}

/// Query hits in rank order plus whether `k` exceeded the corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbors {
    pub hits: Vec<(ProductId, f64)>,
    pub k_exceeds_corpus: bool,
}

impl Neighbors {
    pub fn ids(&self) -> Vec<ProductId> {
        self.hits.iter().map(|h| h.0).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex<T: Scalar> {
    config: IndexConfig,
    dim: usize,
    ids: Vec<ProductId>,
    vectors: Vec<T>,
    norms: Vec<f64>,
    trees: Vec<Vec<Node<T>>>,
}

fn norm<T: Scalar>(v: &[T]) -> f64 {
    v.iter()
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Cosine similarity with the zero-vector convention (similarity 0).
fn cosine<T: Scalar>(a: &[T], na: f64, b: &[T], nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| x.as_f64() * y.as_f64())
        .sum::<f64>()
        / (na * nb)
}

/// Descending similarity, ties by ascending id.
fn rank(mut scored: Vec<(ProductId, f64)>, k: usize) -> Vec<(ProductId, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Brute-force top-`k` by cosine similarity.
pub fn exact_knn<T: Scalar>(
    vectors: &[(ProductId, Vec<T>)],
    query: &[T],
    k: usize,
) -> Result<Neighbors> {
    if vectors.is_empty() {
        return Err(Error::Contract(
            "nearest neighbours of an empty corpus".into(),
        ));
    }
    let nq = norm(query);
    let mut scored = Vec::with_capacity(vectors.len());
    for (id, v) in vectors {
        if v.len() != query.len() {
            return Err(Error::Contract(format!(
                "vector {id} has dimension {} but the query has {}",
                v.len(),
                query.len()
            )));
        }
        scored.push((*id, cosine(v, norm(v), query, nq)));
    }
    Ok(Neighbors {
        hits: rank(scored, k),
        k_exceeds_corpus: k > vectors.len(),
    })
}

struct Builder<'a, T: Scalar> {
    dim: usize,
    unit: &'a [Vec<f64>],
    leaf_size: usize,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Builder<'_, T> {
    fn build(&mut self, items: Vec<u32>, rng: &mut rng::Rng) -> u32 {
        if items.len() <= self.leaf_size {
            self.nodes.push(Node::Leaf(items));
            return (self.nodes.len() - 1) as u32;
        }
        let (normal, offset, left, right) = self.split(&items, rng);
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf(Vec::new()));
        let l = self.build(left, rng);
        let r = self.build(right, rng);
        self.nodes[slot] = Node::Split {
            normal,
            offset,
            left: l,
            right: r,
        };
        slot as u32
    }

    fn side(&self, normal: &[T], offset: T, item: u32) -> f64 {
        let v = &self.unit[item as usize];
        normal
            .iter()
            .zip(v)
            .map(|(n, x)| n.as_f64() * x)
            .sum::<f64>()
            + offset.as_f64()
    }

    /// Hyperplane bisecting two centroids refined by a few rounds of
    /// online two-means on the unit sphere.
    fn split(&self, items: &[u32], rng: &mut rng::Rng) -> (Vec<T>, T, Vec<u32>, Vec<u32>) {
        for _ in 0..SPLIT_ATTEMPTS {
            let a = items[rng.random_range(0..items.len())] as usize;
            let b = items[rng.random_range(0..items.len())] as usize;
            let (mut ca, mut cb) = (self.unit[a].clone(), self.unit[b].clone());
            let (mut na, mut nb) = (1.0, 1.0);
            for _ in 0..TWO_MEANS_ROUNDS {
                let v = &self.unit[items[rng.random_range(0..items.len())] as usize];
                let dot = |c: &[f64]| {
                    c.iter().zip(v).map(|(x, y)| x * y).sum::<f64>()
                        / c.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300)
                };
                let (target, count) = if dot(&ca) * na >= dot(&cb) * nb {
                    (&mut ca, &mut na)
                } else {
                    (&mut cb, &mut nb)
                };
                target
                    .iter_mut()
                    .zip(v)
                    .for_each(|(c, x)| *c = (*c * *count + x) / (*count + 1.0));
                *count += 1.0;
            }
            let unitize = |c: &[f64]| {
                let n = c.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
                c.iter().map(|x| x / n).collect::<Vec<f64>>()
            };
            let (ua, ub) = (unitize(&ca), unitize(&cb));
            let diff: Vec<f64> = ua.iter().zip(&ub).map(|(x, y)| x - y).collect();
            let len = diff.iter().map(|x| x * x).sum::<f64>().sqrt();
            if len == 0.0 {
                continue;
            }
            let normal: Vec<T> = diff.iter().map(|x| T::lit(x / len)).collect();
            let mid: f64 = normal
                .iter()
                .zip(ua.iter().zip(&ub))
                .map(|(n, (x, y))| n.as_f64() * (x + y) / 2.0)
                .sum();
            let offset = T::lit(-mid);
            let (left, right): (Vec<u32>, Vec<u32>) = items
                .iter()
                .partition(|&&i| self.side(&normal, offset, i) < 0.0);
            if !left.is_empty() && !right.is_empty() {
                return (normal, offset, left, right);
            }
        }
        // Degenerate cluster: split arbitrarily so the recursion terminates.
        let mut shuffled = items.to_vec();
        rand::seq::SliceRandom::shuffle(&mut shuffled[..], rng);
        let right = shuffled.split_off(shuffled.len() / 2);
        (vec![T::zero(); self.dim], T::zero(), shuffled, right)
    }
}

#[derive(PartialEq)]
struct Frontier {
    priority: f64,
    tree: u32,
    node: u32,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority
            .total_cmp(&other.priority)
            .then(other.tree.cmp(&self.tree))
            .then(other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T: Scalar> EmbeddingIndex<T> {
    /// Build a forest over `items`. Trees are built on separate threads,
    /// each from its own derived seed.
    pub fn build(items: Vec<(ProductId, Vec<T>)>, config: IndexConfig) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Contract("cannot index an empty corpus".into()));
        }
        if config.n_trees == 0 || config.leaf_size == 0 {
            return Err(Error::Config(
                "n_trees and leaf_size must be positive".into(),
            ));
        }
        let dim = items[0].1.len();
        if dim == 0 {
            return Err(Error::Contract("zero-dimensional embeddings".into()));
        }
        let mut ids = Vec::with_capacity(items.len());
        let mut vectors = Vec::with_capacity(items.len() * dim);
        for (id, v) in &items {
            if v.len() != dim {
                return Err(Error::Contract(format!(
                    "vector {id} has dimension {} but expected {dim}",
                    v.len()
                )));
            }
            ids.push(*id);
            vectors.extend_from_slice(v);
        }
        let norms: Vec<f64> = vectors.chunks(dim).map(norm).collect();
        let unit: Vec<Vec<f64>> = vectors
            .chunks(dim)
            .zip(&norms)
            .map(|(v, &n)| {
                v.iter()
                    .map(|x| if n == 0.0 { 0.0 } else { x.as_f64() / n })
                    .collect()
            })
            .collect();
        let tree_seed = derive_seed(config.seed, "ann-trees");
        let build_tree = |t: usize| {
            let mut b = Builder {
                dim,
                unit: &unit,
                leaf_size: config.leaf_size,
                nodes: Vec::new(),
            };
            b.build(
                (0..ids.len() as u32).collect(),
                &mut rng::rng(derive_index(tree_seed, t as u64)),
            );
            b.nodes
        };
        let threads = std::thread::available_parallelism()
            .map_or(1, |n| n.get())
            .min(config.n_trees);
        let mut trees: Vec<Option<Vec<Node<T>>>> = vec![None; config.n_trees];
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    let build_tree = &build_tree;
                    s.spawn(move || {
                        (w..config.n_trees)
                            .step_by(threads)
                            .map(|t| (t, build_tree(t)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (t, nodes) in h.join().expect("tree builder panicked") {
                    trees[t] = Some(nodes);
                }
            }
        });
        let trees = trees
            .into_iter()
            .map(|t| t.expect("every tree built"))
            .collect();
        Ok(Self {
            config,
            dim,
            ids,
            vectors,
            norms,
            trees,
        })
    }

    pub fn config(&self) -> &IndexConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[ProductId] {
        &self.ids
    }

    pub fn vector(&self, slot: usize) -> &[T] {
        &self.vectors[slot * self.dim..(slot + 1) * self.dim]
    }

    /// Stored `(id, vector)` pairs, e.g. for an exact scan.
    pub fn items(&self) -> Vec<(ProductId, Vec<T>)> {
        (0..self.len())
            .map(|s| (self.ids[s], self.vector(s).to_vec()))
            .collect()
    }

    /// Top-`k` ids by cosine similarity using the default search budget.
    pub fn query(&self, query: &[T], k: usize) -> Result<Neighbors> {
        self.query_with_budget(query, k, self.config.effective_search_k(self.len()).max(k))
    }

    /// Best-first descent over all trees until `search_k` candidates are
    /// collected; candidates are then scored exactly.
    pub fn query_with_budget(&self, query: &[T], k: usize, search_k: usize) -> Result<Neighbors> {
        if query.len() != self.dim {
            return Err(Error::Contract(format!(
                "query has dimension {} but the index holds {}",
                query.len(),
                self.dim
            )));
        }
        let nq = norm(query);
        let unit: Vec<f64> = query
            .iter()
            .map(|x| if nq == 0.0 { 0.0 } else { x.as_f64() / nq })
            .collect();
        let mut seen = vec![false; self.len()];
        let mut candidates = Vec::new();
        let mut heap: BinaryHeap<Frontier> = (0..self.trees.len())
            .map(|t| Frontier {
                priority: f64::INFINITY,
                tree: t as u32,
                node: 0,
            })
            .collect();
        while let Some(Frontier {
            priority,
            tree,
            node,
        }) = heap.pop()
        {
            if candidates.len() >= search_k {
                break;
            }
            match &self.trees[tree as usize][node as usize] {
                Node::Leaf(items) => {
                    for &i in items {
                        if !std::mem::replace(&mut seen[i as usize], true) {
                            candidates.push(i);
                        }
                    }
                }
                Node::Split {
                    normal,
                    offset,
                    left,
                    right,
                } => {
                    let margin = normal
                        .iter()
                        .zip(&unit)
                        .map(|(n, x)| n.as_f64() * x)
                        .sum::<f64>()
                        + offset.as_f64();
                    heap.push(Frontier {
                        priority: priority.min(margin),
                        tree,
                        node: *right,
                    });
                    heap.push(Frontier {
                        priority: priority.min(-margin),
                        tree,
                        node: *left,
                    });
                }
            }
        }
        let scored = candidates
            .into_iter()
            .map(|i| {
                let s = i as usize;
                (
                    self.ids[s],
                    cosine(self.vector(s), self.norms[s], query, nq),
                )
            })
            .collect();
        Ok(Neighbors {
            hits: rank(scored, k),
            k_exceeds_corpus: k > self.len(),
        })
    }

    /// SHA-256 of the serialized index.
    pub fn structure_hash(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        hex::encode(Sha256::digest(&buf))
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(T::BYTES as u32).to_le_bytes());
        let search_k = self.config.search_k.map_or(u64::MAX, |s| s as u64);
        for v in [
            self.dim as u64,
            self.len() as u64,
            self.trees.len() as u64,
            self.config.leaf_size as u64,
            self.config.seed,
            search_k,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.ids {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        for x in &self.vectors {
            x.write_le(&mut buf);
        }
        for tree in &self.trees {
            buf.extend_from_slice(&(tree.len() as u64).to_le_bytes());
            for node in tree {
                match node {
                    Node::Split {
                        normal,
                        offset,
                        left,
                        right,
                    } => {
                        buf.push(0);
                        buf.extend_from_slice(&left.to_le_bytes());
                        buf.extend_from_slice(&right.to_le_bytes());
                        offset.write_le(&mut buf);
                        normal.iter().for_each(|x| x.write_le(&mut buf));
                    }
                    Node::Leaf(items) => {
                        buf.push(1);
                        buf.extend_from_slice(&(items.len() as u32).to_le_bytes());
                        items
                            .iter()
                            .for_each(|i| buf.extend_from_slice(&i.to_le_bytes()));
                    }
                }
            }
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut r = Cursor {
            bytes: &bytes,
            pos: 0,
        };
        if r.take(8)? != MAGIC {
            return Err(Error::format("index", "bad magic"));
        }
        if r.u32()? != VERSION {
            return Err(Error::format("index", "unsupported version"));
        }
        if r.u32()? as usize != T::BYTES {
            return Err(Error::format(
                "index",
                "scalar width differs from the requested type",
            ));
        }
        let (dim, n, n_trees, leaf_size, seed, search_k) =
            (r.u64()?, r.u64()?, r.u64()?, r.u64()?, r.u64()?, r.u64()?);
        let (dim, n, n_trees) = (dim as usize, n as usize, n_trees as usize);
        if dim == 0 || n == 0 {
            return Err(Error::format("index", "empty index"));
        }
        let ids = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let vectors = (0..n * dim)
            .map(|_| r.scalar::<T>())
            .collect::<Result<Vec<_>>>()?;
        let mut trees = Vec::with_capacity(n_trees);
        for _ in 0..n_trees {
            let count = r.u64()? as usize;
            let mut nodes = Vec::with_capacity(count.min(bytes.len()));
            for _ in 0..count {
                let node = match r.take(1)?[0] {
                    0 => {
                        let (left, right) = (r.u32()?, r.u32()?);
                        let offset = r.scalar()?;
                        let normal = (0..dim).map(|_| r.scalar()).collect::<Result<Vec<T>>>()?;
                        if left as usize >= count || right as usize >= count {
                            return Err(Error::format("index", "child pointer out of range"));
                        }
                        Node::Split {
                            normal,
                            offset,
                            left,
                            right,
                        }
                    }
                    1 => {
                        let len = r.u32()? as usize;
                        let items = (0..len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                        if items.iter().any(|&i| i as usize >= n) {
                            return Err(Error::format("index", "leaf references a missing vector"));
                        }
                        Node::Leaf(items)
                    }
                    t => return Err(Error::format("index", format!("unknown node tag {t}"))),
                };
                nodes.push(node);
            }
            trees.push(nodes);
        }
        if r.pos != bytes.len() {
            return Err(Error::format("index", "trailing bytes"));
        }
        let norms = vectors.chunks(dim).map(norm).collect();
        let config = IndexConfig {
            n_trees,
            leaf_size: leaf_size as usize,
            search_k: (search_k != u64::MAX).then_some(search_k as usize),
            seed,
        };
        Ok(Self {
            config,
            dim,
            ids,
            vectors,
            norms,
            trees,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("index", "truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn scalar<T: Scalar>(&mut self) -> Result<T> {
        Ok(T::read_le(self.take(T::BYTES)?))
    }
}

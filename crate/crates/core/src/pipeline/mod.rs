//! End-to-end orchestration: the run configuration, the on-disk layout of
//! a work directory, and one function per stage. Every stage writes a
//! manifest next to each output and is skipped when nothing changed.

mod config;
mod manifest;

pub use config::{ModelKind, Preset, RunConfig, TrainingData};
pub use manifest::{hash_file, manifest_path, read_manifest, Manifest, Stage, StageOutcome};

use crate::catalog::{
    self, AttributeVocabulary, Catalog, ClickModel, ProductId, QueryId, SyntheticQuery,
};
use crate::encoders::{
    fill_mask, AnyEncoder, BiGruEncoder, Encoder, GruConfig, Sidecar, TransformerConfig,
    TransformerEncoder,
};
use crate::error::{Error, Result};
use crate::graphs::{self, QueryClass, WalkConfig};
use crate::index::{EmbeddingIndex, IndexConfig};
use crate::metrics::{
    self, Embedder, RankingReport, RankingSetConfig, RankingSets, RetrievalCase, RetrievalReport,
};
use crate::rng::{derive_index, derive_seed};
use crate::tokenizer::{self, BpeVocab};
use crate::training::{
    self, FinetuneConfig, GruTrainConfig, PretrainConfig, PretrainReport, RunLog, TrainReport,
};
use crate::triplets::{self, PositiveSampling, SamplerConfig, Triplet};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

const EMBED_BATCH: usize = 64;

/// Expected reciprocal rank of one positive among 21 uniformly ranked candidates.
pub fn random_mrr_baseline(candidates: usize) -> f64 {
    (1..=candidates).map(|r| 1.0 / r as f64).sum::<f64>() / candidates as f64
}

/// Paths of every artifact inside a work directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn at(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn catalog(&self) -> PathBuf {
        self.at("data/catalog.jsonl")
    }
    pub fn queries(&self) -> PathBuf {
        self.at("data/queries.jsonl")
    }
    pub fn clicklog(&self) -> PathBuf {
        self.at("data/clicklog.jsonl")
    }
    pub fn qp_edges(&self) -> PathBuf {
        self.at("graphs/qp_edges.tsv")
    }
    pub fn pp_edges(&self) -> PathBuf {
        self.at("graphs/pp_edges.tsv")
    }
    pub fn classes(&self) -> PathBuf {
        self.at("graphs/query_classes.tsv")
    }
    pub fn walks(&self) -> PathBuf {
        self.at("graphs/walks.tsv")
    }
    pub fn split(&self) -> PathBuf {
        self.at("triplets/split.json")
    }
    pub fn qp_triplets(&self) -> PathBuf {
        self.at("triplets/qp.tsv")
    }
    pub fn pp_triplets(&self) -> PathBuf {
        self.at("triplets/pp.tsv")
    }
    pub fn ranking_cases(&self) -> PathBuf {
        self.at("triplets/ranking_cases.json")
    }
    pub fn retrieval_cases(&self) -> PathBuf {
        self.at("triplets/retrieval_cases.json")
    }
    pub fn tokenizer_corpus(&self) -> PathBuf {
        self.at("tokenizer/corpus.txt")
    }
    pub fn tokenizer(&self) -> PathBuf {
        self.at("tokenizer/vocab.json")
    }
    pub fn pretrained(&self) -> PathBuf {
        self.at("models/pretrained.ckpt")
    }
    pub fn pretrain_report(&self) -> PathBuf {
        self.at("reports/pretrain.json")
    }
    pub fn model(&self, preset: Preset) -> PathBuf {
        self.at(&format!("models/{preset}.ckpt"))
    }
    pub fn train_report(&self, preset: Preset) -> PathBuf {
        self.at(&format!("reports/{preset}.train.json"))
    }
    pub fn run_log(&self, name: &str) -> PathBuf {
        self.at(&format!("runs/{name}.jsonl"))
    }
    pub fn index(&self, preset: Preset) -> PathBuf {
        self.at(&format!("index/{preset}.idx"))
    }
    pub fn ranking_report(&self, name: &str) -> PathBuf {
        self.at(&format!("reports/{name}.ranking.json"))
    }
    pub fn retrieval_report(&self, name: &str) -> PathBuf {
        self.at(&format!("reports/{name}.retrieval.json"))
    }
    pub fn summary(&self, preset: Preset) -> PathBuf {
        self.at(&format!("reports/{preset}.summary.json"))
    }

    fn stage<'a>(
        &'a self,
        name: &'a str,
        cfg: &RunConfig,
        config: serde_json::Value,
        inputs: Vec<PathBuf>,
        outputs: Vec<PathBuf>,
    ) -> Stage<'a> {
        Stage {
            root: &self.root,
            name,
            seed: cfg.seed,
            config,
            inputs,
            outputs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuerySplit {
    pub train: Vec<QueryId>,
    pub test: Vec<QueryId>,
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

fn write_with<F: FnOnce(&mut BufWriter<File>) -> Result<()>>(path: &Path, f: F) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

// ---------------------------------------------------------------- stages

pub fn gen_data(layout: &Layout, cfg: &RunConfig) -> Result<StageOutcome> {
    let outputs = vec![layout.catalog(), layout.queries(), layout.clicklog()];
    let config = json!({ "n_products": cfg.n_products, "n_queries": cfg.n_queries, "n_sessions": cfg.n_sessions });
    layout
        .stage("gen-data", cfg, config, vec![], outputs)
        .run(|| {
            let vocab = AttributeVocabulary::default();
            let cat =
                catalog::gen_catalog(&vocab, cfg.n_products, derive_seed(cfg.seed, "catalog"))?;
            let (queries, log) = catalog::gen_clicklog(
                &cat,
                cfg.n_queries,
                cfg.n_sessions,
                &ClickModel::default(),
                derive_seed(cfg.seed, "clicklog"),
            )?;
            catalog::save_jsonl(&cat.products, &layout.catalog())?;
            catalog::save_jsonl(&queries, &layout.queries())?;
            catalog::save_jsonl(&log.sessions, &layout.clicklog())
        })
}

pub fn build_graphs(layout: &Layout, cfg: &RunConfig) -> Result<StageOutcome> {
    let inputs = vec![layout.catalog(), layout.queries(), layout.clicklog()];
    let outputs = vec![
        layout.qp_edges(),
        layout.pp_edges(),
        layout.classes(),
        layout.walks(),
    ];
    let config = json!({
        "broad_threshold": cfg.broad_threshold,
        "walks_per_node": cfg.walks_per_node,
        "walk_length": cfg.walk_length,
    });
    layout
        .stage("build-graphs", cfg, config, inputs, outputs)
        .run(|| {
            let cat = catalog::load_catalog(&layout.catalog())?;
            let queries: Vec<SyntheticQuery> = catalog::load_jsonl(&layout.queries())?;
            let log = catalog::load_clicklog(&layout.clicklog())?;
            let log = graphs::dedup_queries(&queries, &log);
            let qp = graphs::build_qp_graph(&log);
            let pp = graphs::build_pp_graph(&log, &cat);
            let classes = graphs::classify_all(&qp, &cat, cfg.broad_threshold);
            let walk_cfg = WalkConfig {
                walks_per_node: cfg.walks_per_node,
                walk_length: cfg.walk_length,
                ..WalkConfig::default()
            };
            let walks = graphs::random_walks(&pp, &walk_cfg, derive_seed(cfg.seed, "walks"));
            write_with(&layout.qp_edges(), |w| {
                graphs::write_edges_tsv(qp.edges(), w)
            })?;
            write_with(&layout.pp_edges(), |w| {
                graphs::write_edges_tsv(pp.edges(), w)
            })?;
            write_with(&layout.classes(), |w| {
                graphs::write_classes_tsv(&classes, w)
            })?;
            write_with(&layout.walks(), |w| graphs::write_walks_tsv(&walks, w))
        })
}

/// Inputs the triplet, case and evaluation stages read back from disk.
struct GraphData {
    catalog: Catalog,
    queries: Vec<SyntheticQuery>,
    qp: graphs::QueryProductGraph,
    classes: BTreeMap<QueryId, QueryClass>,
}

fn load_graph_data(layout: &Layout) -> Result<GraphData> {
    let catalog = catalog::load_catalog(&layout.catalog())?;
    let queries = catalog::load_jsonl(&layout.queries())?;
    let qp =
        graphs::QueryProductGraph::from_edges(graphs::read_edges_tsv(open(&layout.qp_edges())?)?)?;
    let classes = graphs::read_classes_tsv(open(&layout.classes())?)?;
    Ok(GraphData {
        catalog,
        queries,
        qp,
        classes,
    })
}

pub fn sample_triplets(layout: &Layout, cfg: &RunConfig) -> Result<StageOutcome> {
    let inputs = vec![
        layout.catalog(),
        layout.queries(),
        layout.qp_edges(),
        layout.classes(),
        layout.walks(),
    ];
    let outputs = vec![
        layout.split(),
        layout.qp_triplets(),
        layout.pp_triplets(),
        layout.ranking_cases(),
        layout.retrieval_cases(),
    ];
    let config = json!({
        "split_ratio": cfg.split_ratio,
        "top_k": cfg.top_k,
        "narrow_same_atg": cfg.narrow_same_atg,
        "pp_same_atg": cfg.pp_same_atg,
        "pp_positives_per_anchor": cfg.pp_positives_per_anchor,
    });
    layout
        .stage("sample-triplets", cfg, config, inputs, outputs)
        .run(|| {
            let d = load_graph_data(layout)?;
            let walks = graphs::read_walks_tsv(open(&layout.walks())?)?;
            let ids: Vec<QueryId> = d.qp.queries().collect();
            let (train, test) =
                triplets::split_queries(&ids, cfg.split_ratio, derive_seed(cfg.seed, "split"))?;
            let sampler = SamplerConfig {
                narrow_same_atg: cfg.narrow_same_atg,
                pp_same_atg: cfg.pp_same_atg,
                top_k: cfg.top_k,
                positives_per_anchor: None,
                positive_sampling: PositiveSampling::Uniform,
                seed: derive_seed(cfg.seed, "triplets"),
            };
            let (qp, _) = triplets::sample_qp_triplets(
                &train, &d.qp, &d.classes, &d.queries, &d.catalog, &sampler, 0,
            )?;
            let pp_sampler = SamplerConfig {
                positives_per_anchor: cfg.pp_positives_per_anchor,
                ..sampler
            };
            let (pp, _) = triplets::sample_pp_triplets(&walks, &d.catalog, &pp_sampler, 0)?;
            let case_cfg = RankingSetConfig {
                seed: derive_seed(cfg.seed, "eval-cases"),
                ..RankingSetConfig::default()
            };
            let sets = metrics::make_ranking_sets(&test, &d.qp, &d.catalog, &d.queries, &case_cfg)?;
            let retrieval = metrics::make_retrieval_cases(&test, &d.qp, &d.classes, &d.queries)?;
            write_json(&QuerySplit { train, test }, &layout.split())?;
            write_with(&layout.qp_triplets(), |w| {
                triplets::write_triplets_tsv(&qp, w)
            })?;
            write_with(&layout.pp_triplets(), |w| {
                triplets::write_triplets_tsv(&pp, w)
            })?;
            write_json(&sets, &layout.ranking_cases())?;
            write_json(&retrieval, &layout.retrieval_cases())
        })
}

/// Product ids kept out of pre-training so perplexity and fill-mask are
/// measured on unseen text.
fn heldout_products(cfg: &RunConfig, n: usize) -> BTreeSet<ProductId> {
    let base = derive_seed(cfg.seed, "heldout-products");
    (0..n as u64)
        .filter(|&p| {
            (derive_index(base, p) >> 11) as f64 / (1u64 << 53) as f64
                <= cfg.heldout_product_fraction
        })
        .map(|p| p as ProductId)
        .collect()
}

/// Training text for the tokenizer and the masked-LM: product titles and
/// descriptions (held-out products excluded) plus training-split queries.
fn pretraining_texts(
    cfg: &RunConfig,
    cat: &Catalog,
    queries: &[SyntheticQuery],
    split: &QuerySplit,
) -> Vec<String> {
    let held = heldout_products(cfg, cat.len());
    let train: BTreeSet<QueryId> = split.train.iter().copied().collect();
    let mut out = Vec::new();
    for p in cat
        .products
        .iter()
        .filter(|p| !held.contains(&p.product_id))
    {
        out.push(p.title.clone());
        out.push(p.description.clone());
    }
    out.extend(
        queries
            .iter()
            .filter(|q| train.contains(&q.query_id))
            .map(|q| q.text.clone()),
    );
    out
}

/// Writes the tokenizer corpus (one text per line) and trains the vocabulary on it.
pub fn train_tokenizer(layout: &Layout, cfg: &RunConfig) -> Result<StageOutcome> {
    let inputs = vec![layout.catalog(), layout.queries(), layout.split()];
    let outputs = vec![layout.tokenizer_corpus(), layout.tokenizer()];
    let config = json!({ "vocab_size": cfg.vocab_size, "heldout_product_fraction": cfg.heldout_product_fraction });
    layout
        .stage("train-tokenizer", cfg, config, inputs, outputs)
        .run(|| {
            let cat = catalog::load_catalog(&layout.catalog())?;
            let queries: Vec<SyntheticQuery> = catalog::load_jsonl(&layout.queries())?;
            let split: QuerySplit = read_json(&layout.split())?;
            let texts = pretraining_texts(cfg, &cat, &queries, &split);
            std::fs::write(layout.tokenizer_corpus(), texts.join("\n") + "\n")?;
            let vocab = tokenizer::train_bpe(
                texts.iter().map(String::as_str),
                cfg.vocab_size,
                derive_seed(cfg.seed, "tokenizer"),
            )?;
            vocab.save(&layout.tokenizer())
        })
}

pub fn transformer_config(cfg: &RunConfig, vocab_size: usize) -> TransformerConfig {
    TransformerConfig {
        d_model: cfg.d_model,
        n_heads: cfg.n_heads,
        n_layers: cfg.n_layers,
        d_ff: cfg.d_ff,
        max_len: cfg.max_len,
        output_dim: cfg.output_dim,
        pooling: cfg.pooling,
        dropout: cfg.dropout,
        ..TransformerConfig::desk(vocab_size)
    }
}

pub fn gru_config(cfg: &RunConfig, vocab_size: usize, layers: usize) -> GruConfig {
    GruConfig {
        vocab_size,
        embed_dim: cfg.gru_embed_dim,
        hidden: cfg.gru_hidden,
        layers,
        output_dim: cfg.gru_output_dim,
        max_len: cfg.max_len,
        init_scale: cfg.gru_init_scale,
    }
}

/// Fill-mask accuracy on held-out queries with one attribute word masked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FillMaskReport {
    pub queries: usize,
    pub top: usize,
    pub hits: usize,
    pub accuracy: f64,
    /// `top / |V|`: accuracy of guessing uniformly.
    pub chance_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub vocab_size: usize,
    pub corpus_sequences: usize,
    pub eval_sequences: usize,
    pub training: PretrainReport,
    pub fill_mask: FillMaskReport,
}

/// A query with a single-token attribute word replaced by the mask marker.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedQuery {
    pub text: String,
    pub answer: String,
}

/// Mask one attribute word per query, keeping only words that are a single
/// token in context. The word is picked by the query id.
pub fn masked_attribute_queries(
    vocab: &BpeVocab,
    queries: &[&SyntheticQuery],
    limit: usize,
) -> Vec<MaskedQuery> {
    let terms = AttributeVocabulary::default().all_terms();
    let mut out = Vec::new();
    for q in queries {
        if out.len() >= limit {
            break;
        }
        let words: Vec<&str> = q.text.split(' ').collect();
        let full = vocab.encode(&q.text);
        let candidates: Vec<(usize, u32)> = words
            .iter()
            .enumerate()
            .filter(|(_, w)| terms.contains(**w))
            .filter_map(|(i, _)| {
                let mut masked = words.clone();
                masked[i] = tokenizer::MASK_LITERAL;
                let ids = vocab.encode_with_masks(&masked.join(" "));
                if ids.len() != full.len() {
                    return None;
                }
                let pos = ids.iter().position(|&t| t == tokenizer::MASK)?;
                let rest_equal = ids
                    .iter()
                    .zip(&full)
                    .enumerate()
                    .all(|(j, (a, b))| j == pos || a == b);
                rest_equal.then_some((i, full[pos]))
            })
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let (i, answer) = candidates[q.query_id as usize % candidates.len()];
        let mut masked = words.clone();
        masked[i] = tokenizer::MASK_LITERAL;
        out.push(MaskedQuery {
            text: masked.join(" "),
            answer: vocab.token(answer).unwrap_or_default().to_string(),
        });
    }
    out
}

pub fn fill_mask_accuracy(
    model: &TransformerEncoder<f32>,
    vocab: &BpeVocab,
    cases: &[MaskedQuery],
    top: usize,
) -> Result<FillMaskReport> {
    let mut hits = 0;
    for c in cases {
        if fill_mask(model, vocab, &c.text, top)?
            .iter()
            .any(|(t, _)| *t == c.answer)
        {
            hits += 1;
        }
    }
    Ok(FillMaskReport {
        queries: cases.len(),
        top,
        hits,
        accuracy: if cases.is_empty() {
            0.0
        } else {
            hits as f64 / cases.len() as f64
        },
        chance_rate: top as f64 / vocab.len() as f64,
    })
}

/// Sequences for pseudo-perplexity: held-out product titles and test queries.
fn perplexity_eval_set(
    cfg: &RunConfig,
    vocab: &BpeVocab,
    cat: &Catalog,
    queries: &[SyntheticQuery],
    split: &QuerySplit,
) -> Vec<Vec<u32>> {
    let held = heldout_products(cfg, cat.len());
    let test: BTreeSet<QueryId> = split.test.iter().copied().collect();
    let titles = cat
        .products
        .iter()
        .filter(|p| held.contains(&p.product_id))
        .map(|p| p.title.as_str());
    let qs = queries
        .iter()
        .filter(|q| test.contains(&q.query_id))
        .map(|q| q.text.as_str());
    let budget = cfg.max_len.saturating_sub(2).max(1);
    titles
        .zip(qs.clone())
        .flat_map(|(a, b)| [a, b])
        .chain(qs.skip(held.len()))
        .map(|t| vocab.encode_truncated(t, budget).ids)
        .filter(|ids| !ids.is_empty())
        .take(cfg.ppl_eval_sequences)
        .collect()
}

pub fn pretrain(layout: &Layout, cfg: &RunConfig) -> Result<StageOutcome> {
    let inputs = vec![
        layout.tokenizer_corpus(),
        layout.tokenizer(),
        layout.catalog(),
        layout.queries(),
        layout.split(),
    ];
    let ckpt = layout.pretrained();
    let outputs = vec![
        ckpt.clone(),
        crate::encoders::sidecar_path(&ckpt),
        layout.pretrain_report(),
    ];
    let config = json!({
        "model": transformer_config(cfg, 0),
        "epochs": cfg.pretrain_epochs,
        "batch": cfg.pretrain_batch,
        "lr": cfg.pretrain_lr,
        "weight_decay": cfg.weight_decay,
        "cut_fraction": cfg.cut_fraction,
        "ratio": cfg.stlr_ratio,
        "mask_rate": cfg.mask_rate,
        "eval_every": cfg.eval_every,
        "ppl_eval_sequences": cfg.ppl_eval_sequences,
        "fill_mask_queries": cfg.fill_mask_queries,
        "fill_mask_top": cfg.fill_mask_top,
    });
    layout
        .stage("pretrain", cfg, config, inputs, outputs)
        .run(|| {
            let vocab = BpeVocab::load(&layout.tokenizer())?;
            let cat = catalog::load_catalog(&layout.catalog())?;
            let queries: Vec<SyntheticQuery> = catalog::load_jsonl(&layout.queries())?;
            let split: QuerySplit = read_json(&layout.split())?;
            let budget = cfg.max_len.saturating_sub(2).max(1);
            let corpus: Vec<Vec<u32>> = std::fs::read_to_string(layout.tokenizer_corpus())?
                .lines()
                .map(|t| vocab.encode_truncated(t, budget).ids)
                .filter(|ids| !ids.is_empty())
                .collect();
            let eval = perplexity_eval_set(cfg, &vocab, &cat, &queries, &split);
            let seed = derive_seed(cfg.seed, "pretrain");
            let mut model =
                TransformerEncoder::<f32>::new(transformer_config(cfg, vocab.len()), seed)?;
            let pcfg = PretrainConfig {
                epochs: cfg.pretrain_epochs,
                batch_size: cfg.pretrain_batch,
                lr_max: cfg.pretrain_lr,
                weight_decay: cfg.weight_decay,
                cut_fraction: cfg.cut_fraction,
                ratio: cfg.stlr_ratio,
                mask_rate: cfg.mask_rate,
                eval_every: cfg.eval_every,
                seed,
            };
            std::fs::create_dir_all(layout.root.join("runs"))?;
            let mut log = RunLog::to_file(&layout.run_log("pretrain"))?;
            let training = training::pretrain_mlm(&mut model, &corpus, &eval, &pcfg, &mut log)?;
            log.flush()?;
            let test: BTreeSet<QueryId> = split.test.iter().copied().collect();
            let heldout: Vec<&SyntheticQuery> = queries
                .iter()
                .filter(|q| test.contains(&q.query_id))
                .collect();
            let cases = masked_attribute_queries(&vocab, &heldout, cfg.fill_mask_queries);
            let fill = fill_mask_accuracy(&model, &vocab, &cases, cfg.fill_mask_top)?;
            model.save(&ckpt, &vocab.hash(), seed)?;
            write_json(
                &PretrainSummary {
                    vocab_size: vocab.len(),
                    corpus_sequences: corpus.len(),
                    eval_sequences: eval.len(),
                    training,
                    fill_mask: fill,
                },
                &layout.pretrain_report(),
            )
        })
}

fn read_triplets(path: &Path) -> Result<Vec<Triplet>> {
    triplets::read_triplets_tsv(open(path)?)
}

fn training_triplets(layout: &Layout, cfg: &RunConfig, data: TrainingData) -> Result<Vec<Triplet>> {
    let qp = read_triplets(&layout.qp_triplets())?;
    Ok(match data {
        TrainingData::Qp => qp,
        TrainingData::Augmented => triplets::augment(
            qp,
            read_triplets(&layout.pp_triplets())?,
            derive_seed(cfg.seed, "augment"),
        ),
    })
}

/// Fine-tune the pre-trained transformer or train a BiGRU from scratch.
pub fn train_model(layout: &Layout, cfg: &RunConfig, preset: Preset) -> Result<StageOutcome> {
    let mut inputs = vec![layout.tokenizer(), layout.qp_triplets()];
    if preset.data == TrainingData::Augmented {
        inputs.push(layout.pp_triplets());
    }
    let ckpt = layout.model(preset);
    let outputs = vec![
        ckpt.clone(),
        crate::encoders::sidecar_path(&ckpt),
        layout.train_report(preset),
    ];
    let name = preset.to_string();
    let seed = derive_seed(cfg.seed, &format!("train-{name}"));
    match preset.model {
        ModelKind::Transformer => {
            inputs.push(layout.pretrained());
            inputs.push(crate::encoders::sidecar_path(&layout.pretrained()));
            let config = json!({
                "preset": name,
                "epochs": cfg.finetune_epochs,
                "batch": cfg.finetune_batch,
                "lr": cfg.finetune_lr,
                "weight_decay": cfg.weight_decay,
                "cut_fraction": cfg.cut_fraction,
                "ratio": cfg.stlr_ratio,
                "margin": cfg.margin,
                "max_len": cfg.max_len,
            });
            layout
                .stage("finetune", cfg, config, inputs, outputs)
                .run(|| {
                    let vocab = BpeVocab::load(&layout.tokenizer())?;
                    let (model, sidecar) = AnyEncoder::<f32>::load(&layout.pretrained())?;
                    let AnyEncoder::Transformer(mut model) = model else {
                        return Err(Error::Mismatch(format!(
                            "{} is not a transformer checkpoint",
                            layout.pretrained().display()
                        )));
                    };
                    let data = training::encode_triplets(
                        &vocab,
                        &training_triplets(layout, cfg, preset.data)?,
                        cfg.max_len,
                    );
                    let fcfg = FinetuneConfig {
                        epochs: cfg.finetune_epochs,
                        batch_size: cfg.finetune_batch,
                        lr_max: cfg.finetune_lr,
                        weight_decay: cfg.weight_decay,
                        cut_fraction: cfg.cut_fraction,
                        ratio: cfg.stlr_ratio,
                        margin: cfg.margin,
                        layer_lr_decay: None,
                        seed,
                    };
                    std::fs::create_dir_all(layout.root.join("runs"))?;
                    let mut log = RunLog::to_file(&layout.run_log(&name))?;
                    let (report, _) = training::finetune(
                        &mut model,
                        &sidecar.tokenizer_hash,
                        &data,
                        &fcfg,
                        &mut log,
                    )?;
                    log.flush()?;
                    model.save(&ckpt, &sidecar.tokenizer_hash, seed)?;
                    write_json(&report, &layout.train_report(preset))
                })
        }
        ModelKind::Gru1 | ModelKind::Gru2 => {
            let layers = if preset.model == ModelKind::Gru1 {
                1
            } else {
                2
            };
            let config = json!({
                "preset": name,
                "model": gru_config(cfg, 0, layers),
                "epochs": cfg.gru_epochs,
                "batch": cfg.gru_batch,
                "lr": cfg.gru_lr,
                "margin": cfg.margin,
            });
            layout
                .stage("train-gru", cfg, config, inputs, outputs)
                .run(|| {
                    let vocab = BpeVocab::load(&layout.tokenizer())?;
                    let mut model =
                        BiGruEncoder::<f32>::new(gru_config(cfg, vocab.len(), layers), seed)?;
                    let data = training::encode_triplets(
                        &vocab,
                        &training_triplets(layout, cfg, preset.data)?,
                        cfg.max_len,
                    );
                    let gcfg = GruTrainConfig {
                        epochs: cfg.gru_epochs,
                        batch_size: cfg.gru_batch,
                        lr: cfg.gru_lr,
                        margin: cfg.margin,
                        seed,
                    };
                    std::fs::create_dir_all(layout.root.join("runs"))?;
                    let mut log = RunLog::to_file(&layout.run_log(&name))?;
                    let report: TrainReport =
                        training::train_gru(&mut model, &data.items, &gcfg, &mut log)?;
                    log.flush()?;
                    model.save(&ckpt, &vocab.hash(), seed)?;
                    write_json(&report, &layout.train_report(preset))
                })
        }
    }
}

/// Load a checkpoint and check it was trained with `vocab`.
pub fn load_model(path: &Path, vocab: &BpeVocab) -> Result<(AnyEncoder<f32>, Sidecar)> {
    let (model, sidecar) = AnyEncoder::<f32>::load(path)?;
    crate::encoders::check_tokenizer(&sidecar, &vocab.hash())?;
    Ok((model, sidecar))
}

pub fn index_config(cfg: &RunConfig) -> IndexConfig {
    IndexConfig {
        n_trees: cfg.n_trees,
        leaf_size: cfg.leaf_size,
        search_k: cfg.search_k,
        seed: derive_seed(cfg.seed, "index"),
    }
}

/// Embed every product with `model` and build the retrieval index.
pub fn build_index(
    model: &dyn Encoder<f32>,
    vocab: &BpeVocab,
    cat: &Catalog,
    cfg: &RunConfig,
) -> Result<EmbeddingIndex<f32>> {
    let embedder = Embedder {
        encoder: model,
        vocab,
        max_len: cfg.max_len,
        batch: EMBED_BATCH,
    };
    let vectors = embedder.embed_catalog(cat, cfg.product_text)?;
    let items = cat
        .products
        .iter()
        .map(|p| p.product_id)
        .zip(vectors)
        .collect();
    EmbeddingIndex::build(items, index_config(cfg))
}

pub fn embed(layout: &Layout, cfg: &RunConfig, preset: Preset) -> Result<StageOutcome> {
    let ckpt = layout.model(preset);
    let inputs = vec![
        ckpt.clone(),
        crate::encoders::sidecar_path(&ckpt),
        layout.tokenizer(),
        layout.catalog(),
    ];
    let config = json!({
        "n_trees": cfg.n_trees,
        "leaf_size": cfg.leaf_size,
        "search_k": cfg.search_k,
        "product_text": cfg.product_text,
        "max_len": cfg.max_len,
    });
    layout
        .stage("embed", cfg, config, inputs, vec![layout.index(preset)])
        .run(|| {
            let vocab = BpeVocab::load(&layout.tokenizer())?;
            let (model, _) = load_model(&ckpt, &vocab)?;
            let cat = catalog::load_catalog(&layout.catalog())?;
            build_index(model.as_encoder(), &vocab, &cat, cfg)?.save(&layout.index(preset))
        })
}

pub fn rank_eval(
    model: &dyn Encoder<f32>,
    vocab: &BpeVocab,
    cat: &Catalog,
    sets: &RankingSets,
    cfg: &RunConfig,
) -> Result<RankingReport> {
    let embedder = Embedder {
        encoder: model,
        vocab,
        max_len: cfg.max_len,
        batch: EMBED_BATCH,
    };
    let products = embedder.embed_catalog(cat, cfg.product_text)?;
    metrics::evaluate_ranking(&embedder, &products, sets)
}

pub fn retrieval_eval(
    model: &dyn Encoder<f32>,
    vocab: &BpeVocab,
    index: &EmbeddingIndex<f32>,
    cases: &[RetrievalCase],
    cfg: &RunConfig,
) -> Result<RetrievalReport> {
    let embedder = Embedder {
        encoder: model,
        vocab,
        max_len: cfg.max_len,
        batch: EMBED_BATCH,
    };
    metrics::evaluate_retrieval(&embedder, index, cases, cfg.retrieval_k)
}

fn eval_config(cfg: &RunConfig) -> serde_json::Value {
    json!({ "product_text": cfg.product_text, "max_len": cfg.max_len, "retrieval_k": cfg.retrieval_k })
}

pub fn evaluate(layout: &Layout, cfg: &RunConfig, preset: Preset) -> Result<StageOutcome> {
    let name = preset.to_string();
    let ckpt = layout.model(preset);
    let inputs = vec![
        ckpt.clone(),
        crate::encoders::sidecar_path(&ckpt),
        layout.tokenizer(),
        layout.catalog(),
        layout.index(preset),
        layout.ranking_cases(),
        layout.retrieval_cases(),
    ];
    let outputs = vec![layout.ranking_report(&name), layout.retrieval_report(&name)];
    layout
        .stage("eval", cfg, eval_config(cfg), inputs, outputs)
        .run(|| {
            let vocab = BpeVocab::load(&layout.tokenizer())?;
            let (model, _) = load_model(&ckpt, &vocab)?;
            let cat = catalog::load_catalog(&layout.catalog())?;
            let sets: RankingSets = read_json(&layout.ranking_cases())?;
            let cases: Vec<RetrievalCase> = read_json(&layout.retrieval_cases())?;
            let index = EmbeddingIndex::<f32>::load(&layout.index(preset))?;
            write_json(
                &rank_eval(model.as_encoder(), &vocab, &cat, &sets, cfg)?,
                &layout.ranking_report(&name),
            )?;
            write_json(
                &retrieval_eval(model.as_encoder(), &vocab, &index, &cases, cfg)?,
                &layout.retrieval_report(&name),
            )
        })
}

pub const UNTRAINED: &str = "transformer-untrained";

/// Ranking metrics of the transformer at its pre-training initialization.
pub fn evaluate_untrained(layout: &Layout, cfg: &RunConfig) -> Result<StageOutcome> {
    let inputs = vec![layout.tokenizer(), layout.catalog(), layout.ranking_cases()];
    let mut config = eval_config(cfg);
    config["model"] = json!(transformer_config(cfg, 0));
    layout
        .stage(
            "eval-untrained",
            cfg,
            config,
            inputs,
            vec![layout.ranking_report(UNTRAINED)],
        )
        .run(|| {
            let vocab = BpeVocab::load(&layout.tokenizer())?;
            let model = TransformerEncoder::<f32>::new(
                transformer_config(cfg, vocab.len()),
                derive_seed(cfg.seed, "pretrain"),
            )?;
            let cat = catalog::load_catalog(&layout.catalog())?;
            let sets: RankingSets = read_json(&layout.ranking_cases())?;
            write_json(
                &rank_eval(&model, &vocab, &cat, &sets, cfg)?,
                &layout.ranking_report(UNTRAINED),
            )
        })
}

/// Headline numbers of one preset run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetSummary {
    pub preset: String,
    pub seed: u64,
    pub vocab_size: usize,
    pub mrr: f64,
    pub map: f64,
    pub ndcg: f64,
    pub k: usize,
    pub precision_at_k: f64,
    pub recall_at_k: f64,
    pub random_mrr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub untrained_mrr: Option<f64>,
    pub final_train_loss: Option<f64>,
}

pub fn summarize(layout: &Layout, cfg: &RunConfig, preset: Preset) -> Result<StageOutcome> {
    let name = preset.to_string();
    let mut inputs = vec![
        layout.tokenizer(),
        layout.train_report(preset),
        layout.ranking_report(&name),
        layout.retrieval_report(&name),
    ];
    if preset.model == ModelKind::Transformer {
        inputs.push(layout.ranking_report(UNTRAINED));
    }
    layout
        .stage(
            "summarize",
            cfg,
            json!({ "preset": name }),
            inputs,
            vec![layout.summary(preset)],
        )
        .run(|| {
            let vocab = BpeVocab::load(&layout.tokenizer())?;
            let train: TrainReport = read_json(&layout.train_report(preset))?;
            let rank: RankingReport = read_json(&layout.ranking_report(&name))?;
            let ret: RetrievalReport = read_json(&layout.retrieval_report(&name))?;
            let untrained_mrr = match preset.model {
                ModelKind::Transformer => {
                    Some(read_json::<RankingReport>(&layout.ranking_report(UNTRAINED))?.mrr)
                }
                _ => None,
            };
            let summary = PresetSummary {
                preset: name.clone(),
                seed: cfg.seed,
                vocab_size: vocab.len(),
                mrr: rank.mrr,
                map: rank.map,
                ndcg: rank.ndcg,
                k: ret.k,
                precision_at_k: ret.precision_at_k,
                recall_at_k: ret.recall_at_k,
                random_mrr: random_mrr_baseline(RankingSetConfig::default().mrr_negatives + 1),
                untrained_mrr,
                final_train_loss: train.epoch_losses.last().copied(),
            };
            write_json(&summary, &layout.summary(preset))
        })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub outcome: StageOutcome,
    pub seconds: f64,
}

/// Run every stage needed for `preset`, skipping the ones already current.
pub fn run_pipeline(
    layout: &Layout,
    cfg: &RunConfig,
    preset: Preset,
    mut progress: impl FnMut(&StageTiming),
) -> Result<(PresetSummary, Vec<StageTiming>)> {
    std::fs::create_dir_all(&layout.root)?;
    std::fs::write(layout.root.join("config.txt"), cfg.to_kv())?;
    let mut timings = Vec::new();
    let mut step = |name: &str, f: &dyn Fn() -> Result<StageOutcome>| -> Result<()> {
        let t = Instant::now();
        let outcome = f()?;
        let timing = StageTiming {
            stage: name.to_string(),
            outcome,
            seconds: t.elapsed().as_secs_f64(),
        };
        progress(&timing);
        timings.push(timing);
        Ok(())
    };
    step("gen-data", &|| gen_data(layout, cfg))?;
    step("build-graphs", &|| build_graphs(layout, cfg))?;
    step("sample-triplets", &|| sample_triplets(layout, cfg))?;
    step("train-tokenizer", &|| train_tokenizer(layout, cfg))?;
    if preset.model == ModelKind::Transformer {
        step("pretrain", &|| pretrain(layout, cfg))?;
        step("eval-untrained", &|| evaluate_untrained(layout, cfg))?;
    }
    let train_name = if preset.model == ModelKind::Transformer {
        "finetune"
    } else {
        "train-gru"
    };
    step(train_name, &|| train_model(layout, cfg, preset))?;
    step("embed", &|| embed(layout, cfg, preset))?;
    step("eval", &|| evaluate(layout, cfg, preset))?;
    step("summarize", &|| summarize(layout, cfg, preset))?;
    Ok((read_json(&layout.summary(preset))?, timings))
}

//! `nsearch`: command-line driver for the neural product-search pipeline.

use clap::{Args, Parser, Subcommand};
use neural_search::encoders::{fill_mask, AnyEncoder};
use neural_search::index::EmbeddingIndex;
use neural_search::metrics::{RankingSets, RetrievalCase};
use neural_search::pipeline::{self as pl, Layout, Preset, RunConfig, Stage, StageOutcome};
use neural_search::tokenizer::{self, BpeVocab};
use neural_search::{catalog, encoders, Error};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "nsearch",
    version,
    about = "Synthetic-data neural product search: data, training, indexing and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Key = value configuration file applied on top of the profile.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Base settings: `desk` (small, runs on one core) or `full` (full-size models).
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Master seed; every stage derives its own seed from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Override one setting, e.g. `--set gru_epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> neural_search::Result<RunConfig> {
        let mut cfg = RunConfig::profile(&self.profile)?;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            cfg.apply_kv(&text)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct WorkArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Work directory holding every artifact of a run.
    #[arg(long, value_name = "DIR", default_value = "work")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic catalog, queries and click log.
    GenData(WorkArgs),
    /// Build the click graphs, classify queries and run random walks.
    BuildGraphs(WorkArgs),
    /// Split queries, sample triplets and build the evaluation cases.
    SampleTriplets(WorkArgs),
    /// Train the BPE vocabulary, from a corpus file or from the work directory.
    TrainTokenizer {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// One text per line. When given, `--out` names the vocabulary file.
        #[arg(long, value_name = "FILE")]
        corpus: Option<PathBuf>,
        #[arg(long, value_name = "N")]
        vocab_size: Option<usize>,
        #[arg(long, value_name = "PATH", default_value = "work")]
        out: PathBuf,
    },
    /// Masked-LM pre-training of the transformer.
    Pretrain(WorkArgs),
    /// Fine-tune the pre-trained transformer on triplets.
    Finetune {
        #[command(flatten)]
        work: WorkArgs,
        #[arg(long, default_value = "transformer-qp")]
        preset: String,
    },
    /// Train a BiGRU encoder on triplets.
    TrainGru {
        #[command(flatten)]
        work: WorkArgs,
        #[arg(long, default_value = "gru1-qp")]
        preset: String,
    },
    /// Embed every catalog product and build the retrieval index.
    Embed {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "CKPT")]
        model: PathBuf,
        #[arg(long, value_name = "FILE")]
        tokenizer: PathBuf,
        #[arg(long, value_name = "FILE")]
        catalog: PathBuf,
        #[arg(long, value_name = "INDEX")]
        out: PathBuf,
    },
    /// Print the top products for a query text.
    Retrieve {
        #[arg(long, value_name = "INDEX")]
        index: PathBuf,
        #[arg(long, value_name = "CKPT")]
        model: PathBuf,
        #[arg(long, value_name = "FILE")]
        tokenizer: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 50)]
        k: usize,
    },
    /// MRR, MAP and NDCG on ranking cases.
    EvalRank {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "CKPT")]
        model: PathBuf,
        #[arg(long, value_name = "FILE")]
        tokenizer: PathBuf,
        #[arg(long, value_name = "FILE")]
        catalog: PathBuf,
        #[arg(long, value_name = "FILE")]
        cases: PathBuf,
        /// Write the report here instead of stdout.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Precision and recall at k on retrieval cases.
    EvalRetrieve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "CKPT")]
        model: PathBuf,
        #[arg(long, value_name = "FILE")]
        tokenizer: PathBuf,
        #[arg(long, value_name = "INDEX")]
        index: PathBuf,
        #[arg(long, value_name = "FILE")]
        cases: PathBuf,
        #[arg(long, default_value_t = 50)]
        k: usize,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Predict the token behind `<mask>` with a transformer checkpoint.
    FillMask {
        #[arg(long, value_name = "CKPT")]
        model: PathBuf,
        #[arg(long, value_name = "FILE")]
        tokenizer: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// Run every stage for one model preset.
    Pipeline {
        #[command(flatten)]
        work: WorkArgs,
        /// One of gru1-qp, gru1-augmented, gru2-qp, gru2-augmented,
        /// transformer-qp, transformer-augmented.
        #[arg(long)]
        preset: String,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Divergence { .. } => 3,
        _ => 2,
    }
}

fn report(name: &str, outcome: StageOutcome) {
    let verb = match outcome {
        StageOutcome::Ran => "done",
        StageOutcome::Skipped => "up to date",
    };
    eprintln!("{name}: {verb}");
}

fn print_json<T: serde::Serialize>(value: &T) -> neural_search::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn parent(path: &Path) -> &Path {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
}

fn load_vocab(path: &Path) -> neural_search::Result<BpeVocab> {
    if !path.exists() {
        return Err(Error::NotFound(path.display().to_string()));
    }
    BpeVocab::load(path)
}

fn run(cli: Cli) -> neural_search::Result<()> {
    match cli.command {
        Command::GenData(w) => report(
            "gen-data",
            pl::gen_data(&Layout::new(&w.out), &w.cfg.resolve()?)?,
        ),
        Command::BuildGraphs(w) => report(
            "build-graphs",
            pl::build_graphs(&Layout::new(&w.out), &w.cfg.resolve()?)?,
        ),
        Command::SampleTriplets(w) => report(
            "sample-triplets",
            pl::sample_triplets(&Layout::new(&w.out), &w.cfg.resolve()?)?,
        ),
        Command::TrainTokenizer {
            cfg,
            corpus,
            vocab_size,
            out,
        } => {
            let mut cfg = cfg.resolve()?;
            if let Some(n) = vocab_size {
                cfg.vocab_size = n;
            }
            let outcome = match corpus {
                None => pl::train_tokenizer(&Layout::new(&out), &cfg)?,
                Some(corpus) => Stage {
                    root: parent(&out),
                    name: "train-tokenizer",
                    seed: cfg.seed,
                    config: serde_json::json!({ "vocab_size": cfg.vocab_size }),
                    inputs: vec![corpus.clone()],
                    outputs: vec![out.clone()],
                }
                .run(|| {
                    let text = std::fs::read_to_string(&corpus)?;
                    tokenizer::train_bpe(text.lines(), cfg.vocab_size, cfg.seed)?.save(&out)
                })?,
            };
            report("train-tokenizer", outcome);
        }
        Command::Pretrain(w) => report(
            "pretrain",
            pl::pretrain(&Layout::new(&w.out), &w.cfg.resolve()?)?,
        ),
        Command::Finetune { work, preset } | Command::TrainGru { work, preset } => {
            let preset: Preset = preset.parse()?;
            report(
                &preset.to_string(),
                pl::train_model(&Layout::new(&work.out), &work.cfg.resolve()?, preset)?,
            );
        }
        Command::Embed {
            cfg,
            model,
            tokenizer,
            catalog,
            out,
        } => {
            let cfg = cfg.resolve()?;
            let outcome = Stage {
                root: parent(&out),
                name: "embed",
                seed: cfg.seed,
                config: serde_json::json!({
                    "n_trees": cfg.n_trees,
                    "leaf_size": cfg.leaf_size,
                    "search_k": cfg.search_k,
                    "product_text": cfg.product_text,
                    "max_len": cfg.max_len,
                }),
                inputs: vec![
                    model.clone(),
                    encoders::sidecar_path(&model),
                    tokenizer.clone(),
                    catalog.clone(),
                ],
                outputs: vec![out.clone()],
            }
            .run(|| {
                let vocab = load_vocab(&tokenizer)?;
                let (enc, _) = pl::load_model(&model, &vocab)?;
                let cat = catalog::load_catalog(&catalog)?;
                pl::build_index(enc.as_encoder(), &vocab, &cat, &cfg)?.save(&out)
            })?;
            report("embed", outcome);
        }
        Command::Retrieve {
            index,
            model,
            tokenizer,
            query,
            k,
        } => {
            let vocab = load_vocab(&tokenizer)?;
            let (enc, sidecar) = pl::load_model(&model, &vocab)?;
            let index = EmbeddingIndex::<f32>::load(&index)?;
            let max_len = match &sidecar.architecture {
                encoders::Architecture::Bigru(c) => c.max_len,
                encoders::Architecture::Transformer(c) => c.max_len,
            };
            let mut ids = vocab.encode_truncated(&query, max_len).ids;
            if ids.is_empty() {
                ids.push(tokenizer::UNK);
            }
            let q = enc.as_encoder().embed(&[ids], 1)?.remove(0);
            let hits = index.query(&q, k)?;
            if hits.k_exceeds_corpus {
                eprintln!(
                    "k = {k} exceeds the corpus; returning all {} products",
                    index.len()
                );
            }
            for (id, score) in hits.hits {
                println!("{id}\t{score:.6}");
            }
        }
        Command::EvalRank {
            cfg,
            model,
            tokenizer,
            catalog,
            cases,
            out,
        } => {
            let cfg = cfg.resolve()?;
            let vocab = load_vocab(&tokenizer)?;
            let (enc, _) = pl::load_model(&model, &vocab)?;
            let cat = catalog::load_catalog(&catalog)?;
            let sets: RankingSets = pl::read_json(&cases)?;
            let rep = pl::rank_eval(enc.as_encoder(), &vocab, &cat, &sets, &cfg)?;
            match out {
                Some(p) => pl::write_json(&rep, &p)?,
                None => print_json(&rep)?,
            }
        }
        Command::EvalRetrieve {
            cfg,
            model,
            tokenizer,
            index,
            cases,
            k,
            out,
        } => {
            let mut cfg = cfg.resolve()?;
            cfg.retrieval_k = k;
            let vocab = load_vocab(&tokenizer)?;
            let (enc, _) = pl::load_model(&model, &vocab)?;
            let index = EmbeddingIndex::<f32>::load(&index)?;
            let cases: Vec<RetrievalCase> = pl::read_json(&cases)?;
            let rep = pl::retrieval_eval(enc.as_encoder(), &vocab, &index, &cases, &cfg)?;
            match out {
                Some(p) => pl::write_json(&rep, &p)?,
                None => print_json(&rep)?,
            }
        }
        Command::FillMask {
            model,
            tokenizer,
            text,
            top,
        } => {
            let vocab = load_vocab(&tokenizer)?;
            let (enc, _) = pl::load_model(&model, &vocab)?;
            let AnyEncoder::Transformer(enc) = enc else {
                return Err(Error::Config(format!(
                    "{} is not a transformer checkpoint",
                    model.display()
                )));
            };
            for (token, p) in fill_mask(&enc, &vocab, &text, top)? {
                println!("{}\t{p:.4}", token.trim_start());
            }
        }
        Command::Pipeline { work, preset } => {
            let preset: Preset = preset.parse()?;
            let cfg = work.cfg.resolve()?;
            let (summary, timings) =
                pl::run_pipeline(&Layout::new(&work.out), &cfg, preset, |t| {
                    eprintln!(
                        "{}: {} ({:.1}s)",
                        t.stage,
                        if t.outcome == StageOutcome::Ran {
                            "done"
                        } else {
                            "up to date"
                        },
                        t.seconds
                    );
                })?;
            let total: f64 = timings.iter().map(|t| t.seconds).sum();
            eprintln!("total: {total:.1}s");
            print_json(&summary)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

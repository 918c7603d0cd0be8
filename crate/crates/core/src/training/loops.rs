use super::optim::{Optimizer, OptimizerConfig, Stlr};
use super::{cross_entropy, triplet_loss, LanguageModelScore, DEFAULT_MARGIN};
use crate::encoders::{BiGruEncoder, Encoder, TransformerEncoder};
use crate::error::{Error, Result};
use crate::rng::{self, derive_index, derive_seed};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Parameterized};
use crate::tokenizer::{is_special, mask_for_mlm, BpeVocab, MASK};
use crate::triplets::Triplet;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedTriplet {
    pub anchor: Vec<u32>,
    pub positive: Vec<u32>,
    pub negative: Vec<u32>,
}

/// Triplets as token ids, tagged with the tokenizer that produced them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedTriplets {
    pub tokenizer_hash: String,
    pub items: Vec<EncodedTriplet>,
}

/// Tokenize triplet texts, truncating each side to `max_len` tokens.
/// Triplets with a side that encodes to nothing are dropped.
pub fn encode_triplets(vocab: &BpeVocab, triplets: &[Triplet], max_len: usize) -> EncodedTriplets {
    let enc = |s: &str| vocab.encode_truncated(s, max_len).ids;
    let items = triplets
        .iter()
        .map(|t| EncodedTriplet {
            anchor: enc(&t.anchor_text),
            positive: enc(&t.positive_text),
            negative: enc(&t.negative_text),
        })
        .filter(|t| !t.anchor.is_empty() && !t.positive.is_empty() && !t.negative.is_empty())
        .collect();
    EncodedTriplets {
        tokenizer_hash: vocab.hash(),
        items,
    }
}

/// One line of the JSON Lines run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: u64,
}

/// Per-step training records, optionally mirrored to a JSON Lines file.
pub struct RunLog {
    records: Vec<RunRecord>,
    sink: Option<BufWriter<File>>,
    start: Instant,
}

impl RunLog {
    pub fn in_memory() -> Self {
        Self {
            records: Vec::new(),
            sink: None,
            start: Instant::now(),
        }
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        Ok(Self {
            sink: Some(BufWriter::new(File::create(path)?)),
            ..Self::in_memory()
        })
    }

    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    fn record(&mut self, step: usize, lr: f64, loss: f64) -> Result<()> {
        let rec = RunRecord {
            step,
            lr,
            loss,
            wall_ms: self.start.elapsed().as_millis() as u64,
        };
        if let Some(w) = &mut self.sink {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.sink {
            w.flush()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-triplet loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean per-triplet loss of each step.
    pub step_losses: Vec<f64>,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub margin: f64,
    pub seed: u64,
}

impl Default for GruTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr: 1e-3,
            margin: DEFAULT_MARGIN,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub weight_decay: f64,
    pub cut_fraction: f64,
    pub ratio: f64,
    pub margin: f64,
    /// Per-layer learning-rate decay. Accepted by the config format but
    /// not implemented; setting it is an error.
    pub layer_lr_decay: Option<f64>,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 8,
            lr_max: 5e-5,
            weight_decay: 0.01,
            cut_fraction: 0.1,
            ratio: 32.0,
            margin: DEFAULT_MARGIN,
            layer_lr_decay: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub weight_decay: f64,
    pub cut_fraction: f64,
    pub ratio: f64,
    pub mask_rate: f64,
    /// Evaluate pseudo-perplexity every this many steps (and at the start and end).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 8,
            lr_max: 5e-5,
            weight_decay: 0.01,
            cut_fraction: 0.1,
            ratio: 32.0,
            mask_rate: 0.15,
            eval_every: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerplexityPoint {
    pub step: usize,
    pub perplexity: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub step_losses: Vec<f64>,
    pub perplexity: Vec<PerplexityPoint>,
    pub steps: usize,
}

fn check_batch(batch_size: usize, epochs: usize) -> Result<()> {
    if batch_size == 0 || epochs == 0 {
        return Err(Error::Config(
            "batch_size and epochs must be positive".into(),
        ));
    }
    Ok(())
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(derive_index(seed, epoch as u64)));
    order
}

/// Shared triplet loop: summed hinge loss per batch, one optimizer step per batch.
#[allow(clippy::too_many_arguments)]
fn triplet_epochs<T: Scalar, E: Encoder<T>>(
    enc: &mut E,
    data: &[EncodedTriplet],
    epochs: usize,
    batch_size: usize,
    margin: f64,
    seed: u64,
    opt: &mut Optimizer,
    lr_at: &dyn Fn(usize) -> f64,
    log: &mut RunLog,
) -> Result<TrainReport> {
    check_batch(batch_size, epochs)?;
    if data.is_empty() {
        return Err(Error::Config("no triplets to train on".into()));
    }
    if margin < 0.0 {
        return Err(Error::Config(format!("negative margin {margin}")));
    }
    let order_seed = derive_seed(seed, "triplet-order");
    let step_seed = derive_seed(seed, "triplet-step");
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 0..epochs {
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in shuffled(data.len(), order_seed, epoch).chunks(batch_size) {
            let pick = |f: fn(&EncodedTriplet) -> &Vec<u32>| {
                chunk
                    .iter()
                    .map(|&i| f(&data[i]).clone())
                    .collect::<Vec<_>>()
            };
            let (anchors, positives, negatives) = (
                pick(|t| &t.anchor),
                pick(|t| &t.positive),
                pick(|t| &t.negative),
            );
            enc.set_step_seed(derive_index(step_seed, step as u64));
            let lr = lr_at(step);
            let g = Graph::new();
            let a = enc.encode_batch(&g, &anchors)?;
            let p = enc.encode_batch(&g, &positives)?;
            let n = enc.encode_batch(&g, &negatives)?;
            let loss = triplet_loss(&a, &p, &n, margin);
            let value = loss.item().as_f64();
            if !value.is_finite() {
                return Err(Error::Divergence { step, loss: value });
            }
            g.backward(loss)?;
            let grads = g.param_grads();
            drop(g);
            opt.step(enc.params_mut(), &grads, lr);
            if !enc.params().all_finite() {
                return Err(Error::Divergence {
                    step,
                    loss: f64::NAN,
                });
            }
            let mean = value / chunk.len() as f64;
            log.record(step, lr, mean)?;
            report.step_losses.push(mean);
            total += value;
            count += chunk.len();
            step += 1;
        }
        report.epoch_losses.push(total / count as f64);
    }
    report.steps = step;
    log.flush()?;
    Ok(report)
}

/// Train a BiGRU with Adam at a constant learning rate.
pub fn train_gru<T: Scalar>(
    enc: &mut BiGruEncoder<T>,
    data: &[EncodedTriplet],
    cfg: &GruTrainConfig,
    log: &mut RunLog,
) -> Result<TrainReport> {
    let mut opt = Optimizer::new(OptimizerConfig::adam(), enc.params())?;
    let lr = cfg.lr;
    triplet_epochs(
        enc,
        data,
        cfg.epochs,
        cfg.batch_size,
        cfg.margin,
        cfg.seed,
        &mut opt,
        &|_| lr,
        log,
    )
}

/// Fine-tune every transformer weight with AdamW under a slanted triangular
/// schedule. `checkpoint_tokenizer` is the tokenizer hash the model was
/// pre-trained with.
pub fn finetune<T: Scalar>(
    enc: &mut TransformerEncoder<T>,
    checkpoint_tokenizer: &str,
    data: &EncodedTriplets,
    cfg: &FinetuneConfig,
    log: &mut RunLog,
) -> Result<(TrainReport, Stlr)> {
    if data.tokenizer_hash != checkpoint_tokenizer {
        return Err(Error::Mismatch(format!(
            "triplets were encoded with tokenizer {} but the checkpoint expects {}",
            data.tokenizer_hash, checkpoint_tokenizer
        )));
    }
    if cfg.layer_lr_decay.is_some() {
        return Err(Error::Config(
            "per-layer learning-rate decay is not implemented".into(),
        ));
    }
    check_batch(cfg.batch_size, cfg.epochs)?;
    let total = cfg.epochs * data.items.len().div_ceil(cfg.batch_size);
    let schedule = Stlr::new(total.max(1), cfg.cut_fraction, cfg.lr_max, cfg.ratio)?;
    let mut opt = Optimizer::new(OptimizerConfig::adamw(cfg.weight_decay), enc.params())?;
    let report = triplet_epochs(
        enc,
        &data.items,
        cfg.epochs,
        cfg.batch_size,
        cfg.margin,
        cfg.seed,
        &mut opt,
        &|s| schedule.lr(s),
        log,
    )?;
    Ok((report, schedule))
}

fn body_len<T: Scalar>(enc: &TransformerEncoder<T>) -> usize {
    enc.config().max_len - 2
}

/// Pseudo-perplexity: each non-special position is masked in turn and
/// scored by the masked-LM head. `chunk` masked copies run per forward pass.
pub fn pseudo_perplexity<T: Scalar>(
    enc: &TransformerEncoder<T>,
    sequences: &[Vec<u32>],
    chunk: usize,
) -> Result<LanguageModelScore> {
    let mut copies: Vec<(Vec<u32>, usize, u32)> = Vec::new();
    for seq in sequences {
        let seq = &seq[..seq.len().min(body_len(enc))];
        for (pos, &orig) in seq.iter().enumerate() {
            if is_special(orig) {
                continue;
            }
            let mut masked = seq.to_vec();
            masked[pos] = MASK;
            copies.push((masked, pos, orig));
        }
    }
    let mut total = 0.0;
    for part in copies.chunks(chunk.max(1)) {
        let ids: Vec<Vec<u32>> = part.iter().map(|c| c.0.clone()).collect();
        let batch = enc.prepare(&ids)?;
        let rows: Vec<usize> = part
            .iter()
            .enumerate()
            .map(|(b, c)| b * batch.len + c.1 + 1)
            .collect();
        let targets: Vec<usize> = part.iter().map(|c| c.2 as usize).collect();
        let g = Graph::inference();
        let lp = enc
            .mlm_logits(&g, &batch, &rows)
            .log_softmax()
            .pick(&targets);
        total += lp.to_vec().iter().map(|x| x.as_f64()).sum::<f64>();
    }
    LanguageModelScore::new(total, copies.len())
}

const PPL_CHUNK: usize = 64;

/// Masked-LM pre-training with AdamW under a slanted triangular schedule.
/// Pseudo-perplexity on `eval` is recorded before the first step, every
/// `eval_every` steps and after the last step.
pub fn pretrain_mlm<T: Scalar>(
    enc: &mut TransformerEncoder<T>,
    corpus: &[Vec<u32>],
    eval: &[Vec<u32>],
    cfg: &PretrainConfig,
    log: &mut RunLog,
) -> Result<PretrainReport> {
    check_batch(cfg.batch_size, cfg.epochs)?;
    if !(cfg.mask_rate > 0.0 && cfg.mask_rate <= 1.0) {
        return Err(Error::Config(format!(
            "mask rate {} leaves no training objective",
            cfg.mask_rate
        )));
    }
    let limit = body_len(enc);
    let corpus: Vec<&[u32]> = corpus
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| &s[..s.len().min(limit)])
        .collect();
    if corpus.is_empty() {
        return Err(Error::Config("empty pre-training corpus".into()));
    }
    let steps_per_epoch = corpus.len().div_ceil(cfg.batch_size);
    let schedule = Stlr::new(
        cfg.epochs * steps_per_epoch,
        cfg.cut_fraction,
        cfg.lr_max,
        cfg.ratio,
    )?;
    let mut opt = Optimizer::new(OptimizerConfig::adamw(cfg.weight_decay), enc.params())?;
    let vocab = enc.config().vocab_size;
    let mut mask_rng = rng::stage_rng(cfg.seed, "mlm-mask");
    let order_seed = derive_seed(cfg.seed, "mlm-order");
    let step_seed = derive_seed(cfg.seed, "mlm-step");
    let mut report = PretrainReport::default();
    let evaluate =
        |enc: &TransformerEncoder<T>, step: usize, report: &mut PretrainReport| -> Result<()> {
            if !eval.is_empty() {
                let score = pseudo_perplexity(enc, eval, PPL_CHUNK)?;
                report.perplexity.push(PerplexityPoint {
                    step,
                    perplexity: score.perplexity,
                });
            }
            Ok(())
        };
    evaluate(enc, 0, &mut report)?;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for chunk in shuffled(corpus.len(), order_seed, epoch).chunks(cfg.batch_size) {
            let masked: Vec<_> = chunk
                .iter()
                .map(|&i| mask_for_mlm(corpus[i], cfg.mask_rate, vocab, &mut mask_rng))
                .collect();
            let lr = schedule.lr(step);
            let ids: Vec<Vec<u32>> = masked.iter().map(|m| m.ids.clone()).collect();
            let batch = enc.prepare(&ids)?;
            let (mut rows, mut targets) = (Vec::new(), Vec::new());
            for (b, m) in masked.iter().enumerate() {
                for t in &m.targets {
                    rows.push(b * batch.len + t.position + 1);
                    targets.push(t.original as usize);
                }
            }
            if rows.is_empty() {
                step += 1;
                continue;
            }
            enc.set_dropout_seed(derive_index(step_seed, step as u64));
            let g = Graph::new();
            let loss = cross_entropy(&enc.mlm_logits(&g, &batch, &rows), &targets);
            let value = loss.item().as_f64();
            if !value.is_finite() {
                return Err(Error::Divergence { step, loss: value });
            }
            g.backward(loss)?;
            let grads = g.param_grads();
            drop(g);
            opt.step(enc.params_mut(), &grads, lr);
            log.record(step, lr, value)?;
            report.step_losses.push(value);
            step += 1;
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
                evaluate(enc, step, &mut report)?;
            }
        }
    }
    if report.perplexity.last().is_none_or(|p| p.step != step) {
        evaluate(enc, step, &mut report)?;
    }
    report.steps = step;
    log.flush()?;
    Ok(report)
}

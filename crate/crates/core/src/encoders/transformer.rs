use super::{restore_params, save_with_sidecar, Architecture, Encoder, Sidecar};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamId, ParamStore, Parameterized, Tensor, Var};
use crate::tokenizer::{is_special, BpeVocab, BOS, EOS, MASK, PAD};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Masked mean over token states.
    Mean,
    /// State of the leading `<s>` token.
    First,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Bound on sequence length including `<s>` and `</s>`.
    pub max_len: usize,
    pub output_dim: usize,
    pub pooling: Pooling,
    pub dropout: f64,
    pub init_std: f64,
    pub ln_eps: f64,
}

impl TransformerConfig {
    /// Two layers, four heads, width 64.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            max_len: 64,
            output_dim: 64,
            pooling: Pooling::Mean,
            dropout: 0.0,
            init_std: 0.02,
            ln_eps: 1e-5,
        }
    }

    /// Six layers, twelve heads, width 768, 100-dimensional output.
    pub fn full(vocab_size: usize) -> Self {
        Self {
            d_model: 768,
            n_heads: 12,
            n_layers: 6,
            d_ff: 3072,
            max_len: 512,
            output_dim: 100,
            ..Self::desk(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [
            self.vocab_size,
            self.d_model,
            self.n_heads,
            self.n_layers,
            self.d_ff,
            self.output_dim,
        ]
        .contains(&0)
        {
            return Err(Error::Config(
                "transformer dimensions must be positive".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "{} heads do not divide width {}",
                self.n_heads, self.d_model
            )));
        }
        if self.max_len < 3 {
            return Err(Error::Config(
                "max_len must leave room for <s> and </s>".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Block {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// Padded batch fed to the transformer.
pub struct Batch<T> {
    pub n: usize,
    pub len: usize,
    /// `n * len` ids, padded with `<pad>`.
    pub ids: Vec<u32>,
    /// `n * len` ones for real tokens and zeros for padding.
    pub mask: Vec<T>,
    pub truncated: Vec<bool>,
}

/// Post-norm transformer encoder with learned positions, a masked-LM head
/// and a pooled embedding head.
#[derive(Clone, Debug)]
pub struct TransformerEncoder<T: Scalar> {
    config: TransformerConfig,
    store: ParamStore<T>,
    tok_emb: ParamId,
    pos_emb: ParamId,
    emb_ln_g: ParamId,
    emb_ln_b: ParamId,
    blocks: Vec<Block>,
    mlm_w: ParamId,
    mlm_b: ParamId,
    pool_w: ParamId,
    pool_b: ParamId,
    dropout_seed: u64,
}

impl<T: Scalar> TransformerEncoder<T> {
    pub fn new(config: TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stage_rng(seed, "transformer-init");
        let std = config.init_std;
        let (d, v) = (config.d_model, config.vocab_size);
        let mut store = ParamStore::new();
        let mut normal = |store: &mut ParamStore<T>, name: String, shape: &[usize]| {
            store.add(name, Tensor::normal(shape, std, &mut rng))
        };
        let tok_emb = normal(&mut store, "tok_emb".into(), &[v, d]);
        let pos_emb = normal(&mut store, "pos_emb".into(), &[config.max_len, d]);
        let ones = |n: usize| Tensor::full(&[1, n], T::one());
        let zeros = |n: usize| Tensor::zeros(&[1, n]);
        let emb_ln_g = store.add("emb_ln.g", ones(d));
        let emb_ln_b = store.add("emb_ln.b", zeros(d));
        let mut blocks = Vec::new();
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            let wq = normal(&mut store, p("wq"), &[d, d]);
            let bq = store.add(p("bq"), zeros(d));
            let wk = normal(&mut store, p("wk"), &[d, d]);
            let bk = store.add(p("bk"), zeros(d));
            let wv = normal(&mut store, p("wv"), &[d, d]);
            let bv = store.add(p("bv"), zeros(d));
            let wo = normal(&mut store, p("wo"), &[d, d]);
            let bo = store.add(p("bo"), zeros(d));
            let ln1_g = store.add(p("ln1.g"), ones(d));
            let ln1_b = store.add(p("ln1.b"), zeros(d));
            let w1 = normal(&mut store, p("w1"), &[d, config.d_ff]);
            let b1 = store.add(p("b1"), zeros(config.d_ff));
            let w2 = normal(&mut store, p("w2"), &[config.d_ff, d]);
            let b2 = store.add(p("b2"), zeros(d));
            let ln2_g = store.add(p("ln2.g"), ones(d));
            let ln2_b = store.add(p("ln2.b"), zeros(d));
            blocks.push(Block {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln1_g,
                ln1_b,
                w1,
                b1,
                w2,
                b2,
                ln2_g,
                ln2_b,
            });
        }
        let mlm_w = normal(&mut store, "mlm.w".into(), &[d, v]);
        let mlm_b = store.add("mlm.b", zeros(v));
        let pool_w = normal(&mut store, "pool.w".into(), &[d, config.output_dim]);
        let pool_b = store.add("pool.b", zeros(config.output_dim));
        Ok(Self {
            config,
            store,
            tok_emb,
            pos_emb,
            emb_ln_g,
            emb_ln_b,
            blocks,
            mlm_w,
            mlm_b,
            pool_w,
            pool_b,
            dropout_seed: rng::derive_seed(seed, "dropout"),
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    /// Ids of the masked-LM head weights, e.g. to zero them.
    pub fn mlm_head(&self) -> (ParamId, ParamId) {
        (self.mlm_w, self.mlm_b)
    }

    /// Wrap each sequence as `<s> ids </s>` within `max_len` and pad.
    pub fn prepare(&self, batch: &[Vec<u32>]) -> Result<Batch<T>> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let body = self.config.max_len - 2;
        let seqs: Vec<(Vec<u32>, bool)> = batch
            .iter()
            .map(|s| {
                let mut v = Vec::with_capacity(s.len().min(body) + 2);
                v.push(BOS);
                v.extend(s.iter().take(body));
                v.push(EOS);
                (v, s.len() > body)
            })
            .collect();
        let len = seqs.iter().map(|(s, _)| s.len()).max().expect("non-empty");
        let mut ids = Vec::with_capacity(batch.len() * len);
        let mut mask = Vec::with_capacity(batch.len() * len);
        for (s, _) in &seqs {
            for t in 0..len {
                let id = s.get(t).copied().unwrap_or(PAD);
                if id as usize >= self.config.vocab_size {
                    return Err(Error::Contract(format!(
                        "token id {id} outside vocabulary of {}",
                        self.config.vocab_size
                    )));
                }
                ids.push(id);
                mask.push(if t < s.len() { T::one() } else { T::zero() });
            }
        }
        Ok(Batch {
            n: batch.len(),
            len,
            ids,
            mask,
            truncated: seqs.iter().map(|(_, t)| *t).collect(),
        })
    }

    /// Reseed dropout masks; training calls this once per step.
    pub fn set_dropout_seed(&mut self, seed: u64) {
        self.dropout_seed = seed;
    }

    /// Final-layer token states `[n * len, d_model]` and, per layer, the
    /// attention weights `[n * heads, len, len]`.
    pub fn hidden_states<'g>(
        &self,
        g: &'g Graph<T>,
        batch: &Batch<T>,
    ) -> (Var<'g, T>, Vec<Var<'g, T>>) {
        let c = &self.config;
        let (n, l, d, h) = (batch.n, batch.len, c.d_model, c.n_heads);
        let dh = d / h;
        let p = |id| g.param(&self.store, id);
        let mut site = 0u64;
        let mut drop_seed = || {
            site += 1;
            rng::derive_index(self.dropout_seed, site)
        };
        let tok: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let pos: Vec<usize> = (0..n).flat_map(|_| 0..l).collect();
        let mut x = p(self.tok_emb)
            .gather_rows(&tok)
            .add(&p(self.pos_emb).gather_rows(&pos));
        x = x
            .layer_norm(&p(self.emb_ln_g), &p(self.emb_ln_b), c.ln_eps)
            .dropout(c.dropout, drop_seed());

        // Additive key mask: padded keys get a large negative score.
        let mut bias = Vec::with_capacity(n * h * l * l);
        for b in 0..n {
            let row: Vec<T> = batch.mask[b * l..(b + 1) * l]
                .iter()
                .map(|&m| {
                    if m > T::zero() {
                        T::zero()
                    } else {
                        T::lit(-1e9)
                    }
                })
                .collect();
            for _ in 0..h * l {
                bias.extend_from_slice(&row);
            }
        }
        let bias = g.constant(&[n * h, l, l], bias);
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let heads = |v: Var<'g, T>| {
            v.reshape(&[n, l, h, dh])
                .permute(&[0, 2, 1, 3])
                .reshape(&[n * h, l, dh])
        };

        let mut attentions = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let q = heads(x.matmul(&p(blk.wq)).add_row(&p(blk.bq)));
            let k = heads(x.matmul(&p(blk.wk)).add_row(&p(blk.bk)));
            let v = heads(x.matmul(&p(blk.wv)).add_row(&p(blk.bv)));
            let attn = q.bmm(&k, true).scale(scale).add(&bias).softmax();
            attentions.push(attn);
            let ctx = attn
                .bmm(&v, false)
                .reshape(&[n, h, l, dh])
                .permute(&[0, 2, 1, 3])
                .reshape(&[n * l, d]);
            let out = ctx
                .matmul(&p(blk.wo))
                .add_row(&p(blk.bo))
                .dropout(c.dropout, drop_seed());
            x = x
                .add(&out)
                .layer_norm(&p(blk.ln1_g), &p(blk.ln1_b), c.ln_eps);
            let ff = x
                .matmul(&p(blk.w1))
                .add_row(&p(blk.b1))
                .gelu()
                .matmul(&p(blk.w2))
                .add_row(&p(blk.b2));
            let ff = ff.dropout(c.dropout, drop_seed());
            x = x
                .add(&ff)
                .layer_norm(&p(blk.ln2_g), &p(blk.ln2_b), c.ln_eps);
        }
        (x, attentions)
    }

    /// Masked-LM logits `[rows.len(), vocab]` at flat positions `rows` of the batch.
    pub fn mlm_logits<'g>(&self, g: &'g Graph<T>, batch: &Batch<T>, rows: &[usize]) -> Var<'g, T> {
        let (hidden, _) = self.hidden_states(g, batch);
        self.mlm_logits_from(g, hidden, rows)
    }

    pub fn mlm_logits_from<'g>(
        &self,
        g: &'g Graph<T>,
        hidden: Var<'g, T>,
        rows: &[usize],
    ) -> Var<'g, T> {
        hidden
            .gather_rows(rows)
            .matmul(&g.param(&self.store, self.mlm_w))
            .add_row(&g.param(&self.store, self.mlm_b))
    }

    /// Pooled token states before the output head, `[n, d_model]`.
    pub fn pooled_states<'g>(&self, g: &'g Graph<T>, batch: &Batch<T>) -> Var<'g, T> {
        let (hidden, _) = self.hidden_states(g, batch);
        match self.config.pooling {
            Pooling::Mean => hidden
                .reshape(&[batch.n, batch.len, self.config.d_model])
                .mean_pool(&batch.mask),
            Pooling::First => {
                hidden.gather_rows(&(0..batch.n).map(|b| b * batch.len).collect::<Vec<_>>())
            }
        }
    }

    pub fn save(&self, path: &Path, tokenizer_hash: &str, seed: u64) -> Result<()> {
        let sidecar = Sidecar {
            architecture: Architecture::Transformer(self.config.clone()),
            tokenizer_hash: tokenizer_hash.to_string(),
            seed,
        };
        save_with_sidecar(&self.store, &sidecar, path)
    }

    pub fn load_weights(config: TransformerConfig, path: &Path) -> Result<Self> {
        let mut enc = Self::new(config, 0)?;
        restore_params(&mut enc.store, path)?;
        Ok(enc)
    }
}

impl<T: Scalar> Parameterized<T> for TransformerEncoder<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }
}

impl<T: Scalar> Encoder<T> for TransformerEncoder<T> {
    fn set_step_seed(&mut self, seed: u64) {
        self.set_dropout_seed(seed);
    }

    fn output_dim(&self) -> usize {
        self.config.output_dim
    }

    fn encode_batch<'g>(&self, g: &'g Graph<T>, batch: &[Vec<u32>]) -> Result<Var<'g, T>> {
        let b = self.prepare(batch)?;
        let pooled = self.pooled_states(g, &b);
        Ok(pooled
            .matmul(&g.param(&self.store, self.pool_w))
            .add_row(&g.param(&self.store, self.pool_b)))
    }
}

/// Top-`k` predictions `(token, probability)` for the first `<mask>` in `text`.
pub fn fill_mask<T: Scalar>(
    model: &TransformerEncoder<T>,
    vocab: &BpeVocab,
    text: &str,
    k: usize,
) -> Result<Vec<(String, f64)>> {
    let ids = vocab.encode_with_masks(text);
    let pos = ids.iter().position(|&i| i == MASK).ok_or_else(|| {
        Error::Config(format!(
            "no {} marker in {text:?}",
            crate::tokenizer::MASK_LITERAL
        ))
    })?;
    let batch = model.prepare(&[ids])?;
    // Position 0 holds <s>.
    let row = pos + 1;
    if row >= batch.len - 1 {
        return Err(Error::Config("mask marker falls outside max_len".into()));
    }
    let g = Graph::inference();
    let probs = model.mlm_logits(&g, &batch, &[row]).softmax().to_vec();
    let mut ranked: Vec<(usize, f64)> = probs
        .iter()
        .enumerate()
        .filter(|(i, _)| !is_special(*i as u32))
        .map(|(i, p)| (i, p.as_f64()))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked
        .into_iter()
        .take(k)
        .map(|(i, p)| (vocab.token(i as u32).unwrap_or_default().to_string(), p))
        .collect())
}

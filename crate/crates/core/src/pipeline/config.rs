use crate::encoders::Pooling;
use crate::error::{Error, Result};
use crate::metrics::ProductText;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gru1,
    Gru2,
    Transformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingData {
    /// Query-product triplets only.
    Qp,
    /// Query-product plus product-product triplets.
    Augmented,
}

/// One of the six model variants, named like `gru2-augmented`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Preset {
    pub model: ModelKind,
    pub data: TrainingData,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset {
            model: ModelKind::Gru1,
            data: TrainingData::Qp,
        },
        Preset {
            model: ModelKind::Gru1,
            data: TrainingData::Augmented,
        },
        Preset {
            model: ModelKind::Gru2,
            data: TrainingData::Qp,
        },
        Preset {
            model: ModelKind::Gru2,
            data: TrainingData::Augmented,
        },
        Preset {
            model: ModelKind::Transformer,
            data: TrainingData::Qp,
        },
        Preset {
            model: ModelKind::Transformer,
            data: TrainingData::Augmented,
        },
    ];
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = match self.model {
            ModelKind::Gru1 => "gru1",
            ModelKind::Gru2 => "gru2",
            ModelKind::Transformer => "transformer",
        };
        let d = match self.data {
            TrainingData::Qp => "qp",
            TrainingData::Augmented => "augmented",
        };
        write!(f, "{m}-{d}")
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown preset {s:?}; expected one of {}",
                    Preset::ALL.map(|p| p.to_string()).join(", ")
                ))
            })
    }
}

/// Every knob of a pipeline run. Serialized as `key = value` lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub n_products: usize,
    pub n_queries: usize,
    pub n_sessions: usize,

    pub broad_threshold: f64,
    pub walks_per_node: usize,
    pub walk_length: usize,
    pub split_ratio: f64,
    pub top_k: usize,
    pub narrow_same_atg: f64,
    pub pp_same_atg: f64,
    /// Product-product positives sampled per anchor; `none` keeps every pair.
    pub pp_positives_per_anchor: Option<usize>,

    pub vocab_size: usize,
    /// Token budget per text, shared by both encoder families.
    pub max_len: usize,
    pub margin: f64,

    pub gru_embed_dim: usize,
    pub gru_hidden: usize,
    pub gru_output_dim: usize,
    pub gru_init_scale: f64,
    pub gru_epochs: usize,
    pub gru_batch: usize,
    pub gru_lr: f64,

    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub output_dim: usize,
    pub pooling: Pooling,
    pub dropout: f64,
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub mask_rate: f64,
    pub eval_every: usize,
    pub ppl_eval_sequences: usize,
    pub heldout_product_fraction: f64,
    pub finetune_epochs: usize,
    pub finetune_batch: usize,
    pub finetune_lr: f64,
    pub weight_decay: f64,
    pub cut_fraction: f64,
    pub stlr_ratio: f64,

    pub fill_mask_queries: usize,
    pub fill_mask_top: usize,

    pub n_trees: usize,
    pub leaf_size: usize,
    /// Candidates per index query; `none` picks a budget from the corpus size.
    pub search_k: Option<usize>,
    pub retrieval_k: usize,
    pub product_text: ProductText,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Small enough to run end to end on one desktop core.
    pub fn desk() -> Self {
        Self {
            seed: 1,
            n_products: 2000,
            n_queries: 3000,
            n_sessions: 20000,
            broad_threshold: 0.3,
            walks_per_node: 5,
            walk_length: 5,
            split_ratio: 0.85,
            top_k: 100,
            narrow_same_atg: 0.5,
            pp_same_atg: 0.5,
            pp_positives_per_anchor: Some(2),
            vocab_size: 4000,
            max_len: 64,
            margin: 0.5,
            gru_embed_dim: 64,
            gru_hidden: 64,
            gru_output_dim: 64,
            gru_init_scale: 0.1,
            gru_epochs: 5,
            gru_batch: 64,
            gru_lr: 1e-3,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            output_dim: 64,
            pooling: Pooling::Mean,
            dropout: 0.0,
            pretrain_epochs: 2,
            pretrain_batch: 8,
            pretrain_lr: 1e-3,
            mask_rate: 0.15,
            eval_every: 200,
            ppl_eval_sequences: 200,
            heldout_product_fraction: 0.05,
            finetune_epochs: 2,
            finetune_batch: 8,
            finetune_lr: 5e-4,
            weight_decay: 0.01,
            cut_fraction: 0.1,
            stlr_ratio: 32.0,
            fill_mask_queries: 50,
            fill_mask_top: 5,
            n_trees: 16,
            leaf_size: 32,
            search_k: None,
            retrieval_k: 50,
            product_text: ProductText::Description,
        }
    }

    /// Full-size models and schedules: 30K vocabulary, 100-d BiGRU,
    /// 768-wide six-layer transformer, 50 GRU epochs, 5e-5 peak rates.
    /// Far too slow for a single core.
    pub fn full() -> Self {
        Self {
            pp_positives_per_anchor: None,
            vocab_size: 30_000,
            max_len: 512,
            gru_embed_dim: 100,
            gru_hidden: 100,
            gru_output_dim: 100,
            gru_epochs: 50,
            d_model: 768,
            n_heads: 12,
            n_layers: 6,
            d_ff: 3072,
            output_dim: 100,
            pretrain_lr: 5e-5,
            finetune_lr: 5e-5,
            ..Self::desk()
        }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!(
                "unknown profile {other:?}; expected desk or full"
            ))),
        }
    }

    /// Set one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut map = match serde_json::to_value(&*self)? {
            serde_json::Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        if !map.contains_key(key) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        let parsed = match value.trim() {
            "none" | "null" => serde_json::Value::Null,
            v => {
                serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.to_string()))
            }
        };
        map.insert(key.to_string(), parsed);
        *self = serde_json::from_value(serde_json::Value::Object(map))
            .map_err(|e| Error::Config(format!("bad value {value:?} for {key}: {e}")))?;
        Ok(())
    }

    /// Apply `key = value` lines; `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::desk();
        c.apply_kv(text)?;
        Ok(c)
    }

    pub fn to_kv(&self) -> String {
        let serde_json::Value::Object(map) = serde_json::to_value(self).expect("config serializes")
        else {
            unreachable!("config serializes to an object")
        };
        let mut out = String::new();
        for (k, v) in map {
            let v = match v {
                serde_json::Value::Null => "none".to_string(),
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

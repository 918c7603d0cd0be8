//! Losses, optimizers, the slanted triangular schedule and the training
//! loops for triplet training and masked-LM pre-training.

mod loops;
mod optim;

pub use loops::{
    encode_triplets, finetune, pretrain_mlm, pseudo_perplexity, train_gru, EncodedTriplet,
    EncodedTriplets, FinetuneConfig, GruTrainConfig, PerplexityPoint, PretrainConfig,
    PretrainReport, RunLog, RunRecord, TrainReport,
};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind, Stlr};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Var;
use serde::{Deserialize, Serialize};

pub const DEFAULT_MARGIN: f64 = 0.5;

/// `sum_i max(0, d(a_i, p_i) - d(a_i, n_i) + margin)` with cosine distance
/// `d = 1 - cos`. Inputs are `[n, dim]`.
pub fn triplet_loss<'g, T: Scalar>(
    anchor: &Var<'g, T>,
    positive: &Var<'g, T>,
    negative: &Var<'g, T>,
    margin: f64,
) -> Var<'g, T> {
    let d_pos = anchor.cosine_similarity(positive).one_minus();
    let d_neg = anchor.cosine_similarity(negative).one_minus();
    d_pos
        .sub(&d_neg)
        .affine(T::one(), T::lit(margin))
        .relu()
        .sum()
}

/// Mean cross-entropy of `[n, V]` logits against `targets`.
pub fn cross_entropy<'g, T: Scalar>(logits: &Var<'g, T>, targets: &[usize]) -> Var<'g, T> {
    logits.log_softmax().pick(targets).mean().scale(-T::one())
}

/// Exponentiated negative mean log-likelihood.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageModelScore {
    pub total_log_likelihood: f64,
    pub tokens: usize,
    pub perplexity: f64,
}

impl LanguageModelScore {
    pub fn new(total_log_likelihood: f64, tokens: usize) -> Result<Self> {
        if tokens == 0 {
            return Err(Error::Config("perplexity of an empty stream".into()));
        }
        Ok(Self {
            total_log_likelihood,
            tokens,
            perplexity: (-total_log_likelihood / tokens as f64).exp(),
        })
    }
}

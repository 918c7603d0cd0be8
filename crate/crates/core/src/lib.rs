//! Neural product search on click-stream data.
//!
//! The crate covers the whole pipeline: a synthetic catalog and click log
//! ([`catalog`]), query-product and product-product click graphs
//! ([`graphs`]), triplet mining ([`triplets`]), a BPE tokenizer
//! ([`tokenizer`]), a small reverse-mode autodiff core ([`tensor`]),
//! BiGRU and transformer encoders ([`encoders`]), losses, optimizers and
//! training loops ([`training`]), an approximate nearest-neighbour index
//! ([`index`]), ranking/retrieval evaluation ([`metrics`]) and the staged,
//! manifest-tracked driver that ties them together ([`pipeline`]).
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the element type used for training and serving.

pub mod catalog;
pub mod encoders;
pub mod error;
pub mod graphs;
pub mod index;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod tokenizer;
pub mod training;
pub mod triplets;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type ParamStore32 = tensor::ParamStore<f32>;
pub type ParamStore64 = tensor::ParamStore<f64>;
pub type BiGruEncoder32 = encoders::BiGruEncoder<f32>;
pub type BiGruEncoder64 = encoders::BiGruEncoder<f64>;
pub type TransformerEncoder32 = encoders::TransformerEncoder<f32>;
pub type TransformerEncoder64 = encoders::TransformerEncoder<f64>;
pub type EmbeddingIndex32 = index::EmbeddingIndex<f32>;
pub type EmbeddingIndex64 = index::EmbeddingIndex<f64>;

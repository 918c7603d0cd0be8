//! Text encoders mapping token ids to fixed-size embeddings: a
//! bidirectional GRU (one or two layers) and a transformer with a masked-LM
//! head and a pooled embedding head.

mod gru;
mod transformer;

pub use gru::{gru_cell_step, BiGruEncoder, BoundGruCell, GruCell, GruConfig};
pub use transformer::{fill_mask, Pooling, TransformerConfig, TransformerEncoder};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{read_checkpoint, write_checkpoint, Graph, ParamStore, Parameterized, Var};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Anything that embeds batches of token-id sequences.
pub trait Encoder<T: Scalar>: Parameterized<T> {
    fn output_dim(&self) -> usize;

    /// `[batch, output_dim]` embeddings recorded on `g`.
    fn encode_batch<'g>(&self, g: &'g Graph<T>, batch: &[Vec<u32>]) -> Result<Var<'g, T>>;

    /// Reseed any stochastic layers before a training step.
    fn set_step_seed(&mut self, _seed: u64) {}

    /// Inference-mode embeddings, processed `chunk` sequences at a time.
    fn embed(&self, batch: &[Vec<u32>], chunk: usize) -> Result<Vec<Vec<T>>> {
        let d = self.output_dim();
        let mut out = Vec::with_capacity(batch.len());
        for part in batch.chunks(chunk.max(1)) {
            let g = Graph::inference();
            let v = self.encode_batch(&g, part)?.to_vec();
            out.extend(v.chunks(d).map(<[T]>::to_vec));
        }
        Ok(out)
    }
}

/// Architecture record stored next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum Architecture {
    Bigru(GruConfig),
    Transformer(TransformerConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub architecture: Architecture,
    pub tokenizer_hash: String,
    pub seed: u64,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

pub(crate) fn save_with_sidecar<T: Scalar>(
    store: &ParamStore<T>,
    sidecar: &Sidecar,
    path: &Path,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(store, &mut w)?;
    w.flush()?;
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(sidecar)?)?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let sp = sidecar_path(path);
    let text = std::fs::read_to_string(&sp)
        .map_err(|e| Error::NotFound(format!("{}: {e}", sp.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Copy every checkpoint tensor into `store` by name; names and shapes must match exactly.
pub(crate) fn restore_params<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let loaded: ParamStore<T> =
        read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))?;
    if loaded.len() != store.len() {
        return Err(Error::Mismatch(format!(
            "{} holds {} tensors, the architecture needs {}",
            path.display(),
            loaded.len(),
            store.len()
        )));
    }
    for (name, tensor) in loaded.iter() {
        let id = store.find(name).ok_or_else(|| {
            Error::Mismatch(format!("unexpected tensor {name} in {}", path.display()))
        })?;
        store.assign(id, tensor.clone())?;
    }
    Ok(())
}

pub fn check_tokenizer(sidecar: &Sidecar, tokenizer_hash: &str) -> Result<()> {
    if sidecar.tokenizer_hash != tokenizer_hash {
        return Err(Error::Mismatch(format!(
            "checkpoint was trained with tokenizer {} but {} was supplied",
            sidecar.tokenizer_hash, tokenizer_hash
        )));
    }
    Ok(())
}

/// Either encoder behind one type, for code that loads whatever a checkpoint holds.
pub enum AnyEncoder<T: Scalar> {
    Gru(BiGruEncoder<T>),
    Transformer(TransformerEncoder<T>),
}

impl<T: Scalar> AnyEncoder<T> {
    pub fn load(path: &Path) -> Result<(Self, Sidecar)> {
        let sidecar = read_sidecar(path)?;
        let enc = match &sidecar.architecture {
            Architecture::Bigru(cfg) => {
                AnyEncoder::Gru(BiGruEncoder::load_weights(cfg.clone(), path)?)
            }
            Architecture::Transformer(cfg) => {
                AnyEncoder::Transformer(TransformerEncoder::load_weights(cfg.clone(), path)?)
            }
        };
        Ok((enc, sidecar))
    }

    pub fn as_encoder(&self) -> &dyn Encoder<T> {
        match self {
            AnyEncoder::Gru(e) => e,
            AnyEncoder::Transformer(e) => e,
        }
    }
}

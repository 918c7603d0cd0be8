//! Named-tensor container: `NSCKPT01`, a little-endian `u64` header length,
//! a JSON header listing names, shapes and byte offsets, then float32
//! payloads in little-endian order.

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"NSCKPT01";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    tensors: Vec<Entry>,
}

pub fn write_checkpoint<T: Scalar, W: Write>(store: &ParamStore<T>, mut out: W) -> Result<()> {
    let mut payload = Vec::with_capacity(store.num_scalars() * 4);
    let mut tensors = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        tensors.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
            len: t.len(),
        });
        for &x in t.data() {
            payload.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header {
        dtype: "f32".into(),
        tensors,
    })?;
    out.write_all(MAGIC)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    out.write_all(&payload)?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut input: R) -> Result<ParamStore<T>> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    input.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    if header.dtype != "f32" {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported dtype {}", header.dtype),
        ));
    }
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    let mut store = ParamStore::new();
    for e in header.tensors {
        let end = e.offset + e.len * 4;
        if end > payload.len() || e.shape.iter().product::<usize>() != e.len {
            return Err(Error::format(
                "checkpoint",
                format!("tensor {} out of bounds", e.name),
            ));
        }
        let data = payload[e.offset..end]
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        store.add(e.name, Tensor::new(e.shape, data)?);
    }
    Ok(store)
}

pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(store, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_f32_values() {
        let mut s = ParamStore::<f32>::new();
        s.add(
            "a",
            Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 1e-7]).unwrap(),
        );
        s.add("b", Tensor::scalar(0.125));
        let mut buf = Vec::new();
        write_checkpoint(&s, &mut buf).unwrap();
        let back: ParamStore<f32> = read_checkpoint(&buf[..]).unwrap();
        assert!(s.same_values(&back));
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_checkpoint::<f32, _>(&b"NOTACKPT\0\0\0\0\0\0\0\0"[..]).is_err());
    }
}

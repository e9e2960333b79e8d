//! Parameter checkpoint container.
//!
//! Layout: 8-byte magic `CTXADCKP`, little-endian `u64` header length, a JSON header
//! (format version, dtype, tensor names/shapes/offsets, free-form metadata), then every
//! tensor's raw little-endian `f64` buffer in header order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::{ParameterSet, Tensor};

pub const MAGIC: &[u8; 8] = b"CTXADCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    tensors: Vec<TensorEntry>,
    metadata: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the payload.
    offset: usize,
}

pub fn write_checkpoint<W: Write>(mut out: W, params: &ParameterSet, metadata: &serde_json::Value) -> Result<()> {
    let mut offset = 0;
    let tensors = params
        .iter()
        .map(|(name, t)| {
            let entry = TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.numel();
            entry
        })
        .collect();
    let header = Header {
        version: FORMAT_VERSION,
        dtype: "f64".into(),
        tensors,
        metadata: metadata.clone(),
    };
    let header = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for (_, t) in params.iter() {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(ParameterSet, serde_json::Value)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut header = vec![0u8; len];
    input.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
    }
    if header.dtype != "f64" {
        return Err(Error::Checkpoint(format!("unsupported dtype {}", header.dtype)));
    }
    let mut payload = Vec::new();
    input.read_to_end(&mut payload)?;
    if payload.len() % 8 != 0 {
        return Err(Error::Checkpoint("truncated payload".into()));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut params = ParameterSet::new();
    for entry in header.tensors {
        let numel: usize = entry.shape.iter().product();
        let data = values
            .get(entry.offset..entry.offset + numel)
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` exceeds payload", entry.name)))?;
        params.insert(entry.name, Tensor::new(entry.shape, data.to_vec())?)?;
    }
    Ok((params, header.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut p = ParameterSet::new();
        p.insert("b", Tensor::vector(vec![1.5, -0.25])).unwrap();
        p.insert("a", Tensor::new(vec![2, 1], vec![f64::MIN_POSITIVE, 3.0]).unwrap()).unwrap();
        let meta = serde_json::json!({"hello": 1});
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p, &meta).unwrap();
        let (q, m) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(p, q);
        assert_eq!(m, meta);

        let mut again = Vec::new();
        write_checkpoint(&mut again, &q, &m).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_checkpoint(&b"NOTACKPT\0\0\0\0\0\0\0\0"[..]).is_err());
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ParameterSet::new(), &serde_json::Value::Null).unwrap();
        let text = String::from_utf8_lossy(&buf).replace("\"version\":1", "\"version\":9");
        assert!(read_checkpoint(text.as_bytes()).is_err());
    }
}

//! Binary checkpoint format.
//!
//! ```text
//! [u64 LE header length][JSON header][f64 LE blobs in header order]
//! ```
//!
//! The header is `{"meta": <any JSON>, "tensors": [{"name", "shape",
//! "dtype": "f64", "offset"}]}` where `offset` is the byte offset of the
//! tensor's blob relative to the start of the blob section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<Entry>,
}

pub fn encode(store: &ParameterStore, meta: &Value) -> Result<Vec<u8>> {
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        tensors.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset,
        });
        offset += t.len() * 8;
    }
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(ParameterStore, Value)> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Checkpoint("truncated header length".into()))?;
    let hlen = u64::from_le_bytes(len_bytes) as usize;
    let header_bytes = bytes
        .get(8..8 + hlen)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(header_bytes)?;
    let blobs = &bytes[8 + hlen..];
    let mut store = ParameterStore::new();
    let mut expected = 0;
    for e in header.tensors {
        if e.dtype != "f64" {
            return Err(Error::Checkpoint(format!("unsupported dtype `{}`", e.dtype)));
        }
        if e.offset != expected {
            return Err(Error::Checkpoint(format!("tensor `{}` out of order", e.name)));
        }
        let n: usize = e.shape.iter().product();
        let raw = blobs
            .get(e.offset..e.offset + n * 8)
            .ok_or_else(|| Error::Checkpoint(format!("truncated blob for `{}`", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(e.name, Tensor::new(&e.shape, data)?)?;
        expected += n * 8;
    }
    if expected != blobs.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last tensor",
            blobs.len() - expected
        )));
    }
    Ok((store, header.meta))
}

pub fn save(path: &Path, store: &ParameterStore, meta: &Value) -> Result<()> {
    fs::write(path, encode(store, meta)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParameterStore, Value)> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            a in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..20),
            b in prop::collection::vec(-1e300f64..1e300, 6),
        ) {
            let mut s = ParameterStore::new();
            s.insert("z.a", Tensor::new(&[a.len()], a.clone()).unwrap()).unwrap();
            s.insert("a.b", Tensor::new(&[2, 3], b.clone()).unwrap()).unwrap();
            let meta = serde_json::json!({"k": 3});
            let (back, m) = decode(&encode(&s, &meta).unwrap()).unwrap();
            prop_assert_eq!(m, meta);
            let names: Vec<_> = back.names().cloned().collect();
            prop_assert_eq!(names, vec!["z.a".to_string(), "a.b".to_string()]);
            for (x, y) in back.iter().zip(s.iter()) {
                let xb: Vec<u64> = x.1.data().iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u64> = y.1.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(xb, yb);
                prop_assert_eq!(x.1.shape(), y.1.shape());
            }
        }
    }

    #[test]
    fn rejects_truncation() {
        let mut s = ParameterStore::new();
        s.zeros("w", &[4]).unwrap();
        let bytes = encode(&s, &Value::Null).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(&bytes[..4]).is_err());
    }
}

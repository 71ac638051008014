//! Binary checkpoint format.
//!
//! ```text
//! "S2SM" | 0x01 | u32 LE metadata length | JSON metadata | f32 LE blobs
//! ```
//!
//! The metadata is a JSON object whose `params` entry lists `{name, shape}` in
//! blob order. Other top-level keys carry the model configuration and any
//! caller-supplied fields.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"S2SM";
pub const VERSION: u8 = 0x01;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    /// Metadata fields besides `params`.
    pub extra: Map<String, Value>,
}

pub fn encode(params: &ParamStore<f32>, extra: &Map<String, Value>) -> Result<Vec<u8>> {
    let mut meta = extra.clone();
    let list: Vec<ParamMeta> = params
        .iter()
        .map(|(name, p)| ParamMeta {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
        })
        .collect();
    meta.insert("params".into(), serde_json::to_value(list).expect("serializable"));
    let json = serde_json::to_vec(&Value::Object(meta)).expect("serializable");
    let len = u32::try_from(json.len()).map_err(|_| Error::Data("checkpoint metadata exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(9 + json.len() + 4 * params.num_values());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in params.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn eof() -> Error {
    Error::Data("unexpected end of file".into())
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 9 {
        return Err(eof());
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Data("bad checkpoint magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {}", bytes[4])));
    }
    let len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let json = bytes.get(9..9 + len).ok_or_else(eof)?;
    let meta: Value = serde_json::from_slice(json).map_err(|e| Error::Data(format!("checkpoint metadata: {e}")))?;
    let Value::Object(mut extra) = meta else {
        return Err(Error::Data("checkpoint metadata is not an object".into()));
    };
    let list: Vec<ParamMeta> = extra
        .remove("params")
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| Error::Data(format!("checkpoint parameter list: {e}")))?
        .ok_or_else(|| Error::Data("checkpoint metadata lacks 'params'".into()))?;
    let mut params = ParamStore::new(0);
    let mut offset = 9 + len;
    for pm in list {
        let n: usize = pm.shape.iter().product();
        let blob = bytes.get(offset..offset + 4 * n).ok_or_else(eof)?;
        let data = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params
            .insert(pm.name, Tensor::new(pm.shape, data)?)
            .map_err(|e| Error::Data(e.to_string()))?;
        offset += 4 * n;
    }
    if offset != bytes.len() {
        return Err(Error::Data(format!(
            "{} trailing bytes after checkpoint payload",
            bytes.len() - offset
        )));
    }
    Ok(Checkpoint { params, extra })
}

pub fn save(path: &Path, params: &ParamStore<f32>, extra: &Map<String, Value>) -> Result<()> {
    let bytes = encode(params, extra)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store(vals: &[f32]) -> ParamStore<f32> {
        let mut ps = ParamStore::new(0);
        ps.insert("a.w", Tensor::new(vec![1, vals.len()], vals.to_vec()).unwrap())
            .unwrap();
        ps.insert("b", Tensor::new(vec![2], vec![1.5, -2.0]).unwrap()).unwrap();
        ps
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&store(&[0.0]), &Map::new()).unwrap();
        assert_eq!(&bytes[..4], b"S2SM");
        assert_eq!(bytes[4], 1);
        let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let meta: Value = serde_json::from_slice(&bytes[9..9 + len]).unwrap();
        assert_eq!(meta["params"][0]["name"], "a.w");
        assert_eq!(meta["params"][1]["shape"], serde_json::json!([2]));
        assert_eq!(bytes.len(), 9 + len + 4 * 3);
    }

    #[test]
    fn truncated_and_corrupt_input() {
        let bytes = encode(&store(&[1.0, 2.0]), &Map::new()).unwrap();
        let err = decode(&bytes[..bytes.len() - 2]).unwrap_err();
        assert!(err.to_string().contains("unexpected end of file"));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = bytes;
        bad[4] = 2;
        assert!(decode(&bad).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(vals in proptest::collection::vec(any::<f32>(), 1..40)) {
            let ps = store(&vals);
            let mut extra = Map::new();
            extra.insert("threshold".into(), serde_json::json!(-1.25));
            let ck = decode(&encode(&ps, &extra).unwrap()).unwrap();
            prop_assert_eq!(ck.extra.get("threshold"), extra.get("threshold"));
            for ((n1, p1), (n2, p2)) in ps.iter().zip(ck.params.iter()) {
                prop_assert_eq!(n1, n2);
                let a: Vec<u32> = p1.value.data().iter().map(|v| v.to_bits()).collect();
                let b: Vec<u32> = p2.value.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
        }
    }
}

//! Weights file: `SVNW` magic, u32 version, u64 header length, a JSON
//! header (architecture plus parameter manifest), then little-endian f64
//! values in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::diffcore::Tensor;
use crate::netmodel::{Model, ModelKind, NetConfig, Params};

pub const MAGIC: &[u8; 4] = b"SVNW";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    net: NetConfig,
    kind: ModelKind,
    params: Vec<(String, Vec<usize>)>,
}

pub fn encode(model: &Model) -> Result<Vec<u8>, HarnessError> {
    let header = Header {
        net: model.config.clone(),
        kind: model.kind,
        params: model.params.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| HarnessError::Format(e.to_string()))?;
    let n: usize = model.params.values().map(Tensor::len).sum();
    let mut out = Vec::with_capacity(16 + json.len() + 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params.values() {
        out.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Model, HarnessError> {
    let fmt = |m: &str| HarnessError::Format(m.to_string());
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(fmt("not a weights file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(HarnessError::Format(format!("weights version {version} is not supported (expected {VERSION})")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| fmt("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| HarnessError::Format(e.to_string()))?;
    let mut at = 16 + hlen;
    let mut params = Params::new();
    for (name, shape) in header.params {
        let n: usize = shape.iter().product();
        let raw = bytes.get(at..at + 8 * n).ok_or_else(|| HarnessError::Format(format!("truncated data for {name}")))?;
        at += 8 * n;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.insert(name, Tensor::new(shape, data).map_err(|e| HarnessError::Format(e.to_string()))?);
    }
    if at != bytes.len() {
        return Err(fmt("trailing bytes after parameter data"));
    }
    let model = Model { config: header.net, kind: header.kind, params };
    model.check_params().map_err(|e| HarnessError::Shape(e.to_string()))?;
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<(), HarnessError> {
    fs::write(path, encode(model)?).map_err(|e| HarnessError::io(path, e))
}

pub fn load(path: &Path) -> Result<Model, HarnessError> {
    decode(&fs::read(path).map_err(|e| HarnessError::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_corruption() {
        let m = Model::new(NetConfig::micro(), ModelKind::Mrnet, 4).unwrap();
        let bytes = encode(&m).unwrap();
        assert_eq!(decode(&bytes).unwrap(), m);
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(HarnessError::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(HarnessError::Format(_))));
        let mut v2 = bytes;
        v2[4] = 9;
        assert!(matches!(decode(&v2), Err(HarnessError::Format(_))));
    }
}

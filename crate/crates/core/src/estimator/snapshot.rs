//! Tensor container: an 8-byte little-endian header length, a JSON header
//! describing every tensor (name, shape, dtype, byte offset), then the raw
//! little-endian `f32` payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, ConvLayer, EstimatorParams};
use crate::error::{Error, Result};

const DTYPE: &str = "f32";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    nbytes: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn encode_container(meta: serde_json::Value, tensors: &[NamedTensor]) -> Vec<u8> {
    let mut offset = 0;
    let entries = tensors
        .iter()
        .map(|t| {
            assert_eq!(t.shape.iter().product::<usize>(), t.data.len(), "tensor {} shape", t.name);
            let nbytes = t.data.len() * 4;
            let e = TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                dtype: DTYPE.into(),
                offset,
                nbytes,
            };
            offset += nbytes;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        meta,
        tensors: entries,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend((header.len() as u64).to_le_bytes());
    out.extend(header);
    for t in tensors {
        for v in &t.data {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

pub fn decode_container(bytes: &[u8]) -> Result<(serde_json::Value, Vec<NamedTensor>)> {
    let bad = |m: &str| Error::Snapshot(m.to_string());
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .ok_or_else(|| bad("file shorter than its header length"))?
        .try_into()
        .expect("8 bytes");
    let hlen = u64::from_le_bytes(len_bytes) as usize;
    let header_bytes = bytes
        .get(8..8usize.saturating_add(hlen))
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| bad(&format!("header: {e}")))?;
    let payload = &bytes[8 + hlen..];
    let tensors = header
        .tensors
        .into_iter()
        .map(|e| {
            if e.dtype != DTYPE {
                return Err(bad(&format!("unsupported dtype {}", e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            if e.nbytes != n * 4 {
                return Err(bad(&format!("tensor {} size disagrees with shape", e.name)));
            }
            let raw = payload
                .get(e.offset..e.offset + e.nbytes)
                .ok_or_else(|| bad(&format!("tensor {} out of bounds", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Ok(NamedTensor {
                name: e.name,
                shape: e.shape,
                data,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((header.meta, tensors))
}

pub fn write_container(path: &Path, meta: serde_json::Value, tensors: &[NamedTensor]) -> Result<()> {
    fs::write(path, encode_container(meta, tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<(serde_json::Value, Vec<NamedTensor>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_container(&bytes)
}

#[derive(Serialize, Deserialize)]
struct ParamsMeta {
    kind: String,
    arch: ArchConfig,
}

pub fn params_to_tensors(params: &EstimatorParams<f32>) -> Vec<NamedTensor> {
    params
        .layers
        .iter()
        .flat_map(|l| {
            [
                NamedTensor {
                    name: format!("{}.weight", l.name),
                    shape: vec![l.cout, l.cin, 3, 3],
                    data: l.weight.clone(),
                },
                NamedTensor {
                    name: format!("{}.bias", l.name),
                    shape: vec![l.cout],
                    data: l.bias.clone(),
                },
            ]
        })
        .collect()
}

pub fn save_params(path: &Path, params: &EstimatorParams<f32>) -> Result<()> {
    let meta = serde_json::to_value(ParamsMeta {
        kind: "estimator".into(),
        arch: params.arch,
    })
    .expect("meta serializes");
    write_container(path, meta, &params_to_tensors(params))
}

pub fn load_params(path: &Path) -> Result<EstimatorParams<f32>> {
    let (meta, tensors) = read_container(path)?;
    let meta: ParamsMeta = serde_json::from_value(meta)
        .map_err(|e| Error::Snapshot(format!("{}: not a parameter snapshot: {e}", path.display())))?;
    // Rebuild the layer layout from the architecture, then fill it in.
    let mut params: EstimatorParams<f32> = EstimatorParams {
        arch: meta.arch,
        layers: meta
            .arch
            .layer_specs()
            .into_iter()
            .map(|(name, cin, cout, stride)| ConvLayer {
                name,
                cin,
                cout,
                stride,
                weight: Vec::new(),
                bias: Vec::new(),
            })
            .collect(),
    };
    let expected = params_to_tensors(&params);
    if expected.len() != tensors.len() {
        return Err(Error::Snapshot("tensor count does not match the architecture".into()));
    }
    for ((slot, want), got) in params.tensors_mut().zip(&expected).zip(tensors) {
        if want.name != got.name || want.shape != got.shape {
            return Err(Error::Snapshot(format!("unexpected tensor {}", got.name)));
        }
        *slot = got.data;
    }
    for l in &params.layers {
        if l.weight.len() != l.cout * l.cin * 9 || l.bias.len() != l.cout {
            return Err(Error::Snapshot(format!("layer {} has the wrong shape", l.name)));
        }
    }
    Ok(params)
}

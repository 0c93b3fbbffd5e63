//! Binary checkpoint container.
//!
//! Layout: the 8 magic bytes `MOEULAB1`, a little-endian `u32` header length,
//! a JSON header, then the raw little-endian `f64` payload of every tensor.
//! Header offsets are byte offsets into the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Expert, MoELayer, MoEModel, ModelConfig, ParamId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MOEULAB1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode<S: Scalar>(model: &MoEModel<S>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (id, t) in model.named_params() {
        tensors.push(TensorEntry {
            name: id.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset: payload.len(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header {
        config: model.config().clone(),
        tensors,
    })?;
    let len = u32::try_from(header.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<MoEModel<S>> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("missing MOEULAB1 magic".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header_end = 12usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[12..header_end])?;
    let payload = &bytes[header_end..];
    header.config.validate()?;

    let mut loaded = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        if entry.dtype != "f64" {
            return Err(Error::Checkpoint(format!("unsupported dtype {}", entry.dtype)));
        }
        let id: ParamId = entry.name.parse()?;
        let numel: usize = entry.shape.iter().product();
        let end = entry
            .offset
            .checked_add(numel * 8)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| Error::Checkpoint(format!("payload of {} out of bounds", entry.name)))?;
        let data = payload[entry.offset..end]
            .chunks_exact(8)
            .map(|c| S::from_f64_lossy(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        loaded.push((id, Tensor::new(entry.shape.clone(), data)?));
    }
    assemble(header.config, loaded)
}

fn assemble<S: Scalar>(config: ModelConfig, tensors: Vec<(ParamId, Tensor<S>)>) -> Result<MoEModel<S>> {
    let expected = MoEModel::<S>::shapes(&config);
    if tensors.len() != expected.len()
        || tensors
            .iter()
            .zip(&expected)
            .any(|((id, t), (eid, shape))| id != eid || t.shape() != shape.as_slice())
    {
        return Err(Error::Checkpoint("tensor list does not match the model config".into()));
    }
    let mut it = tensors.into_iter().map(|(_, t)| t);
    let mut next = || it.next().expect("length checked");
    let embed = next();
    let mut layers = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        let router = next();
        let experts = (0..config.experts_per_layer)
            .map(|_| Expert {
                up: next(),
                down: next(),
            })
            .collect();
        let shared = (0..config.shared_experts)
            .map(|_| Expert {
                up: next(),
                down: next(),
            })
            .collect();
        layers.push(MoELayer {
            router,
            experts,
            shared,
        });
    }
    let head = next();
    MoEModel::from_parts(config, embed, layers, head)
}

pub fn save<S: Scalar>(model: &MoEModel<S>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load<S: Scalar>(path: impl AsRef<Path>) -> Result<MoEModel<S>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 10,
            embed_dim: 4,
            num_layers: 2,
            experts_per_layer: 3,
            top_k: 1,
            shared_experts: 1,
            ffn_hidden: 5,
            renormalize_gates: true,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = MoEModel::<f64>::seeded(cfg(), 4).unwrap();
        let bytes = encode(&m).unwrap();
        assert_eq!(&bytes[..8], b"MOEULAB1");
        let back: MoEModel<f64> = decode(&bytes).unwrap();
        assert_eq!(back.config(), m.config());
        for ((a, ta), (b, tb)) in m.named_params().into_iter().zip(back.named_params()) {
            assert_eq!(a, b);
            assert!(ta.bits_eq(tb));
        }
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn header_lists_f64_tensors() {
        let m = MoEModel::<f64>::seeded(cfg(), 4).unwrap();
        let bytes = encode(&m).unwrap();
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
        assert_eq!(header.tensors[0].name, "embed");
        assert_eq!(header.tensors[0].offset, 0);
        assert_eq!(header.tensors[1].offset, 10 * 4 * 8);
        assert!(header.tensors.iter().all(|t| t.dtype == "f64"));
        assert_eq!(bytes.len(), 12 + len + m.num_params() * 8);
    }

    #[test]
    fn rejects_corruption() {
        let m = MoEModel::<f64>::seeded(cfg(), 4).unwrap();
        let mut bytes = encode(&m).unwrap();
        assert!(decode::<f64>(&bytes[..bytes.len() - 8]).is_err());
        bytes[0] = b'X';
        assert!(decode::<f64>(&bytes).is_err());
    }
}

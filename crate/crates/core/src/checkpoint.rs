//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 8 | magic `PWCKPT\0\n` |
//! | 4 | format version (`u32`, currently 1) |
//! | 8 | header length `n` (`u64`) |
//! | n | UTF-8 JSON header: model config, init seed, parameter names and shapes, optimizer scalars, metadata |
//! | 8·P | every parameter as `f64`, tensors in header order |
//! | 16·P | optional: Adam first then second moments, same order (present iff the header has `optimizer`) |
//!
//! Floats are stored as raw bits, so a round trip is bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{Model, ModelConfig, ParamSpec};
use crate::optim::OptimState;

pub const MAGIC: [u8; 8] = *b"PWCKPT\0\n";
pub const FORMAT_VERSION: u32 = 1;

/// Training context stored next to the weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// 1-based epoch the weights come from.
    pub epoch: Option<usize>,
    pub val_weighted_iou: Option<f64>,
    pub val_weighted_dice: Option<f64>,
    #[serde(default)]
    pub notes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimHeader {
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    lr: f64,
    weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    seed: u64,
    params: Vec<ParamSpec>,
    optimizer: Option<OptimHeader>,
    meta: CheckpointMeta,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<OptimState>,
    pub meta: CheckpointMeta,
}

fn put_f64s(out: &mut Vec<u8>, tensors: &[Vec<f64>]) {
    for t in tensors {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode(model: &Model, optimizer: Option<&OptimState>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = Header {
        config: *model.config(),
        seed: model.seed(),
        params: model.specs().to_vec(),
        optimizer: optimizer.map(|o| OptimHeader {
            t: o.t,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            lr: o.lr,
            weight_decay: o.weight_decay,
        }),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 24 * model.param_count());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    put_f64s(&mut out, model.params());
    if let Some(o) = optimizer {
        put_f64s(&mut out, &o.m);
        put_f64s(&mut out, &o.v);
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Checkpoint(format!("truncated: wanted {n} more bytes, {} left", self.buf.len())));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn tensors(&mut self, specs: &[ParamSpec]) -> Result<Vec<Vec<f64>>> {
        specs
            .iter()
            .map(|s| {
                let bytes = self.take(8 * s.len())?;
                Ok(bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect())
            })
            .collect()
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { buf: bytes };
    if cur.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header = serde_json::from_slice(cur.take(len)?)?;
    let params = cur.tensors(&header.params)?;
    let optimizer = match &header.optimizer {
        Some(o) => {
            let m = cur.tensors(&header.params)?;
            let v = cur.tensors(&header.params)?;
            Some(OptimState {
                m,
                v,
                t: o.t,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                lr: o.lr,
                weight_decay: o.weight_decay,
            })
        }
        None => None,
    };
    if !cur.buf.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", cur.buf.len())));
    }
    let model = Model::from_parts(header.config, header.seed, params)?;
    if model.specs() != header.params.as_slice() {
        return Err(Error::Checkpoint("parameter layout does not match the model config".into()));
    }
    Ok(Checkpoint {
        model,
        optimizer,
        meta: header.meta,
    })
}

pub fn save(path: impl AsRef<Path>, model: &Model, optimizer: Option<&OptimState>, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode(model, optimizer, meta)?;
    if let Some(dir) = path.as_ref().parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::Family;

    fn model() -> Model {
        Model::build(ModelConfig::new(Family::Unetpp, 2, 3, 16), 4).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = model();
        let mut opt = OptimState::for_params(m.params(), 1e-3, 1e-4);
        opt.t = 17;
        opt.m[0][0] = f64::MIN_POSITIVE;
        opt.v[1][0] = 1.0 / 3.0;
        let meta = CheckpointMeta {
            epoch: Some(3),
            val_weighted_iou: Some(0.5),
            ..Default::default()
        };
        let back = decode(&encode(&m, Some(&opt), &meta).unwrap()).unwrap();
        let bits = |p: &[Vec<f64>]| p.iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.model.params()), bits(m.params()));
        assert_eq!(back.model.config(), m.config());
        assert_eq!(back.optimizer.unwrap(), opt);
        assert_eq!(back.meta, meta);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = model();
        let bytes = encode(&m, None, &CheckpointMeta::default()).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));
        let mut bad = bytes;
        bad[8] = 9;
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));
    }
}

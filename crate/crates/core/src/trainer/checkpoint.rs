//! Versioned checkpoint container.
//!
//! ```text
//! magic "OCCLOFFC" | u32 LE version | u64 LE header length | JSON header
//! | parameter tensors | Adam first moments | Adam second moments
//! ```
//! Tensors are stored row-major, little-endian, in the header's dtype and
//! in parameter order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::model::Model;
use super::optim::{AdamHyper, AdamW};
use crate::ahsw::SampleLossHistory;
use crate::autograd::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"OCCLOFFC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Trained parameters.
    Model,
    /// Predicts the ground truth exactly; an evaluation fixture.
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorDesc {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerState {
    pub hyper: AdamHyper,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    /// Completed epochs.
    pub epoch: usize,
    pub config: RunConfig,
    pub config_hash: String,
    pub dtype: String,
    pub model: Option<Model>,
    pub tensors: Vec<TensorDesc>,
    pub optimizer: Option<OptimizerState>,
    pub history: SampleLossHistory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub params: ParamStore<T>,
    pub optimizer: Option<AdamW<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(kind: CheckpointKind, epoch: usize, config: &RunConfig, model: Option<Model>, params: ParamStore<T>, optimizer: Option<AdamW<T>>, history: SampleLossHistory) -> Self {
        let tensors = params.iter().map(|(_, n, t)| TensorDesc { name: n.to_string(), rows: t.rows, cols: t.cols }).collect();
        let header = CheckpointHeader {
            kind,
            epoch,
            config: config.clone(),
            config_hash: config.hash(),
            dtype: T::DTYPE.to_string(),
            model,
            tensors,
            optimizer: optimizer.as_ref().map(|o| OptimizerState { hyper: o.hyper, step: o.step }),
            history,
        };
        Self { header, params, optimizer }
    }

    /// A checkpoint whose predictions are the ground truth.
    pub fn oracle(config: &RunConfig) -> Self {
        Self::new(CheckpointKind::Oracle, 0, config, None, ParamStore::new(), None, SampleLossHistory::default())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serialises");
        let mut out = Vec::with_capacity(24 + header.len() + self.params.num_scalars() * T::BYTES * 3);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let mut put = |t: &Tensor<T>| t.data.iter().for_each(|&v| v.write_le(&mut out));
        self.params.iter().for_each(|(_, _, t)| put(t));
        if let Some(o) = &self.optimizer {
            o.m.iter().chain(&o.v).for_each(&mut put);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let (header, mut at) = parse_header(bytes)?;
        let mut take = |desc: &TensorDesc| -> Result<Tensor<T>> {
            match header.dtype.as_str() {
                "f32" => read_tensor::<f32>(bytes, &mut at, desc).map(|t| t.cast()),
                "f64" => read_tensor::<f64>(bytes, &mut at, desc).map(|t| t.cast()),
                other => Err(Error::Checkpoint(format!("unknown dtype {other}"))),
            }
        };
        let mut params = ParamStore::new();
        for d in &header.tensors {
            let t = take(d)?;
            params.add(d.name.clone(), t);
        }
        let optimizer = match &header.optimizer {
            Some(o) => {
                let m = header.tensors.iter().map(&mut take).collect::<Result<Vec<_>>>()?;
                let v = header.tensors.iter().map(&mut take).collect::<Result<Vec<_>>>()?;
                Some(AdamW { hyper: o.hyper, step: o.step, m, v })
            }
            None => None,
        };
        if at != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { header, params, optimizer })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Header and the offset of the first tensor byte.
fn parse_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not an occloff checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.config_hash != header.config.hash() {
        return Err(bad("config hash mismatch"));
    }
    Ok((header, 20 + hlen))
}

/// Reads only the header, e.g. to pick the precision to load with.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_header(&bytes).map(|(h, _)| h).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn read_tensor<S: Real>(bytes: &[u8], at: &mut usize, d: &TensorDesc) -> Result<Tensor<S>> {
    let n = d.rows * d.cols;
    let end = *at + n * S::BYTES;
    let raw = bytes.get(*at..end).ok_or_else(|| Error::Checkpoint(format!("truncated tensor {}", d.name)))?;
    *at = end;
    Ok(Tensor::new(d.rows, d.cols, raw.chunks_exact(S::BYTES).map(S::read_le).collect()))
}

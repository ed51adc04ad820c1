//! Binary parameter container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic    4 bytes   "PCLS"
//! version  u8        1
//! kind     u8        1 = network parameters, 2 = training checkpoint
//! dims     3 × u32   input, hidden1, hidden2
//! params   f64 × N   layer 1 (w_f, w_i, w_c, w_o row-major, then
//!                    b_f, b_i, b_c, b_o), layer 2 likewise, readout
//!                    weights, readout bias
//! ```
//!
//! A checkpoint continues with the normalizer (`u32` width, means, stds,
//! label mean, label std) and the optimizer state (`u64` step, β1, β2, ε,
//! `u32` count, first moments, second moments).

use std::path::Path;

use thiserror::Error;

use crate::dataset::Normalizer;
use crate::io::write_atomic;
use crate::lstm::{LstmNetworkParams, NetworkShape};
use crate::training::{AdamState, ParamSet, TrainedModel};

pub const MAGIC: &[u8; 4] = b"PCLS";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ContainerKind {
    Params = 1,
    Checkpoint = 2,
}

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("not a parameter container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u8),
    #[error("container kind {got}, expected {expected}")]
    WrongKind { expected: u8, got: u8 },
    #[error("container truncated")]
    Truncated,
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("invalid container: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Everything needed to resume forecasting or fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: LstmNetworkParams,
    pub normalizer: Normalizer,
    pub adam: AdamState,
}

impl From<&TrainedModel> for Checkpoint {
    fn from(m: &TrainedModel) -> Self {
        Self {
            params: m.params.clone(),
            normalizer: m.normalizer.clone(),
            adam: m.adam.clone(),
        }
    }
}

impl Checkpoint {
    /// A model without loss history.
    pub fn into_model(self) -> TrainedModel {
        TrainedModel {
            params: self.params,
            normalizer: self.normalizer,
            history: Vec::new(),
            adam: self.adam,
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).ok_or(ContainerError::Truncated)?;
        let out = self.bytes.get(self.pos..end).ok_or(ContainerError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize, ContainerError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64, ContainerError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, ContainerError> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, ContainerError> {
        let b = self.take(n.checked_mul(8).ok_or(ContainerError::Truncated)?)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn finish(&self) -> Result<(), ContainerError> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            n => Err(ContainerError::TrailingBytes(n)),
        }
    }
}

fn write_header(w: &mut Writer, kind: ContainerKind, params: &LstmNetworkParams) {
    w.0.extend_from_slice(MAGIC);
    w.0.push(VERSION);
    w.0.push(kind as u8);
    let s = params.shape();
    w.u32(s.input);
    w.u32(s.hidden1);
    w.u32(s.hidden2);
    w.f64s(&params.to_flat());
}

fn read_header(r: &mut Reader, kind: ContainerKind) -> Result<LstmNetworkParams, ContainerError> {
    if r.take(4)? != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    let got = r.u8()?;
    if got != kind as u8 {
        return Err(ContainerError::WrongKind {
            expected: kind as u8,
            got,
        });
    }
    let shape = NetworkShape {
        input: r.u32()?,
        hidden1: r.u32()?,
        hidden2: r.u32()?,
    };
    if shape.input == 0 || shape.hidden1 == 0 || shape.hidden2 == 0 {
        return Err(ContainerError::Invalid(format!("zero dimension in {shape:?}")));
    }
    let mut params = LstmNetworkParams::zeros(shape);
    let flat = r.f64s(params.num_params())?;
    params.set_flat(&flat);
    Ok(params)
}

pub fn encode_params(params: &LstmNetworkParams) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    write_header(&mut w, ContainerKind::Params, params);
    w.0
}

pub fn decode_params(bytes: &[u8]) -> Result<LstmNetworkParams, ContainerError> {
    let mut r = Reader { bytes, pos: 0 };
    let params = read_header(&mut r, ContainerKind::Params)?;
    r.finish()?;
    Ok(params)
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    write_header(&mut w, ContainerKind::Checkpoint, &ck.params);
    let n = &ck.normalizer;
    w.u32(n.means.len());
    w.f64s(&n.means);
    w.f64s(&n.stds);
    w.f64s(&[n.label_mean, n.label_std]);
    let a = &ck.adam;
    w.0.extend_from_slice(&a.step.to_le_bytes());
    w.f64s(&[a.beta1, a.beta2, a.epsilon]);
    w.u32(a.m.len());
    w.f64s(&a.m);
    w.f64s(&a.v);
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, ContainerError> {
    let mut r = Reader { bytes, pos: 0 };
    let params = read_header(&mut r, ContainerKind::Checkpoint)?;
    let dim = r.u32()?;
    if dim != params.shape().input {
        return Err(ContainerError::Invalid(format!(
            "normalizer width {dim} does not match network input {}",
            params.shape().input
        )));
    }
    let normalizer = Normalizer {
        means: r.f64s(dim)?,
        stds: r.f64s(dim)?,
        label_mean: r.f64()?,
        label_std: r.f64()?,
    };
    let step = r.u64()?;
    let (beta1, beta2, epsilon) = (r.f64()?, r.f64()?, r.f64()?);
    let count = r.u32()?;
    if count != params.num_params() {
        return Err(ContainerError::Invalid(format!(
            "optimizer holds {count} moments for {} parameters",
            params.num_params()
        )));
    }
    let adam = AdamState {
        m: r.f64s(count)?,
        v: r.f64s(count)?,
        step,
        beta1,
        beta2,
        epsilon,
    };
    r.finish()?;
    Ok(Checkpoint {
        params,
        normalizer,
        adam,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), ContainerError> {
    write_atomic(path, &encode_checkpoint(ck)).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ContainerError> {
    let bytes = std::fs::read(path).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

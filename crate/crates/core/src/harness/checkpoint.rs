//! Binary parameter files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MCLS" | version: u32 | network digest: [u8; 32] | tensor count: u32
//! per tensor: name length: u32 | UTF-8 name | rank: u32 | dims: u64 * rank | values: f32 * prod(dims)
//! checksum: u64
//! ```
//!
//! The digest is SHA-256 of the network description's canonical JSON. The
//! checksum is the first eight bytes (little-endian) of SHA-256 over every
//! preceding byte. The optimizer step counter is stored as the tensor
//! `optimizer.step`, two f32 slots carrying the raw low and high 32 bits.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{write_atomic, HarnessError};
use crate::data::SeededPrng;
use crate::nn::{NetworkSpec, ParamState, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MCLS";
pub const CHECKPOINT_VERSION: u32 = 1;
const STEP_TENSOR: &str = "optimizer.step";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint file (bad magic {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (this build reads {CHECKPOINT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checksum mismatch: stored {stored:016x}, computed {computed:016x}")]
    Checksum { stored: u64, computed: u64 },
    #[error("network digest mismatch: checkpoint {found}, expected {expected}")]
    DigestMismatch { expected: String, found: String },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

/// Decoded file contents before they are matched against a network.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointFile {
    pub version: u32,
    pub digest: [u8; 32],
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl CheckpointFile {
    pub fn digest_hex(&self) -> String {
        hex(&self.digest)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn checksum(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("eight bytes"))
}

pub(crate) fn encode(spec: &NetworkSpec, params: &ParamState<f32>) -> Vec<u8> {
    let named = params.named_tensors(spec);
    let step_bits = [f32::from_bits(params.step as u32), f32::from_bits((params.step >> 32) as u32)];
    let step = Tensor::from_vec(&[2], step_bits.to_vec()).expect("two values");
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&spec.digest());
    out.extend_from_slice(&((named.len() + 1) as u32).to_le_bytes());
    for (name, t) in named.iter().map(|(n, t)| (n.as_str(), *t)).chain([(STEP_TENSOR, &step)]) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
                CheckpointError::Malformed(format!("truncated at byte {} (wanted {n} more)", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses and verifies magic, version and checksum.
pub(crate) fn decode(bytes: &[u8]) -> Result<CheckpointFile, CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Malformed(format!("only {} bytes", bytes.len())));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    if bytes.len() < 8 + 32 + 4 + 8 {
        return Err(CheckpointError::Malformed(format!("only {} bytes", bytes.len())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let computed = checksum(payload);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    let mut r = Reader { bytes: payload, pos: 8 };
    let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| CheckpointError::Malformed("dimension overflow".into()))?);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} is too large")))?;
        let raw = r.take(len)?;
        let data =
            raw.chunks_exact(4).map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().expect("4 bytes")))).collect();
        let t = Tensor::from_vec(&shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        tensors.push((name, t));
    }
    if r.pos != payload.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", payload.len() - r.pos)));
    }
    Ok(CheckpointFile { version, digest, tensors })
}

/// Rebuilds the parameter state for `spec`, checking digest, names and shapes.
pub(crate) fn restore(spec: &NetworkSpec, file: &CheckpointFile) -> Result<ParamState<f32>, CheckpointError> {
    let expected = hex(&spec.digest());
    if file.digest_hex() != expected {
        return Err(CheckpointError::DigestMismatch { expected, found: file.digest_hex() });
    }
    let mut state = ParamState::<f32>::init(spec, &mut SeededPrng::new(0))
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let names: Vec<String> = state.named_tensors(spec).into_iter().map(|(n, _)| n).collect();
    if file.tensors.len() != names.len() + 1 {
        return Err(CheckpointError::Malformed(format!(
            "{} tensors stored, network needs {}",
            file.tensors.len(),
            names.len() + 1
        )));
    }
    for ((slot, name), (stored_name, t)) in state.tensors_mut().into_iter().zip(&names).zip(&file.tensors) {
        if stored_name != name || slot.shape() != t.shape() {
            return Err(CheckpointError::Malformed(format!(
                "tensor {stored_name} {:?} where {name} {:?} was expected",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.clone();
    }
    let (step_name, step) = file.tensors.last().expect("count checked");
    if step_name != STEP_TENSOR || step.shape() != [2] {
        return Err(CheckpointError::Malformed(format!("last tensor must be {STEP_TENSOR}")));
    }
    state.step = step.data()[0].to_bits() as u64 | (step.data()[1].to_bits() as u64) << 32;
    Ok(state)
}

pub fn save_checkpoint(params: &ParamState<f32>, spec: &NetworkSpec, path: &Path) -> Result<(), HarnessError> {
    write_atomic(path, &encode(spec, params))
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointFile, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_owned(), source })?;
    decode(&bytes)
}

/// Loads a checkpoint written for `spec`, returning the parameters and the
/// stored network digest.
pub fn load_checkpoint(path: &Path, spec: &NetworkSpec) -> Result<(ParamState<f32>, [u8; 32]), CheckpointError> {
    let file = read_checkpoint(path)?;
    let state = restore(spec, &file)?;
    Ok((state, file.digest))
}

//! Binary checkpoint container.
//!
//! Layout (little endian): magic, format version (u32), header length (u32),
//! TOML header, tensor count (u32), then per tensor a u16-prefixed name, a
//! u64 element count and raw `f32` data, and finally the sha256 of all
//! preceding bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{AdamHyper, EarlyStop};
use super::TrainConfig;
use crate::arch::ArchConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MEDTEXCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Teacher,
    Distill,
}

/// Everything but the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub step: u64,
    pub epoch: u64,
    pub batch_in_epoch: u64,
    pub epoch_loss_sum: f64,
    pub metrics_offset: u64,
    pub finished: bool,
    /// Parameter hash of the teacher a distillation run was built against.
    pub teacher_sha256: String,
    pub optimizer: AdamHyper,
    pub optimizer_steps: u64,
    pub early_stop: EarlyStop,
    pub config: TrainConfig,
    pub arch: Vec<ArchConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointFile {
    pub header: CheckpointHeader,
    pub tensors: Vec<NamedTensor>,
}

impl CheckpointFile {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = toml::to_string(&self.header)
            .map_err(|e| Error::InvalidArgument(format!("checkpoint header: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.data.len() as u64).to_le_bytes());
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Parse and verify. `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |msg: String| Error::format(path, msg);
        if bytes.len() < CHECKPOINT_MAGIC.len() + 4 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fail("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(fail(format!(
                "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        if bytes.len() < 12 + DIGEST_LEN {
            return Err(fail("truncated checkpoint".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(fail("checksum mismatch: file is truncated or corrupted".into()));
        }
        let mut r = ByteReader { buf: body, pos: 12 };
        let header_len = r.u32().ok_or_else(|| fail("truncated header length".into()))? as usize;
        let header_bytes = r.take(header_len).ok_or_else(|| fail("truncated header".into()))?;
        let header_text =
            std::str::from_utf8(header_bytes).map_err(|_| fail("header is not UTF-8".into()))?;
        let header: CheckpointHeader =
            toml::from_str(header_text).map_err(|e| fail(format!("header: {e}")))?;
        let count = r.u32().ok_or_else(|| fail("truncated tensor count".into()))?;
        let mut tensors = Vec::new();
        for i in 0..count {
            let truncated = || fail(format!("tensor {i} is truncated"));
            let name_len = r.u16().ok_or_else(truncated)? as usize;
            let name = std::str::from_utf8(r.take(name_len).ok_or_else(truncated)?)
                .map_err(|_| fail(format!("tensor {i} name is not UTF-8")))?
                .to_string();
            let len = r.u64().ok_or_else(truncated)?;
            let byte_len = len.checked_mul(4).filter(|&b| b <= (r.buf.len() - r.pos) as u64);
            let raw = byte_len
                .and_then(|b| r.take(b as usize))
                .ok_or_else(truncated)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(NamedTensor { name, data });
        }
        if r.pos != body.len() {
            return Err(fail("trailing bytes after tensors".into()));
        }
        Ok(CheckpointFile { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        let tmp = path.with_extension("tmp");
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.tensors.iter().find(|t| t.name == name).map(|t| t.data.as_slice())
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len())?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes(b.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

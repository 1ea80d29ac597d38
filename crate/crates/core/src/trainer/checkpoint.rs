//! Binary checkpoint container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes   "SFNERFCK"
//! version    u32       currently 1
//! config     u64 length + UTF-8 TOML echo of the TrainConfig
//! step       u64       optimizer steps taken
//! images     u64       rows of each embedding table
//! count      u32       number of parameter blocks
//! per block:
//!   name     u32 length + UTF-8
//!   sparse   u8
//!   rows     u64
//!   cols     u64
//!   value    rows·cols f64
//!   adam m   rows·cols f64
//!   adam v   rows·cols f64
//!   counts   u64 length + that many u64 step counters
//! ```
//!
//! Parameters are stored as f64 whatever the training precision, which is
//! lossless for f32. The per-step random streams are derived from the seed
//! in the config and the step counter, so those two fields are the complete
//! generator state.

use std::path::Path;

use super::adam::Moments;
use super::config::TrainConfig;
use crate::encoding::EncodingConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SFNERFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub sparse: bool,
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<f64>,
    pub moments: Moments,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub train_images: usize,
    pub blocks: Vec<ParamBlock>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible length {n}")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 in checkpoint".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = self.config.to_toml();
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.train_images as u64).to_le_bytes());
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.push(b.sparse as u8);
            out.extend_from_slice(&(b.rows as u64).to_le_bytes());
            out.extend_from_slice(&(b.cols as u64).to_le_bytes());
            put_f64s(&mut out, &b.value);
            put_f64s(&mut out, &b.moments.m);
            put_f64s(&mut out, &b.moments.v);
            out.extend_from_slice(&(b.moments.counts.len() as u64).to_le_bytes());
            for c in &b.moments.counts {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}"
            )));
        }
        let n = r.len()?;
        let config = TrainConfig::from_toml(&r.string(n)?)
            .map_err(|e| Error::Checkpoint(format!("config echo: {e}")))?;
        let step = r.u64()?;
        let train_images = r.len()?;
        let count = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = r.string(n)?;
            let sparse = r.u8()? != 0;
            let rows = r.len()?;
            let cols = r.len()?;
            let numel = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflow")))?;
            let value = r.f64s(numel)?;
            let m = r.f64s(numel)?;
            let v = r.f64s(numel)?;
            let nc = r.len()?;
            let counts = (0..nc).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            blocks.push(ParamBlock {
                name,
                sparse,
                rows,
                cols,
                value,
                moments: Moments { m, v, counts },
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last block",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            config,
            step,
            train_images,
            blocks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Loads a checkpoint and rejects it unless it was trained with
    /// `encoding`.
    pub fn load_expecting(path: &Path, encoding: &EncodingConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        ck.check_encoding(encoding)?;
        Ok(ck)
    }

    pub fn check_encoding(&self, encoding: &EncodingConfig) -> Result<()> {
        if &self.config.encoding != encoding {
            return Err(Error::Checkpoint(format!(
                "encoding mismatch: checkpoint has {:?}, expected {:?}",
                self.config.encoding, encoding
            )));
        }
        Ok(())
    }
}

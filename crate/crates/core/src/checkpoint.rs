//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "CLSP"
//! version    u32
//! meta_len   u64, then meta_len bytes of UTF-8 JSON metadata
//! n_tensors  u32, then per tensor (sorted by name):
//!     name_len u32, name bytes, dtype u8 (0 = f32, 1 = f64),
//!     rank u32, rank x u64 dims, raw little-endian values
//! n_banks    u32, then per bank:
//!     item_len u32, item bytes, seed u64, sigma f64, d u32, d x f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use clsp_autodiff::{DType, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderVariant, StateDims, TextDims};
use crate::error::{ClspError, Result};
use crate::schema::{BankRecord, ScalarEncoding, StateSchema};

pub const MAGIC: [u8; 4] = *b"CLSP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// Pipeline stage that produced the checkpoint: pretrain, align or probe.
    pub kind: String,
    pub variant: EncoderVariant,
    pub encoding: ScalarEncoding,
    pub rff_seed: u64,
    pub sigma: f64,
    pub schema_hash: String,
    pub seed: u64,
    pub step: usize,
    pub state_dims: StateDims,
    pub text_dims: Option<TextDims>,
    pub vocab: Option<Vec<String>>,
    /// Effective run configuration.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: ParamStore<f32>,
    pub banks: Vec<BankRecord>,
}

impl Checkpoint {
    /// Rebuilds the schema recorded in the metadata, with the stored
    /// frequency banks installed, and checks it against the recorded hash.
    pub fn schema(&self) -> Result<StateSchema> {
        let mut schema = StateSchema::new(self.meta.encoding, self.meta.rff_seed, self.meta.sigma)?;
        if !self.banks.is_empty() {
            schema.install_banks(&self.banks)?;
        }
        self.check_schema(&schema)?;
        Ok(schema)
    }

    pub fn check_schema(&self, schema: &StateSchema) -> Result<()> {
        let found = schema.hash();
        if found != self.meta.schema_hash {
            return Err(ClspError::SchemaHash {
                found: self.meta.schema_hash.clone(),
                expected: found,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.tensors.iter() {
            put_str(&mut out, name);
            out.push(DType::F32.tag());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.banks.len() as u32).to_le_bytes());
        for b in &self.banks {
            put_str(&mut out, &b.item);
            out.extend_from_slice(&b.seed.to_le_bytes());
            out.extend_from_slice(&b.sigma.to_le_bytes());
            out.extend_from_slice(&(b.d as u32).to_le_bytes());
            for v in &b.b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(ClspError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(ClspError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let meta_len = r.u64("metadata length")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| ClspError::Corrupt(format!("metadata: {e}")))?;
        let n = r.u32("tensor count")?;
        let mut tensors = ParamStore::new();
        for _ in 0..n {
            let name = r.string("tensor name")?;
            let tag = r.take(1, "dtype")?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| ClspError::Corrupt(format!("dtype tag {tag}")))?;
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u64("dim").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| ClspError::Corrupt(format!("shape {shape:?} overflows")))?;
            let raw = r.take(
                count
                    .checked_mul(dtype.size_of())
                    .ok_or_else(|| ClspError::Corrupt("tensor size overflows".into()))?,
                "tensor data",
            )?;
            let data: Vec<f32> = match dtype {
                DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32)
                    .collect(),
            };
            let t = Tensor::new(shape, data).map_err(|e| ClspError::Corrupt(format!("{name}: {e}")))?;
            tensors.insert(name, t);
        }
        let n = r.u32("bank count")?;
        let mut banks = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let item = r.string("bank item")?;
            let seed = r.u64("bank seed")?;
            let sigma = r.f64("bank sigma")?;
            let d = r.u32("bank size")? as usize;
            let b = (0..d).map(|_| r.f64("bank value")).collect::<Result<Vec<_>>>()?;
            banks.push(BankRecord { item, seed, sigma, d, b });
        }
        if r.pos != bytes.len() {
            return Err(ClspError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { meta, tensors, banks })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ClspError::Truncated(format!("{what} at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|e| ClspError::Corrupt(format!("{what}: {e}")))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let mut f = std::fs::File::create(path).map_err(|e| ClspError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| ClspError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| ClspError::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Loads a checkpoint and fails unless it was written for `schema`.
pub fn load_checkpoint_for(path: &Path, schema: &StateSchema) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.check_schema(schema)?;
    Ok(ckpt)
}

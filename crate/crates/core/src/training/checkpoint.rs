//! Binary checkpoint format.
//!
//! ```text
//! magic[8] version:u32 header_len:u32 header_json
//! n_params:u64 params:f64*
//! classes:u64 dim:u64 prototypes:f64*
//! stats_flag:u8 mean:f64 std:f64
//! rng_seed[32] rng_word_pos:u128 rng_stream:u64
//! sha256[32]
//! ```
//!
//! All integers and floats are little-endian. The trailing digest covers
//! every preceding byte.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::encoder::{Encoder, EncoderSpec};
use super::trainer::TrainedModel;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::losses::{ClassPrototypes, NormStats};
use crate::rng::Rng;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FAIRKDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    spec: EncoderSpec,
    meta: BTreeMap<String, String>,
}

/// A trained model plus free-form metadata such as the config digest and
/// tool version that produced it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: TrainedModel,
    pub meta: BTreeMap<String, String>,
}

fn bad(reason: impl Into<String>) -> Error {
    Error::FormatVersionMismatch(reason.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad("checkpoint is truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).map_err(|_| bad("length does not fit in memory"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n > self.bytes.len() / 8 {
            return Err(bad("checkpoint is truncated"));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

impl Checkpoint {
    pub fn new(model: TrainedModel) -> Self {
        Checkpoint {
            model,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let header = Header {
            spec: m.encoder.spec().clone(),
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);

        let params = m.encoder.parameters();
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        params
            .iter()
            .for_each(|p| out.extend_from_slice(&p.to_le_bytes()));

        out.extend_from_slice(&(m.prototypes.classes() as u64).to_le_bytes());
        out.extend_from_slice(&(m.prototypes.dim() as u64).to_le_bytes());
        for w in m.prototypes.as_flat() {
            out.extend_from_slice(&w.to_le_bytes());
        }

        let (flag, mean, std) = match m.norm_stats.get() {
            Ok((mean, std)) => (1u8, mean, std),
            Err(_) => (0u8, 0.0, 0.0),
        };
        out.push(flag);
        out.extend_from_slice(&mean.to_le_bytes());
        out.extend_from_slice(&std.to_le_bytes());

        out.extend_from_slice(&m.rng.get_seed());
        out.extend_from_slice(&m.rng.get_word_pos().to_le_bytes());
        out.extend_from_slice(&m.rng.get_stream().to_le_bytes());

        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() + 4 + 32 {
            return Err(bad("checkpoint is truncated"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let mut r = Reader {
            bytes: body,
            pos: 0,
        };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checkpoint checksum mismatch"));
        }
        let header_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| bad(format!("checkpoint header: {e}")))?;

        let n = r.len()?;
        let params = r.f64s(n)?;
        let encoder = Encoder::from_parameters(header.spec, params)
            .map_err(|e| bad(format!("encoder block: {e}")))?;

        let classes = r.len()?;
        let dim = r.len()?;
        let count = classes
            .checked_mul(dim)
            .ok_or_else(|| bad("prototype shape overflows"))?;
        let weights = r.f64s(count)?;
        let prototypes = ClassPrototypes::from_flat(classes, dim, weights)
            .map_err(|e| bad(format!("prototype block: {e}")))?;
        if dim != encoder.embedding_dim() {
            return Err(bad(format!(
                "prototype dim {dim} differs from embedding dim {}",
                encoder.embedding_dim()
            )));
        }

        let flag = r.take(1)?[0];
        let (mean, std) = (r.f64()?, r.f64()?);
        let norm_stats = match flag {
            0 => NormStats::uninitialized(),
            1 => NormStats::new(mean, std).map_err(|e| bad(format!("norm statistics: {e}")))?,
            f => return Err(bad(format!("unknown statistics flag {f}"))),
        };

        let seed: [u8; 32] = r.array()?;
        let word_pos = u128::from_le_bytes(r.array()?);
        let stream = r.u64()?;
        if r.pos != body.len() {
            return Err(bad("trailing bytes after checkpoint body"));
        }
        let mut rng = Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        Ok(Checkpoint {
            model: TrainedModel {
                encoder,
                prototypes,
                norm_stats,
                rng,
            },
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks the embedding dimension against the caller's model.
    pub fn load_expecting(path: &Path, embedding_dim: usize) -> Result<Self> {
        let ck = Self::load(path)?;
        let actual = ck.model.encoder.embedding_dim();
        if actual != embedding_dim {
            return Err(Error::DimensionMismatch {
                expected: embedding_dim,
                actual,
            });
        }
        Ok(ck)
    }
}

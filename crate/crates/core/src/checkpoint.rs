//! Single-file binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "TAPIRCKP" | version u8
//! config   u32 length + UTF-8 key = value text
//! epoch u64 | seed u64
//! count u32, then per record:
//!   name  u32 length + UTF-8
//!   rank  u32, dims u64 × rank
//!   data  f64 × numel
//! ```

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{ModelParams, RetrievalModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TAPIRCKP";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Epoch whose parameters were saved; 0 means untrained.
    pub epoch: u64,
    pub seed: u64,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, epoch: u64, model: &RetrievalModel) -> Self {
        Self {
            config: config.clone(),
            epoch,
            seed: config.seed,
            params: model.params.named().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        put_str(&mut out, &self.config.to_text());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let config = TrainConfig::parse(&r.string()?)?;
        let epoch = r.u64()?;
        let seed = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
            let raw = r.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint(format!("{name}: too large")))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            epoch,
            seed,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuilds the model; every registered parameter must be present with
    /// the shape the saved config implies.
    pub fn to_model(&self) -> Result<RetrievalModel> {
        let input_dim = self
            .params
            .iter()
            .find(|(n, _)| n == "text.hidden.weight")
            .map(|(_, t)| t.rows())
            .ok_or_else(|| Error::Checkpoint("missing text.hidden.weight".into()))?;
        let dims = self.config.model_dims(input_dim);
        dims.validate()?;
        let pooling = self.config.pooling;
        let mut params = ModelParams::init(&mut ChaCha8Rng::seed_from_u64(0), &dims, pooling);
        let mut saved: HashMap<&str, &Tensor> = HashMap::new();
        for (n, t) in &self.params {
            if saved.insert(n.as_str(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter {n}")));
            }
        }
        let mut problem = None;
        let mut used = 0;
        params.for_each_mut(|name, slot| {
            if problem.is_some() {
                return;
            }
            match saved.get(name.as_str()) {
                Some(t) if t.shape() == slot.shape() => {
                    *slot = (*t).clone();
                    used += 1;
                }
                Some(t) => {
                    problem = Some(format!(
                        "{name}: saved shape {:?} but config implies {:?}",
                        t.shape(),
                        slot.shape()
                    ))
                }
                None => problem = Some(format!("missing parameter {name}")),
            }
        });
        if let Some(p) = problem {
            return Err(Error::Checkpoint(p));
        }
        if used != saved.len() {
            return Err(Error::Checkpoint(format!(
                "{} saved parameters do not belong to a {pooling} model",
                saved.len() - used
            )));
        }
        Ok(RetrievalModel { pooling, params })
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

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(format!("invalid UTF-8: {e}")))
    }
}

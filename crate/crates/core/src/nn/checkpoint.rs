//! Flat binary model container.
//!
//! ```text
//! magic            7 bytes  "MTLSEG1"
//! in_channels      u32 LE
//! depth            u32 LE
//! widths[depth]    u32 LE each
//! seg_skip         u32 LE (0/1)
//! bnd_skip         u32 LE (0/1)
//! rec_skip         u32 LE (0/1)
//! tasks            u32 LE (bit 0 S, bit 1 B, bit 2 R)
//! uncertainty      u32 LE (0/1)
//! scalar_count     u64 LE
//! values           f32 LE × scalar_count
//! ```
//!
//! Values follow the parameter registry order; when `uncertainty` is set the
//! last three are `s_seg, s_bnd, s_rec`. Momentum buffers are not stored.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{Model, ModelConfig, ModelError};
use crate::loss::{TaskSet, UncertaintyParams};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"MTLSEG1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o failed")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("{0} trailing bytes after checkpoint payload")]
    TrailingBytes(usize),
    #[error("invalid checkpoint header field `{0}`")]
    InvalidField(&'static str),
    #[error("checkpoint holds {found} values, configuration needs {expected}")]
    CountMismatch { expected: u64, found: u64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A trained model with the task set it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub tasks: TaskSet,
    pub uncertainty: Option<UncertaintyParams>,
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn flag(&mut self, field: &'static str) -> Result<bool, CheckpointError> {
        match self.u32()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(CheckpointError::InvalidField(field)),
        }
    }

    fn f32(&mut self) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.model.config();
        let mut out = Vec::with_capacity(64 + 4 * (self.model.num_scalars() + 3));
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let mut put = |v: u32| out.extend_from_slice(&v.to_le_bytes());
        put(c.in_channels as u32);
        put(c.depth as u32);
        for &w in &c.widths {
            put(w as u32);
        }
        put(c.seg_skip as u32);
        put(c.bnd_skip as u32);
        put(c.rec_skip as u32);
        put(self.tasks.bits());
        put(self.uncertainty.is_some() as u32);
        let count = self.model.num_scalars() + if self.uncertainty.is_some() { 3 } else { 0 };
        out.extend_from_slice(&(count as u64).to_le_bytes());
        for p in self.model.params() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(u) = &self.uncertainty {
            for v in u.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes };
        if r.take(CHECKPOINT_MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let in_channels = r.u32()? as usize;
        let depth = r.u32()? as usize;
        if depth == 0 || depth > 16 {
            return Err(CheckpointError::InvalidField("depth"));
        }
        let widths = (0..depth).map(|_| r.u32().map(|w| w as usize)).collect::<Result<Vec<_>, _>>()?;
        let config = ModelConfig {
            in_channels,
            depth,
            widths,
            seg_skip: r.flag("seg_skip")?,
            bnd_skip: r.flag("bnd_skip")?,
            rec_skip: r.flag("rec_skip")?,
        };
        let tasks = TaskSet::from_bits(r.u32()?).ok_or(CheckpointError::InvalidField("tasks"))?;
        let has_uncertainty = r.flag("uncertainty")?;
        let count = r.u64()?;
        config.validate()?;
        let expected = (config.parameter_count() + if has_uncertainty { 3 } else { 0 }) as u64;
        if count != expected {
            return Err(CheckpointError::CountMismatch { expected, found: count });
        }
        let mut model = Model::new(config, 0)?;
        for p in model.params_mut() {
            for v in p.value.data_mut() {
                *v = r.f32()?;
            }
        }
        let uncertainty = if has_uncertainty {
            let s = [r.f32()?, r.f32()?, r.f32()?];
            Some(UncertaintyParams::from_values(s.map(f64::from)))
        } else {
            None
        };
        if !r.bytes.is_empty() {
            return Err(CheckpointError::TrailingBytes(r.bytes.len()));
        }
        Ok(Checkpoint {
            model,
            tasks,
            uncertainty,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

//! Binary checkpoint container for trained parameters.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FDCK"  magic
//! u32     format version (1)
//! u8      phase (0 = main model, 1 = refinement surrogate)
//! u64     epochs completed when saved
//! string  config JSON (u64 length + UTF-8)
//! u64     parameter count
//!   per parameter: string name, u64 rank, u64 dims..., f64 data...
//! u8      optimizer-state flag
//!   if 1: u64 step, then per parameter f64 first moments, f64 second moments
//! ```
//!
//! Loads are strict: wrong magic, unknown version, truncation, or
//! non-finite values all fail with a `Format` error.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::adam::AdamState;
use crate::data::wire;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which training stage produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Phase {
    /// Joint training of the dual-branch model.
    Main,
    /// Surrogate training for text-branch refinement.
    Refinement,
}

impl Phase {
    fn code(self) -> u8 {
        match self {
            Phase::Main => 0,
            Phase::Refinement => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Phase::Main),
            1 => Ok(Phase::Refinement),
            other => Err(Error::Format(format!(
                "unknown checkpoint phase code {other}"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Main => "main",
            Phase::Refinement => "refinement",
        }
    }
}

/// A complete snapshot: parameters, training position, the configuration
/// they were trained with, and (optionally) optimizer moments for resuming.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub phase: Phase,
    pub epoch: u64,
    pub config_json: String,
    pub params: ParamStore,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(adam) = &self.adam {
            if !adam.matches(&self.params) {
                return Err(Error::Usage(
                    "optimizer state does not match the parameters being saved".into(),
                ));
            }
        }
        let file = File::create(path)
            .map_err(|e| Error::io(format!("creating checkpoint {}", path.display()), e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io("flushing checkpoint", e))?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)
            .map_err(|e| Error::io("writing checkpoint magic", e))?;
        wire::write_u32(w, CHECKPOINT_VERSION)?;
        wire::write_u8(w, self.phase.code())?;
        wire::write_u64(w, self.epoch)?;
        wire::write_string(w, &self.config_json)?;
        wire::write_u64(w, self.params.len() as u64)?;
        for (name, tensor) in self.params.iter() {
            wire::write_string(w, name)?;
            wire::write_u64(w, tensor.rank() as u64)?;
            for &d in tensor.shape() {
                wire::write_u64(w, d as u64)?;
            }
            wire::write_f64_slice(w, tensor.data())?;
        }
        match &self.adam {
            None => wire::write_u8(w, 0)?,
            Some(adam) => {
                wire::write_u8(w, 1)?;
                wire::write_u64(w, adam.step)?;
                for buf in adam.m.iter().chain(adam.v.iter()) {
                    wire::write_f64_slice(w, buf)?;
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = File::open(path)
            .map_err(|e| Error::io(format!("opening checkpoint {}", path.display()), e))?;
        let mut r = BufReader::new(file);
        Self::read_from(&mut r)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Checkpoint> {
        wire::expect_magic(r, CHECKPOINT_MAGIC, "checkpoint")?;
        let version = wire::read_u32(r, "checkpoint version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})"
            )));
        }
        let phase = Phase::from_code(wire::read_u8(r, "checkpoint phase")?)?;
        let epoch = wire::read_u64(r, "checkpoint epoch")?;
        let config_json = wire::read_string(r, "checkpoint config")?;
        let count = wire::read_len(r, "parameter count")?;
        let mut params = ParamStore::new();
        let mut sizes = Vec::with_capacity(count);
        for _ in 0..count {
            let name = wire::read_string(r, "parameter name")?;
            let rank = wire::read_len(r, "parameter rank")?;
            if rank == 0 || rank > 3 {
                return Err(Error::Format(format!(
                    "parameter '{name}' has implausible rank {rank}"
                )));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(wire::read_len(r, "parameter dimension")?);
            }
            let numel: usize = shape.iter().product();
            if numel == 0 || numel as u64 > wire::MAX_LEN {
                return Err(Error::Format(format!(
                    "parameter '{name}' has implausible element count {numel}"
                )));
            }
            let data = wire::read_f64_vec(r, numel, "parameter data")?;
            let tensor = Tensor::new(&shape, data).map_err(|e| {
                Error::Format(format!("parameter '{name}' is not a valid tensor: {e}"))
            })?;
            sizes.push(tensor.numel());
            params.insert(name, tensor)?;
        }
        let adam = match wire::read_u8(r, "optimizer flag")? {
            0 => None,
            1 => {
                let step = wire::read_u64(r, "optimizer step")?;
                let mut m = Vec::with_capacity(count);
                for &n in &sizes {
                    m.push(wire::read_f64_vec(r, n, "optimizer first moments")?);
                }
                let mut v = Vec::with_capacity(count);
                for &n in &sizes {
                    v.push(wire::read_f64_vec(r, n, "optimizer second moments")?);
                }
                Some(AdamState { step, m, v })
            }
            other => {
                return Err(Error::Format(format!(
                    "optimizer flag must be 0 or 1, got {other}"
                )))
            }
        };
        let mut trailing = [0u8; 1];
        match r.read(&mut trailing) {
            Ok(0) => {}
            Ok(_) => {
                return Err(Error::Format(
                    "checkpoint has trailing bytes after the optimizer section".into(),
                ))
            }
            Err(e) => return Err(Error::io("checking checkpoint end", e)),
        }
        Ok(Checkpoint {
            phase,
            epoch,
            config_json,
            params,
            adam,
        })
    }
}

//! Binary checkpoint format.
//!
//! ```text
//! "KLCE"                magic, 4 bytes
//! version               u32 LE (currently 1)
//! stage                 u8: 0 = decom, 1 = restore, 2 = illum
//! tensor count          u32 LE
//! per tensor, names in sorted order:
//!   name length         u32 LE
//!   name                UTF-8 bytes
//!   rank                u32 LE
//!   extents             rank × u32 LE
//!   payload             product(extents) × f32 LE
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::{ConvSpec, Params};
use crate::{curve, decomposition, restoration};

pub const MAGIC: &[u8; 4] = b"KLCE";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Decom,
    Restore,
    Illum,
}

impl Stage {
    pub fn tag(self) -> u8 {
        match self {
            Stage::Decom => 0,
            Stage::Restore => 1,
            Stage::Illum => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Stage::Decom),
            1 => Ok(Stage::Restore),
            2 => Ok(Stage::Illum),
            t => Err(Error::Parse(format!("unknown stage tag {t}"))),
        }
    }

    pub fn layers(self) -> Vec<ConvSpec> {
        match self {
            Stage::Decom => decomposition::layers(),
            Stage::Restore => restoration::layers(),
            Stage::Illum => curve::layers(),
        }
    }

    pub fn init_params(self, seed: u64) -> Params<f32> {
        Params::init(&self.layers(), seed)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Decom => "decom",
            Stage::Restore => "restore",
            Stage::Illum => "illum",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decom" => Ok(Stage::Decom),
            "restore" => Ok(Stage::Restore),
            "illum" => Ok(Stage::Illum),
            other => Err(Error::InvalidArgument(format!(
                "unknown stage {other:?} (expected decom, restore or illum)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub params: Params<f32>,
}

impl Checkpoint {
    pub fn new(stage: Stage, params: Params<f32>) -> Self {
        Self { stage, params }
    }

    /// Fails unless the checkpoint belongs to `stage` and matches its architecture.
    pub fn expect_stage(&self, stage: Stage) -> Result<&Params<f32>> {
        if self.stage != stage {
            return Err(Error::Dependency(format!(
                "expected a {stage} checkpoint, got {}",
                self.stage
            )));
        }
        self.params.validate(&stage.layers())?;
        Ok(&self.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(self.stage.tag());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Parse("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let stage = Stage::from_tag(r.take(1)?[0])?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Parse("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n * 4)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::Parse(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse("trailing bytes after last tensor".into()));
        }
        Ok(Self {
            stage,
            params: Params::from_map(tensors),
        })
    }
}

pub fn save_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, c.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
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
            .ok_or_else(|| Error::Parse("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

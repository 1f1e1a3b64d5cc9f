//! Versioned binary snapshot container.
//!
//! ```text
//! b"KAGSNAP\0" | version u32 | h u32 | seed u64 | epoch u32 | regime u8
//! then W0, b0, W1, b1, W_out, b_out as little-endian f64, row-major
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{MlpParams, INPUT_DIM};
use crate::error::{Error, Result};
use crate::mnist::NUM_CLASSES;

const MAGIC: &[u8; 8] = b"KAGSNAP\0";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 8 + 4 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Standard,
    Augmented,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Standard => "standard",
            Regime::Augmented => "augmented",
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Regime::Standard),
            "augmented" => Ok(Regime::Augmented),
            other => Err(Error::InvalidArgument(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub params: MlpParams,
    pub epoch: usize,
    pub seed: u64,
    pub regime: Regime,
}

impl ModelSnapshot {
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let h = p.hidden_dim();
        let floats = h * INPUT_DIM + h + h * h + h + NUM_CLASSES * h + NUM_CLASSES;
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(h as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.epoch as u32).to_le_bytes());
        out.push(match self.regime {
            Regime::Standard => 0,
            Regime::Augmented => 1,
        });
        let put = |out: &mut Vec<u8>, v: &f64| out.extend_from_slice(&v.to_le_bytes());
        p.w0.iter().for_each(|v| put(&mut out, v));
        p.b0.iter().for_each(|v| put(&mut out, v));
        p.w1.iter().for_each(|v| put(&mut out, v));
        p.b1.iter().for_each(|v| put(&mut out, v));
        p.w_out.iter().for_each(|v| put(&mut out, v));
        p.b_out.iter().for_each(|v| put(&mut out, v));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Snapshot(m.to_string());
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(err("missing snapshot magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != VERSION {
            return Err(Error::Snapshot(format!("unsupported version {version}")));
        }
        let h = u32_at(12) as usize;
        let seed = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let epoch = u32_at(24) as usize;
        let regime = match bytes[28] {
            0 => Regime::Standard,
            1 => Regime::Augmented,
            _ => return Err(err("bad regime tag")),
        };
        if h == 0 {
            return Err(err("zero hidden dimension"));
        }
        let floats = h * INPUT_DIM + h + h * h + h + NUM_CLASSES * h + NUM_CLASSES;
        if bytes.len() != HEADER_LEN + 8 * floats {
            return Err(Error::Snapshot(format!(
                "expected {} bytes for h={h}, found {}",
                HEADER_LEN + 8 * floats,
                bytes.len()
            )));
        }
        let mut values = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };
        let mat = |v: Vec<f64>, r, c| Array2::from_shape_vec((r, c), v).expect("sized");
        let w0 = mat(take(h * INPUT_DIM), h, INPUT_DIM);
        let b0 = Array1::from(take(h));
        let w1 = mat(take(h * h), h, h);
        let b1 = Array1::from(take(h));
        let w_out = mat(take(NUM_CLASSES * h), NUM_CLASSES, h);
        let b_out = Array1::from(take(NUM_CLASSES));
        Ok(ModelSnapshot {
            params: MlpParams {
                w0,
                b0,
                w1,
                b1,
                w_out,
                b_out,
            },
            epoch,
            seed,
            regime,
        })
    }
}

/// Writes the snapshot and returns the SHA-256 of its bytes.
pub fn write_snapshot(path: impl AsRef<Path>, snapshot: &ModelSnapshot) -> Result<String> {
    let path = path.as_ref();
    let bytes = snapshot.to_bytes();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(snapshot_digest(&bytes))
}

pub fn read_snapshot(path: impl AsRef<Path>) -> Result<(ModelSnapshot, String)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok((ModelSnapshot::from_bytes(&bytes)?, snapshot_digest(&bytes)))
}

pub fn snapshot_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

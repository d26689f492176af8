//! `.moef` binary model files.
//!
//! Layout (all little-endian):
//!
//! | offset | size | field                 |
//! |--------|------|-----------------------|
//! | 0      | 4    | magic `MOEF`          |
//! | 4      | 4    | version (u32, = 1)    |
//! | 8      | 4    | d_model (u32)         |
//! | 12     | 4    | d_ff (u32)            |
//! | 16     | ..   | w1, b1, w2, b2 as f64 |
//!
//! Matrices are row-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::FfnWeights;

pub const MAGIC: &[u8; 4] = b"MOEF";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn expected_len(d_model: usize, d_ff: usize) -> usize {
    HEADER_LEN + 8 * (2 * d_model * d_ff + d_ff + d_model)
}

pub fn encode_model(w: &FfnWeights) -> Vec<u8> {
    let mut out = Vec::with_capacity(expected_len(w.d_model, w.d_ff));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(w.d_model as u32).to_le_bytes());
    out.extend_from_slice(&(w.d_ff as u32).to_le_bytes());
    for v in w.to_flat() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn decode_model(bytes: &[u8]) -> Result<FfnWeights> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format {
            field: "header",
            detail: format!("need {HEADER_LEN} header bytes, file has {}", bytes.len()),
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format {
            field: "magic",
            detail: format!(
                "expected \"MOEF\", found {:?}",
                String::from_utf8_lossy(&bytes[0..4])
            ),
        });
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(Error::Format {
            field: "version",
            detail: format!("expected {VERSION}, found {version}"),
        });
    }
    let d_model = read_u32(bytes, 8) as usize;
    let d_ff = read_u32(bytes, 12) as usize;
    if d_ff == 0 {
        return Err(Error::Format {
            field: "d_ff",
            detail: "must be at least 1".into(),
        });
    }
    let want = expected_len(d_model, d_ff);
    if bytes.len() != want {
        return Err(Error::Format {
            field: "length",
            detail: format!(
                "expected {want} bytes for d_model={d_model}, d_ff={d_ff}, found {}",
                bytes.len()
            ),
        });
    }
    let flat: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FfnWeights::from_flat(d_model, d_ff, &flat)
}

pub fn save_model(w: &FfnWeights, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_model(w))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<FfnWeights> {
    decode_model(&fs::read(path)?)
}

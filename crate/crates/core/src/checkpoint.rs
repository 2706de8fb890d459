//! Binary checkpoint: fixed header followed by the raw parameters.
//!
//! ```text
//! magic      8 bytes  "CESCKPT\0"
//! version    u32
//! arch       u32      0 = linear, 1 = hidden
//! units      u32
//! vocab      u32
//! window     u32
//! buckets    u32
//! max_len    u32
//! vocab fp   u64
//! temp       f64
//! count      u64
//! weights    count × f64
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use crate::error::{CesError, Result};
use crate::policy::{Architecture, FeatureMap, PolicyParams, Vocabulary};
use crate::Params;

const MAGIC: &[u8; 8] = b"CESCKPT\0";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 * 7 + 8 + 8 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Params,
    pub fmap: FeatureMap,
    pub vocab_fingerprint: u64,
}

fn header_err(msg: impl Into<String>) -> CesError {
    CesError::Checkpoint(format!("header: {}", msg.into()))
}

pub fn encode(params: &Params, fmap: &FeatureMap, vocab: &Vocabulary) -> Vec<u8> {
    let (arch, units) = match params.arch() {
        Architecture::Linear => (0u32, 0u32),
        Architecture::Hidden { units } => (1, units as u32),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * params.len());
    out.extend_from_slice(MAGIC);
    for x in [
        VERSION,
        arch,
        units,
        fmap.vocab_size as u32,
        fmap.window as u32,
        fmap.buckets as u32,
        fmap.max_len as u32,
    ] {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.extend_from_slice(&vocab.fingerprint().to_le_bytes());
    out.extend_from_slice(&params.temperature().to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for w in &params.weights {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], vocab: &Vocabulary) -> Result<Checkpoint> {
    if bytes.len() < HEADER_LEN {
        return Err(header_err(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(header_err("bad magic"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
    let version = u32_at(0);
    if version != VERSION {
        return Err(header_err(format!("unsupported version {version}")));
    }
    let arch = match (u32_at(1), u32_at(2)) {
        (0, _) => Architecture::Linear,
        (1, u) if u > 0 => Architecture::Hidden { units: u as usize },
        (a, u) => return Err(header_err(format!("unknown architecture tag {a} (units {u})"))),
    };
    let (vocab_size, window, buckets, max_len) =
        (u32_at(3) as usize, u32_at(4) as usize, u32_at(5) as usize, u32_at(6) as usize);
    if vocab_size != vocab.size() || window == 0 || buckets == 0 || max_len == 0 {
        return Err(header_err(format!(
            "dims vocab={vocab_size} window={window} buckets={buckets} max_len={max_len} are invalid for a vocabulary of {}",
            vocab.size()
        )));
    }
    let mut off = 8 + 4 * 7;
    let read8 = |off: usize| -> [u8; 8] { bytes[off..off + 8].try_into().unwrap() };
    let fingerprint = u64::from_le_bytes(read8(off));
    off += 8;
    if fingerprint != vocab.fingerprint() {
        return Err(header_err(format!(
            "vocabulary fingerprint {fingerprint:#018x} does not match {:#018x}",
            vocab.fingerprint()
        )));
    }
    let temperature = f64::from_le_bytes(read8(off));
    off += 8;
    let count = u64::from_le_bytes(read8(off)) as usize;
    off += 8;
    let fmap = FeatureMap::new(vocab_size, window, buckets, max_len);
    let expected = arch.param_count(vocab_size, fmap.dim());
    if count != expected {
        return Err(header_err(format!("parameter count {count}, architecture needs {expected}")));
    }
    if bytes.len() != off + 8 * count {
        return Err(CesError::Checkpoint(format!(
            "body: expected {} bytes of parameters, found {}",
            8 * count,
            bytes.len() - off
        )));
    }
    let weights = bytes[off..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = PolicyParams::from_weights(arch, vocab_size, fmap.dim(), weights, temperature)
        .map_err(|e| CesError::Checkpoint(e.to_string()))?;
    Ok(Checkpoint {
        params,
        fmap,
        vocab_fingerprint: fingerprint,
    })
}

pub fn save(path: &Path, params: &Params, fmap: &FeatureMap, vocab: &Vocabulary) -> Result<()> {
    std::fs::write(path, encode(params, fmap, vocab)).map_err(|e| CesError::io(path, e))
}

pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| CesError::io(path, e))?;
    decode(&bytes, vocab)
}

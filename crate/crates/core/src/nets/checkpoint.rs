//! Binary checkpoint container.
//!
//! Layout: 8-byte magic `CDPCKPT1`, little-endian `u64` header length, a
//! JSON header, then the parameter vector and the two AdamW moment vectors
//! as little-endian `f64`. Moment vectors may be empty.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{DenoiserConfig, DenoiserModel, Level};
use super::train::{OptimConfig, TrainState};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CDPCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    level: Level,
    config: DenoiserConfig,
    optim: OptimConfig,
    step: usize,
    seed: u64,
    n_params: usize,
    n_moments: usize,
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn write_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes parameters, optimizer moments and bookkeeping.
pub fn to_bytes(state: &TrainState) -> Vec<u8> {
    let header = Header {
        level: state.model.config.level,
        config: state.model.config.clone(),
        optim: state.optim.clone(),
        step: state.step,
        seed: state.seed,
        n_params: state.model.params.len(),
        n_moments: state.m.len(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * (header.n_params + 2 * header.n_moments));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    write_f64s(&mut out, &state.model.params);
    write_f64s(&mut out, &state.m);
    write_f64s(&mut out, &state.v);
    out
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<TrainState> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| malformed(path, "truncated magic"))?;
    if &magic != MAGIC {
        return Err(malformed(path, "bad magic"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| malformed(path, "truncated header length"))?;
    let len = u64::from_le_bytes(len) as usize;
    if r.len() < len {
        return Err(malformed(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&r[..len]).map_err(|e| malformed(path, e.to_string()))?;
    r = &r[len..];
    if header.level != header.config.level {
        return Err(malformed(path, "level tag disagrees with config"));
    }
    if header.n_moments != 0 && header.n_moments != header.n_params {
        return Err(malformed(path, "moment vectors must be empty or match the parameters"));
    }
    let need = 8 * (header.n_params + 2 * header.n_moments);
    if r.len() != need {
        return Err(malformed(path, format!("expected {need} payload bytes, found {}", r.len())));
    }
    let mut take = |n: usize| -> Vec<f64> {
        let (head, tail) = r.split_at(8 * n);
        r = tail;
        head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
    };
    let params = take(header.n_params);
    let m = take(header.n_moments);
    let v = take(header.n_moments);
    let model = DenoiserModel::from_params(header.config, params).map_err(|e| malformed(path, e.to_string()))?;
    let n = model.params.len();
    Ok(TrainState {
        model,
        optim: header.optim,
        m: if m.is_empty() { vec![0.0; n] } else { m },
        v: if v.is_empty() { vec![0.0; n] } else { v },
        step: header.step,
        seed: header.seed,
    })
}

/// Writes atomically via a temporary sibling file.
pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&to_bytes(state))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let model = DenoiserModel::new(DenoiserConfig::low().with_seed(9)).unwrap();
        let mut state = TrainState::new(model, OptimConfig::for_level(Level::Low, 100), 5);
        state.step = 17;
        state.m[3] = 0.25;
        state.v[4] = f64::MIN_POSITIVE;
        let bytes = to_bytes(&state);
        let back = from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.model.params, state.model.params);
        assert_eq!(back.m, state.m);
        assert_eq!(back.v, state.v);
        assert_eq!((back.step, back.seed), (17, 5));
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let model = DenoiserModel::new(DenoiserConfig::low()).unwrap();
        let bytes = to_bytes(&TrainState::new(model, OptimConfig::for_level(Level::Low, 1), 0));
        let p = Path::new("mem");
        assert!(from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad, p).is_err());
        assert!(from_bytes(&[], p).is_err());
    }
}

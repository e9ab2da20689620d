//! Binary model checkpoints plus a JSON metadata sidecar.
//!
//! Layout, all integers and floats little-endian:
//! `CISTCKPT`, `u32` version, `u32` number of dims, one `u64` per dim,
//! then every parameter as `f64` in [`Mlp::params_flat`] order.

use std::fs;
use std::path::{Path, PathBuf};

use cist_core::model::{Linear, Mlp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CISTCKPT";
pub const VERSION: u32 = 1;

/// Human-readable companion of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub role: String,
    pub method: String,
    pub dims: Vec<usize>,
    pub seed: u64,
    /// Epoch whose parameters were kept (best validation accuracy).
    pub epoch: usize,
    pub config_hash: String,
}

pub fn meta_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

pub fn encode(model: &Mlp) -> Vec<u8> {
    let dims = model.dims();
    let params = model.params_flat();
    let mut out = Vec::with_capacity(16 + 8 * dims.len() + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Mlp> {
    let bad = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        line: 0,
        column: 0,
        offset: offset as u64,
        message,
    };
    let take = |at: usize, n: usize| {
        bytes
            .get(at..at + n)
            .ok_or_else(|| bad(at, format!("truncated checkpoint, needed {n} bytes")))
    };
    if take(0, 8)? != MAGIC {
        return Err(bad(0, "not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(8, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(8, format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(take(12, 4)?.try_into().expect("4 bytes")) as usize;
    if count < 2 {
        return Err(bad(12, format!("need at least two layer dims, found {count}")));
    }
    let mut at = 16;
    let mut dims = Vec::with_capacity(count);
    for _ in 0..count {
        let d = u64::from_le_bytes(take(at, 8)?.try_into().expect("8 bytes"));
        if d == 0 || d > u32::MAX as u64 {
            return Err(bad(at, format!("invalid layer width {d}")));
        }
        dims.push(d as usize);
        at += 8;
    }
    let layers: Vec<Linear> = dims.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect();
    let mut model = Mlp::from_layers(layers)?;
    let expected = model.num_params() * 8;
    if bytes.len() - at != expected {
        return Err(bad(
            at,
            format!("expected {expected} parameter bytes, found {}", bytes.len() - at),
        ));
    }
    let params: Vec<f64> = bytes[at..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if let Some(k) = params.iter().position(|p| !p.is_finite()) {
        return Err(bad(at + 8 * k, "non-finite parameter".into()));
    }
    model.set_params_flat(&params)?;
    Ok(model)
}

pub fn save(path: &Path, model: &Mlp, meta: &CheckpointMeta) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| Error::io(path, e))?;
    let meta_file = meta_path(path);
    let mut text = serde_json::to_string_pretty(meta).expect("metadata serializes");
    text.push('\n');
    fs::write(&meta_file, text).map_err(|e| Error::io(&meta_file, e))
}

pub fn load(path: &Path) -> Result<Mlp> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cist_core::seed;

    #[test]
    fn round_trip_is_bitwise() {
        let mut rng = seed::stream(4, "ckpt");
        let m = Mlp::new(&[3, 5, 4], &mut rng).unwrap();
        let back = decode(Path::new("m"), &encode(&m)).unwrap();
        assert_eq!(back.dims(), m.dims());
        assert_eq!(
            back.params_flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            m.params_flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn header_layout() {
        let m = Mlp::from_layers(vec![Linear::zeros(2, 3)]).unwrap();
        let b = encode(&m);
        assert_eq!(&b[..8], b"CISTCKPT");
        assert_eq!(&b[8..12], &[1, 0, 0, 0]);
        assert_eq!(&b[12..16], &[2, 0, 0, 0]);
        assert_eq!(&b[16..24], &[2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(b.len(), 16 + 16 + 9 * 8);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = Mlp::from_layers(vec![Linear::zeros(2, 3)]).unwrap();
        let good = encode(&m);
        let p = Path::new("m");
        assert!(decode(p, &good[..good.len() - 1]).is_err());
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(decode(p, &magic).is_err());
        let mut version = good.clone();
        version[8] = 9;
        assert!(decode(p, &version).is_err());
        let mut nan = good;
        let last = nan.len() - 8;
        nan[last..].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode(p, &nan), Err(Error::Format { .. })));
    }
}

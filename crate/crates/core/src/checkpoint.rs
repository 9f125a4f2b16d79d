//! Binary checkpoints for trained heads, little-endian.
//!
//! A D→D→k clustering head is stored as magic `SPCH`, version u32, d u32,
//! k u32, then every parameter as f64 in [`Mlp`] order. Any other shape
//! uses `SPMH`: version u32, layer count L u32, L+1 widths as u32, then
//! the parameters.

use std::fs;
use std::path::Path;

use crate::data::Cursor;
use crate::error::{Result, SpiceError};
use crate::head::Mlp;

pub const HEAD_MAGIC: &[u8; 4] = b"SPCH";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPMH";
pub const CHECKPOINT_VERSION: u32 = 1;

fn is_cluster_head(dims: &[usize]) -> bool {
    dims.len() == 3 && dims[0] == dims[1]
}

pub fn encode_checkpoint(model: &Mlp) -> Vec<u8> {
    let dims = model.dims();
    let mut out = Vec::with_capacity(16 + dims.len() * 4 + model.params().len() * 8);
    if is_cluster_head(dims) {
        out.extend_from_slice(HEAD_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(dims[0] as u32).to_le_bytes());
        out.extend_from_slice(&(dims[2] as u32).to_le_bytes());
    } else {
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&((dims.len() - 1) as u32).to_le_bytes());
        for &d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for &p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Mlp> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    let head = magic == HEAD_MAGIC;
    if !head && magic != CHECKPOINT_MAGIC {
        return Err(SpiceError::BinaryParse {
            offset: 0,
            msg: "bad magic".into(),
        });
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(SpiceError::BinaryParse {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let dims = if head {
        let d = cur.u32("d")? as usize;
        let k = cur.u32("k")? as usize;
        vec![d, d, k]
    } else {
        let layers = cur.u32("layer count")? as usize;
        if layers == 0 || layers > 64 {
            return Err(SpiceError::BinaryParse {
                offset: 8,
                msg: format!("implausible layer count {layers}"),
            });
        }
        let mut dims = Vec::with_capacity(layers + 1);
        for _ in 0..=layers {
            dims.push(cur.u32("layer width")? as usize);
        }
        dims
    };
    let bytes_needed = dims
        .windows(2)
        .try_fold(0usize, |acc, w| {
            w[0].checked_mul(w[1])?.checked_add(w[1])?.checked_add(acc)
        })
        .and_then(|count| count.checked_mul(8))
        .ok_or_else(|| SpiceError::BinaryParse {
            offset: cur.pos as u64,
            msg: "layer widths overflow".into(),
        })?;
    let start = cur.pos;
    let raw = cur.take(bytes_needed, "parameters")?;
    let params: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = params.iter().position(|p| !p.is_finite()) {
        return Err(SpiceError::BinaryParse {
            offset: (start + 8 * i) as u64,
            msg: "non-finite parameter".into(),
        });
    }
    if cur.pos != bytes.len() {
        return Err(SpiceError::BinaryParse {
            offset: cur.pos as u64,
            msg: format!("{} trailing bytes", bytes.len() - cur.pos),
        });
    }
    Mlp::from_params(&dims, params)
}

pub fn save_checkpoint(model: &Mlp, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Mlp> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::{init_head, init_semi_head};
    use crate::numeric::RngState;

    #[test]
    fn round_trip_is_exact() {
        let mut rng = RngState::new(3);
        let model = init_semi_head(5, 7, 3, &mut rng).unwrap();
        let back = decode_checkpoint(&encode_checkpoint(&model)).unwrap();
        assert_eq!(back.dims(), model.dims());
        assert_eq!(back.params(), model.params());
    }

    #[test]
    fn cluster_heads_use_the_compact_header() {
        let mut rng = RngState::new(4);
        let model = init_head(3, 2, &mut rng).unwrap();
        let bytes = encode_checkpoint(&model);
        assert_eq!(&bytes[..16], b"SPCH\x01\0\0\0\x03\0\0\0\x02\0\0\0");
        assert_eq!(bytes.len(), 16 + 8 * (3 * 3 + 3 + 3 * 2 + 2));
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.dims(), &[3, 3, 2]);
        assert_eq!(back.params(), model.params());
    }

    #[test]
    fn truncation_is_reported() {
        let mut rng = RngState::new(3);
        let model = init_semi_head(4, 4, 2, &mut rng).unwrap();
        let bytes = encode_checkpoint(&model);
        let err = decode_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn huge_widths_do_not_overflow() {
        let mut bytes = b"SPCH\x01\0\0\0".to_vec();
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_checkpoint(&bytes).is_err());
    }

    #[test]
    fn foreign_magic_is_rejected() {
        assert!(decode_checkpoint(b"SPCE\x01\x00\x00\x00").is_err());
    }
}

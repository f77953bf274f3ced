use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VOLUME_MAGIC: &[u8; 4] = b"LVOL";
pub const VOLUME_VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 12;

/// `LVOL` bytes for a `[D, H, W]` or `[1, D, H, W]` volume.
pub fn encode_volume(volume: &Tensor) -> Result<Vec<u8>> {
    let s = volume.shape();
    let extents = match s {
        [d, h, w] | [1, d, h, w] => [*d, *h, *w],
        _ => {
            return Err(Error::shape(
                "write_volume",
                format!("expected [1, D, H, W], got {s:?}"),
            ))
        }
    };
    let mut out = Vec::with_capacity(HEADER + 4 * volume.len());
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    for e in extents {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in volume.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses `LVOL` bytes into a `[1, D, H, W]` tensor.
pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let truncated = |needed| Error::Truncated {
        path: path.to_path_buf(),
        needed,
        found: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(HEADER));
    }
    if &bytes[..4] != VOLUME_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "LVOL",
        });
    }
    if bytes.len() < HEADER {
        return Err(truncated(HEADER));
    }
    let word =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let version = word(0);
    if version != VOLUME_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let extents = [word(1) as usize, word(2) as usize, word(3) as usize];
    if extents.contains(&0) {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            detail: format!("zero extent in {extents:?}"),
        });
    }
    let n = extents
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Malformed {
            path: path.to_path_buf(),
            detail: format!("extents {extents:?} overflow"),
        })?;
    let needed = HEADER + n;
    if bytes.len() < needed {
        return Err(truncated(needed));
    }
    if bytes.len() > needed {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            detail: format!("{} trailing bytes", bytes.len() - needed),
        });
    }
    let data = bytes[HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(vec![1, extents[0], extents[1], extents[2]], data)
}

pub fn write_volume(path: &Path, volume: &Tensor) -> Result<()> {
    std::fs::write(path, encode_volume(volume)?).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes, path)
}

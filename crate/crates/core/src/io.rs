//! Fixture and artifact file formats.
//!
//! ST1 tensor layout (all little-endian):
//!
//! | offset | size      | content                          |
//! |--------|-----------|----------------------------------|
//! | 0      | 12        | magic `ST1-TENSOR\0\0`           |
//! | 12     | 4         | format version (`u32`, = 1)      |
//! | 16     | 12        | `H`, `W`, `C` as `u32`           |
//! | 28     | 8·H·W·C   | `f64` values in `(y, x, c)` order |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tensor2, Tensor3};

pub const ST1_MAGIC: [u8; 12] = *b"ST1-TENSOR\0\0";
pub const ST1_VERSION: u32 = 1;
const HEADER_LEN: usize = 28;

pub fn encode_st1(t: &Tensor3) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * t.data().len());
    buf.extend_from_slice(&ST1_MAGIC);
    buf.extend_from_slice(&ST1_VERSION.to_le_bytes());
    for d in [t.h(), t.w(), t.c()] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

pub fn decode_st1(bytes: &[u8]) -> Result<Tensor3> {
    let bad = |msg: String| Error::Format { what: "ST1 tensor", msg };
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[..12] != ST1_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = read_u32(bytes, 12);
    if version != ST1_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let (h, w, c) = (
        read_u32(bytes, 16) as usize,
        read_u32(bytes, 20) as usize,
        read_u32(bytes, 24) as usize,
    );
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| bad("dimension overflow".into()))?;
    if bytes.len() != HEADER_LEN + 8 * n {
        return Err(bad(format!(
            "{h}x{w}x{c} needs {} payload bytes, found {}",
            8 * n,
            bytes.len() - HEADER_LEN
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    Tensor3::from_vec(h, w, c, data).map_err(|e| bad(e.to_string()))
}

pub fn write_st1(path: impl AsRef<Path>, t: &Tensor3) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_st1(t)).map_err(|e| Error::io(path, e))
}

pub fn read_st1(path: impl AsRef<Path>) -> Result<Tensor3> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_st1(&bytes)
}

/// Binary greymap (P5), values clamped to `[0, 1]` and scaled by 255.
pub fn encode_pgm(map: &Tensor2) -> Vec<u8> {
    let mut buf = format!("P5\n{} {}\n255\n", map.w(), map.h()).into_bytes();
    buf.extend(map.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    buf
}

pub fn write_pgm(path: impl AsRef<Path>, map: &Tensor2) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_pgm(map)).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor3::from_vec(1, 2, 1, vec![1.5, -2.0]).unwrap();
        let b = encode_st1(&t);
        assert_eq!(b.len(), 28 + 16);
        assert_eq!(&b[..12], b"ST1-TENSOR\0\0");
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..28], &[1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[28..36], &1.5f64.to_le_bytes());
    }

    #[test]
    fn rejects_truncated_and_foreign_files() {
        let t = Tensor3::zeros(2, 2, 2);
        let b = encode_st1(&t);
        assert!(decode_st1(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_st1(&bad).is_err());
        let mut v2 = b;
        v2[12] = 2;
        assert!(decode_st1(&v2).is_err());
    }

    #[test]
    fn pgm_scales_and_clamps() {
        let m = Tensor2::from_vec(1, 3, vec![-1.0, 0.5, 2.0]).unwrap();
        let b = encode_pgm(&m);
        assert!(b.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(&b[b.len() - 3..], &[0, 128, 255]);
    }

    proptest! {
        #[test]
        fn st1_roundtrip_is_bit_exact(h in 1usize..5, w in 1usize..5, c in 1usize..4, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor3::from_fn(h, w, c, |_, _, _| rng.gen::<f64>() * 1e6 - 5e5);
            let back = decode_st1(&encode_st1(&t)).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}

//! `MMT1` tensor files: the magic `MMT1`, then `u32` little-endian height,
//! width and channels, then the row-major `f32` little-endian payload.

use std::fs;
use std::path::Path;

use super::ImageTensor;
use crate::error::{Error, Result};

pub const MMT_MAGIC: &[u8; 4] = b"MMT1";
const HEADER_LEN: usize = 16;

pub fn encode_mmt(t: &ImageTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.len());
    out.extend_from_slice(MMT_MAGIC);
    for dim in [t.height(), t.width(), t.channels()] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "MMT1 tensor",
        detail: detail.into(),
    }
}

pub fn decode_mmt(bytes: &[u8]) -> Result<ImageTensor> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MMT_MAGIC {
        return Err(format_err(format!("bad magic {:?}", &bytes[..4])));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let count = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| format_err("dimension overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != count * 4 {
        return Err(format_err(format!(
            "payload is {} bytes, expected {} for {h}x{w}x{c}",
            payload.len(),
            count * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    ImageTensor::new(h, w, c, data)
}

pub fn write_mmt(path: impl AsRef<Path>, t: &ImageTensor) -> Result<()> {
    fs::write(path, encode_mmt(t))?;
    Ok(())
}

pub fn read_mmt(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode_mmt(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = ImageTensor::new(1, 2, 1, vec![1.0, -2.5]).unwrap();
        let bytes = encode_mmt(&t);
        assert_eq!(&bytes[..4], b"MMT1");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[1, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 24);
    }

    #[test]
    fn corrupt_and_truncated() {
        let t = ImageTensor::filled(2, 2, 1, 0.25);
        let mut bytes = encode_mmt(&t);
        bytes[0] = b'X';
        assert!(matches!(decode_mmt(&bytes), Err(Error::Format { .. })));
        let bytes = encode_mmt(&t);
        assert!(decode_mmt(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_mmt(&bytes[..10]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_bitwise(h in 1usize..6, w in 1usize..6, c in 1usize..4, seed in any::<u64>()) {
            let mut rng = crate::numerics::RngStream::new(seed, "mmt");
            let data = (0..h * w * c).map(|_| rng.uniform(-3.0, 3.0) as f32).collect();
            let t = ImageTensor::new(h, w, c, data).unwrap();
            let back = decode_mmt(&encode_mmt(&t)).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}

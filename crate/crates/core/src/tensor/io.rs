//! Binary tensor files.
//!
//! Layout: magic `ALFA`, version `u16` LE, rank `u16` LE, one `u32` LE per
//! extent, then the row-major payload as `f32` LE.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ALFA";
pub const VERSION: u16 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.shape().len() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.shape().len() as u16).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let take = |at: usize, n: usize| -> std::result::Result<&[u8], String> {
        bytes.get(at..at + n).ok_or_else(|| format!("truncated at byte {at}"))
    };
    if take(0, 4)? != MAGIC {
        return Err("bad magic".into());
    }
    let version = u16::from_le_bytes(take(4, 2)?.try_into().unwrap());
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let rank = u16::from_le_bytes(take(6, 2)?.try_into().unwrap()) as usize;
    let mut at = 8;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(take(at, 4)?.try_into().unwrap()) as usize);
        at += 4;
    }
    let n: usize = shape.iter().product();
    let payload = take(at, 4 * n)?;
    if bytes.len() != at + 4 * n {
        return Err(format!("{} trailing bytes", bytes.len() - at - 4 * n));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        msg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[0..4], b"ALFA");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(&b[6..8], &[2, 0]);
        assert_eq!(&b[8..12], &[2, 0, 0, 0]);
        assert_eq!(&b[12..16], &[3, 0, 0, 0]);
        assert_eq!(&b[16..20], &0.0f32.to_le_bytes());
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
        assert_eq!(&b[36..40], &5.5f32.to_le_bytes());
        assert_eq!(b.len(), 16 + 24);
        assert_eq!(decode(&b).unwrap(), t);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"NOPE").is_err());
        let mut b = encode(&Tensor::scalar(1.0));
        b.pop();
        assert!(decode(&b).unwrap_err().contains("truncated"));
        let mut b = encode(&Tensor::scalar(1.0));
        b.push(0);
        assert!(decode(&b).is_err());
    }
}

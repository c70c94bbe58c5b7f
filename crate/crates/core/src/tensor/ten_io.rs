//! `.ten` tensor file format.
//!
//! Layout: magic `TEN1`, one dtype byte (0 = f32), one rank byte,
//! `rank` little-endian u64 extents, then the row-major payload as
//! little-endian f32 values.

use super::Tensor;
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"TEN1";
pub const DTYPE_F32: u8 = 0;

/// Serialize an f32 tensor into the `.ten` byte layout.
pub fn encode(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + t.rank() * 8 + t.numel() * 4);
    out.extend_from_slice(MAGIC);
    out.push(DTYPE_F32);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decode a tensor from a `.ten` byte stream.
pub fn decode(r: &mut impl Read) -> Result<Tensor<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(fmt_io)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}, expected TEN1")));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head).map_err(fmt_io)?;
    if head[0] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {}", head[0])));
    }
    let rank = head[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut ext = [0u8; 8];
        r.read_exact(&mut ext).map_err(fmt_io)?;
        shape.push(u64::from_le_bytes(ext) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * 4];
    r.read_exact(&mut payload).map_err(fmt_io)?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::from_vec(shape, data)
}

fn fmt_io(e: std::io::Error) -> Error {
    Error::Format(format!("truncated .ten stream: {e}"))
}

pub fn write_file(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let bytes = encode(t);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_file(path: &Path) -> Result<Tensor<f32>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout_is_documented_format() {
        let t = Tensor::from_vec(vec![2, 1], vec![1.0f32, -2.5]).unwrap();
        let bytes = encode(&t);
        assert_eq!(&bytes[..4], b"TEN1");
        assert_eq!(bytes[4], 0); // f32
        assert_eq!(bytes[5], 2); // rank
        assert_eq!(&bytes[6..14], &2u64.to_le_bytes());
        assert_eq!(&bytes[14..22], &1u64.to_le_bytes());
        assert_eq!(&bytes[22..26], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[26..30], &(-2.5f32).to_le_bytes());
        let back = decode(&mut &bytes[..]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn rejects_bad_magic_and_dtype() {
        let t = Tensor::from_vec(vec![1], vec![0.0f32]).unwrap();
        let mut bytes = encode(&t);
        bytes[0] = b'X';
        assert!(decode(&mut &bytes[..]).is_err());
        let mut bytes = encode(&t);
        bytes[4] = 7;
        assert!(decode(&mut &bytes[..]).is_err());
    }
}

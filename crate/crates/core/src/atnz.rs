//! "ATNZ v1" tensor files: the magic `ATNZ`, a little-endian `u32` rank,
//! `rank` little-endian `u64` extents, then the row-major elements as
//! little-endian `f32`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"ATNZ";

pub fn encode<S: Scalar>(t: &Tensor<S>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 8 * t.rank() + 4 * t.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    buf
}

pub fn decode<S: Scalar>(mut bytes: &[u8]) -> Result<Tensor<S>> {
    let mut magic = [0u8; 4];
    bytes.read_exact(&mut magic).map_err(|_| Error::Format("truncated header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    bytes.read_exact(&mut word).map_err(|_| Error::Format("truncated rank".into()))?;
    let rank = u32::from_le_bytes(word) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut ext = [0u8; 8];
        bytes.read_exact(&mut ext).map_err(|_| Error::Format("truncated extents".into()))?;
        shape.push(usize::try_from(u64::from_le_bytes(ext)).map_err(|_| Error::Format("extent overflow".into()))?);
    }
    let n: usize = shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(Error::Format(format!("expected {} payload bytes, found {}", 4 * n, bytes.len())));
    }
    let data = bytes.chunks_exact(4).map(|c| S::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)).collect();
    Tensor::new(&shape, data)
}

pub fn write<S: Scalar>(path: impl AsRef<Path>, t: &Tensor<S>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}

pub fn read<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_f64(&[2, 1], &[1.5, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"ATNZ");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..16], &2u64.to_le_bytes());
        assert_eq!(&b[16..24], &1u64.to_le_bytes());
        assert_eq!(&b[24..28], &1.5f32.to_le_bytes());
        assert_eq!(b.len(), 32);
        assert_eq!(decode::<f32>(&b).unwrap(), t);
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(decode::<f32>(b"NOPE\0\0\0\0").is_err());
        let mut b = encode(&Tensor::<f32>::ones(&[3]));
        b.pop();
        assert!(decode::<f32>(&b).is_err());
    }
}

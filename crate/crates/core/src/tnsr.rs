//! The `TNSR` raw tensor file format.
//!
//! Layout: magic `TNSR`, u8 version (1), u8 dtype (0 = f32, 1 = f64),
//! u8 rank, `rank` little-endian u32 extents, then the row-major payload in
//! little-endian IEEE-754 of the declared dtype.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn native() -> Self {
        if cfg!(feature = "f32") {
            DType::F32
        } else {
            DType::F64
        }
    }
}

pub fn encode(t: &Tensor, dtype: DType) -> Vec<u8> {
    let width = if dtype == DType::F32 { 4 } else { 8 };
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + width * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype as u8);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        match dtype {
            DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&(v as f64).to_le_bytes()),
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut r = bytes;
    let mut head = [0u8; 7];
    r.read_exact(&mut head).map_err(|_| "truncated header")?;
    if &head[..4] != MAGIC {
        return Err("bad magic".into());
    }
    if head[4] != VERSION {
        return Err(format!("unsupported version {}", head[4]));
    }
    let width = match head[5] {
        0 => 4,
        1 => 8,
        other => return Err(format!("unknown dtype {other}")),
    };
    let rank = head[6] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| "truncated shape")?;
        shape.push(u32::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    if r.len() != n * width {
        return Err(format!(
            "payload has {} bytes, expected {}",
            r.len(),
            n * width
        ));
    }
    let data: Vec<Real> = r
        .chunks_exact(width)
        .map(|c| {
            if width == 4 {
                f32::from_le_bytes(c.try_into().unwrap()) as Real
            } else {
                f64::from_le_bytes(c.try_into().unwrap()) as Real
            }
        })
        .collect();
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(t, DType::native()))
        .map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::Parse {
        path: path.to_path_buf(),
        msg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let b = encode(&t, DType::F32);
        assert_eq!(&b[..7], b"TNSR\x01\x00\x02");
        assert_eq!(&b[7..11], &2u32.to_le_bytes());
        assert_eq!(&b[11..15], &1u32.to_le_bytes());
        assert_eq!(&b[15..19], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 23);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::ones(&[3]);
        let mut b = encode(&t, DType::F64);
        assert!(decode(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(decode(&b).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(shape in proptest::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<Real> = (0..n).map(|i| ((seed.wrapping_add(i as u64) % 1000) as Real) / 7.0).collect();
            let t = Tensor::new(shape, data).unwrap();
            prop_assert_eq!(decode(&encode(&t, DType::native())).unwrap(), t);
        }
    }
}

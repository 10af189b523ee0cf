//! Named-tensor checkpoint archive.
//!
//! Layout, little-endian: magic `AILM`, version u32, config length u64 and
//! UTF-8 config text, entry count u64, then per entry: name length u32,
//! name bytes, rank u32, dims as u64, float64 payload.

use std::io::{Read, Write};

use crate::error::{DiffError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AILM";
pub const VERSION: u32 = 1;

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub config: String,
    pub tensors: Vec<(String, Tensor<f64>)>,
}

pub fn write_archive<'a, F, W, I>(mut w: W, config: &str, tensors: I) -> Result<()>
where
    F: Scalar,
    W: Write,
    I: IntoIterator<Item = (&'a str, &'a Tensor<F>)>,
{
    let tensors: Vec<_> = tensors.into_iter().collect();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(config.len() as u64).to_le_bytes())?;
    w.write_all(config.as_bytes())?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read, len: usize, what: &str) -> Result<String> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| DiffError::Format(format!("{what} is not valid UTF-8")))
}

// Guards against corrupt length fields allocating absurd buffers.
const MAX_LEN: u64 = 1 << 34;

pub fn read_archive(mut r: impl Read) -> Result<Archive> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DiffError::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(DiffError::Format(format!("unsupported version {version}")));
    }
    let clen = read_u64(&mut r)?;
    if clen > MAX_LEN {
        return Err(DiffError::Format("config length out of range".into()));
    }
    let config = read_string(&mut r, clen as usize, "config")?;
    let count = read_u64(&mut r)?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let nlen = read_u32(&mut r)? as usize;
        let name = read_string(&mut r, nlen, "tensor name")?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 16 {
            return Err(DiffError::Format(format!("rank {rank} for `{name}`")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let numel: u64 = shape.iter().map(|&d| d as u64).product();
        if numel > MAX_LEN {
            return Err(DiffError::Format(format!("`{name}` too large")));
        }
        let mut buf = vec![0u8; numel as usize * 8];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    Ok(Archive { config, tensors })
}

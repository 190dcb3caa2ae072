//! Small binary container for kernels, noise maps and projections:
//! 4-byte magic, `u32` version, `u32` rank, `u32` dims, then raw
//! little-endian `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;

pub const MAGIC_KERNEL: [u8; 4] = *b"DMKN";
pub const MAGIC_NOISE: [u8; 4] = *b"DMNM";
pub const MAGIC_PCA: [u8; 4] = *b"DMPC";

pub fn write_array(path: impl AsRef<Path>, magic: [u8; 4], dims: &[usize], data: &[f32]) -> Result<()> {
    assert_eq!(dims.iter().product::<usize>(), data.len());
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(&magic)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_array(path: impl AsRef<Path>, magic: [u8; 4]) -> Result<(Vec<usize>, Vec<f32>)> {
    let path = path.as_ref();
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if m != magic {
        return Err(bad(format!(
            "magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("version {version}, expected {VERSION}")));
    }
    let rank = read_u32(&mut r)? as usize;
    if rank > 8 {
        return Err(bad(format!("rank {rank} too large")));
    }
    let dims: Vec<usize> = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<_>>()?;
    let n: usize = dims.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| bad(format!("truncated payload: {e}")))?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(bad("trailing bytes after payload".into()));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((dims, data))
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

//! Flat little-endian parameter file.
//!
//! ```text
//! magic  b"XTCK"        4 bytes
//! version u32           currently 1
//! count   u32           number of parameters
//! per parameter:
//!   name_len u32, name bytes (UTF-8)
//!   rank u32, dims u64 × rank
//!   values f64 × prod(dims)
//! ```

use std::io::{Read, Write};

use super::tensor::{ParamStore, Tensor};
use super::NumericError;

pub const MAGIC: &[u8; 4] = b"XTCK";
pub const VERSION: u32 = 1;

pub fn write_params<W: Write>(params: &ParamStore, mut w: W) -> Result<(), NumericError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (_, name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn to_bytes(params: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + params.numel() * 8);
    write_params(params, &mut buf).expect("writing to memory");
    buf
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NumericError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, NumericError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads a checkpoint into a fresh store (seed 0, insertion order preserved).
pub fn read_params<R: Read>(mut r: R) -> Result<ParamStore, NumericError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NumericError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(NumericError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new(0);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| NumericError::Checkpoint("non-UTF-8 name".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let dims = (0..rank)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = dims.iter().product();
        let mut data = vec![0.0; n];
        let mut b = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        store.insert(&name, Tensor::new(dims, data)?)?;
    }
    Ok(store)
}

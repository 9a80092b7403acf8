//! SDCK checkpoint files.
//!
//! Layout (little-endian): `"SDCK"`, `u16` version, `u32` header length,
//! JSON header, `u32` blob count, then per blob: `u32` name length, UTF-8
//! name, `u32` rank, rank x `u32` dims, `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SDCK";
pub const VERSION: u16 = 1;

fn bad(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(mut w: W, header: &serde_json::Value, params: &ParamStore<f32>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let json = serde_json::to_vec(header).map_err(|e| bad(e.to_string()))?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| bad(format!("unexpected end of stream reading {what}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(serde_json::Value, ParamStore<f32>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("unexpected end of stream reading magic"))?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut ver = [0u8; 2];
    r.read_exact(&mut ver).map_err(|_| bad("unexpected end of stream reading version"))?;
    let version = u16::from_le_bytes(ver);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let hlen = read_u32(&mut r, "header length")? as usize;
    let mut json = vec![0u8; hlen];
    r.read_exact(&mut json).map_err(|_| bad("unexpected end of stream reading header"))?;
    let header = serde_json::from_slice(&json).map_err(|e| bad(format!("header: {e}")))?;
    let count = read_u32(&mut r, "blob count")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let nlen = read_u32(&mut r, "name length")? as usize;
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name).map_err(|_| bad("unexpected end of stream reading name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("name is not UTF-8"))?;
        let rank = read_u32(&mut r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, "dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(|_| bad(format!("unexpected end of stream reading `{name}`")))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        params.insert(name, Tensor::new(&shape, data)?);
    }
    Ok((header, params))
}

pub fn save_checkpoint(path: &Path, header: &serde_json::Value, params: &ParamStore<f32>) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), header, params)
}

pub fn load_checkpoint(path: &Path) -> Result<(serde_json::Value, ParamStore<f32>)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

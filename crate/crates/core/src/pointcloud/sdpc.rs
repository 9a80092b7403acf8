//! SDPC binary cloud encoding: magic "SDPC", u16 version, u16 flags
//! (bit 0 = colors present), u32 count, then f32 xyz and optional f32 rgb,
//! all little-endian.

use std::io::{Read, Write};
use std::path::Path;

use super::PointCloud;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SDPC";
pub const VERSION: u16 = 1;
const FLAG_COLORS: u16 = 1;

pub fn encode(cloud: &PointCloud) -> Vec<u8> {
    let n = cloud.len();
    let colors = cloud.colors();
    let mut out = Vec::with_capacity(12 + n * 12 * if colors.is_some() { 2 } else { 1 });
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(if colors.is_some() { FLAG_COLORS } else { 0 }).to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    for p in cloud.points() {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    if let Some(colors) = colors {
        for c in colors {
            for v in c {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize, field: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("unexpected end of stream reading {field}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f32s(&mut self, count: usize, field: &str) -> Result<Vec<[f64; 3]>> {
        let raw = self.take(count * 12, field)?;
        Ok(raw
            .chunks_exact(12)
            .map(|c| {
                let f = |i: usize| f32::from_le_bytes(c[i * 4..i * 4 + 4].try_into().unwrap()) as f64;
                [f(0), f(1), f(2)]
            })
            .collect())
    }
}

pub fn decode(buf: &[u8]) -> Result<PointCloud> {
    let mut cur = Cursor { buf, pos: 0 };
    if cur.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic: expected \"SDPC\"".into()));
    }
    let version = u16::from_le_bytes(cur.take(2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let flags = u16::from_le_bytes(cur.take(2, "flags")?.try_into().unwrap());
    if flags & !FLAG_COLORS != 0 {
        return Err(Error::Format(format!("unknown flags {flags:#06x}")));
    }
    let count = u32::from_le_bytes(cur.take(4, "count")?.try_into().unwrap()) as usize;
    let points = cur.f32s(count, "points")?;
    let cloud = if flags & FLAG_COLORS != 0 {
        let colors = cur.f32s(count, "colors")?;
        PointCloud::with_colors(points, colors)
    } else {
        PointCloud::new(points)
    };
    cloud.map_err(|e| Error::Format(format!("points: {e}")))
}

pub fn write<W: Write>(mut w: W, cloud: &PointCloud) -> Result<()> {
    w.write_all(&encode(cloud))?;
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<PointCloud> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode(&buf)
}

pub fn save(path: &Path, cloud: &PointCloud) -> Result<()> {
    std::fs::write(path, encode(cloud))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<PointCloud> {
    let buf = std::fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    decode(&buf)
}

//! Binary tensor archive.
//!
//! Layout, all integers little-endian:
//! `b"KSF1"`, `u32` tensor count, then per tensor: `u16` name length,
//! UTF-8 name, `u8` rank, `rank × u32` extents, `f32` payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"KSF1";

pub type NamedTensors = Vec<(String, Tensor)>;

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn write_tensors(w: &mut impl Write, tensors: &[(String, Tensor)]) -> Result<()> {
    let io = |e| Error::io("<checkpoint stream>", e);
    w.write_all(MAGIC).map_err(io)?;
    let count = u32::try_from(tensors.len()).map_err(|_| fmt_err("too many tensors"))?;
    w.write_all(&count.to_le_bytes()).map_err(io)?;
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| fmt_err(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        let rank = u8::try_from(t.rank()).map_err(|_| fmt_err("rank above 255"))?;
        w.write_all(&[rank]).map_err(io)?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| fmt_err("extent above u32"))?;
            w.write_all(&d.to_le_bytes()).map_err(io)?;
        }
        let mut buf = Vec::with_capacity(4 * t.numel());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| fmt_err(format!("truncated while reading {what}: {e}")))?;
    Ok(b)
}

pub fn read_tensors(r: &mut impl Read) -> Result<NamedTensors> {
    let magic: [u8; 4] = read_exact(r, "magic")?;
    if &magic != MAGIC {
        return Err(fmt_err(format!("bad magic {magic:?}")));
    }
    let count = u32::from_le_bytes(read_exact(r, "tensor count")?);
    let mut out = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(r, "name length")?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| fmt_err(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| fmt_err("tensor name is not UTF-8"))?;
        let [rank] = read_exact::<1>(r, "rank")?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read_exact(r, "extent")?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; 4 * n];
        r.read_exact(&mut raw)
            .map_err(|e| fmt_err(format!("truncated payload of {name}: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| fmt_err(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensors(&mut w, tensors)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<NamedTensors> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensors(&mut BufReader::new(file))
}

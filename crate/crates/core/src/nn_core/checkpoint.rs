//! Weight files: magic `STOAW`, u32 version, a length-prefixed UTF-8
//! metadata block, then a named parameter table. Each entry is
//! `u32 name_len, name, u32 ndim, ndim × u32 dims, f32 LE row-major data`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Result, StoaError};

pub const WEIGHTS_MAGIC: &[u8; 5] = b"STOAW";
pub const WEIGHTS_VERSION: u32 = 1;

/// Loaded weight file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub metadata: String,
    pub entries: Vec<(String, Tensor)>,
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, metadata: &str) -> Result<()> {
    let file = File::create(path).map_err(|e| StoaError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| StoaError::io(path, e);
    w.write_all(WEIGHTS_MAGIC).map_err(io)?;
    w.write_all(&WEIGHTS_VERSION.to_le_bytes()).map_err(io)?;
    write_bytes(&mut w, metadata.as_bytes()).map_err(io)?;
    w.write_all(&(store.len() as u32).to_le_bytes()).map_err(io)?;
    for id in store.ids() {
        let t = store.get(id);
        write_bytes(&mut w, store.name(id).as_bytes()).map_err(io)?;
        w.write_all(&2u32.to_le_bytes()).map_err(io)?;
        w.write_all(&(t.rows() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(t.cols() as u32).to_le_bytes()).map_err(io)?;
        let mut buf = Vec::with_capacity(t.len() * 4);
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| StoaError::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| StoaError::io(path, e);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(StoaError::format(path, "bad weights magic"));
    }
    let version = read_u32(&mut r).map_err(io)?;
    if version != WEIGHTS_VERSION {
        return Err(StoaError::format(path, format!("unsupported version {version}")));
    }
    let metadata = String::from_utf8(read_bytes(&mut r).map_err(io)?)
        .map_err(|_| StoaError::format(path, "metadata is not UTF-8"))?;
    let count = read_u32(&mut r).map_err(io)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name = String::from_utf8(read_bytes(&mut r).map_err(io)?)
            .map_err(|_| StoaError::format(path, "parameter name is not UTF-8"))?;
        let ndim = read_u32(&mut r).map_err(io)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u32(&mut r).map_err(io)? as usize);
        }
        let (rows, cols) = match dims.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => return Err(StoaError::format(path, format!("{name}: rank {ndim} unsupported"))),
        };
        let mut raw = vec![0u8; rows * cols * 4];
        r.read_exact(&mut raw).map_err(io)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        entries.push((name, Tensor::from_vec(rows, cols, data)));
    }
    Ok(Checkpoint { metadata, entries })
}

impl Checkpoint {
    /// Overwrites every parameter of `store` with the same-named entry.
    pub fn assign_to(&self, store: &mut ParamStore) -> Result<()> {
        if self.entries.len() != store.len() {
            return Err(StoaError::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                self.entries.len(),
                store.len()
            )));
        }
        for (name, t) in &self.entries {
            let id = store
                .find(name)
                .ok_or_else(|| StoaError::Config(format!("unexpected tensor {name}")))?;
            if store.get(id).shape() != t.shape() {
                return Err(StoaError::Config(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            store.set(id, t.clone());
        }
        Ok(())
    }
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> std::io::Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R) -> std::io::Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

//! Binary model checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! b"FCKN" | version: u32 | json_len: u32 | config JSON (UTF-8)
//! then per parameter, in model order: rows: u32 | cols: u32 | rows*cols f32
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{build_model, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FCKN";
const VERSION: u32 = 1;

fn io_err(e: std::io::Error) -> Error {
    Error::io("<checkpoint stream>", e)
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(io_err)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_checkpoint(model: &Model, mut w: impl Write) -> Result<()> {
    w.write_all(MAGIC).map_err(io_err)?;
    write_u32(&mut w, VERSION)?;
    let json = serde_json::to_vec(model.config())?;
    write_u32(&mut w, json.len() as u32)?;
    w.write_all(&json).map_err(io_err)?;
    for p in model.params() {
        write_u32(&mut w, p.value.rows() as u32)?;
        write_u32(&mut w, p.value.cols() as u32)?;
        let mut bytes = Vec::with_capacity(p.value.len() * 4);
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Model> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Format {
            magic: u32::from_be_bytes(magic),
        });
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Consistency(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let len = read_u32(&mut r)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(io_err)?;
    let config: ModelConfig = serde_json::from_slice(&json)?;
    let mut model = build_model(&config)?;
    for p in model.params_mut() {
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        if (rows, cols) != p.value.shape() {
            return Err(Error::Shape {
                op: "checkpoint parameter",
                left: p.value.shape(),
                right: (rows, cols),
            });
        }
        let mut bytes = vec![0u8; rows * cols * 4];
        r.read_exact(&mut bytes).map_err(io_err)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        p.value = Tensor::new(rows, cols, data)?;
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(model, BufWriter::new(file))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}

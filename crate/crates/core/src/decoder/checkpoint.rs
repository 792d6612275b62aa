//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! magic       8 bytes  "CVDNCKPT"
//! version     u32      currently 1
//! config_len  u64      then config_len bytes of DecoderConfig as JSON
//! count       u64      number of parameters
//! per parameter:
//!   name_len  u32      then name_len bytes of UTF-8 name
//!   rows      u64
//!   cols      u64
//!   values    rows*cols f64, row-major
//! ```
//!
//! Floats are stored as raw bit patterns, so a save/load cycle is exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{Decoder, DecoderConfig, ParamStore};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CVDNCKPT";
pub const VERSION: u32 = 1;

/// Refuses absurd sizes from a corrupt header before allocating.
const MAX_LEN: u64 = 1 << 32;

pub fn write_checkpoint<W: Write>(model: &Decoder, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(&model.cfg)?;
    out.write_all(&(cfg.len() as u64).to_le_bytes())?;
    out.write_all(&cfg)?;
    out.write_all(&(model.params.len() as u64).to_le_bytes())?;
    for (name, value) in model.params.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(value.nrows() as u64).to_le_bytes())?;
        out.write_all(&(value.ncols() as u64).to_le_bytes())?;
        for v in value.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(input: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_len<R: Read>(input: &mut R, what: &str) -> Result<usize> {
    let n = u64::from_le_bytes(read_array(input)?);
    if n > MAX_LEN {
        return Err(Error::Format(format!("{what} of {n} is implausibly large")));
    }
    Ok(n as usize)
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Decoder> {
    let magic: [u8; 8] = read_array(&mut input)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut input)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = read_len(&mut input, "config length")?;
    let mut cfg = vec![0u8; len];
    input.read_exact(&mut cfg)?;
    let cfg: DecoderConfig = serde_json::from_slice(&cfg)?;

    let count = read_len(&mut input, "parameter count")?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = u32::from_le_bytes(read_array(&mut input)?) as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rows = read_len(&mut input, "row count")?;
        let cols = read_len(&mut input, "column count")?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(read_array(&mut input)?));
        }
        let value = Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Format(e.to_string()))?;
        params.insert(name, value)?;
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", rest.len())));
    }
    Decoder::from_parts(cfg, params)
}

pub fn save(model: &Decoder, path: &Path) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load(path: &Path) -> Result<Decoder> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

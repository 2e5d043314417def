//! Binary parameter checkpoints: magic, version, a free-form metadata string
//! (JSON by convention), then named tensors with their shapes. All numbers are
//! little-endian and floats are stored by bit pattern, so a round trip is exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamSet, Tensor};
use crate::binio::{BinReader, BinWriter};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"AQCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(w: W, params: &ParamSet, metadata: &str) -> Result<()> {
    let mut w = BinWriter::new(w);
    w.bytes(MAGIC)?;
    w.u32(CHECKPOINT_VERSION)?;
    w.str(metadata)?;
    w.u32(params.len() as u32)?;
    for (name, t) in params.iter() {
        w.str(name)?;
        w.u32(t.ndim() as u32)?;
        for &d in t.shape() {
            w.u64(d as u64)?;
        }
        w.f64s(t.data())?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R, label: &str) -> Result<(ParamSet, String)> {
    let mut r = BinReader::new(r, label);
    r.expect_magic(MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let metadata = r.str()?;
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name = r.str()?;
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(r.fail(format!("tensor `{name}` has {ndim} dimensions")));
        }
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n < 1 << 28)
            .ok_or_else(|| r.fail(format!("tensor `{name}` too large")))?;
        let data = r.f64s(n)?;
        params.insert(name, Tensor::new(shape, data)?);
    }
    r.expect_eof()?;
    Ok((params, metadata))
}

pub fn save_checkpoint(path: &Path, params: &ParamSet, metadata: &str) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), params, metadata)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, String)> {
    let f = File::open(path).map_err(|e| Error::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    read_checkpoint(BufReader::new(f), &path.display().to_string())
}

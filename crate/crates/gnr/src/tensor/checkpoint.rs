//! Binary checkpoint serialization.
//!
//! Layout: the magic bytes `GNRCKPT1`, then one record per tensor in store
//! order. Each record is a u64 LE name length, the UTF-8 name, a u64 LE
//! rank, the dimensions as u64 LE, and the values as f32 LE. A parameter
//! contributes three records — its values, then Adam moments under the
//! `/m` and `/v` name suffixes — and the optimizer step count rides along
//! as a single-element `adam/step` tensor.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Parameter, ParameterStore, Result, TensorError};

pub const MAGIC: &[u8; 8] = b"GNRCKPT1";
const STEP_KEY: &str = "adam/step";

fn io_err(e: std::io::Error) -> TensorError {
    TensorError::Checkpoint(e.to_string())
}

fn write_record<W: Write>(w: &mut W, name: &str, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
    w.write_all(&(name.len() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(name.as_bytes()).map_err(io_err)?;
    w.write_all(&2u64.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(rows as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(cols as u64).to_le_bytes()).map_err(io_err)?;
    for &v in values {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
    }
    Ok(())
}

pub fn save(store: &ParameterStore, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(io_err)?;
    for (name, p) in store.iter() {
        write_record(&mut w, name, p.rows, p.cols, &p.values)?;
        write_record(&mut w, &format!("{name}/m"), p.rows, p.cols, &p.m)?;
        write_record(&mut w, &format!("{name}/v"), p.rows, p.cols, &p.v)?;
    }
    write_record(&mut w, STEP_KEY, 1, 1, &[store.step() as f64])?;
    w.flush().map_err(io_err)
}

struct RawTensor {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

fn read_u64<R: Read>(r: &mut R) -> Result<Option<u64>> {
    let mut buf = [0u8; 8];
    match r.read_exact(&mut buf) {
        Ok(()) => Ok(Some(u64::from_le_bytes(buf))),
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Ok(None),
        Err(e) => Err(io_err(e)),
    }
}

fn read_record<R: Read>(r: &mut R) -> Result<Option<RawTensor>> {
    let name_len = match read_u64(r)? {
        Some(n) => n as usize,
        None => return Ok(None),
    };
    let mut name_buf = vec![0u8; name_len];
    r.read_exact(&mut name_buf).map_err(io_err)?;
    let name = String::from_utf8(name_buf)
        .map_err(|_| TensorError::Checkpoint("tensor name is not UTF-8".into()))?;
    let rank = read_u64(r)?
        .ok_or_else(|| TensorError::Checkpoint(format!("truncated record for {name:?}")))? as usize;
    if rank == 0 || rank > 2 {
        return Err(TensorError::Checkpoint(format!(
            "unsupported rank {rank} for {name:?}"
        )));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = read_u64(r)?
            .ok_or_else(|| TensorError::Checkpoint(format!("truncated dims for {name:?}")))?;
        dims.push(d as usize);
    }
    let (rows, cols) = if rank == 1 { (1, dims[0]) } else { (dims[0], dims[1]) };
    let mut values = Vec::with_capacity(rows * cols);
    let mut buf = [0u8; 4];
    for _ in 0..rows * cols {
        r.read_exact(&mut buf).map_err(|_| {
            TensorError::Checkpoint(format!("truncated values for {name:?}"))
        })?;
        values.push(f32::from_le_bytes(buf) as f64);
    }
    Ok(Some(RawTensor {
        name,
        rows,
        cols,
        values,
    }))
}

/// Load a checkpoint. Hidden-to-hidden matrices are re-marked as recurrent
/// by their `/wh` name suffix (the flag itself is not serialized).
pub fn load(path: &Path) -> Result<ParameterStore> {
    let file = File::open(path).map_err(io_err)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let mut store = ParameterStore::new();
    while let Some(raw) = read_record(&mut r)? {
        if raw.name == STEP_KEY {
            store.set_step(raw.values[0] as u64);
        } else if let Some(base) = raw.name.strip_suffix("/m") {
            let base = base.to_string();
            let p = store.get_mut(&base)?;
            check_dims(&raw, p)?;
            p.m = raw.values;
        } else if let Some(base) = raw.name.strip_suffix("/v") {
            let base = base.to_string();
            let p = store.get_mut(&base)?;
            check_dims(&raw, p)?;
            p.v = raw.values;
        } else {
            let n = raw.rows * raw.cols;
            let recurrent = raw.name.ends_with("/wh");
            store.insert_raw(
                &raw.name,
                Parameter {
                    rows: raw.rows,
                    cols: raw.cols,
                    values: raw.values,
                    grad: vec![0.0; n],
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    recurrent,
                },
            )?;
        }
    }
    Ok(store)
}

fn check_dims(raw: &RawTensor, p: &Parameter) -> Result<()> {
    if raw.rows != p.rows || raw.cols != p.cols {
        return Err(TensorError::Checkpoint(format!(
            "moment {:?} is {}x{} but the parameter is {}x{}",
            raw.name, raw.rows, raw.cols, p.rows, p.cols
        )));
    }
    Ok(())
}

//! Versioned binary weight files: magic, version, then per parameter the
//! name, shape, and raw little-endian f64 payload. Round-trips bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{NdArray, Param};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CCWEIGHT";
const VERSION: u32 = 1;

pub fn save_params(path: &Path, params: &[&Param]) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>, bytes: &[u8]| -> Result<()> {
        w.write_all(bytes).map_err(Error::io(path))
    };
    write(&mut w, MAGIC)?;
    write(&mut w, &VERSION.to_le_bytes())?;
    write(&mut w, &(params.len() as u32).to_le_bytes())?;
    for p in params {
        let name = p.name.as_bytes();
        write(&mut w, &(name.len() as u32).to_le_bytes())?;
        write(&mut w, name)?;
        write(&mut w, &(p.value.shape().len() as u32).to_le_bytes())?;
        for d in p.value.shape() {
            write(&mut w, &(*d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            write(&mut w, &v.to_bits().to_le_bytes())?;
        }
    }
    w.flush().map_err(Error::io(path))
}

pub fn load_params(path: &Path) -> Result<Vec<(String, NdArray)>> {
    let file = File::open(path).map_err(Error::io(path))?;
    let mut r = BufReader::new(file);
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(Error::io(path))?;
    if &magic != MAGIC {
        return Err(bad("not a weight file (bad magic)"));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(bad(&format!("unsupported weight file version {version}")));
    }
    let count = read_u32(&mut r, path)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r, path)? as usize;
        if name_len > 4096 {
            return Err(bad("parameter name too long"));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(Error::io(path))?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name not utf-8"))?;
        let ndim = read_u32(&mut r, path)? as usize;
        if ndim > 8 {
            return Err(bad("too many dimensions"));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf).map_err(Error::io(path))?;
            shape.push(u64::from_le_bytes(buf) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf).map_err(Error::io(path))?;
            data.push(f64::from_bits(u64::from_le_bytes(buf)));
        }
        out.push((name, NdArray::from_vec(&shape, data)?));
    }
    Ok(out)
}

/// Loads weights into an existing parameter set, matching by name and
/// validating shapes. Every stored entry must land somewhere and every
/// parameter must be covered.
pub fn load_params_into(path: &Path, params: &mut [&mut Param]) -> Result<()> {
    let stored = load_params(path)?;
    if stored.len() != params.len() {
        return Err(Error::Data(format!(
            "{}: stores {} parameters, model has {}",
            path.display(),
            stored.len(),
            params.len()
        )));
    }
    for (name, value) in stored {
        let target = params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| {
                Error::Data(format!("{}: unknown parameter {name}", path.display()))
            })?;
        if target.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name}: stored shape {:?}, expected {:?}",
                value.shape(),
                target.value.shape()
            )));
        }
        target.value = value;
    }
    Ok(())
}

fn read_u32(r: &mut BufReader<File>, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(Error::io(path))?;
    Ok(u32::from_le_bytes(buf))
}

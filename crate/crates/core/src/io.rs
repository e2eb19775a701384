//! The PDNT binary tensor format and dataset/checkpoint helpers.
//!
//! Layout: magic bytes `P D N T`, u32 version (=1), u8 dtype
//! (1 = real64, 2 = complex128 interleaved re/im), u8 ndim, then
//! ndim x u64 dims, followed by the little-endian row-major payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::{numel, CTensor, Tensor};

const MAGIC: [u8; 4] = *b"PDNT";
const VERSION: u32 = 1;
const DTYPE_REAL: u8 = 1;
const DTYPE_COMPLEX: u8 = 2;

#[derive(Clone, Debug)]
pub enum PdntData {
    Real(Tensor),
    Complex(CTensor),
}

fn write_header(w: &mut impl Write, dtype: u8, shape: &[usize]) -> std::io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[dtype, shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    Ok(())
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    write_header(&mut w, DTYPE_REAL, &t.shape).map_err(io)?;
    for v in &t.data {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_ctensor(path: &Path, t: &CTensor) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    write_header(&mut w, DTYPE_COMPLEX, &t.shape).map_err(io)?;
    for v in &t.data {
        w.write_all(&v.re.to_le_bytes()).map_err(io)?;
        w.write_all(&v.im.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_pdnt(path: &Path) -> Result<PdntData> {
    let io = |e| Error::io(path, e);
    let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.into() };
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if magic != MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4).map_err(io)?;
    if u32::from_le_bytes(v4) != VERSION {
        return Err(bad("unsupported version"));
    }
    let mut hdr = [0u8; 2];
    r.read_exact(&mut hdr).map_err(io)?;
    let (dtype, ndim) = (hdr[0], hdr[1] as usize);
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut d8 = [0u8; 8];
        r.read_exact(&mut d8).map_err(io)?;
        shape.push(u64::from_le_bytes(d8) as usize);
    }
    let n = numel(&shape);
    let mut read_f64s = |count: usize| -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; count * 8];
        r.read_exact(&mut bytes).map_err(io)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    match dtype {
        DTYPE_REAL => {
            let data = read_f64s(n)?;
            Ok(PdntData::Real(Tensor { shape, data }))
        }
        DTYPE_COMPLEX => {
            let raw = read_f64s(2 * n)?;
            let data = raw
                .chunks_exact(2)
                .map(|p| Complex64::new(p[0], p[1]))
                .collect();
            Ok(PdntData::Complex(CTensor { shape, data }))
        }
        _ => Err(bad("unknown dtype")),
    }
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    match read_pdnt(path)? {
        PdntData::Real(t) => Ok(t),
        PdntData::Complex(_) => Err(Error::Format {
            path: path.to_path_buf(),
            reason: "expected real tensor, found complex".into(),
        }),
    }
}

pub fn read_ctensor(path: &Path) -> Result<CTensor> {
    match read_pdnt(path)? {
        PdntData::Complex(t) => Ok(t),
        PdntData::Real(_) => Err(Error::Format {
            path: path.to_path_buf(),
            reason: "expected complex tensor, found real".into(),
        }),
    }
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let io = |e| Error::io(path, e);
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(io)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

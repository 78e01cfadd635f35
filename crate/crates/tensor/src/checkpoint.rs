//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "COADCKPT"
//! version    u8       currently 1
//! dtype      u8       4 = f32, 8 = f64
//! config_len u32      followed by config_len bytes of UTF-8 (opaque config echo)
//! n_params   u32
//! per parameter:
//!   name_len u16, name bytes (UTF-8)
//!   ndim     u8,  ndim × u32 extents
//!   values   product(extents) × dtype-width bytes
//! ```
//!
//! Values are converted to the caller's element type on read, so an f32
//! checkpoint loads into an f64 model and vice versa.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"COADCKPT";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub dtype: DType,
    pub config: String,
    pub params: Vec<(String, Tensor<T>)>,
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

pub fn write_checkpoint<T: Scalar, W: Write>(
    mut w: W,
    config: &str,
    params: &[(&str, &Tensor<T>)],
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, T::DTYPE.byte_width() as u8])?;
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(config.as_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params {
        let name_len = u16::try_from(name.len()).map_err(|_| bad("parameter name too long"))?;
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[t.shape().len() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        match T::DTYPE {
            DType::F32 => {
                for v in t.data() {
                    w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
                }
            }
            DType::F64 => {
                for v in t.data() {
                    w.write_all(&v.as_f64().to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => bad("truncated file"),
        _ => e.into(),
    })?;
    Ok(buf)
}

fn read_vec(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|_| bad("truncated file"))?;
    Ok(buf)
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<Checkpoint<T>> {
    if &read_exact::<8>(&mut r)? != MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let [version, width] = read_exact::<2>(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let dtype = match width {
        4 => DType::F32,
        8 => DType::F64,
        other => return Err(bad(format!("unknown dtype width {other}"))),
    };
    let config_len = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let config =
        String::from_utf8(read_vec(&mut r, config_len)?).map_err(|_| bad("config is not UTF-8"))?;
    let n = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = u16::from_le_bytes(read_exact(&mut r)?) as usize;
        let name =
            String::from_utf8(read_vec(&mut r, name_len)?).map_err(|_| bad("name is not UTF-8"))?;
        let [ndim] = read_exact::<1>(&mut r)?;
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(read_exact(&mut r)?) as usize);
        }
        let count: usize = shape.iter().product();
        let raw = read_vec(&mut r, count * dtype.byte_width())?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        params.push((name, Tensor::new(&shape, data)?));
    }
    Ok(Checkpoint {
        dtype,
        config,
        params,
    })
}

/// Writes to a sibling temp file and renames it into place.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    config: &str,
    params: &[(&str, &Tensor<T>)],
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = io::BufWriter::new(fs::File::create(&tmp)?);
        write_checkpoint(&mut f, config, params)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    read_checkpoint(io::BufReader::new(fs::File::open(path)?))
}

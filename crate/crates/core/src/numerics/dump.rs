//! Tensor dump format: one UTF-8 JSON header line followed by the raw
//! little-endian row-major payload.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_order: String,
}

pub fn write_tensor_to<T: Scalar, W: Write>(mut w: W, t: &Tensor<T>) -> Result<()> {
    let header = DumpHeader {
        shape: t.shape().to_vec(),
        dtype: T::DTYPE.to_string(),
        byte_order: "little-endian".to_string(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let mut payload = Vec::with_capacity(t.len() * T::BYTES);
    for &x in t.data() {
        x.write_le(&mut payload);
    }
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_tensor_from<T: Scalar, R: Read>(r: R) -> Result<Tensor<T>> {
    let mut reader = BufReader::new(r);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header: DumpHeader = serde_json::from_str(line.trim_end())?;
    if header.dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "dtype {} does not match requested {}",
            header.dtype,
            T::DTYPE
        )));
    }
    if header.byte_order != "little-endian" {
        return Err(Error::Format(format!("byte order {}", header.byte_order)));
    }
    let n: usize = header.shape.iter().product();
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    if payload.len() != n * T::BYTES {
        return Err(Error::Format(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            n * T::BYTES
        )));
    }
    let data = payload.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(header.shape, data)
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_tensor_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    read_tensor_from(std::fs::File::open(path)?)
}

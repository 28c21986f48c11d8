//! Raw tensor file format ".ubt".
//!
//! Layout: magic `UBT1`, u32 ndim, u32 dims[ndim], then the payload as
//! little-endian f64 in row-major order. Used for fields, masks, and the
//! named blocks inside checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::field::Field;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"UBT1";

/// An n-dimensional tensor of f64 values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = dims.iter().product();
        if expect != data.len() {
            return Err(Error::Format(format!(
                "tensor dims {:?} imply {} values, got {}",
                dims,
                expect,
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn from_field(f: &Field) -> Self {
        Tensor {
            dims: vec![f.height(), f.width()],
            data: f.data().to_vec(),
        }
    }

    pub fn into_field(self) -> Result<Field> {
        if self.dims.len() != 2 {
            return Err(Error::Format(format!(
                "expected rank-2 tensor, got dims {:?}",
                self.dims
            )));
        }
        Field::from_vec(self.dims[0], self.dims[1], self.data)
    }
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
    for &d in &t.dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(format_err)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, want UBT1")));
    }
    let ndim = read_u32(r)? as usize;
    if ndim > 8 {
        return Err(Error::Format(format!("unreasonable ndim {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(read_u32(r)? as usize);
    }
    let count: usize = dims.iter().product();
    let mut data = vec![0.0f64; count];
    let mut buf = [0u8; 8];
    for v in &mut data {
        r.read_exact(&mut buf).map_err(format_err)?;
        *v = f64::from_le_bytes(buf);
    }
    Tensor::new(dims, data)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(format_err)?;
    Ok(u32::from_le_bytes(buf))
}

fn format_err(e: std::io::Error) -> Error {
    Error::Format(format!("truncated tensor: {e}"))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor(&mut w, t).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(&mut BufReader::new(file))
}

pub fn save_field(path: &Path, f: &Field) -> Result<()> {
    save_tensor(path, &Tensor::from_field(f))
}

pub fn load_field(path: &Path) -> Result<Field> {
    let f = load_tensor(path)?.into_field()?;
    if !f.all_finite() {
        return Err(Error::Format(format!(
            "{}: non-finite values",
            path.display()
        )));
    }
    Ok(f)
}

/// Writes a named block: u32 name length, UTF-8 name, tensor payload.
pub fn write_named(w: &mut impl Write, name: &str, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    write_tensor(w, t)
}

pub fn read_named(r: &mut impl Read) -> Result<(String, Tensor)> {
    let len = read_u32(r)? as usize;
    if len > 4096 {
        return Err(Error::Format(format!("unreasonable block name length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(format_err)?;
    let name =
        String::from_utf8(buf).map_err(|e| Error::Format(format!("block name not UTF-8: {e}")))?;
    let t = read_tensor(r)?;
    Ok((name, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn roundtrip_preserves_bits() {
        let mut rng = Stream::new(1);
        let f = Field::gaussian(7, 5, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ubt");
        save_field(&path, &f).unwrap();
        let g = load_field(&path).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn rejects_bad_magic() {
        let bytes = b"XXXX\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00\x00";
        assert!(read_tensor(&mut &bytes[..]).is_err());
    }

    #[test]
    fn named_blocks_roundtrip() {
        let t = Tensor::from_vec(vec![1.0, -2.5, 3.25]);
        let mut buf = Vec::new();
        write_named(&mut buf, "model.layer0.weight", &t).unwrap();
        let (name, back) = read_named(&mut &buf[..]).unwrap();
        assert_eq!(name, "model.layer0.weight");
        assert_eq!(back, t);
    }

    #[test]
    fn rank4_tensor_roundtrip() {
        let t = Tensor::new(vec![2, 3, 1, 2], (0..12).map(f64::from).collect()).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(read_tensor(&mut &buf[..]).unwrap(), t);
    }
}

//! Binary model files.
//!
//! Layout (little-endian): magic `ACFM`, version `u32`, input channel count
//! `u32`, then for each tensor in layer order (weight before bias): name
//! length `u16`, name bytes, rank `u8`, each dim as `u32`, raw `f32` data.

use std::fs;
use std::path::Path;

use super::{Architecture, CnnError, Model, Tensor};

pub const MODEL_MAGIC: &[u8; 4] = b"ACFM";
pub const MODEL_VERSION: u32 = 1;

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.dims.len() as u8);
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.input_shape().channels as u32).to_le_bytes());
    for p in model.params() {
        put_tensor(&mut out, &format!("{}.weight", p.name), &p.weight);
        put_tensor(&mut out, &format!("{}.bias", p.name), &p.bias);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CnnError> {
        let end = self.pos.checked_add(n).ok_or(CnnError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CnnError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CnnError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CnnError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, CnnError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tensor(&mut self, expected_name: &str, expected: &Tensor<f32>) -> Result<Tensor<f32>, CnnError> {
        let len = self.u16()? as usize;
        let name = String::from_utf8_lossy(self.take(len)?).into_owned();
        if name != expected_name {
            return Err(CnnError::Malformed(format!("expected tensor {expected_name:?}, found {name:?}")));
        }
        let rank = self.u8()? as usize;
        let dims = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if dims != expected.dims {
            return Err(CnnError::Malformed(format!(
                "tensor {name} has dims {dims:?}, expected {:?}",
                expected.dims
            )));
        }
        let n: usize = dims.iter().product();
        let raw = self.take(n * 4)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        Ok(Tensor { dims, data })
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<Model, CnnError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| CnnError::BadMagic)? != MODEL_MAGIC {
        return Err(CnnError::BadMagic);
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(CnnError::VersionMismatch(version));
    }
    let channels = r.u32()? as usize;
    let mut model = Model::zeros(Architecture::canonical(channels)?)?;
    for p in model.params_mut() {
        p.weight = r.tensor(&format!("{}.weight", p.name), &p.weight)?;
        p.bias = r.tensor(&format!("{}.bias", p.name), &p.bias)?;
    }
    if r.pos != bytes.len() {
        return Err(CnnError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if !model.is_finite() {
        return Err(CnnError::Malformed("non-finite parameter".into()));
    }
    Ok(model)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<(), CnnError> {
    fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model, CnnError> {
    decode_model(&fs::read(path)?)
}

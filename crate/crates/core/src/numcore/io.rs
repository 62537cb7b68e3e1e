use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::net::{Activation, Layer, ModelParams};
use crate::numcore::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TGKD";
const VERSION: u32 = 1;

/// Serializes parameters to the versioned flat binary layout:
/// magic "TGKD", u32 version, u32 layer count, then per layer
/// (u32 rows, u32 cols, u32 activation tag, row-major weights, biases),
/// all reals little-endian f64.
pub fn params_to_bytes(params: &ModelParams) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for layer in &params.layers {
        buf.extend_from_slice(&(layer.out_dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(layer.in_dim() as u32).to_le_bytes());
        buf.extend_from_slice(&layer.activation.tag().to_le_bytes());
        for v in layer.weight.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in layer.bias.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data("params file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn params_from_bytes(buf: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Data("bad magic, not a TGKD params file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported params version {version}")));
    }
    let n_layers = r.u32()? as usize;
    if n_layers == 0 {
        return Err(Error::Data("params file has zero layers".into()));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let activation = Activation::from_tag(r.u32()?)?;
        let mut w = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            w.push(r.f64()?);
        }
        let mut b = Vec::with_capacity(rows);
        for _ in 0..rows {
            b.push(r.f64()?);
        }
        layers.push(Layer {
            weight: Tensor::from_vec(vec![rows, cols], w)
                .map_err(|e| Error::Data(format!("bad weight tensor: {e}")))?,
            bias: Tensor::vector(b).map_err(|e| Error::Data(format!("bad bias tensor: {e}")))?,
            activation,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::Data("trailing bytes after params payload".into()));
    }
    let params = ModelParams { layers };
    params
        .validate()
        .map_err(|e| Error::Data(format!("inconsistent params file: {e}")))?;
    Ok(params)
}

pub fn save_params(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, params_to_bytes(params))?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    let buf = fs::read(path)?;
    params_from_bytes(&buf)
}

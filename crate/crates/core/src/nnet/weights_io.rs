//! `FCNW1` weights files.
//!
//! Layout: the 5 magic bytes `FCNW1`, four little-endian u32 header values
//! (`in_channels`, `n_landmarks`, `base_filters`, `layer_count`), then per
//! layer three u32 values (`in`, `out`, `kernel`), one u8 activation tag
//! (0 = ReLU, 1 = linear), the weights and the biases as little-endian f32.

use std::fs;
use std::path::Path;

use super::{Activation, ConvLayer, FcnModel};
use crate::error::{Error, Result};

const MAGIC: &[u8; 5] = b"FCNW1";

pub fn write_weights(model: &FcnModel<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 4 * model.param_count());
    out.extend_from_slice(MAGIC);
    for v in [model.in_channels, model.n_landmarks, model.base_filters, model.layers.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for l in &model.layers {
        for v in [l.in_channels, l.out_channels, l.kernel] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(match l.activation {
            Activation::Relu => 0,
            Activation::Linear => 1,
        });
        for w in l.weights.iter().chain(&l.bias) {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            expected: self.pos + n,
            found: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| Error::format("FCNW1", "size overflow"))?)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }
}

pub fn read_weights(bytes: &[u8]) -> Result<FcnModel<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(5)? != MAGIC {
        return Err(Error::format("FCNW1", "bad magic"));
    }
    let in_channels = r.u32()?;
    let n_landmarks = r.u32()?;
    let base_filters = r.u32()?;
    let n_layers = r.u32()?;
    if n_layers == 0 || n_layers > 64 {
        return Err(Error::format("FCNW1", format!("implausible layer count {n_layers}")));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let (ic, oc, k) = (r.u32()?, r.u32()?, r.u32()?);
        if k == 0 || k > 15 || ic == 0 || oc == 0 {
            return Err(Error::format("FCNW1", format!("bad layer header {ic}/{oc}/{k}")));
        }
        let activation = match r.take(1)?[0] {
            0 => Activation::Relu,
            1 => Activation::Linear,
            t => return Err(Error::format("FCNW1", format!("unknown activation tag {t}"))),
        };
        let weights = r.f32s(oc * ic * k * k * k)?;
        let bias = r.f32s(oc)?;
        layers.push(ConvLayer {
            in_channels: ic,
            out_channels: oc,
            kernel: k,
            weights,
            bias,
            activation,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format("FCNW1", "trailing bytes after last layer"));
    }
    let model = FcnModel::from_layers(layers, base_filters)?;
    if model.in_channels != in_channels || model.n_landmarks != n_landmarks {
        return Err(Error::format(
            "FCNW1",
            format!(
                "header says {in_channels} -> {n_landmarks} channels, layers give {} -> {}",
                model.in_channels, model.n_landmarks
            ),
        ));
    }
    Ok(model)
}

pub fn save_weights(model: &FcnModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_weights(model)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<FcnModel<f32>> {
    let path = path.as_ref();
    read_weights(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

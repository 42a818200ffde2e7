//! Model file: `"CDPM" | u32 version | u32 N | u32 layer count L |
//! (L+1) × u32 layer dims`, then the `f64` input shift and scale vectors, then
//! for every layer its row-major weights followed by its biases. All
//! little-endian.

use std::fs;
use std::path::Path;

use super::{Layer, MediatorModel};
use crate::{CdpError, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"CDPM";
pub const MODEL_VERSION: u32 = 1;

pub fn save_model(model: &MediatorModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(model.num_committee as u32).to_le_bytes());
    buf.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for d in model.layer_dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let mut put = |xs: &[f64]| xs.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
    put(&model.input_shift);
    put(&model.input_scale);
    for l in &model.layers {
        put(&l.weights);
        put(&l.biases);
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    ctx: String,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(CdpError::Truncated {
                expected: end,
                actual: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(8 * n)?;
        let out: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(CdpError::format(self.ctx.clone(), "non-finite parameter"));
        }
        Ok(out)
    }
}

pub fn load_model(path: &Path) -> Result<MediatorModel> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CdpError::MissingInput(path.to_path_buf()),
        _ => CdpError::Io(e),
    })?;
    let ctx = path.display().to_string();
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        ctx: ctx.clone(),
    };
    if cur.take(4).ok() != Some(MODEL_MAGIC.as_slice()) {
        return Err(CdpError::format(ctx, "bad magic, expected CDPM"));
    }
    let version = cur.u32()?;
    if version != MODEL_VERSION as usize {
        return Err(CdpError::format(ctx, format!("unsupported version {version}")));
    }
    let num_committee = cur.u32()?;
    let num_layers = cur.u32()?;
    if num_layers == 0 || num_layers > 16 {
        return Err(CdpError::format(ctx, format!("implausible layer count {num_layers}")));
    }
    let dims = (0..=num_layers).map(|_| cur.u32()).collect::<Result<Vec<_>>>()?;
    if dims.iter().any(|&d| d == 0) || dims[num_layers] != 2 {
        return Err(CdpError::format(ctx, format!("bad layer dims {dims:?}")));
    }
    let input_shift = cur.f64s(dims[0])?;
    let input_scale = cur.f64s(dims[0])?;
    let mut layers = Vec::with_capacity(num_layers);
    for w in dims.windows(2) {
        let weights = cur.f64s(w[0] * w[1])?;
        let biases = cur.f64s(w[1])?;
        layers.push(Layer {
            inputs: w[0],
            outputs: w[1],
            weights,
            biases,
        });
    }
    if cur.pos != bytes.len() {
        return Err(CdpError::format(ctx, "trailing bytes after last layer"));
    }
    Ok(MediatorModel {
        num_committee,
        input_shift,
        input_scale,
        layers,
    })
}

use std::fs;
use std::path::{Path, PathBuf};

use super::layers::{LayerKind, LayerSpec, Rounding};
use super::model::{Init, Model};
use super::train::TrainConfig;
use crate::error::{QpiError, Result};

const MAGIC: &[u8; 4] = b"QPN1";

/// Sidecar path holding the training configuration as TOML.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".toml");
    PathBuf::from(name)
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| QpiError::Shape(format!("{v} does not fit a checkpoint field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Writes layer specs and all parameters as little-endian f32, plus the
/// TOML sidecar.
pub fn save_checkpoint(path: &Path, model: &Model<f32>, config: &TrainConfig) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for d in model.input_shape() {
        put_u32(&mut out, d)?;
    }
    put_u32(&mut out, model.specs().len())?;
    for spec in model.specs() {
        out.push(spec.kind.code());
        out.push(match spec.rounding {
            Rounding::Floor => 0,
            Rounding::Ceil => 1,
        });
        out.extend_from_slice(&[0, 0]);
        for v in [spec.kernel.0, spec.kernel.1, spec.filters, spec.stride, spec.pad] {
            put_u32(&mut out, v)?;
        }
        out.extend_from_slice(&(spec.dropout_rate as f32).to_le_bytes());
    }
    out.extend_from_slice(&(model.param_count() as u64).to_le_bytes());
    for p in model.params() {
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| QpiError::io(path, e))?;
    let text = toml::to_string(config).map_err(|e| QpiError::Config(e.to_string()))?;
    let side = sidecar_path(path);
    fs::write(&side, text).map_err(|e| QpiError::io(&side, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.bytes.len() {
            return Err(QpiError::format(self.path, "checkpoint is truncated"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Reads a checkpoint and, when present, its training configuration.
pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, Option<TrainConfig>)> {
    crate::audit::record_read(path);
    let bytes = fs::read(path).map_err(|e| QpiError::io(path, e))?;
    let mut r = Reader { bytes: &bytes, at: 0, path };
    if r.take(4)? != MAGIC {
        return Err(QpiError::format(path, "not a network checkpoint"));
    }
    let input = [r.u32()?, r.u32()?, r.u32()?];
    let n = r.u32()?;
    let mut specs = Vec::with_capacity(n);
    for _ in 0..n {
        let head = r.take(4)?;
        let kind = LayerKind::from_code(head[0])
            .ok_or_else(|| QpiError::format(path, format!("unknown layer code {}", head[0])))?;
        let rounding = if head[1] == 1 { Rounding::Ceil } else { Rounding::Floor };
        let (kh, kw, filters, stride, pad) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        let dropout_rate = r.f32()? as f64;
        specs.push(LayerSpec {
            kind,
            kernel: (kh, kw),
            filters,
            stride,
            pad,
            dropout_rate,
            rounding,
        });
    }
    let mut model = Model::<f32>::new(input, specs, Init::Gaussian { std: 0.0 }, 0)?;
    let b = r.take(8)?;
    let count = u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize;
    if count != model.param_count() {
        return Err(QpiError::format(
            path,
            format!("checkpoint holds {count} parameters, layer table implies {}", model.param_count()),
        ));
    }
    let sizes: Vec<usize> = model.params().iter().map(|p| p.value.len()).collect();
    let mut values = Vec::with_capacity(sizes.len());
    for size in sizes {
        let raw = r.take(size * 4)?;
        values.push(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        );
    }
    if r.at != bytes.len() {
        return Err(QpiError::format(path, "trailing bytes after parameters"));
    }
    model.set_params(values)?;
    let side = sidecar_path(path);
    let config = if side.exists() {
        let text = fs::read_to_string(&side).map_err(|e| QpiError::io(&side, e))?;
        Some(toml::from_str(&text).map_err(|e| QpiError::format(&side, e.to_string()))?)
    } else {
        None
    };
    Ok((model, config))
}

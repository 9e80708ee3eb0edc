//! Checkpoint layout: the magic line `LVCTC1`, a manifest with one
//! `name dtype dims...` line per parameter slot ended by an empty line, the
//! little-endian f32 payloads in manifest order, then the model
//! configuration as `key = value` lines.

use std::path::Path;

use super::{LvCtc, ModelConfig};
use crate::config::{model_from_kv, model_to_kv};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8] = b"LVCTC1\n";

/// Decoded checkpoint contents, independent of the model's scalar type.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// `(name, shape, values)` in manifest order.
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &LvCtc<T>) -> Self {
        let params = model.params();
        let tensors = params
            .slots()
            .into_iter()
            .map(|(id, name)| {
                let t = params.get(id);
                let values = t.data().iter().map(|v| v.to_f64_lossy() as f32).collect();
                (name.to_string(), t.shape().to_vec(), values)
            })
            .collect();
        Self {
            config: model.config().clone(),
            tensors,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        for (name, shape, _) in &self.tensors {
            let mut line = format!("{name} f32");
            for d in shape {
                line.push_str(&format!(" {d}"));
            }
            line.push('\n');
            out.extend_from_slice(line.as_bytes());
        }
        out.push(b'\n');
        for (_, _, values) in &self.tensors {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(model_to_kv(&self.config).as_bytes());
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let mut rest = bytes
            .strip_prefix(CHECKPOINT_MAGIC)
            .ok_or_else(|| bad("missing LVCTC1 magic".into()))?;
        let mut manifest = Vec::new();
        loop {
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("unterminated manifest".into()))?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|e| bad(format!("manifest: {e}")))?;
            rest = &rest[nl + 1..];
            if line.is_empty() {
                break;
            }
            let mut parts = line.split(' ');
            let name = parts.next().unwrap_or_default().to_string();
            match parts.next() {
                Some("f32") => {}
                other => return Err(bad(format!("{name}: unsupported dtype {other:?}"))),
            }
            let shape = parts
                .map(|d| d.parse::<usize>().map_err(|e| bad(format!("{name}: dimension {d:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            manifest.push((name, shape));
        }
        let mut tensors = Vec::with_capacity(manifest.len());
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            if rest.len() < n * 4 {
                return Err(bad(format!("payload of {name} truncated")));
            }
            let values = rest[..n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            rest = &rest[n * 4..];
            tensors.push((name, shape, values));
        }
        let kv = std::str::from_utf8(rest).map_err(|e| bad(format!("config block: {e}")))?;
        let config = model_from_kv(kv).map_err(|e| bad(format!("config block: {e}")))?;
        Ok(Self { config, tensors })
    }

    /// Builds the model and fills every slot; names and shapes must match
    /// the architecture exactly.
    pub fn into_model<T: Scalar>(self, path: &Path) -> Result<LvCtc<T>> {
        let bad = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let mut model = LvCtc::new(self.config, 0)?;
        let mut filled = vec![false; model.params().len()];
        for (name, shape, values) in self.tensors {
            let params = model.params_mut();
            let id = params
                .id(&name)
                .filter(|&id| params.name(id) == name)
                .ok_or_else(|| bad(format!("unexpected parameter {name}")))?;
            if std::mem::replace(&mut filled[id.index()], true) {
                return Err(bad(format!("parameter {name} listed twice")));
            }
            let data = values.into_iter().map(|v| T::lit(v as f64)).collect();
            let t = Tensor::new(&shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
            params.set(id, t).map_err(|e| bad(format!("{name}: {e}")))?;
        }
        if let Some(i) = filled.iter().position(|&f| !f) {
            let name = model.params().name(crate::tensor::ParamId(i)).to_string();
            return Err(bad(format!("parameter {name} missing")));
        }
        Ok(model)
    }
}

/// Writes through a temporary file and renames, so readers never see a
/// partial checkpoint.
pub fn save_checkpoint<T: Scalar>(path: &Path, model: &LvCtc<T>) -> Result<()> {
    let bytes = Checkpoint::from_model(model).encode();
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<LvCtc<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Checkpoint::decode(&bytes, path)?.into_model(path)
}

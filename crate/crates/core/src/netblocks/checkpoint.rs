//! Single-file archive of named `f32` tensors with a JSON config block,
//! stored in the safetensors layout.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sat3d_tensor::Tensor;
use serde_json::Value;

use super::{ModelConfig, Sat3d};
use crate::error::{Error, Result};
use crate::volgrid::io::write_atomic;

const FORMAT: &str = "sat3d-checkpoint-1";

#[derive(Clone, Debug)]
pub struct Archive {
    pub config: ModelConfig,
    /// Model parameters first, then any extra state (optimiser moments).
    pub tensors: Vec<(String, Tensor)>,
    /// Free-form JSON: training state, loss weights, seeds.
    pub extra: Value,
}

impl Archive {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let raw: Vec<(String, Vec<u8>, Vec<usize>)> =
            self.tensors.iter().map(|(n, t)| (n.clone(), t.data().iter().flat_map(|v| v.to_le_bytes()).collect(), t.shape().to_vec())).collect();
        let mut views = Vec::with_capacity(raw.len());
        for (n, bytes, shape) in &raw {
            let v = TensorView::new(Dtype::F32, shape.clone(), bytes).map_err(|e| Error::Checkpoint(format!("{n}: {e}")))?;
            views.push((n.as_str(), v));
        }
        let meta = HashMap::from([
            ("format".to_string(), FORMAT.to_string()),
            ("config".to_string(), serde_json::to_string(&self.config)?),
            ("extra".to_string(), self.extra.to_string()),
        ]);
        safetensors::serialize(views, &Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
        let info = meta.metadata().as_ref().ok_or_else(|| bad("archive has no metadata".into()))?;
        if info.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(bad("not a sat3d checkpoint".into()));
        }
        let config: ModelConfig = serde_json::from_str(info.get("config").ok_or_else(|| bad("missing config".into()))?)?;
        let extra = match info.get("extra") {
            Some(s) => serde_json::from_str(s)?,
            None => Value::Null,
        };
        let st = SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
        let mut tensors = Vec::new();
        // keep the writer's order (offset order in the payload)
        let mut named: Vec<(String, TensorView)> = st.tensors();
        named.sort_by_key(|(_, v)| v.data().as_ptr() as usize);
        for (n, v) in named {
            if v.dtype() != Dtype::F32 {
                return Err(bad(format!("{n}: dtype {:?}", v.dtype())));
            }
            let data = v.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((n, Tensor::new(v.shape().to_vec(), data)));
        }
        Ok(Self { config, tensors, extra })
    }
}

/// Writes to a temporary file and renames, so an existing archive is never
/// left half-written.
pub fn save_archive(a: &Archive, path: impl AsRef<Path>) -> Result<()> {
    let bytes = a.to_bytes()?;
    write_atomic(path.as_ref(), &bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.as_ref().display())))
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<Archive> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.as_ref().display())))?;
    Archive::from_bytes(&bytes)
}

impl Sat3d {
    pub fn to_archive(&self, extra: Value) -> Archive {
        let tensors = self.params.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
        Archive { config: self.config.clone(), tensors, extra }
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        Sat3d::from_tensors(a.config.clone(), &a.tensors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_archive(&self.to_archive(Value::Null), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&load_archive(path)?)
    }
}

//! Single-file checkpoints: a safetensors archive whose header metadata
//! carries the model configuration as JSON.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::{ParamStore, Real, Tensor};

const FORMAT_KEY: &str = "format";
const FORMAT: &str = "maskfree-checkpoint-v1";
const CONFIG_KEY: &str = "config";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    Encoding(#[from] safetensors::SafeTensorError),
    #[error("checkpoint config is not valid JSON: {0}")]
    Config(#[from] serde_json::Error),
    #[error("not a model checkpoint: {0}")]
    Format(String),
}

/// Serialise parameters (always stored as little-endian f32) plus config.
pub fn to_bytes<T: Real>(store: &ParamStore<T>, config: &serde_json::Value) -> Result<Vec<u8>, CheckpointError> {
    let blobs: Vec<(String, Vec<usize>, Vec<u8>)> = store
        .iter()
        .map(|(name, t)| {
            let bytes = t
                .data()
                .iter()
                .flat_map(|x| (x.to_f32().unwrap()).to_le_bytes())
                .collect();
            (name.to_string(), t.shape().to_vec(), bytes)
        })
        .collect();
    let views = blobs
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes).map(|v| (name.clone(), v))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut meta = HashMap::new();
    meta.insert(FORMAT_KEY.to_string(), FORMAT.to_string());
    meta.insert(CONFIG_KEY.to_string(), serde_json::to_string(config)?);
    Ok(safetensors::serialize(views, Some(meta))?)
}

/// Named tensors in archive order, plus the config header.
pub type Loaded<T> = (Vec<(String, Tensor<T>)>, serde_json::Value);

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<Loaded<T>, CheckpointError> {
    let (_, header) = SafeTensors::read_metadata(bytes)?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| CheckpointError::Format("missing metadata".into()))?;
    if meta.get(FORMAT_KEY).map(String::as_str) != Some(FORMAT) {
        return Err(CheckpointError::Format(format!("unexpected format tag {:?}", meta.get(FORMAT_KEY))));
    }
    let config = serde_json::from_str(
        meta.get(CONFIG_KEY)
            .ok_or_else(|| CheckpointError::Format("missing config".into()))?,
    )?;
    let st = SafeTensors::deserialize(bytes)?;
    let mut tensors = Vec::new();
    for name in header.offset_keys() {
        let view = st.tensor(&name)?;
        if view.dtype() != Dtype::F32 {
            return Err(CheckpointError::Format(format!("{name}: expected F32, got {:?}", view.dtype())));
        }
        let data = view
            .data()
            .chunks_exact(4)
            .map(|c| T::from_f32(f32::from_le_bytes([c[0], c[1], c[2], c[3]])).unwrap())
            .collect();
        tensors.push((name, Tensor::new(view.shape().to_vec(), data)));
    }
    Ok((tensors, config))
}

pub fn save<T: Real>(path: &Path, store: &ParamStore<T>, config: &serde_json::Value) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(store, config)?)?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<Loaded<T>, CheckpointError> {
    from_bytes(&std::fs::read(path)?)
}

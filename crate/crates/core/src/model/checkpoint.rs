//! Checkpoint files: safetensors with a single JSON metadata entry holding
//! the format version, the network config and the output-class list.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Var};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::{Network, NetworkConfig};
use crate::error::{Error, Result};

const META_KEY: &str = "gfss";
const FORMAT: &str = "gfss-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: NetworkConfig,
    #[serde(default)]
    output_classes: Option<Vec<usize>>,
    buffers: Vec<String>,
}

/// A network restored from disk, with the dataset class of each output.
#[derive(Debug)]
pub struct Checkpoint {
    pub network: Network,
    pub output_classes: Option<Vec<usize>>,
}

pub fn save_checkpoint(path: impl AsRef<Path>, network: &Network, output_classes: Option<&[usize]>) -> Result<()> {
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        config: network.config.clone(),
        output_classes: output_classes.map(<[usize]>::to_vec),
        buffers: network.buffers.keys().cloned().collect(),
    };
    let tensors: Vec<(String, candle_core::Tensor)> = network
        .params
        .iter()
        .chain(&network.buffers)
        .map(|(n, v)| (n.clone(), v.as_tensor().detach()))
        .collect();
    let meta = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&header)?)]);
    let bytes = safetensors::serialize(tensors, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Loads a checkpoint. When `expected` is given, the stored config must
/// match it exactly.
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&NetworkConfig>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let raw = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{} is not a gfss checkpoint", path.display())))?;
    let header: Header = serde_json::from_str(raw)?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {} v{}",
            header.format, header.version
        )));
    }
    if let Some(cfg) = expected {
        if *cfg != header.config {
            return Err(Error::Checkpoint(format!(
                "checkpoint config {:?} does not match expected {:?}",
                header.config, cfg
            )));
        }
    }
    let mut tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;

    // Build a reference network to learn the expected names and shapes.
    let reference = super::build_network(&header.config, 0)?;
    let mut take = |names: &BTreeMap<String, Var>| -> Result<BTreeMap<String, Var>> {
        names
            .iter()
            .map(|(n, v)| {
                let t = tensors
                    .remove(n)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {n}")))?;
                if t.dims() != v.dims() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {n} has shape {:?}, expected {:?}",
                        t.dims(),
                        v.dims()
                    )));
                }
                Ok((n.clone(), Var::from_tensor(&t.to_dtype(DType::F32)?)?))
            })
            .collect()
    };
    let params = take(&reference.params)?;
    let buffers = take(&reference.buffers)?;
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        network: Network::from_parts(header.config, params, buffers),
        output_classes: header.output_classes,
    })
}

//! Weight files: a JSON header (graph, seed, block directory) followed by
//! raw little-endian f32 blocks, parameters first then buffers, in layer
//! order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::ModelGraph;
use super::model::Model;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ECGWGTS1";

#[derive(Debug, Serialize, Deserialize)]
struct BlockInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    graph: ModelGraph,
    seed: u64,
    params: Vec<BlockInfo>,
    buffers: Vec<BlockInfo>,
}

/// Serialize a model's graph, parameters and buffers.
pub fn save_model(model: &mut Model, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let graph = model.graph.clone();
    let seed = model.seed;
    let mut params_info = Vec::new();
    let mut blocks: Vec<Vec<f64>> = Vec::new();
    for (name, p) in model.named_params() {
        params_info.push(BlockInfo {
            name,
            shape: p.value.shape().to_vec(),
        });
        blocks.push(p.value.data().to_vec());
    }
    let mut buffers_info = Vec::new();
    for (name, b) in model.named_buffers() {
        buffers_info.push(BlockInfo {
            name,
            shape: vec![b.len()],
        });
        blocks.push(b.clone());
    }
    let header = Header {
        graph,
        seed,
        params: params_info,
        buffers: buffers_info,
    };
    let json = serde_json::to_vec(&header)?;
    let mut file = fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(json.len() as u64).to_le_bytes())?;
    file.write_all(&json)?;
    for block in blocks {
        for v in block {
            file.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Rebuild a model from a weight file.
pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format(format!("{} is not a weight file", path.display())));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + json_len {
        return Err(Error::Format(format!("{} header is truncated", path.display())));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + json_len])
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut model = Model::from_graph(header.graph, header.seed)?;

    let mut offset = 16 + json_len;
    let mut read_block = |len: usize, what: &str| -> Result<Vec<f64>> {
        let end = offset + len * 4;
        if bytes.len() < end {
            return Err(Error::Format(format!("{}: {what} block is truncated", path.display())));
        }
        let out = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        offset = end;
        Ok(out)
    };

    {
        let named = model.named_params();
        if named.len() != header.params.len() {
            return Err(Error::Format(format!(
                "{}: {} parameter blocks for {} parameters",
                path.display(),
                header.params.len(),
                named.len()
            )));
        }
        for ((name, param), info) in named.into_iter().zip(&header.params) {
            if name != info.name || param.value.shape() != info.shape.as_slice() {
                return Err(Error::Format(format!(
                    "{}: block {} does not match parameter {name}",
                    path.display(),
                    info.name
                )));
            }
            let data = read_block(param.value.numel(), &name)?;
            param.value.data_mut().copy_from_slice(&data);
        }
    }
    {
        let named = model.named_buffers();
        if named.len() != header.buffers.len() {
            return Err(Error::Format(format!("{}: buffer count mismatch", path.display())));
        }
        for ((name, buffer), info) in named.into_iter().zip(&header.buffers) {
            if name != info.name || buffer.len() != info.shape[0] {
                return Err(Error::Format(format!(
                    "{}: block {} does not match buffer {name}",
                    path.display(),
                    info.name
                )));
            }
            let data = read_block(buffer.len(), &name)?;
            buffer.copy_from_slice(&data);
        }
    }
    Ok(model)
}

//! Self-describing binary checkpoints: magic, version, a JSON echo of the
//! network spec and assignment, then named little-endian f32 tensor blobs.
//! A checkpoint carries everything needed to evaluate it, so no original
//! config is required at load time.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{
    init_weights, NetworkSpec, PrecisionAssignment, Weights,
};
use crate::tensor::DenseTensor;

const MAGIC: &[u8; 8] = b"B2NNCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("checkpoint truncated at byte offset {offset}")]
    Truncated { offset: usize },
    #[error("checkpoint header corrupt: {0}")]
    Header(String),
    #[error("tensor {name}: shape {actual:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("unexpected tensor {0} in checkpoint")]
    UnknownTensor(String),
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("checkpoint does not match its own network spec: {0}")]
    Inconsistent(String),
}

#[derive(Serialize, Deserialize)]
struct Header {
    network: NetworkSpec,
    assignment: PrecisionAssignment,
    tensor_count: u32,
}

/// All tensors of a weight set, including batchnorm running statistics, in
/// canonical order.
fn named_tensors(weights: &Weights) -> Vec<(String, &DenseTensor)> {
    let mut out = Vec::new();
    let layers = std::iter::once(("stem".to_string(), &weights.stem))
        .chain(
            weights
                .hidden
                .iter()
                .enumerate()
                .map(|(i, lw)| (format!("hidden{}", i + 1), lw)),
        )
        .chain(std::iter::once(("head".to_string(), &weights.head)));
    for (prefix, lw) in layers {
        out.push((format!("{prefix}.weight"), &lw.weight));
        if let Some(bias) = &lw.bias {
            out.push((format!("{prefix}.bias"), bias));
        }
        if let Some(bn) = &lw.bn {
            out.push((format!("{prefix}.bn.gamma"), &bn.gamma));
            out.push((format!("{prefix}.bn.beta"), &bn.beta));
            out.push((format!("{prefix}.bn.running_mean"), &bn.running_mean));
            out.push((format!("{prefix}.bn.running_var"), &bn.running_var));
        }
    }
    out
}

fn named_tensors_mut(weights: &mut Weights) -> Vec<(String, &mut DenseTensor)> {
    let mut out = Vec::new();
    let layers = std::iter::once(("stem".to_string(), &mut weights.stem))
        .chain(
            weights
                .hidden
                .iter_mut()
                .enumerate()
                .map(|(i, lw)| (format!("hidden{}", i + 1), lw)),
        )
        .chain(std::iter::once(("head".to_string(), &mut weights.head)));
    for (prefix, lw) in layers {
        out.push((format!("{prefix}.weight"), &mut lw.weight));
        if let Some(bias) = lw.bias.as_mut() {
            out.push((format!("{prefix}.bias"), bias));
        }
        if let Some(bn) = lw.bn.as_mut() {
            out.push((format!("{prefix}.bn.gamma"), &mut bn.gamma));
            out.push((format!("{prefix}.bn.beta"), &mut bn.beta));
            out.push((format!("{prefix}.bn.running_mean"), &mut bn.running_mean));
            out.push((format!("{prefix}.bn.running_var"), &mut bn.running_var));
        }
    }
    out
}

/// Serializes a checkpoint to bytes.
pub fn encode(
    net: &NetworkSpec,
    assignment: &PrecisionAssignment,
    weights: &Weights,
) -> Vec<u8> {
    let tensors = named_tensors(weights);
    let header = Header {
        network: net.clone(),
        assignment: assignment.clone(),
        tensor_count: tensors.len() as u32,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (name, tensor) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.shape().len() as u8);
        for &dim in tensor.shape() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.offset + n > self.bytes.len() {
            return Err(CheckpointError::Truncated {
                offset: self.bytes.len(),
            });
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }
}

/// Parses checkpoint bytes back into a network, assignment, and weights.
pub fn decode(
    bytes: &[u8],
) -> Result<(NetworkSpec, PrecisionAssignment, Weights), CheckpointError> {
    let mut reader = Reader { bytes, offset: 0 };
    if reader.take(8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = reader.u32()?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let header_len = reader.u32()? as usize;
    let header: Header = serde_json::from_slice(reader.take(header_len)?)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    header
        .network
        .stage_shapes()
        .map_err(|e| CheckpointError::Inconsistent(e.to_string()))?;
    let assignment =
        PrecisionAssignment::from_indices(header.assignment.indices(), &header.network)
            .map_err(|e| CheckpointError::Inconsistent(e.to_string()))?;

    // template with the right structure; every tensor must be overwritten
    let mut weights = init_weights(&header.network, 0);
    {
        let mut slots = named_tensors_mut(&mut weights);
        let mut filled = vec![false; slots.len()];
        for _ in 0..header.tensor_count {
            let name_len = reader.u16()? as usize;
            let name = String::from_utf8(reader.take(name_len)?.to_vec())
                .map_err(|e| CheckpointError::Header(e.to_string()))?;
            let ndim = reader.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(reader.u32()? as usize);
            }
            let count: usize = shape.iter().product();
            let raw = reader.take(count * 4)?;
            let slot = slots
                .iter_mut()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| CheckpointError::UnknownTensor(name.clone()))?;
            if filled[slot] {
                return Err(CheckpointError::UnknownTensor(format!("{name} (duplicate)")));
            }
            let tensor = &mut slots[slot].1;
            if tensor.shape() != shape.as_slice() {
                return Err(CheckpointError::TensorShape {
                    name,
                    expected: tensor.shape().to_vec(),
                    actual: shape,
                });
            }
            for (i, chunk) in raw.chunks_exact(4).enumerate() {
                tensor.data_mut()[i] = f32::from_le_bytes(chunk.try_into().unwrap());
            }
            filled[slot] = true;
        }
        if let Some(missing) = filled.iter().position(|&f| !f) {
            return Err(CheckpointError::MissingTensor(slots[missing].0.clone()));
        }
    }
    if reader.offset != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - reader.offset));
    }
    Ok((header.network, assignment, weights))
}

pub fn save(
    path: &Path,
    net: &NetworkSpec,
    assignment: &PrecisionAssignment,
    weights: &Weights,
) -> Result<(), CheckpointError> {
    let bytes = encode(net, assignment, weights);
    let mut file = std::fs::File::create(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    file.write_all(&bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<(NetworkSpec, PrecisionAssignment, Weights), CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

//! Binary checkpoint files.
//!
//! Layout: the 8-byte magic `NICETRCK`, a little-endian `u32` format
//! version, a `u64` header length and a UTF-8 JSON header, followed by the
//! raw little-endian `f32` data of every tensor in header order. When
//! optimizer state is present, its first and second moment buffers follow
//! in the same order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{NetworkParams, ParamEntry};
use crate::autograd::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NICETRCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: NetworkParams,
    pub seed: u64,
    /// Completed training iterations.
    pub iteration: usize,
    /// Position of the training random stream, in 32-bit words.
    pub rng_word_pos: u128,
    pub optimizer: Option<OptimizerState>,
    /// Free-form run metadata, such as the resolved training config.
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn new(params: NetworkParams, seed: u64) -> Self {
        Self {
            params,
            seed,
            iteration: 0,
            rng_word_pos: 0,
            optimizer: None,
            metadata: serde_json::Value::Null,
        }
    }

    /// Bitwise equality of everything stored.
    pub fn same_as(&self, other: &Checkpoint) -> bool {
        self.params.same_values(&other.params)
            && self.seed == other.seed
            && self.iteration == other.iteration
            && self.rng_word_pos == other.rng_word_pos
            && self.metadata == other.metadata
            && match (&self.optimizer, &other.optimizer) {
                (None, None) => true,
                (Some(a), Some(b)) => {
                    let bits = |x: &Vec<Vec<f32>>| x.iter().flatten().map(|f| f.to_bits()).collect::<Vec<_>>();
                    a.step == b.step && bits(&a.m) == bits(&b.m) && bits(&a.v) == bits(&b.v)
                }
                _ => false,
            }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    group: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    seed: u64,
    iteration: usize,
    /// Decimal string: JSON numbers cannot carry a full `u128`.
    rng_word_pos: String,
    tensors: Vec<TensorInfo>,
    optimizer_step: Option<u64>,
    metadata: serde_json::Value,
}

fn write_f32s(w: &mut impl Write, data: &[f32], path: &Path) -> Result<()> {
    for &v in data {
        w.write_f32::<LittleEndian>(v).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn read_f32s(r: &mut impl Read, n: usize, path: &Path) -> Result<Vec<f32>> {
    let mut out = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut out).map_err(|e| Error::io(path, e))?;
    Ok(out)
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let header = Header {
        config: ck.params.config().clone(),
        seed: ck.seed,
        iteration: ck.iteration,
        rng_word_pos: ck.rng_word_pos.to_string(),
        tensors: ck
            .params
            .entries()
            .iter()
            .map(|e| TensorInfo { name: e.name.clone(), group: e.group.clone(), shape: e.tensor.shape().to_vec() })
            .collect(),
        optimizer_step: ck.optimizer.as_ref().map(|o| o.step),
        metadata: ck.metadata.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
    w.write_u64::<LittleEndian>(json.len() as u64).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for e in ck.params.entries() {
        write_f32s(&mut w, e.tensor.data(), path)?;
    }
    if let Some(opt) = &ck.optimizer {
        for buf in opt.m.iter().chain(&opt.v) {
            write_f32s(&mut w, buf, path)?;
        }
    }
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(io)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    header.config.validate()?;
    let rng_word_pos = header
        .rng_word_pos
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad rng position {:?}", header.rng_word_pos)))?;
    let mut entries = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let data = read_f32s(&mut r, t.shape.iter().product(), path)?;
        entries.push(ParamEntry {
            name: t.name.clone(),
            group: t.group.clone(),
            tensor: Arc::new(Tensor::new(t.shape.clone(), data)),
        });
    }
    let optimizer = match header.optimizer_step {
        None => None,
        Some(step) => {
            let sizes: Vec<usize> = header.tensors.iter().map(|t| t.shape.iter().product()).collect();
            let mut read_all = || -> Result<Vec<Vec<f32>>> { sizes.iter().map(|&n| read_f32s(&mut r, n, path)).collect() };
            let m = read_all()?;
            let v = read_all()?;
            Some(OptimizerState { step, m, v })
        }
    };
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    let params = NetworkParams::from_entries(header.config, entries);
    let reference = NetworkParams::init(params.config(), 0)?;
    let layout_ok = reference.entries().len() == params.entries().len()
        && reference
            .entries()
            .iter()
            .zip(params.entries())
            .all(|(a, b)| a.name == b.name && a.tensor.shape() == b.tensor.shape());
    if !layout_ok {
        return Err(Error::Checkpoint("tensor layout does not match the stored model config".into()));
    }
    Ok(Checkpoint {
        params,
        seed: header.seed,
        iteration: header.iteration,
        rng_word_pos,
        optimizer,
        metadata: header.metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            affine_steps: 1,
            deform_steps: 1,
            encoder_dims: vec![2, 4],
            decoder_dims: vec![4, 2],
            attn_heads: vec![2, 0],
            window_size: [2, 2, 2],
            variant: super::super::Variant::TransDecoder,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let params = NetworkParams::init(&tiny(), 5).unwrap();
        let sizes: Vec<usize> = params.entries().iter().map(|e| e.tensor.len()).collect();
        let mut ck = Checkpoint::new(params, 5);
        ck.iteration = 17;
        ck.rng_word_pos = u128::MAX - 3;
        ck.metadata = serde_json::json!({"note": "x"});
        ck.optimizer = Some(OptimizerState {
            step: 17,
            m: sizes.iter().map(|&n| vec![0.25; n]).collect(),
            v: sizes.iter().map(|&n| vec![f32::MIN_POSITIVE; n]).collect(),
        });
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert!(back.same_as(&ck));
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }
}

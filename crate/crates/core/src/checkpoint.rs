//! Binary checkpoint format.
//!
//! Layout: magic bytes `AGCKPT1\n`; a u32-length-prefixed UTF-8 JSON block
//! with the train config, vocabulary, and step counter; then one record per
//! tensor: name length (u32 LE), name bytes, rank (u32 LE), dims (u32 LE
//! each), payload as f32 LE. Optimizer and RNG state travel as tensors with
//! reserved name prefixes. Saves are atomic (temp file + rename), so a
//! failed save never clobbers the previous checkpoint.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_parameters, ParameterStore};
use crate::tensor::Tensor;
use crate::trainer::{AdamState, TrainConfig};

pub const MAGIC: &[u8; 8] = b"AGCKPT1\n";

const OPT_M_PREFIX: &str = "__opt_m__/";
const OPT_V_PREFIX: &str = "__opt_v__/";
const OPT_T_NAME: &str = "__opt_t__";
const RNG_NAME: &str = "__rng__";

/// A complete training snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Vocabulary tokens, line order = id.
    pub vocab_tokens: Vec<String>,
    pub step: u64,
    pub params: ParameterStore<f32>,
    pub opt: AdamState,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    version: u32,
    config: TrainConfig,
    vocab: Vec<String>,
    step: u64,
}

fn write_tensor<W: Write>(sink: &mut W, name: &str, tensor: &Tensor<f32>) -> Result<()> {
    sink.write_all(&(name.len() as u32).to_le_bytes())?;
    sink.write_all(name.as_bytes())?;
    sink.write_all(&(tensor.shape.len() as u32).to_le_bytes())?;
    for &d in &tensor.shape {
        sink.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in &tensor.data {
        sink.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Splits a u64 into two f32 values carrying the raw bit halves.
fn seed_tensor(seed: u64) -> Tensor<f32> {
    let lo = f32::from_bits(seed as u32);
    let hi = f32::from_bits((seed >> 32) as u32);
    Tensor { shape: vec![2], data: vec![lo, hi], requires_grad: false }
}

fn seed_from_tensor(t: &Tensor<f32>) -> Result<u64> {
    if t.data.len() != 2 {
        return Err(Error::Checkpoint(format!("tensor '{}' must hold 2 values", RNG_NAME)));
    }
    Ok(t.data[0].to_bits() as u64 | ((t.data[1].to_bits() as u64) << 32))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut sink = BufWriter::new(File::create(&tmp)?);
        sink.write_all(MAGIC)?;
        let meta = Meta {
            version: 1,
            config: ckpt.config.clone(),
            vocab: ckpt.vocab_tokens.clone(),
            step: ckpt.step,
        };
        let json = serde_json::to_vec(&meta)
            .map_err(|e| Error::Checkpoint(format!("config serialization: {}", e)))?;
        sink.write_all(&(json.len() as u32).to_le_bytes())?;
        sink.write_all(&json)?;
        for (name, tensor) in ckpt.params.iter() {
            write_tensor(&mut sink, name, tensor)?;
        }
        for (name, tensor) in ckpt.opt.m.iter() {
            write_tensor(&mut sink, &format!("{}{}", OPT_M_PREFIX, name), tensor)?;
        }
        for (name, tensor) in ckpt.opt.v.iter() {
            write_tensor(&mut sink, &format!("{}{}", OPT_V_PREFIX, name), tensor)?;
        }
        let t = Tensor { shape: vec![1], data: vec![ckpt.opt.t as f32], requires_grad: false };
        write_tensor(&mut sink, OPT_T_NAME, &t)?;
        write_tensor(&mut sink, RNG_NAME, &seed_tensor(ckpt.config.seed))?;
        sink.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_exact_or<R: Read>(source: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    source
        .read_exact(buf)
        .map_err(|_| Error::Checkpoint(format!("truncated file while reading {}", what)))
}

fn read_u32<R: Read>(source: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(source, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one tensor record; returns None at a clean end of file.
fn read_tensor<R: Read>(source: &mut R) -> Result<Option<(String, Tensor<f32>)>> {
    let mut len_buf = [0u8; 4];
    match source.read_exact(&mut len_buf) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let name_len = u32::from_le_bytes(len_buf) as usize;
    let mut name_buf = vec![0u8; name_len];
    read_exact_or(source, &mut name_buf, "tensor name")?;
    let name = String::from_utf8(name_buf)
        .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
    let rank = read_u32(source, &name)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(source, &name)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut payload = vec![0u8; numel * 4];
    read_exact_or(source, &mut payload, &name)?;
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Some((name, Tensor { shape, data, requires_grad: false })))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut source = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact_or(&mut source, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes (not an AGCKPT1 file)".into()));
    }
    let json_len = read_u32(&mut source, "config length")? as usize;
    let mut json = vec![0u8; json_len];
    read_exact_or(&mut source, &mut json, "config block")?;
    let meta: Meta = serde_json::from_slice(&json)
        .map_err(|e| Error::Checkpoint(format!("config block: {}", e)))?;
    if meta.version != 1 {
        return Err(Error::Checkpoint(format!("unsupported format version {}", meta.version)));
    }

    // Expected names and shapes come from a reference init for this config.
    let reference = init_parameters(&meta.config.model, 0)?;
    let mut params = reference.clone();
    let mut opt = AdamState::new(&reference);
    let mut seen: std::collections::HashSet<String> = std::collections::HashSet::new();
    let mut stored_step: Option<u64> = None;
    while let Some((name, tensor)) = read_tensor(&mut source)? {
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("duplicate tensor '{}'", name)));
        }
        if name == OPT_T_NAME {
            stored_step = Some(tensor.data.first().copied().unwrap_or(0.0) as u64);
            continue;
        }
        if name == RNG_NAME {
            let seed = seed_from_tensor(&tensor)?;
            if seed != meta.config.seed {
                return Err(Error::Checkpoint("RNG state disagrees with config seed".into()));
            }
            continue;
        }
        let (store, key) = if let Some(k) = name.strip_prefix(OPT_M_PREFIX) {
            (&mut opt.m, k.to_string())
        } else if let Some(k) = name.strip_prefix(OPT_V_PREFIX) {
            (&mut opt.v, k.to_string())
        } else {
            (&mut params, name.clone())
        };
        if !store.contains(&key) {
            return Err(Error::Checkpoint(format!("unexpected tensor '{}'", name)));
        }
        let slot = store.get_mut(&key);
        if slot.shape != tensor.shape {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' has shape {:?}, expected {:?}",
                name, tensor.shape, slot.shape
            )));
        }
        slot.data = tensor.data;
    }
    for (name, _) in reference.iter() {
        if !seen.contains(name) {
            return Err(Error::Checkpoint(format!("missing tensor '{}'", name)));
        }
        if !seen.contains(&format!("{}{}", OPT_M_PREFIX, name))
            || !seen.contains(&format!("{}{}", OPT_V_PREFIX, name))
        {
            return Err(Error::Checkpoint(format!("missing optimizer state for '{}'", name)));
        }
    }
    let opt_t = stored_step
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{}'", OPT_T_NAME)))?;
    opt.t = opt_t;
    Ok(Checkpoint { config: meta.config, vocab_tokens: meta.vocab, step: meta.step, params, opt })
}

//! Binary checkpoints.
//!
//! Layout, all integers `u32` little-endian:
//!
//! ```text
//! "MASKHEAD1"
//! tensor count
//! per tensor: name length, name (UTF-8), rank, dims...
//! per tensor, same order: raw f64 little-endian values
//! ```
//!
//! Tensors are `conv{i}.kernels`, `conv{i}.bias`, `head.weights`, `head.bias`,
//! `mask.logits` (masked models only) and `meta.input`, a length-3 tensor
//! holding the encoder input shape `[channels, height, width]`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::mask::MaskParams;
use crate::model::{ConvBlock, EncoderConfig, ModelParams, Variant};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 9] = b"MASKHEAD1";
const META_INPUT: &str = "meta.input";

fn checkpoint_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let cfg = &params.config;
    let meta = Tensor::vector(vec![
        cfg.channels as f64,
        cfg.height as f64,
        cfg.width as f64,
    ]);
    let mut tensors = params.named_tensors();
    tensors.push((META_INPUT.to_string(), &meta));

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(checkpoint_err(format!(
                "truncated {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }
}

fn known_name(name: &str) -> bool {
    if matches!(
        name,
        "head.weights" | "head.bias" | "mask.logits" | META_INPUT
    ) {
        return true;
    }
    name.strip_prefix("conv")
        .and_then(|rest| rest.split_once('.'))
        .is_some_and(|(idx, field)| {
            idx.parse::<usize>().is_ok() && matches!(field, "kernels" | "bias")
        })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(checkpoint_err("bad magic"));
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let count = r.u32("tensor count")?;
    let mut headers = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let len = r.u32("tensor name length")?;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| checkpoint_err("tensor name is not UTF-8"))?
            .to_string();
        if !known_name(&name) {
            return Err(checkpoint_err(format!("unknown tensor \"{name}\"")));
        }
        let rank = r.u32(&format!("rank of \"{name}\""))?;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.u32(&format!("dims of \"{name}\""))?);
        }
        headers.push((name, dims));
    }
    let mut tensors = BTreeMap::new();
    for (name, dims) in headers {
        let n: usize = dims.iter().product();
        let raw = r.take(n * 8, &format!("tensor \"{name}\""))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data)
            .map_err(|e| checkpoint_err(format!("tensor \"{name}\": {e}")))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(checkpoint_err(format!("duplicate tensor \"{name}\"")));
        }
    }
    if r.pos != bytes.len() {
        return Err(checkpoint_err(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    assemble(tensors)
}

fn assemble(mut tensors: BTreeMap<String, Tensor>) -> Result<ModelParams> {
    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| checkpoint_err(format!("missing tensor \"{name}\"")))
    };
    let meta = take(META_INPUT)?;
    if meta.shape() != [3] || meta.data().iter().any(|v| v.fract() != 0.0 || *v < 1.0) {
        return Err(checkpoint_err(format!("malformed tensor \"{META_INPUT}\"")));
    }
    let [channels, height, width] = [0, 1, 2].map(|i| meta.data()[i] as usize);
    let head_weights = take("head.weights")?;
    let head_bias = take("head.bias")?;
    let mask = tensors
        .remove("mask.logits")
        .map(MaskParams::from_logits)
        .transpose()?;

    let mut blocks = Vec::new();
    loop {
        let i = blocks.len();
        let (k, b) = (format!("conv{i}.kernels"), format!("conv{i}.bias"));
        match (tensors.remove(&k), tensors.remove(&b)) {
            (Some(kernels), Some(bias)) => blocks.push(ConvBlock { kernels, bias }),
            (None, None) => break,
            (Some(_), None) => return Err(checkpoint_err(format!("missing tensor \"{b}\""))),
            (None, Some(_)) => return Err(checkpoint_err(format!("missing tensor \"{k}\""))),
        }
    }
    if let Some(name) = tensors.keys().next() {
        return Err(checkpoint_err(format!("unexpected tensor \"{name}\"")));
    }
    if blocks.is_empty() || head_weights.rank() != 2 {
        return Err(checkpoint_err(
            "checkpoint has no encoder blocks or a malformed head",
        ));
    }
    let config = EncoderConfig {
        height,
        width,
        channels,
        block_channels: blocks.iter().map(|b| b.kernels.shape()[0]).collect(),
        n_classes: head_weights.shape()[0],
    };
    let params = ModelParams {
        config,
        blocks,
        head_weights,
        head_bias,
        mask,
    };
    params
        .validate()
        .map_err(|e| checkpoint_err(format!("inconsistent shapes: {e}")))?;
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params)).map_err(Error::at_path(path))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(Error::at_path(path))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and checks that it is of the given variant.
pub fn load_checkpoint_as(path: impl AsRef<Path>, variant: Variant) -> Result<ModelParams> {
    let params = load_checkpoint(path)?;
    params.expect_variant(variant)?;
    Ok(params)
}

//! Shared model plumbing: named parameter blocks, initialization, tape
//! binding, normalization layers, and the checkpoint container format.
//!
//! Checkpoints are a single file: one JSON header line carrying a config
//! snapshot and the block index, followed by raw little-endian f64 data for
//! every block in index order.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use autograd::{Tape, Var};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown parameter block '{0}'")]
    UnknownBlock(String),
    #[error("checkpoint io error at {path}: {source}")]
    CheckpointIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint at {path} is corrupt: {msg}")]
    CheckpointCorrupt { path: PathBuf, msg: String },
    #[error("checkpoint config mismatch: {0}")]
    CheckpointConfigMismatch(String),
}

/// Named parameter blocks in a stable (lexicographic) order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    blocks: BTreeMap<String, ArrayD<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            self.blocks.insert(name.to_string(), value).is_none(),
            "duplicate parameter block '{name}'"
        );
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.blocks
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter block '{name}'"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.blocks
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter block '{name}'"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.blocks.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.blocks.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.blocks.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.blocks.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.blocks.values().map(|b| b.len()).sum()
    }

    /// Zero-filled clone with the same block names and shapes.
    pub fn zeros_like(&self) -> Self {
        let blocks = self
            .blocks
            .iter()
            .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
            .collect();
        Self { blocks }
    }

    /// Register every block on a tape.
    pub fn bind(&self, tape: &Tape, requires_grad: bool) -> BoundParams {
        let vars = self
            .blocks
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad)))
            .collect();
        BoundParams { vars }
    }
}

/// Tape handles for a bound [`ParamSet`].
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("missing bound parameter '{name}'"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// He-style normal init for a conv weight `[cout, cin, kh, kw]`.
pub fn init_conv_weight(
    rng: &mut ChaCha8Rng,
    cout: usize,
    cin: usize,
    kh: usize,
    kw: usize,
) -> ArrayD<f64> {
    let fan_in = (cin * kh * kw) as f64;
    let std = (2.0 / fan_in).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    ArrayD::from_shape_fn(IxDyn(&[cout, cin, kh, kw]), |_| dist.sample(rng))
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::ones(IxDyn(shape))
}

/// Conv + bias helper reading blocks `{prefix}.w` / `{prefix}.b`.
pub fn conv_layer(
    tape: &Tape,
    params: &BoundParams,
    prefix: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Var {
    let y = tape.conv2d(x, params.var(&format!("{prefix}.w")), stride, pad);
    tape.add_bias(y, params.var(&format!("{prefix}.b")))
}

/// Instance normalization with learned affine, blocks `{prefix}.g` / `{prefix}.b`.
///
/// Statistics are per sample and per channel over space; built entirely from
/// differentiable primitives.
pub fn instance_norm(tape: &Tape, params: &BoundParams, prefix: &str, x: Var, eps: f64) -> Var {
    let shape = tape.shape(x);
    let (h, w) = (shape[2], shape[3]);
    let mean = tape.broadcast_hw(tape.mean_hw(x), h, w);
    let centered = tape.sub(x, mean);
    let var = tape.broadcast_hw(tape.mean_hw(tape.mul(centered, centered)), h, w);
    let inv_std = tape.recip(tape.sqrt(tape.add_scalar(var, eps)));
    let normed = tape.mul(centered, inv_std);
    let scaled = tape.mul_bias(normed, params.var(&format!("{prefix}.g")));
    tape.add_bias(scaled, params.var(&format!("{prefix}.b")))
}

#[derive(Serialize, Deserialize)]
struct BlockMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    config: serde_json::Value,
    blocks: Vec<BlockMeta>,
}

const FORMAT_TAG: &str = "param-blocks-v1";

/// Write parameter blocks plus a config snapshot into a single file.
pub fn save_params<C: Serialize>(
    path: &Path,
    config: &C,
    params: &ParamSet,
) -> Result<(), ModelError> {
    let io_err = |source| ModelError::CheckpointIo {
        path: path.to_path_buf(),
        source,
    };
    let header = CheckpointHeader {
        format: FORMAT_TAG.to_string(),
        config: serde_json::to_value(config).expect("config serializes"),
        blocks: params
            .iter()
            .map(|(name, v)| BlockMeta {
                name: name.clone(),
                shape: v.shape().to_vec(),
            })
            .collect(),
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer(&mut out, &header).map_err(|e| ModelError::CheckpointCorrupt {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    out.write_all(b"\n").map_err(io_err)?;
    for (_, block) in params.iter() {
        for &v in block.iter() {
            out.write_f64::<LittleEndian>(v).map_err(io_err)?;
        }
    }
    out.flush().map_err(io_err)
}

/// Read back a parameter file. Returns the stored config value and blocks.
pub fn load_params(path: &Path) -> Result<(serde_json::Value, ParamSet), ModelError> {
    let io_err = |source| ModelError::CheckpointIo {
        path: path.to_path_buf(),
        source,
    };
    let corrupt = |msg: String| ModelError::CheckpointCorrupt {
        path: path.to_path_buf(),
        msg,
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut reader = BufReader::new(file);
    let mut header_line = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        reader.read_exact(&mut byte).map_err(io_err)?;
        if byte[0] == b'\n' {
            break;
        }
        header_line.push(byte[0]);
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&header_line).map_err(|e| corrupt(e.to_string()))?;
    if header.format != FORMAT_TAG {
        return Err(corrupt(format!("unknown format tag '{}'", header.format)));
    }
    let mut params = ParamSet::new();
    for meta in &header.blocks {
        let count: usize = meta.shape.iter().product();
        let mut data = vec![0.0f64; count];
        reader
            .read_f64_into::<LittleEndian>(&mut data)
            .map_err(io_err)?;
        let arr = ArrayD::from_shape_vec(IxDyn(&meta.shape), data)
            .map_err(|e| corrupt(format!("block '{}': {e}", meta.name)))?;
        params.insert(&meta.name, arr);
    }
    Ok((header.config, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    #[test]
    fn param_file_round_trip() {
        let mut rng = derive_rng(3, "nn_test", &[]);
        let mut params = ParamSet::new();
        params.insert("a.w", init_conv_weight(&mut rng, 4, 2, 3, 3));
        params.insert("a.b", zeros(&[4]));

        #[derive(Serialize, Deserialize, PartialEq, Debug)]
        struct Cfg {
            width: usize,
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        save_params(&path, &Cfg { width: 4 }, &params).unwrap();
        let (cfg, loaded) = load_params(&path).unwrap();
        let cfg: Cfg = serde_json::from_value(cfg).unwrap();
        assert_eq!(cfg, Cfg { width: 4 });
        assert_eq!(loaded, params);
    }

    #[test]
    fn instance_norm_centers_and_scales() {
        let tape = Tape::new();
        let mut params = ParamSet::new();
        params.insert("n.g", ones(&[2]));
        params.insert("n.b", zeros(&[2]));
        let bound = params.bind(&tape, false);
        let mut rng = derive_rng(4, "in_test", &[]);
        let x = tape.leaf_nograd(ArrayD::from_shape_fn(IxDyn(&[2, 2, 4, 4]), |_| {
            rand::Rng::random_range(&mut rng, -2.0..2.0)
        }));
        let y = tape.value(instance_norm(&tape, &bound, "n", x, 1e-5));
        for b in 0..2 {
            for c in 0..2 {
                let mut mean = 0.0;
                let mut sq = 0.0;
                for h in 0..4 {
                    for w in 0..4 {
                        mean += y[[b, c, h, w]];
                        sq += y[[b, c, h, w]] * y[[b, c, h, w]];
                    }
                }
                mean /= 16.0;
                let var = sq / 16.0 - mean * mean;
                assert!(mean.abs() < 1e-10);
                assert!((var - 1.0).abs() < 1e-3, "var {var}");
            }
        }
    }
}

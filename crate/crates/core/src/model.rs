//! Decoder-style transformer over a sequence plan.
//!
//! Parameters are a flat list of named f64 tensors. Values always lie on the
//! f32 grid (initialization and every optimizer update snap them there), so
//! the 32-bit checkpoint format below round-trips bit for bit while all
//! arithmetic runs in f64.
//!
//! Checkpoint format (little-endian throughout):
//!   magic "DVAR" | version u32 | config-JSON length u32 | config JSON |
//!   tensor count u32 | per tensor: name length u32, name bytes, rank u32,
//!   dims u32 each, then f32 payload.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::rng::Stream;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DVAR";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelError {
    InvalidConfig(String),
    Checkpoint(String),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::InvalidConfig(m) => write!(f, "invalid model config: {m}"),
            ModelError::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
        }
    }
}

/// Architecture hyperparameters. `token_vocab` covers the image codebook,
/// `text_vocab` the discrete prompt attributes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub token_vocab: usize,
    pub text_vocab: usize,
    pub max_scales: usize,
    pub max_side: usize,
    pub max_text_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            token_vocab: 729,
            text_vocab: 24,
            max_scales: 5,
            max_side: 16,
            max_text_len: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.token_vocab < 1 || self.text_vocab < 1 {
            return Err(ModelError::InvalidConfig("vocab sizes must be >= 1".to_string()));
        }
        if self.n_layers == 0 || self.max_scales == 0 || self.max_side == 0 || self.max_text_len == 0
        {
            return Err(ModelError::InvalidConfig(
                "layers, scales, side and text length must be >= 1".to_string(),
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    #[inline]
    pub fn mlp_hidden(&self) -> usize {
        4 * self.d_model
    }
}

/// Tensor indices for the fixed global tensors; layer tensors follow.
pub const T_TOK_EMBED: usize = 0;
pub const T_TEXT_EMBED: usize = 1;
pub const T_SEG_EMBED: usize = 2;
pub const T_SCALE_EMBED: usize = 3;
pub const T_ROW_EMBED: usize = 4;
pub const T_COL_EMBED: usize = 5;
pub const T_TEXT_POS_EMBED: usize = 6;
pub const T_START_EMBED: usize = 7;
const GLOBAL_TENSORS: usize = 8;
/// Tensors per transformer block.
const LAYER_TENSORS: usize = 12;

/// Offsets within one layer's tensor group.
pub const L_LN1_G: usize = 0;
pub const L_LN1_B: usize = 1;
pub const L_WQ: usize = 2;
pub const L_WK: usize = 3;
pub const L_WV: usize = 4;
pub const L_WO: usize = 5;
pub const L_LN2_G: usize = 6;
pub const L_LN2_B: usize = 7;
pub const L_W1: usize = 8;
pub const L_B1: usize = 9;
pub const L_W2: usize = 10;
pub const L_B2: usize = 11;

/// Declares every named tensor of the architecture, in checkpoint order.
pub fn tensor_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let h = config.mlp_hidden();
    let mut specs = vec![
        ("tok_embed".to_string(), vec![config.token_vocab, d]),
        ("text_embed".to_string(), vec![config.text_vocab, d]),
        ("seg_embed".to_string(), vec![3, d]),
        ("scale_embed".to_string(), vec![config.max_scales, d]),
        ("row_embed".to_string(), vec![config.max_side, d]),
        ("col_embed".to_string(), vec![config.max_side, d]),
        ("text_pos_embed".to_string(), vec![config.max_text_len, d]),
        ("start_embed".to_string(), vec![1, d]),
    ];
    for l in 0..config.n_layers {
        specs.push((format!("layer{l}.ln1.g"), vec![d]));
        specs.push((format!("layer{l}.ln1.b"), vec![d]));
        specs.push((format!("layer{l}.attn.wq"), vec![d, d]));
        specs.push((format!("layer{l}.attn.wk"), vec![d, d]));
        specs.push((format!("layer{l}.attn.wv"), vec![d, d]));
        specs.push((format!("layer{l}.attn.wo"), vec![d, d]));
        specs.push((format!("layer{l}.ln2.g"), vec![d]));
        specs.push((format!("layer{l}.ln2.b"), vec![d]));
        specs.push((format!("layer{l}.mlp.w1"), vec![d, h]));
        specs.push((format!("layer{l}.mlp.b1"), vec![h]));
        specs.push((format!("layer{l}.mlp.w2"), vec![h, d]));
        specs.push((format!("layer{l}.mlp.b2"), vec![d]));
    }
    specs.push(("final_ln.g".to_string(), vec![d]));
    specs.push(("final_ln.b".to_string(), vec![d]));
    specs.push(("head.w".to_string(), vec![d, config.token_vocab]));
    specs
}

/// Index of the first tensor of layer `l`.
#[inline]
pub fn layer_base(l: usize) -> usize {
    GLOBAL_TENSORS + l * LAYER_TENSORS
}

/// Index of `final_ln.g` given the layer count.
#[inline]
pub fn final_ln_ix(n_layers: usize) -> usize {
    GLOBAL_TENSORS + n_layers * LAYER_TENSORS
}

/// Index of the output head tensor.
#[inline]
pub fn head_ix(n_layers: usize) -> usize {
    final_ln_ix(n_layers) + 2
}

/// Closed-form parameter count:
/// d * (2*token_vocab + text_vocab + 3 + max_scales + 2*max_side +
/// max_text_len + 1 + 2) + n_layers * (12*d^2 + 9*d).
pub fn param_count_formula(config: &ModelConfig) -> usize {
    let d = config.d_model;
    d * (2 * config.token_vocab
        + config.text_vocab
        + 3
        + config.max_scales
        + 2 * config.max_side
        + config.max_text_len
        + 1
        + 2)
        + config.n_layers * (12 * d * d + 9 * d)
}

/// Snaps an f64 to the nearest f32-representable value.
#[inline]
pub fn snap_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// A flat list of tensors aligned with [`tensor_specs`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensors(pub Vec<Vec<f64>>);

impl Tensors {
    pub fn zeros_like(specs: &[(String, Vec<usize>)]) -> Self {
        Tensors(
            specs
                .iter()
                .map(|(_, dims)| vec![0.0; dims.iter().product()])
                .collect(),
        )
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.0 {
            for v in t {
                *v *= factor;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Tensors) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn n_elements(&self) -> usize {
        self.0.iter().map(|t| t.len()).sum()
    }
}

/// The transformer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub tensors: Tensors,
}

impl Model {
    #[inline]
    pub fn tensor(&self, ix: usize) -> &[f64] {
        &self.tensors.0[ix]
    }

    #[inline]
    pub fn tensor_mut(&mut self, ix: usize) -> &mut Vec<f64> {
        &mut self.tensors.0[ix]
    }

    pub fn param_count(&self) -> usize {
        self.tensors.n_elements()
    }
}

/// Initializes all weights from a seeded scaled-uniform scheme with scale
/// 1/sqrt(d_model); normalization gains start at 1 and biases at 0. The same
/// seed always produces bitwise-identical parameters.
pub fn init_model(config: &ModelConfig) -> Result<Model, ModelError> {
    config.validate()?;
    let specs = tensor_specs(config);
    let scale = 1.0 / math::sqrt(config.d_model as f64);
    let mut tensors = Vec::with_capacity(specs.len());
    for (ix, (name, dims)) in specs.iter().enumerate() {
        let n: usize = dims.iter().product();
        let data = if name.ends_with("ln.g") || name.ends_with("ln1.g") || name.ends_with("ln2.g")
        {
            vec![1.0; n]
        } else if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
            vec![0.0; n]
        } else {
            let mut s = Stream::derive(config.seed, 0x1217, &[ix as u64]);
            (0..n)
                .map(|_| snap_f32(s.next_range(-scale, scale)))
                .collect()
        };
        tensors.push(data);
    }
    Ok(Model {
        config: config.clone(),
        tensors: Tensors(tensors),
    })
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serializes a model to the checkpoint byte format.
pub fn checkpoint_bytes(model: &Model) -> Vec<u8> {
    let specs = tensor_specs(&model.config);
    let config_json = serde_json::to_vec(&model.config).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut out, CHECKPOINT_VERSION);
    push_u32(&mut out, config_json.len() as u32);
    out.extend_from_slice(&config_json);
    push_u32(&mut out, specs.len() as u32);
    for (ix, (name, dims)) in specs.iter().enumerate() {
        push_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        push_u32(&mut out, dims.len() as u32);
        for &d in dims {
            push_u32(&mut out, d as u32);
        }
        for &v in &model.tensors.0[ix] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelError::Checkpoint("unexpected end of data".to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a checkpoint produced by [`checkpoint_bytes`].
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Model, ModelError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".to_string()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let json_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| ModelError::Checkpoint(format!("bad config json: {e}")))?;
    config.validate()?;
    let specs = tensor_specs(&config);
    let n_tensors = r.u32()? as usize;
    if n_tensors != specs.len() {
        return Err(ModelError::Checkpoint(format!(
            "expected {} tensors, found {n_tensors}",
            specs.len()
        )));
    }
    let mut tensors = Vec::with_capacity(specs.len());
    for (name, dims) in &specs {
        let name_len = r.u32()? as usize;
        let got_name = core::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ModelError::Checkpoint("tensor name is not utf-8".to_string()))?;
        if got_name != name {
            return Err(ModelError::Checkpoint(format!(
                "tensor name mismatch: expected {name}, found {got_name}"
            )));
        }
        let rank = r.u32()? as usize;
        if rank != dims.len() {
            return Err(ModelError::Checkpoint(format!("bad rank for {name}")));
        }
        let mut got_dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            got_dims.push(r.u32()? as usize);
        }
        if &got_dims != dims {
            return Err(ModelError::Checkpoint(format!("bad dims for {name}")));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.push(data);
    }
    if r.pos != bytes.len() {
        return Err(ModelError::Checkpoint("trailing bytes".to_string()));
    }
    Ok(Model {
        config,
        tensors: Tensors(tensors),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_bitwise_identical_parameters() {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 2,
            ..ModelConfig::default()
        };
        let a = init_model(&cfg).unwrap();
        let b = init_model(&cfg).unwrap();
        for (ta, tb) in a.tensors.0.iter().zip(&b.tensors.0) {
            for (x, y) in ta.iter().zip(tb) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn indivisible_heads_are_rejected() {
        let cfg = ModelConfig {
            d_model: 63,
            n_heads: 4,
            ..ModelConfig::default()
        };
        assert!(init_model(&cfg).is_err());
    }

    #[test]
    fn param_count_matches_formula() {
        for cfg in [
            ModelConfig::default(),
            ModelConfig {
                d_model: 16,
                n_layers: 2,
                n_heads: 2,
                token_vocab: 27,
                text_vocab: 10,
                max_scales: 2,
                max_side: 4,
                max_text_len: 3,
                seed: 5,
            },
        ] {
            let m = init_model(&cfg).unwrap();
            assert_eq!(m.param_count(), param_count_formula(&cfg));
        }
    }

    #[test]
    fn ln_gains_start_at_one() {
        let m = init_model(&ModelConfig::default()).unwrap();
        let base = layer_base(0);
        assert!(m.tensor(base + L_LN1_G).iter().all(|&v| v == 1.0));
        assert!(m.tensor(base + L_LN1_B).iter().all(|&v| v == 0.0));
        let f = final_ln_ix(m.config.n_layers);
        assert!(m.tensor(f).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let cfg = ModelConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            seed: 11,
            ..ModelConfig::default()
        };
        let m = init_model(&cfg).unwrap();
        let bytes = checkpoint_bytes(&m);
        let m2 = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(m.config, m2.config);
        for (ta, tb) in m.tensors.0.iter().zip(&m2.tensors.0) {
            for (x, y) in ta.iter().zip(tb) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // And the re-serialization is byte-identical.
        assert_eq!(bytes, checkpoint_bytes(&m2));
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let m = init_model(&ModelConfig::default()).unwrap();
        let mut bytes = checkpoint_bytes(&m);
        bytes[0] = b'X';
        assert!(checkpoint_from_bytes(&bytes).is_err());
        let bytes = checkpoint_bytes(&m);
        assert!(checkpoint_from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}

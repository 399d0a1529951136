//! Transformer definition: configuration, named weights, weight container
//! I/O, positional encodings, and the taped forward pass.
//!
//! # Weight naming scheme
//!
//! | name                      | shape      | presence                     |
//! |---------------------------|------------|------------------------------|
//! | `embed.table`             | `[V × D]`  | required                     |
//! | `pos.table`               | `[L' × D]` | required iff `learnable`     |
//! | `alibi.slopes`            | `[1 × H]`  | optional (`alibi` only)      |
//! | `layer{k}.attn.w{q,k,v,o}`| `[D × D]`  | required per layer           |
//! | `layer{k}.attn.b{q,k,v,o}`| `[1 × D]`  | optional per layer           |
//! | `layer{k}.norm{1,2}.gamma`| `[1 × D]`  | required per layer           |
//! | `layer{k}.norm{1,2}.beta` | `[1 × D]`  | required per layer           |
//! | `layer{k}.ffn.w1`         | `[D × F]`  | required per layer           |
//! | `layer{k}.ffn.b1`         | `[1 × F]`  | optional per layer           |
//! | `layer{k}.ffn.w2`         | `[F × D]`  | required per layer           |
//! | `layer{k}.ffn.b2`         | `[1 × D]`  | optional per layer           |
//! | `head.w`                  | `[D × V]`  | required                     |
//! | `head.b`                  | `[1 × V]`  | optional                     |

pub mod container;
mod forward;
pub mod pe;

pub use container::{load_model, load_model_dir, save_model, LoadError};
pub use forward::{forward, forward_masked, ForwardOutput, MaskMode, MaskSpec};

use crate::tape::TapeError;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

// ── Configuration ───────────────────────────────────────────────────────────

/// Positional-encoding flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeKind {
    /// Trained additive table, injected at the input.
    Learnable,
    /// Fixed sin/cos additive table, injected at the input.
    Sinusoidal,
    /// Rotations applied to query/key columns inside every attention layer.
    Rope,
    /// Additive per-head score biases inside every attention layer.
    Alibi,
}

impl PeKind {
    /// True for encodings added to the embeddings before layer 0.
    pub fn is_input_additive(self) -> bool {
        matches!(self, PeKind::Learnable | PeKind::Sinusoidal)
    }
}

/// How attention scores become mixing weights. `Softmax` is the standard
/// transformer; `RawScores` skips the softmax and mixes values with the
/// (masked, biased) scores directly, which keeps every backward rule exactly
/// conservative — the relevance-accounting fixtures use it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnKind {
    #[default]
    Softmax,
    RawScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub pe_kind: PeKind,
    #[serde(default = "default_causal")]
    pub causal: bool,
    #[serde(default)]
    pub attention: AttnKind,
    /// Residual-then-normalize when false (the default); normalize-then-
    /// sublayer when true.
    #[serde(default)]
    pub pre_norm: bool,
}

fn default_causal() -> bool {
    true
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    /// Structural sanity of the dimensions themselves.
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.num_layers == 0 || self.num_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return fail("layer count, head count, d_model and d_ff must be positive".into());
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return fail("vocab_size and max_seq_len must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return fail(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.pe_kind == PeKind::Rope && !self.head_dim().is_multiple_of(2) {
            return fail(format!(
                "rotary encoding needs an even head_dim, got {}",
                self.head_dim()
            ));
        }
        Ok(())
    }
}

// ── Weights ─────────────────────────────────────────────────────────────────

/// Named parameter tensors. Iteration order (and therefore container layout)
/// is the lexicographic name order of the underlying map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        WeightStore { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Fetch a tensor that the configuration says must exist.
    pub fn require(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::MissingWeight { name: name.to_string() })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}

/// A configuration plus the weights it requires.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: WeightStore,
}

impl Model {
    /// Validate the configuration and check that every required tensor is
    /// present with the right shape (optional tensors are shape-checked when
    /// present).
    pub fn new(config: ModelConfig, weights: WeightStore) -> Result<Self, ModelError> {
        config.validate()?;
        let model = Model { config, weights };
        model.check_weights()?;
        Ok(model)
    }

    pub fn head_dim(&self) -> usize {
        self.config.head_dim()
    }

    /// Per-head attention-bias slopes: the stored row when present, the
    /// geometric default otherwise.
    pub fn alibi_slopes(&self) -> Vec<f64> {
        match self.weights.get("alibi.slopes") {
            Some(t) => t.row(0).to_vec(),
            None => pe::default_alibi_slopes(self.config.num_heads),
        }
    }

    fn check_weights(&self) -> Result<(), ModelError> {
        let c = &self.config;
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
        let mut required: Vec<(String, (usize, usize))> = vec![
            ("embed.table".into(), (v, d)),
            ("head.w".into(), (d, v)),
        ];
        if c.pe_kind == PeKind::Learnable {
            required.push(("pos.table".into(), (c.max_seq_len, d)));
        }
        for k in 0..c.num_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                required.push((format!("layer{k}.attn.{w}"), (d, d)));
            }
            for n in ["norm1", "norm2"] {
                required.push((format!("layer{k}.{n}.gamma"), (1, d)));
                required.push((format!("layer{k}.{n}.beta"), (1, d)));
            }
            required.push((format!("layer{k}.ffn.w1"), (d, f)));
            required.push((format!("layer{k}.ffn.w2"), (f, d)));
        }
        for (name, shape) in &required {
            let t = self.weights.require(name)?;
            if t.shape() != *shape {
                return Err(ModelError::WeightShape {
                    name: name.clone(),
                    expected: *shape,
                    got: t.shape(),
                });
            }
        }
        let mut optional: Vec<(String, (usize, usize))> = vec![("head.b".into(), (1, v))];
        if c.pe_kind == PeKind::Alibi {
            optional.push(("alibi.slopes".into(), (1, c.num_heads)));
        }
        for k in 0..c.num_layers {
            for b in ["bq", "bk", "bv", "bo"] {
                optional.push((format!("layer{k}.attn.{b}"), (1, d)));
            }
            optional.push((format!("layer{k}.ffn.b1"), (1, f)));
            optional.push((format!("layer{k}.ffn.b2"), (1, d)));
        }
        for (name, shape) in &optional {
            if let Some(t) = self.weights.get(name) {
                if t.shape() != *shape {
                    return Err(ModelError::WeightShape {
                        name: name.clone(),
                        expected: *shape,
                        got: t.shape(),
                    });
                }
            }
        }
        Ok(())
    }
}

// ── Errors ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    Config(String),
    MissingWeight { name: String },
    WeightShape { name: String, expected: (usize, usize), got: (usize, usize) },
    EmptySequence,
    SequenceTooLong { len: usize, max: usize },
    Tape(TapeError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Config(msg) => write!(f, "invalid configuration: {msg}"),
            ModelError::MissingWeight { name } => write!(f, "missing weight tensor '{name}'"),
            ModelError::WeightShape { name, expected, got } => {
                write!(f, "weight '{name}' has shape {got:?}, expected {expected:?}")
            }
            ModelError::EmptySequence => write!(f, "token sequence is empty"),
            ModelError::SequenceTooLong { len, max } => {
                write!(f, "sequence length {len} exceeds maximum {max}")
            }
            ModelError::Tape(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TapeError> for ModelError {
    fn from(e: TapeError) -> Self {
        ModelError::Tape(e)
    }
}

// ── Tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config(pe_kind: PeKind) -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            num_heads: 1,
            d_model: 4,
            d_ff: 4,
            vocab_size: 5,
            max_seq_len: 6,
            pe_kind,
            causal: true,
            attention: AttnKind::Softmax,
            pre_norm: false,
        }
    }

    pub(crate) fn zero_weights(config: &ModelConfig) -> WeightStore {
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut w = WeightStore::new();
        w.insert("embed.table", Tensor::zeros(v, d));
        w.insert("head.w", Tensor::zeros(d, v));
        if config.pe_kind == PeKind::Learnable {
            w.insert("pos.table", Tensor::zeros(config.max_seq_len, d));
        }
        for k in 0..config.num_layers {
            for name in ["wq", "wk", "wv", "wo"] {
                w.insert(format!("layer{k}.attn.{name}"), Tensor::zeros(d, d));
            }
            for n in ["norm1", "norm2"] {
                w.insert(format!("layer{k}.{n}.gamma"), Tensor::zeros(1, d));
                w.insert(format!("layer{k}.{n}.beta"), Tensor::zeros(1, d));
            }
            w.insert(format!("layer{k}.ffn.w1"), Tensor::zeros(d, f));
            w.insert(format!("layer{k}.ffn.w2"), Tensor::zeros(f, d));
        }
        w
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let mut c = tiny_config(PeKind::Learnable);
        c.num_heads = 3;
        assert!(matches!(c.validate(), Err(ModelError::Config(_))));
    }

    #[test]
    fn config_rejects_odd_head_dim_for_rotary() {
        let mut c = tiny_config(PeKind::Rope);
        c.d_model = 6;
        c.num_heads = 2; // head_dim 3
        assert!(matches!(c.validate(), Err(ModelError::Config(_))));
        c.num_heads = 1; // head_dim 6 is fine
        assert!(c.validate().is_ok());
    }

    #[test]
    fn model_requires_positional_table_only_when_learnable() {
        let c = tiny_config(PeKind::Learnable);
        let mut w = zero_weights(&c);
        w.tensors.remove("pos.table");
        let err = Model::new(c.clone(), w).unwrap_err();
        assert_eq!(err, ModelError::MissingWeight { name: "pos.table".into() });

        let c = tiny_config(PeKind::Sinusoidal);
        let w = zero_weights(&c);
        assert!(Model::new(c, w).is_ok());
    }

    #[test]
    fn model_rejects_misshapen_required_weight() {
        let c = tiny_config(PeKind::Sinusoidal);
        let mut w = zero_weights(&c);
        w.insert("layer0.attn.wq", Tensor::zeros(4, 3));
        let err = Model::new(c, w).unwrap_err();
        assert!(matches!(err, ModelError::WeightShape { .. }));
    }

    #[test]
    fn model_rejects_misshapen_optional_bias() {
        let c = tiny_config(PeKind::Sinusoidal);
        let mut w = zero_weights(&c);
        w.insert("layer0.attn.bq", Tensor::zeros(2, 4));
        assert!(matches!(Model::new(c, w), Err(ModelError::WeightShape { .. })));
    }

    #[test]
    fn alibi_slopes_fall_back_to_geometric_default() {
        let mut c = tiny_config(PeKind::Alibi);
        c.num_heads = 2;
        let w = zero_weights(&c);
        let m = Model::new(c, w).unwrap();
        let s = m.alibi_slopes();
        assert_eq!(s.len(), 2);
        assert!((s[0] - 2f64.powf(-4.0)).abs() < 1e-15);
        assert!((s[1] - 2f64.powf(-8.0)).abs() < 1e-15);
    }
}

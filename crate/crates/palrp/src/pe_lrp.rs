//! Position-aware relevance: harvesting positional leaves as first-class
//! attribution targets.
//!
//! A plain backward walk terminates at the embedding lookup and silently
//! discards whatever reached the positional leaves. Here those leaves become
//! *sinks*: their relevance is collected per layer and reported alongside
//! the semantic (token-embedding) field.
//!
//! Sink shapes by encoding:
//! * input-additive tables — one sink, the `[L × D]` relevance of the
//!   injected position rows;
//! * rotary — per layer, `[L × head_dim²]`: the relevance of each position's
//!   rotation matrix (query and key products, all heads, accumulated at the
//!   shared leaf), flattened row-major;
//! * score biases — per layer, `[L × L]`: the bias relevance of pair
//!   `(i, j)` split onto the two position indices that form it, the `i`
//!   share landing at `[i, j]` and the `j` share at `[j, i]`.
//!
//! Three reporting methods share one backward pass: `PaLrp` scores tokens by
//! semantic plus sink positive parts, `BaselineOnly` by the semantic part
//! alone (sinks zeroed), `PeOnly` by the sink parts alone. The semantic
//! field is bit-identical across methods by construction.

use crate::lrp::{self, LrpConfig, LrpError, RelevanceFlow};
use crate::model::{self, Model, ModelError, PeKind};
use crate::tape::{compute_matmul, ForwardTrace, LeafTag, NodeId, NodeKind};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

// ── Method ──────────────────────────────────────────────────────────────────

/// Which attribution the per-token scores report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Semantic and positional parts combined.
    PaLrp,
    /// Semantic part only; positional sinks are zeroed in the output.
    BaselineOnly,
    /// Positional sinks only.
    PeOnly,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::PaLrp => "pa-lrp",
            Method::BaselineOnly => "baseline",
            Method::PeOnly => "pe-only",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "pa-lrp" => Some(Method::PaLrp),
            "baseline" => Some(Method::BaselineOnly),
            "pe-only" => Some(Method::PeOnly),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

// ── Errors ──────────────────────────────────────────────────────────────────

#[derive(Debug)]
pub enum ExplainError {
    Model(ModelError),
    Lrp(LrpError),
    /// Relevance-map JSON that cannot be parsed at all.
    Malformed { detail: String },
    /// Relevance-map JSON that parses but is internally inconsistent.
    Inconsistent { detail: String },
}

impl fmt::Display for ExplainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExplainError::Model(e) => write!(f, "{e}"),
            ExplainError::Lrp(e) => write!(f, "{e}"),
            ExplainError::Malformed { detail } => write!(f, "malformed relevance map: {detail}"),
            ExplainError::Inconsistent { detail } => {
                write!(f, "inconsistent relevance map: {detail}")
            }
        }
    }
}

impl std::error::Error for ExplainError {}

impl From<ModelError> for ExplainError {
    fn from(e: ModelError) -> Self {
        ExplainError::Model(e)
    }
}

impl From<LrpError> for ExplainError {
    fn from(e: LrpError) -> Self {
        ExplainError::Lrp(e)
    }
}

// ── Sink registry ───────────────────────────────────────────────────────────

/// Where the positional leaves sit in a trace, found by scanning leaf tags.
#[derive(Debug, Default)]
pub struct SinkRegistry {
    pub position_rows: Option<NodeId>,
    /// `(layer, position) → rotation leaf`.
    pub rotations: BTreeMap<(usize, usize), NodeId>,
    /// `(layer, head) → bias leaf`.
    pub alibi: BTreeMap<(usize, usize), NodeId>,
}

impl SinkRegistry {
    pub fn from_trace(trace: &ForwardTrace) -> Self {
        let mut reg = SinkRegistry::default();
        for node in trace.nodes() {
            if let NodeKind::Leaf { tag } = &node.kind {
                match tag {
                    LeafTag::PositionRows => reg.position_rows = Some(node.id),
                    LeafTag::Rotation { layer, position } => {
                        reg.rotations.insert((*layer, *position), node.id);
                    }
                    LeafTag::AlibiBias { layer, head } => {
                        reg.alibi.insert((*layer, *head), node.id);
                    }
                    _ => {}
                }
            }
        }
        reg
    }

    pub fn is_empty(&self) -> bool {
        self.position_rows.is_none() && self.rotations.is_empty() && self.alibi.is_empty()
    }
}

// ── Sink rules ──────────────────────────────────────────────────────────────

/// Split the relevance of `z = embeddings + position_rows` between the two
/// addends: `r_p = p ⊙ r_z ⊘ (p + e ± ε)`, the remainder to the embeddings.
/// Returns `(r_position, r_embedding)`.
pub fn input_pe_split(
    r_z: &Tensor,
    position_rows: &Tensor,
    embeddings: &Tensor,
    cfg: &LrpConfig,
) -> (Tensor, Tensor) {
    // The generic addition split, with the positional operand first.
    let (r_p, r_e) = lrp::rule_add_split(position_rows, embeddings, r_z, cfg);
    (r_p, r_e)
}

/// Capture the rotation operand's share of `rotated = rotation · column`.
/// Returns `(r_rotation [dh × dh], r_column [dh × 1])`.
pub fn rope_sink(
    r_rotated: &Tensor,
    rotation: &Tensor,
    column: &Tensor,
    cfg: &LrpConfig,
) -> (Tensor, Tensor) {
    let out = compute_matmul(rotation, false, column, false, None)
        .expect("rotation and column extents agree");
    lrp::rule_matmul_split(rotation, false, column, false, &out, r_rotated, cfg)
}

/// Split one layer-head bias relevance field onto position indices. Entry
/// `(i, j)` of the bias is `slope·i + slope·(−j)`; its relevance divides
/// proportionally between the two index terms, with the `i` share stored at
/// `[i, j]` and the (signed) `j` share at `[j, i]`.
pub fn alibi_index_split(r_bias: &Tensor, slope: f64, cfg: &LrpConfig) -> Tensor {
    let n = r_bias.rows();
    let mut sink = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let r = r_bias.get(i, j);
            if r == 0.0 {
                continue;
            }
            let a = slope * i as f64;
            let b = -(slope * j as f64);
            let denom = cfg.stabilize(a + b);
            sink.add_at(i, j, a / denom * r);
            sink.add_at(j, i, b / denom * r);
        }
    }
    sink
}

/// Full bias-sink rule for one head: split the biased-score relevance
/// between the raw scores and the bias (`r_p = p ⊙ r ⊘ (scores + p ± ε)`),
/// then split the bias share onto position indices. Returns
/// `(sink [L × L], r_scores [L × L])`.
pub fn alibi_sink(
    r_biased: &Tensor,
    scores: &Tensor,
    slope: f64,
    cfg: &LrpConfig,
) -> (Tensor, Tensor) {
    let bias = model::pe::alibi_bias(scores.rows(), slope);
    let (r_scores, r_bias) = lrp::rule_add_split(scores, &bias, r_biased, cfg);
    (alibi_index_split(&r_bias, slope, cfg), r_scores)
}

/// Per-token scores: positive semantic mass plus positive sink mass,
/// `per_token[i] = Σ_d max(semantic[i,d], 0) + Σ_k Σ_d' max(sink_k[i,d'], 0)`.
pub fn aggregate_positive(semantic: &Tensor, sinks: &[Tensor]) -> Vec<f64> {
    let len = semantic.rows();
    let mut per_token = vec![0.0; len];
    for (i, score) in per_token.iter_mut().enumerate() {
        *score += semantic.row(i).iter().filter(|v| **v > 0.0).sum::<f64>();
        for sink in sinks {
            debug_assert_eq!(sink.rows(), len, "sink row count must match sequence length");
            *score += sink.row(i).iter().filter(|v| **v > 0.0).sum::<f64>();
        }
    }
    per_token
}

// ── Harvest ─────────────────────────────────────────────────────────────────

/// Collect per-layer sink tensors from a finished backward walk.
pub fn harvest_sinks(
    trace: &ForwardTrace,
    flow: &RelevanceFlow,
    registry: &SinkRegistry,
    model: &Model,
    cfg: &LrpConfig,
) -> Vec<Tensor> {
    let seq_len = trace.node(registry_anchor(trace)).output.rows();
    let config = &model.config;
    match config.pe_kind {
        PeKind::Learnable | PeKind::Sinusoidal => {
            let sink = match registry.position_rows {
                Some(id) => flow.relevance_or_zeros(trace, id),
                None => Tensor::zeros(seq_len, config.d_model),
            };
            vec![sink]
        }
        PeKind::Rope => {
            let dh = config.head_dim();
            let mut sinks = Vec::with_capacity(config.num_layers);
            for k in 0..config.num_layers {
                let mut sink = Tensor::zeros(seq_len, dh * dh);
                for (&(layer, position), &id) in &registry.rotations {
                    if layer != k {
                        continue;
                    }
                    if let Some(r_rot) = flow.relevance(id) {
                        for (col, &v) in r_rot.data().iter().enumerate() {
                            sink.add_at(position, col, v);
                        }
                    }
                }
                sinks.push(sink);
            }
            sinks
        }
        PeKind::Alibi => {
            let slopes = model.alibi_slopes();
            let mut sinks = Vec::with_capacity(config.num_layers);
            for k in 0..config.num_layers {
                let mut sink = Tensor::zeros(seq_len, seq_len);
                for (&(layer, head), &id) in &registry.alibi {
                    if layer != k {
                        continue;
                    }
                    if let Some(r_bias) = flow.relevance(id) {
                        sink.add_assign(&alibi_index_split(r_bias, slopes[head], cfg));
                    }
                }
                sinks.push(sink);
            }
            sinks
        }
    }
}

/// The embedding lookup is the one node guaranteed to carry the sequence
/// length for any configuration.
fn registry_anchor(trace: &ForwardTrace) -> NodeId {
    trace
        .nodes()
        .iter()
        .find(|n| matches!(n.kind, NodeKind::EmbedLookup { .. }))
        .map(|n| n.id)
        .unwrap_or(trace.output_id())
}

// ── Relevance map ───────────────────────────────────────────────────────────

/// The full result of one explanation.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMap {
    pub method: Method,
    pub tokens: Vec<usize>,
    pub position: usize,
    pub target_class: usize,
    /// Total seeded relevance (the selected logit's value).
    pub seed_total: f64,
    /// `[L × D]` relevance at the embedding lookup (raw, signed).
    pub semantic: Tensor,
    /// Per-sink raw relevance tensors (see module docs for shapes).
    pub positional_sinks: Vec<Tensor>,
    /// Aggregated per-token scores for `method`.
    pub per_token: Vec<f64>,
}

/// Seed relevance at `(position, target_class)` of the logits, walk it back,
/// and assemble the relevance map for `method`.
pub fn explain(
    model: &Model,
    tokens: &[usize],
    position: usize,
    target_class: usize,
    method: Method,
    cfg: &LrpConfig,
) -> Result<RelevanceMap, ExplainError> {
    let fwd = model::forward(model, tokens)?;
    let seed = lrp::init_relevance(&fwd.logits, position, target_class)?;
    let flow = lrp::backpropagate(&fwd.trace, &seed, cfg)?;
    let semantic = flow.relevance_or_zeros(&fwd.trace, fwd.embed_node);
    let registry = SinkRegistry::from_trace(&fwd.trace);
    let mut sinks = harvest_sinks(&fwd.trace, &flow, &registry, model, cfg);

    let per_token = match method {
        Method::PaLrp => aggregate_positive(&semantic, &sinks),
        Method::BaselineOnly => aggregate_positive(&semantic, &[]),
        Method::PeOnly => {
            let zero_semantic = Tensor::zeros(semantic.rows(), semantic.cols());
            aggregate_positive(&zero_semantic, &sinks)
        }
    };
    if method == Method::BaselineOnly {
        for sink in sinks.iter_mut() {
            *sink = Tensor::zeros(sink.rows(), sink.cols());
        }
    }
    Ok(RelevanceMap {
        method,
        tokens: tokens.to_vec(),
        position,
        target_class,
        seed_total: seed.total(),
        semantic,
        positional_sinks: sinks,
        per_token,
    })
}

// ── Serialization ───────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct MapFile {
    method: String,
    tokens: Vec<usize>,
    position: usize,
    target_class: usize,
    seed_total: f64,
    per_token: Vec<f64>,
    /// Raw per-token row sums of the semantic field (derived, for readers).
    semantic_sum: Vec<f64>,
    /// Raw per-token row sums of each sink (derived, for readers).
    sink_sums: Vec<Vec<f64>>,
    semantic: Vec<Vec<f64>>,
    positional_sinks: Vec<Vec<Vec<f64>>>,
}

fn tensor_to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn row_sums(t: &Tensor) -> Vec<f64> {
    (0..t.rows()).map(|i| t.row(i).iter().sum()).collect()
}

impl RelevanceMap {
    /// Deterministic JSON encoding (fixed-precision floats).
    pub fn to_json(&self) -> String {
        let file = MapFile {
            method: self.method.as_str().to_string(),
            tokens: self.tokens.clone(),
            position: self.position,
            target_class: self.target_class,
            seed_total: self.seed_total,
            per_token: self.per_token.clone(),
            semantic_sum: row_sums(&self.semantic),
            sink_sums: self.positional_sinks.iter().map(row_sums).collect(),
            semantic: tensor_to_rows(&self.semantic),
            positional_sinks: self.positional_sinks.iter().map(tensor_to_rows).collect(),
        };
        crate::serialize::to_json_string(&file).expect("relevance map always serializes")
    }

    pub fn from_json(text: &str) -> Result<RelevanceMap, ExplainError> {
        let file: MapFile = serde_json::from_str(text)
            .map_err(|e| ExplainError::Malformed { detail: e.to_string() })?;
        let method = Method::parse(&file.method).ok_or_else(|| ExplainError::Inconsistent {
            detail: format!("unknown method '{}'", file.method),
        })?;
        let len = file.tokens.len();
        let fail = |detail: String| ExplainError::Inconsistent { detail };
        if file.per_token.len() != len {
            return Err(fail(format!(
                "per_token has {} entries for {} tokens",
                file.per_token.len(),
                len
            )));
        }
        let semantic = Tensor::from_rows(&file.semantic)
            .map_err(|e| fail(format!("semantic field: {e}")))?;
        if semantic.rows() != len {
            return Err(fail(format!(
                "semantic field has {} rows for {} tokens",
                semantic.rows(),
                len
            )));
        }
        let mut sinks = Vec::with_capacity(file.positional_sinks.len());
        for (k, rows) in file.positional_sinks.iter().enumerate() {
            let sink = Tensor::from_rows(rows).map_err(|e| fail(format!("sink {k}: {e}")))?;
            if sink.rows() != len {
                return Err(fail(format!("sink {k} has {} rows for {len} tokens", sink.rows())));
            }
            sinks.push(sink);
        }
        if !file.seed_total.is_finite()
            || file.per_token.iter().any(|v| !v.is_finite())
            || !semantic.all_finite()
            || sinks.iter().any(|s| !s.all_finite())
        {
            return Err(fail("non-finite value".into()));
        }
        if file.position >= len {
            return Err(fail(format!("position {} out of range for {len} tokens", file.position)));
        }
        Ok(RelevanceMap {
            method,
            tokens: file.tokens,
            position: file.position,
            target_class: file.target_class,
            seed_total: file.seed_total,
            semantic,
            positional_sinks: sinks,
            per_token: file.per_token,
        })
    }
}

// ── Tests ───────────────────────────────────────────────────────────────────

//! Wengert-style forward tape.
//!
//! Every model operation appends a [`TapeNode`] holding its operation tag,
//! operand node ids, and the **full output activation**. Relevance
//! propagation and the trainer's vector-Jacobian products both walk the
//! finished [`ForwardTrace`] in reverse, so the tape is the one source of
//! truth for what the forward pass computed.
//!
//! Structural invariants, enforced at construction:
//! * operand ids always refer to earlier nodes (append-only topological
//!   order),
//! * every node output is finite — an operation producing NaN/Inf is an
//!   error, not a value,
//! * a finished trace is immutable.

use crate::tensor::Tensor;
use std::fmt;

pub type NodeId = usize;

// ── Node vocabulary ─────────────────────────────────────────────────────────

/// What a leaf tensor is, which decides how relevance arriving at it is
/// treated: weights absorb nothing and stop the walk, while positional
/// leaves are harvested as relevance sinks.
#[derive(Debug, Clone, PartialEq)]
pub enum LeafTag {
    /// Named model parameter.
    Weight(String),
    /// Additive positional rows `P'[0..L]` injected at the input.
    PositionRows,
    /// Rotation matrix applied to one query/key column at `position` inside
    /// `layer`.
    Rotation { layer: usize, position: usize },
    /// Additive attention-score bias for one `(layer, head)`.
    AlibiBias { layer: usize, head: usize },
    /// Constant 0/1 mask; never attributable.
    Mask,
    /// Other constant input.
    Constant,
}

/// Nonlinearity applied element-wise by an `Activation` node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActKind {
    Relu,
    Gelu,
}

/// Which relevance rule a matrix product uses on the way back:
/// `EpsilonLinear` treats operand `b` as a fixed weight matrix (relevance
/// flows only into `a`), `HalfSplit` divides each term's relevance evenly
/// between both data operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatMulRule {
    EpsilonLinear,
    HalfSplit,
}

/// Operation tag plus per-operation metadata.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Leaf {
        tag: LeafTag,
    },
    /// `c = op(a) · op(b) (+ bias row)`, with `op` controlled by the
    /// transpose flags. Operands: `[a, b]` or `[a, b, bias]` where bias is a
    /// `1 × n` row added to every output row.
    MatMul {
        transpose_a: bool,
        transpose_b: bool,
        rule: MatMulRule,
    },
    /// Element-wise sum of two same-shape operands.
    Add,
    /// Element-wise (Hadamard) product of two same-shape operands.
    Mul,
    /// Row-wise softmax; with `causal` set, entry `(i, j)` for `j > i` is
    /// masked by adding `-1e9` before normalization.
    SoftmaxRows {
        causal: bool,
    },
    /// Per-row standardization followed by an affine map. Operands
    /// `[x, gamma, beta]`; `epsilon` sits inside the square root.
    Norm {
        epsilon: f64,
    },
    /// Element-wise nonlinearity.
    Activation {
        act: ActKind,
    },
    /// Row gather: output row `t` is `table[ids[t]]`. Operand `[table]`.
    /// The output is the attributable embedding leaf of a trace.
    EmbedLookup {
        ids: Vec<usize>,
    },
    /// Multiplication by a compile-time constant.
    Scale {
        factor: f64,
    },
    /// Concatenation of the operands along `axis` (0 = stack rows,
    /// 1 = side-by-side columns).
    Concat {
        axis: usize,
    },
    /// Rectangular sub-block `rows r0..r1, cols c0..c1` of the operand.
    Slice {
        r0: usize,
        r1: usize,
        c0: usize,
        c1: usize,
    },
}

impl NodeKind {
    /// Short operation name for error messages.
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Leaf { .. } => "leaf",
            NodeKind::MatMul { .. } => "matmul",
            NodeKind::Add => "add",
            NodeKind::Mul => "mul",
            NodeKind::SoftmaxRows { .. } => "softmax_rows",
            NodeKind::Norm { .. } => "norm",
            NodeKind::Activation { .. } => "activation",
            NodeKind::EmbedLookup { .. } => "embed_lookup",
            NodeKind::Scale { .. } => "scale",
            NodeKind::Concat { .. } => "concat",
            NodeKind::Slice { .. } => "slice",
        }
    }
}

/// One recorded operation: id, operation, operand ids, saved output.
#[derive(Debug, Clone)]
pub struct TapeNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub operands: Vec<NodeId>,
    pub output: Tensor,
}

// ── Errors ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum TapeError {
    /// Operand shapes cannot feed the operation.
    Dimension { op: &'static str, detail: String },
    /// Embedding id outside the table.
    Vocabulary { index: usize, id: usize, vocab: usize },
    /// Softmax row in which every entry is masked away.
    DegenerateRow { row: usize },
    /// Operation produced NaN or Inf.
    NonFinite { op: &'static str },
    /// Operand id does not name an existing node.
    UnknownOperand { op: &'static str, id: NodeId },
}

impl fmt::Display for TapeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TapeError::Dimension { op, detail } => write!(f, "{op}: dimension error: {detail}"),
            TapeError::Vocabulary { index, id, vocab } => {
                write!(f, "embed_lookup: id {id} at position {index} outside vocabulary of size {vocab}")
            }
            TapeError::DegenerateRow { row } => {
                write!(f, "softmax_rows: row {row} is fully masked")
            }
            TapeError::NonFinite { op } => write!(f, "{op}: produced a non-finite value"),
            TapeError::UnknownOperand { op, id } => {
                write!(f, "{op}: operand id {id} does not exist yet")
            }
        }
    }
}

impl std::error::Error for TapeError {}

pub type TapeResult<T> = Result<T, TapeError>;

fn dim_err(op: &'static str, detail: String) -> TapeError {
    TapeError::Dimension { op, detail }
}

// ── Compute kernels ─────────────────────────────────────────────────────────
//
// Shared by the taped operations and by trace replay, so a replay reproduces
// saved activations bit-exactly by construction.

/// Additive mask value for causally-hidden score entries.
pub const CAUSAL_MASK_VALUE: f64 = -1e9;

/// A row whose post-mask maximum is at or below this is considered fully
/// masked (degenerate).
const DEGENERATE_ROW_MAX: f64 = -1e8;

#[inline]
fn mm_dims(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> ((usize, usize), (usize, usize)) {
    let (am, ak) = if ta { (a.cols(), a.rows()) } else { a.shape() };
    let (bk, bn) = if tb { (b.cols(), b.rows()) } else { b.shape() };
    ((am, ak), (bk, bn))
}

#[inline]
pub(crate) fn mm_get(t: &Tensor, transposed: bool, i: usize, j: usize) -> f64 {
    if transposed {
        t.get(j, i)
    } else {
        t.get(i, j)
    }
}

pub(crate) fn compute_matmul(
    a: &Tensor,
    ta: bool,
    b: &Tensor,
    tb: bool,
    bias: Option<&Tensor>,
) -> TapeResult<Tensor> {
    let ((m, k), (bk, n)) = mm_dims(a, ta, b, tb);
    if k != bk {
        return Err(dim_err(
            "matmul",
            format!(
                "inner extents disagree: {:?}{} x {:?}{}",
                a.shape(),
                if ta { "ᵀ" } else { "" },
                b.shape(),
                if tb { "ᵀ" } else { "" }
            ),
        ));
    }
    if let Some(bias) = bias {
        if bias.shape() != (1, n) {
            return Err(dim_err(
                "matmul",
                format!("bias row {:?} does not match output width {n}", bias.shape()),
            ));
        }
    }
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        for l in 0..k {
            let a_il = mm_get(a, ta, i, l);
            for j in 0..n {
                out.add_at(i, j, a_il * mm_get(b, tb, l, j));
            }
        }
        if let Some(bias) = bias {
            for j in 0..n {
                out.add_at(i, j, bias.get(0, j));
            }
        }
    }
    Ok(out)
}

pub(crate) fn compute_add(a: &Tensor, b: &Tensor) -> TapeResult<Tensor> {
    if a.shape() != b.shape() {
        return Err(dim_err("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.add(b))
}

pub(crate) fn compute_mul(a: &Tensor, b: &Tensor) -> TapeResult<Tensor> {
    if a.shape() != b.shape() {
        return Err(dim_err("mul", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_vec(a.rows(), a.cols(), data).expect("shape agreed"))
}

pub(crate) fn compute_softmax_rows(x: &Tensor, causal: bool) -> TapeResult<Tensor> {
    if causal && x.rows() != x.cols() {
        return Err(dim_err(
            "softmax_rows",
            format!("causal mask needs a square matrix, got {:?}", x.shape()),
        ));
    }
    let (rows, cols) = x.shape();
    if cols == 0 {
        return Err(dim_err("softmax_rows", "zero-width rows".into()));
    }
    let mut out = Tensor::zeros(rows, cols);
    for i in 0..rows {
        let masked = |j: usize| -> f64 {
            let v = x.get(i, j);
            if causal && j > i {
                v + CAUSAL_MASK_VALUE
            } else {
                v
            }
        };
        let mut max = f64::NEG_INFINITY;
        for j in 0..cols {
            max = max.max(masked(j));
        }
        if max <= DEGENERATE_ROW_MAX {
            return Err(TapeError::DegenerateRow { row: i });
        }
        let mut sum = 0.0;
        for j in 0..cols {
            let e = (masked(j) - max).exp();
            out.set(i, j, e);
            sum += e;
        }
        for j in 0..cols {
            out.set(i, j, out.get(i, j) / sum);
        }
    }
    Ok(out)
}

pub(crate) fn compute_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, epsilon: f64) -> TapeResult<Tensor> {
    let (rows, cols) = x.shape();
    if gamma.shape() != (1, cols) || beta.shape() != (1, cols) {
        return Err(dim_err(
            "norm",
            format!(
                "gamma {:?} / beta {:?} must be 1x{cols} rows",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let mut out = Tensor::zeros(rows, cols);
    for i in 0..rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + epsilon).sqrt();
        for (j, &v) in row.iter().enumerate() {
            let standardized = (v - mean) * inv;
            out.set(i, j, standardized * gamma.get(0, j) + beta.get(0, j));
        }
    }
    Ok(out)
}

/// Tanh-form Gaussian error linear unit.
pub fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of [`gelu`], used by the trainer's vector-Jacobian products.
pub fn gelu_prime(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn compute_activation(x: &Tensor, act: ActKind) -> Tensor {
    match act {
        ActKind::Relu => x.map(|v| v.max(0.0)),
        ActKind::Gelu => x.map(gelu),
    }
}

pub(crate) fn compute_embed_lookup(table: &Tensor, ids: &[usize]) -> TapeResult<Tensor> {
    let vocab = table.rows();
    let mut out = Tensor::zeros(ids.len(), table.cols());
    for (t, &id) in ids.iter().enumerate() {
        if id >= vocab {
            return Err(TapeError::Vocabulary { index: t, id, vocab });
        }
        for j in 0..table.cols() {
            out.set(t, j, table.get(id, j));
        }
    }
    Ok(out)
}

pub(crate) fn compute_concat(parts: &[&Tensor], axis: usize) -> TapeResult<Tensor> {
    if parts.is_empty() {
        return Err(dim_err("concat", "no operands".into()));
    }
    match axis {
        0 => {
            let cols = parts[0].cols();
            if parts.iter().any(|p| p.cols() != cols) {
                return Err(dim_err("concat", "axis-0 operands differ in width".into()));
            }
            let rows = parts.iter().map(|p| p.rows()).sum();
            let mut out = Tensor::zeros(rows, cols);
            let mut r = 0;
            for p in parts {
                for i in 0..p.rows() {
                    for j in 0..cols {
                        out.set(r + i, j, p.get(i, j));
                    }
                }
                r += p.rows();
            }
            Ok(out)
        }
        1 => {
            let rows = parts[0].rows();
            if parts.iter().any(|p| p.rows() != rows) {
                return Err(dim_err("concat", "axis-1 operands differ in height".into()));
            }
            let cols = parts.iter().map(|p| p.cols()).sum();
            let mut out = Tensor::zeros(rows, cols);
            let mut c = 0;
            for p in parts {
                for i in 0..rows {
                    for j in 0..p.cols() {
                        out.set(i, c + j, p.get(i, j));
                    }
                }
                c += p.cols();
            }
            Ok(out)
        }
        _ => Err(dim_err("concat", format!("axis {axis} out of range"))),
    }
}

pub(crate) fn compute_slice(x: &Tensor, r0: usize, r1: usize, c0: usize, c1: usize) -> TapeResult<Tensor> {
    if r0 >= r1 || c0 >= c1 || r1 > x.rows() || c1 > x.cols() {
        return Err(dim_err(
            "slice",
            format!("rows {r0}..{r1}, cols {c0}..{c1} invalid for {:?}", x.shape()),
        ));
    }
    let mut out = Tensor::zeros(r1 - r0, c1 - c0);
    for i in r0..r1 {
        for j in c0..c1 {
            out.set(i - r0, j - c0, x.get(i, j));
        }
    }
    Ok(out)
}

/// Recompute a node's output from its operands' saved outputs. Used for
/// trace replay; leaves return a clone of their stored value.
pub fn execute_node(kind: &NodeKind, inputs: &[&Tensor], stored: &Tensor) -> TapeResult<Tensor> {
    match kind {
        NodeKind::Leaf { .. } => Ok(stored.clone()),
        NodeKind::MatMul { transpose_a, transpose_b, .. } => {
            compute_matmul(inputs[0], *transpose_a, inputs[1], *transpose_b, inputs.get(2).copied())
        }
        NodeKind::Add => compute_add(inputs[0], inputs[1]),
        NodeKind::Mul => compute_mul(inputs[0], inputs[1]),
        NodeKind::SoftmaxRows { causal } => compute_softmax_rows(inputs[0], *causal),
        NodeKind::Norm { epsilon } => compute_norm(inputs[0], inputs[1], inputs[2], *epsilon),
        NodeKind::Activation { act } => Ok(compute_activation(inputs[0], *act)),
        NodeKind::EmbedLookup { ids } => compute_embed_lookup(inputs[0], ids),
        NodeKind::Scale { factor } => Ok(inputs[0].map(|v| v * factor)),
        NodeKind::Concat { axis } => compute_concat(inputs, *axis),
        NodeKind::Slice { r0, r1, c0, c1 } => compute_slice(inputs[0], *r0, *r1, *c0, *c1),
    }
}

// ── Tape builder ────────────────────────────────────────────────────────────

/// Append-only recorder for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &TapeNode {
        &self.nodes[id]
    }

    /// Saved output of a node.
    pub fn output(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].output
    }

    fn check_operand(&self, op: &'static str, id: NodeId) -> TapeResult<()> {
        if id >= self.nodes.len() {
            return Err(TapeError::UnknownOperand { op, id });
        }
        Ok(())
    }

    fn push(&mut self, kind: NodeKind, operands: Vec<NodeId>, output: Tensor) -> TapeResult<NodeId> {
        if !output.all_finite() {
            return Err(TapeError::NonFinite { op: kind.name() });
        }
        let id = self.nodes.len();
        self.nodes.push(TapeNode { id, kind, operands, output });
        Ok(id)
    }

    /// Record an input tensor. Leaves with non-finite entries are rejected
    /// like any other node.
    pub fn leaf(&mut self, value: Tensor, tag: LeafTag) -> TapeResult<NodeId> {
        self.push(NodeKind::Leaf { tag }, vec![], value)
    }

    /// `a · b` under the given relevance rule.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, rule: MatMulRule) -> TapeResult<NodeId> {
        self.matmul_t(a, false, b, false, rule)
    }

    /// Matrix product with transpose control.
    pub fn matmul_t(
        &mut self,
        a: NodeId,
        transpose_a: bool,
        b: NodeId,
        transpose_b: bool,
        rule: MatMulRule,
    ) -> TapeResult<NodeId> {
        self.check_operand("matmul", a)?;
        self.check_operand("matmul", b)?;
        let out = compute_matmul(
            self.output(a),
            transpose_a,
            self.output(b),
            transpose_b,
            None,
        )?;
        self.push(
            NodeKind::MatMul { transpose_a, transpose_b, rule },
            vec![a, b],
            out,
        )
    }

    /// `x · w (+ bias)` treated as a learned linear map: relevance flows only
    /// into `x` on the way back.
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> TapeResult<NodeId> {
        self.check_operand("matmul", x)?;
        self.check_operand("matmul", w)?;
        if let Some(b) = bias {
            self.check_operand("matmul", b)?;
        }
        let out = compute_matmul(
            self.output(x),
            false,
            self.output(w),
            false,
            bias.map(|b| self.output(b)),
        )?;
        let mut operands = vec![x, w];
        operands.extend(bias);
        self.push(
            NodeKind::MatMul { transpose_a: false, transpose_b: false, rule: MatMulRule::EpsilonLinear },
            operands,
            out,
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> TapeResult<NodeId> {
        self.check_operand("add", a)?;
        self.check_operand("add", b)?;
        let out = compute_add(self.output(a), self.output(b))?;
        self.push(NodeKind::Add, vec![a, b], out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> TapeResult<NodeId> {
        self.check_operand("mul", a)?;
        self.check_operand("mul", b)?;
        let out = compute_mul(self.output(a), self.output(b))?;
        self.push(NodeKind::Mul, vec![a, b], out)
    }

    pub fn softmax_rows(&mut self, x: NodeId, causal: bool) -> TapeResult<NodeId> {
        self.check_operand("softmax_rows", x)?;
        let out = compute_softmax_rows(self.output(x), causal)?;
        self.push(NodeKind::SoftmaxRows { causal }, vec![x], out)
    }

    pub fn norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, epsilon: f64) -> TapeResult<NodeId> {
        self.check_operand("norm", x)?;
        self.check_operand("norm", gamma)?;
        self.check_operand("norm", beta)?;
        let out = compute_norm(self.output(x), self.output(gamma), self.output(beta), epsilon)?;
        self.push(NodeKind::Norm { epsilon }, vec![x, gamma, beta], out)
    }

    pub fn activation(&mut self, x: NodeId, act: ActKind) -> TapeResult<NodeId> {
        self.check_operand("activation", x)?;
        let out = compute_activation(self.output(x), act);
        self.push(NodeKind::Activation { act }, vec![x], out)
    }

    pub fn embed_lookup(&mut self, table: NodeId, ids: &[usize]) -> TapeResult<NodeId> {
        self.check_operand("embed_lookup", table)?;
        let out = compute_embed_lookup(self.output(table), ids)?;
        self.push(NodeKind::EmbedLookup { ids: ids.to_vec() }, vec![table], out)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> TapeResult<NodeId> {
        self.check_operand("scale", x)?;
        let out = self.output(x).map(|v| v * factor);
        self.push(NodeKind::Scale { factor }, vec![x], out)
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> TapeResult<NodeId> {
        for &p in parts {
            self.check_operand("concat", p)?;
        }
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.output(p)).collect();
        let out = compute_concat(&tensors, axis)?;
        self.push(NodeKind::Concat { axis }, parts.to_vec(), out)
    }

    pub fn slice(&mut self, x: NodeId, r0: usize, r1: usize, c0: usize, c1: usize) -> TapeResult<NodeId> {
        self.check_operand("slice", x)?;
        let out = compute_slice(self.output(x), r0, r1, c0, c1)?;
        self.push(NodeKind::Slice { r0, r1, c0, c1 }, vec![x], out)
    }

    /// Freeze the tape into an immutable trace whose final node is `output`.
    pub fn finish(self, output: NodeId) -> TapeResult<ForwardTrace> {
        if output >= self.nodes.len() {
            return Err(TapeError::UnknownOperand { op: "finish", id: output });
        }
        Ok(ForwardTrace { nodes: self.nodes, output })
    }
}

// ── ForwardTrace ────────────────────────────────────────────────────────────

/// An immutable, replayable record of one forward pass.
#[derive(Debug)]
pub struct ForwardTrace {
    nodes: Vec<TapeNode>,
    output: NodeId,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &TapeNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[TapeNode] {
        &self.nodes
    }

    pub fn output_id(&self) -> NodeId {
        self.output
    }

    pub fn output(&self) -> &Tensor {
        &self.nodes[self.output].output
    }

    /// Ids of all leaf nodes, in recording order.
    pub fn leaf_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Leaf { .. }))
            .map(|n| n.id)
    }

    /// Re-execute every node from its operands' saved outputs and demand
    /// bit-exact agreement with the stored activations.
    pub fn replay_check(&self) -> TapeResult<()> {
        for node in &self.nodes {
            let inputs: Vec<&Tensor> = node.operands.iter().map(|&id| &self.nodes[id].output).collect();
            let recomputed = execute_node(&node.kind, &inputs, &node.output)?;
            if recomputed != node.output {
                return Err(TapeError::NonFinite { op: "replay mismatch" });
            }
        }
        Ok(())
    }
}

// ── Tests ───────────────────────────────────────────────────────────────────

//! Relevance rules and the backward walk over a forward trace.
//!
//! Relevance is seeded at one logit and pushed node-by-node toward the
//! leaves in reverse recording order, so every node's relevance is fully
//! accumulated (across all of its consumers) before it is redistributed.
//!
//! Rule summary:
//! * element-wise sums split proportionally to the addends,
//! * bilinear products (attention-score and mixing matmuls, Hadamard
//!   products) split each term's relevance half to each data operand,
//! * learned linear maps redistribute along `x_j * w_ji / y_i`; weights and
//!   biases absorb their share silently,
//! * softmax uses its local linearization `x ⊙ Jᵀ(r ⊘ s)`,
//! * normalization, activations, and constant scaling pass relevance
//!   through unchanged,
//! * embedding lookups terminate the walk (their relevance is the semantic
//!   attribution), as do leaves (positional leaves are harvested afterwards).
//!
//! Denominators are stabilized by a signed epsilon. The walk never assumes
//! conservation: what each rule fails to pass on is measured and reported in
//! [`ConservationStats`].

use crate::tape::{mm_get, ForwardTrace, LeafTag, MatMulRule, NodeId, NodeKind};
use crate::tensor::Tensor;
use std::fmt;

// ── Configuration ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct LrpConfig {
    /// Stabilizer magnitude added to every denominator.
    pub epsilon: f64,
    /// Add the stabilizer with the sign of the denominator (default) rather
    /// than unconditionally positive.
    pub signed_stabilizer: bool,
}

impl Default for LrpConfig {
    fn default() -> Self {
        LrpConfig { epsilon: 1e-6, signed_stabilizer: true }
    }
}

impl LrpConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        LrpConfig { epsilon, ..Default::default() }
    }

    /// Stabilized denominator. Zero counts as non-negative.
    #[inline]
    pub fn stabilize(&self, d: f64) -> f64 {
        if self.signed_stabilizer && d < 0.0 {
            d - self.epsilon
        } else {
            d + self.epsilon
        }
    }
}

// ── Errors ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum LrpError {
    SeedShape { expected: (usize, usize), got: (usize, usize) },
    PositionOutOfRange { position: usize, rows: usize },
    ClassOutOfRange { class: usize, cols: usize },
    NonFinite { node: NodeId },
}

impl fmt::Display for LrpError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LrpError::SeedShape { expected, got } => {
                write!(f, "seed shape {got:?} does not match trace output {expected:?}")
            }
            LrpError::PositionOutOfRange { position, rows } => {
                write!(f, "position {position} out of range for {rows} rows")
            }
            LrpError::ClassOutOfRange { class, cols } => {
                write!(f, "class {class} out of range for {cols} classes")
            }
            LrpError::NonFinite { node } => {
                write!(f, "relevance became non-finite at node {node}")
            }
        }
    }
}

impl std::error::Error for LrpError {}

// ── Seeding ─────────────────────────────────────────────────────────────────

/// Relevance seed: the selected logit's value at `(position, target_class)`,
/// zero everywhere else.
pub fn init_relevance(logits: &Tensor, position: usize, target_class: usize) -> Result<Tensor, LrpError> {
    if position >= logits.rows() {
        return Err(LrpError::PositionOutOfRange { position, rows: logits.rows() });
    }
    if target_class >= logits.cols() {
        return Err(LrpError::ClassOutOfRange { class: target_class, cols: logits.cols() });
    }
    let mut seed = Tensor::zeros(logits.rows(), logits.cols());
    seed.set(position, target_class, logits.get(position, target_class));
    Ok(seed)
}

// ── Rules ───────────────────────────────────────────────────────────────────

/// `out = a + b`: each addend takes its proportional share,
/// `r_a = a / (a + b ± ε) ⊙ r_out`.
pub fn rule_add_split(a: &Tensor, b: &Tensor, r_out: &Tensor, cfg: &LrpConfig) -> (Tensor, Tensor) {
    let mut r_a = Tensor::zeros(a.rows(), a.cols());
    let mut r_b = Tensor::zeros(b.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            let denom = cfg.stabilize(a.get(i, j) + b.get(i, j));
            let r = r_out.get(i, j) / denom;
            r_a.set(i, j, a.get(i, j) * r);
            r_b.set(i, j, b.get(i, j) * r);
        }
    }
    (r_a, r_b)
}

/// `out = a ⊙ b`: bilinear, so each operand takes half of each entry's
/// relevance (up to stabilization).
pub fn rule_mul_split(a: &Tensor, b: &Tensor, r_out: &Tensor, cfg: &LrpConfig) -> (Tensor, Tensor) {
    let mut r_a = Tensor::zeros(a.rows(), a.cols());
    let mut r_b = Tensor::zeros(b.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            let prod = a.get(i, j) * b.get(i, j);
            let half = prod / cfg.stabilize(prod) * r_out.get(i, j) / 2.0;
            r_a.set(i, j, half);
            r_b.set(i, j, half);
        }
    }
    (r_a, r_b)
}

/// Bilinear matrix product `c = ā · b̄` (logical transposed views): each
/// term's relevance splits evenly between the two data operands,
/// `r_ā[i,l] = Σ_j ā[i,l] b̄[l,j] / (c[i,j] ± ε) · r_c[i,j] / 2`.
pub fn rule_matmul_split(
    a: &Tensor,
    transpose_a: bool,
    b: &Tensor,
    transpose_b: bool,
    out: &Tensor,
    r_out: &Tensor,
    cfg: &LrpConfig,
) -> (Tensor, Tensor) {
    let (m, n) = out.shape();
    let k = if transpose_a { a.rows() } else { a.cols() };
    let mut r_a = Tensor::zeros(a.rows(), a.cols());
    let mut r_b = Tensor::zeros(b.rows(), b.cols());
    for i in 0..m {
        for j in 0..n {
            let r = r_out.get(i, j) / cfg.stabilize(out.get(i, j)) / 2.0;
            if r == 0.0 {
                continue;
            }
            for l in 0..k {
                let term = mm_get(a, transpose_a, i, l) * mm_get(b, transpose_b, l, j) * r;
                if transpose_a {
                    r_a.add_at(l, i, term);
                } else {
                    r_a.add_at(i, l, term);
                }
                if transpose_b {
                    r_b.add_at(j, l, term);
                } else {
                    r_b.add_at(l, j, term);
                }
            }
        }
    }
    (r_a, r_b)
}

/// Learned linear map `y = x̄ · w̄ (+ bias)`: relevance flows only into the
/// data operand, `r_x̄[t,l] = Σ_i x̄[t,l] w̄[l,i] / (y[t,i] ± ε) · r_y[t,i]`.
/// The weight takes nothing; any bias share is silently absorbed (measured
/// by the caller as a residual).
pub fn rule_epsilon_linear(
    x: &Tensor,
    transpose_x: bool,
    w: &Tensor,
    transpose_w: bool,
    out: &Tensor,
    r_out: &Tensor,
    cfg: &LrpConfig,
) -> Tensor {
    let (t_rows, n) = out.shape();
    let k = if transpose_x { x.rows() } else { x.cols() };
    let mut r_x = Tensor::zeros(x.rows(), x.cols());
    for t in 0..t_rows {
        for i in 0..n {
            let r = r_out.get(t, i) / cfg.stabilize(out.get(t, i));
            if r == 0.0 {
                continue;
            }
            for l in 0..k {
                let term = mm_get(x, transpose_x, t, l) * mm_get(w, transpose_w, l, i) * r;
                if transpose_x {
                    r_x.add_at(l, t, term);
                } else {
                    r_x.add_at(t, l, term);
                }
            }
        }
    }
    r_x
}

/// Softmax linearization: with `s = softmax(x)` row-wise and incoming `r_s`,
/// `r_x[j] = x[j] · (r_s[j] − s[j] · Σ_i r_s[i])` per row — equivalently
/// `x ⊙ (Jᵀ (r_s ⊘ s))` for the softmax Jacobian `J`. Masked entries have
/// `s = 0` and `r_s = 0` and therefore receive exactly zero.
pub fn rule_softmax(x: &Tensor, s: &Tensor, r_s: &Tensor) -> Tensor {
    let (rows, cols) = s.shape();
    let mut r_x = Tensor::zeros(rows, cols);
    for i in 0..rows {
        let row_sum: f64 = (0..cols).map(|j| r_s.get(i, j)).sum();
        for j in 0..cols {
            let v = x.get(i, j) * (r_s.get(i, j) - s.get(i, j) * row_sum);
            r_x.set(i, j, v);
        }
    }
    r_x
}

// ── Backward walk ───────────────────────────────────────────────────────────

/// Where non-conserved relevance went, by cause. `bias_absorbed` counts the
/// share taken by bias rows inside learned linear maps; `softmax_residual`
/// is the (signed) mass the softmax linearization failed to pass through;
/// `stabilizer_residual` collects the epsilon leakage of all the exactly-
/// conservative-in-the-limit rules.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ConservationStats {
    pub bias_absorbed: f64,
    pub softmax_residual: f64,
    pub stabilizer_residual: f64,
}

/// The result of one backward walk: a relevance tensor per visited node,
/// plus the residual accounting.
#[derive(Debug)]
pub struct RelevanceFlow {
    relevance: Vec<Option<Tensor>>,
    pub stats: ConservationStats,
}

impl RelevanceFlow {
    /// Relevance accumulated at `id`, if the walk reached it.
    pub fn relevance(&self, id: NodeId) -> Option<&Tensor> {
        self.relevance.get(id).and_then(|r| r.as_ref())
    }

    /// Relevance at `id`, or a zero tensor of that node's output shape.
    pub fn relevance_or_zeros(&self, trace: &ForwardTrace, id: NodeId) -> Tensor {
        match self.relevance(id) {
            Some(t) => t.clone(),
            None => {
                let (r, c) = trace.node(id).output.shape();
                Tensor::zeros(r, c)
            }
        }
    }

    /// Total relevance at `id` (0 when unvisited).
    pub fn total_at(&self, id: NodeId) -> f64 {
        self.relevance(id).map_or(0.0, Tensor::total)
    }
}

fn accumulate(slot: &mut Option<Tensor>, value: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&value),
        None => *slot = Some(value),
    }
}

/// Push `seed` from the trace output back to the leaves.
pub fn backpropagate(
    trace: &ForwardTrace,
    seed: &Tensor,
    cfg: &LrpConfig,
) -> Result<RelevanceFlow, LrpError> {
    let expected = trace.output().shape();
    if seed.shape() != expected {
        return Err(LrpError::SeedShape { expected, got: seed.shape() });
    }
    let n = trace.len();
    let mut rel: Vec<Option<Tensor>> = vec![None; n];
    rel[trace.output_id()] = Some(seed.clone());
    let mut stats = ConservationStats::default();

    for id in (0..n).rev() {
        let Some(r) = rel[id].clone() else { continue };
        if !r.all_finite() {
            return Err(LrpError::NonFinite { node: id });
        }
        let node = trace.node(id);
        let incoming = r.total();
        let mut assigned = 0.0;
        match &node.kind {
            // Terminals: leaves hold whatever arrived; the embedding lookup
            // holds the semantic attribution.
            NodeKind::Leaf { .. } | NodeKind::EmbedLookup { .. } => continue,

            NodeKind::MatMul { transpose_a, transpose_b, rule } => {
                let a = &trace.node(node.operands[0]).output;
                let b = &trace.node(node.operands[1]).output;
                match rule {
                    MatMulRule::EpsilonLinear => {
                        let r_x = rule_epsilon_linear(
                            a, *transpose_a, b, *transpose_b, &node.output, &r, cfg,
                        );
                        assigned += r_x.total();
                        accumulate(&mut rel[node.operands[0]], r_x);
                        let residual = incoming - assigned;
                        if node.operands.len() == 3 {
                            stats.bias_absorbed += residual;
                        } else {
                            stats.stabilizer_residual += residual;
                        }
                    }
                    MatMulRule::HalfSplit => {
                        let (r_a, r_b) = rule_matmul_split(
                            a, *transpose_a, b, *transpose_b, &node.output, &r, cfg,
                        );
                        assigned += r_a.total() + r_b.total();
                        accumulate(&mut rel[node.operands[0]], r_a);
                        accumulate(&mut rel[node.operands[1]], r_b);
                        stats.stabilizer_residual += incoming - assigned;
                    }
                }
            }

            NodeKind::Add => {
                let a = &trace.node(node.operands[0]).output;
                let b = &trace.node(node.operands[1]).output;
                let (r_a, r_b) = rule_add_split(a, b, &r, cfg);
                assigned += r_a.total() + r_b.total();
                accumulate(&mut rel[node.operands[0]], r_a);
                accumulate(&mut rel[node.operands[1]], r_b);
                stats.stabilizer_residual += incoming - assigned;
            }

            NodeKind::Mul => {
                let a_id = node.operands[0];
                let b_id = node.operands[1];
                let is_mask = |nid: NodeId| {
                    matches!(&trace.node(nid).kind, NodeKind::Leaf { tag: LeafTag::Mask })
                };
                if is_mask(a_id) || is_mask(b_id) {
                    // Constant mask: the variable operand takes everything
                    // that survives the mask; the mask takes nothing.
                    let (var, mask) = if is_mask(b_id) { (a_id, b_id) } else { (b_id, a_id) };
                    let m = &trace.node(mask).output;
                    let mut r_var = Tensor::zeros(r.rows(), r.cols());
                    for i in 0..r.rows() {
                        for j in 0..r.cols() {
                            r_var.set(i, j, r.get(i, j) * m.get(i, j));
                        }
                    }
                    assigned += r_var.total();
                    accumulate(&mut rel[var], r_var);
                    stats.stabilizer_residual += incoming - assigned;
                } else {
                    let a = &trace.node(a_id).output;
                    let b = &trace.node(b_id).output;
                    let (r_a, r_b) = rule_mul_split(a, b, &r, cfg);
                    assigned += r_a.total() + r_b.total();
                    accumulate(&mut rel[a_id], r_a);
                    accumulate(&mut rel[b_id], r_b);
                    stats.stabilizer_residual += incoming - assigned;
                }
            }

            NodeKind::SoftmaxRows { .. } => {
                let x = &trace.node(node.operands[0]).output;
                let r_x = rule_softmax(x, &node.output, &r);
                assigned += r_x.total();
                accumulate(&mut rel[node.operands[0]], r_x);
                stats.softmax_residual += incoming - assigned;
            }

            // Identity rules: normalization, activation, constant scale.
            NodeKind::Norm { .. } | NodeKind::Activation { .. } | NodeKind::Scale { .. } => {
                accumulate(&mut rel[node.operands[0]], r.clone());
            }

            NodeKind::Concat { axis } => {
                let mut offset = 0;
                for &part in &node.operands {
                    let shape = trace.node(part).output.shape();
                    let (extent, mut piece) = if *axis == 0 {
                        (shape.0, Tensor::zeros(shape.0, shape.1))
                    } else {
                        (shape.1, Tensor::zeros(shape.0, shape.1))
                    };
                    for i in 0..shape.0 {
                        for j in 0..shape.1 {
                            let v = if *axis == 0 {
                                r.get(offset + i, j)
                            } else {
                                r.get(i, offset + j)
                            };
                            piece.set(i, j, v);
                        }
                    }
                    offset += extent;
                    accumulate(&mut rel[part], piece);
                }
            }

            NodeKind::Slice { r0, c0, .. } => {
                let src_shape = trace.node(node.operands[0]).output.shape();
                let mut back = Tensor::zeros(src_shape.0, src_shape.1);
                for i in 0..r.rows() {
                    for j in 0..r.cols() {
                        back.set(r0 + i, c0 + j, r.get(i, j));
                    }
                }
                accumulate(&mut rel[node.operands[0]], back);
            }
        }
        for &op in &node.operands {
            if let Some(t) = rel[op].as_ref() {
                if !t.all_finite() {
                    return Err(LrpError::NonFinite { node: op });
                }
            }
        }
    }

    Ok(RelevanceFlow { relevance: rel, stats })
}

// ── Tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::{LeafTag, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
        assert!((a - b).abs() <= tol, "{what}: {a} vs {b} (tol {tol})");
    }

    fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(1, 1, vec![v]).unwrap()
    }

    #[test]
    fn stabilizer_is_signed_by_default() {
        let cfg = LrpConfig::default();
        assert!(cfg.stabilize(2.0) > 2.0);
        assert!(cfg.stabilize(-2.0) < -2.0);
        assert_eq!(cfg.stabilize(0.0), cfg.epsilon);
        let unsigned = LrpConfig { signed_stabilizer: false, ..Default::default() };
        assert!(unsigned.stabilize(-2.0) > -2.0);
    }

    #[test]
    fn init_relevance_selects_one_logit() {
        let logits = Tensor::from_vec(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let seed = init_relevance(&logits, 1, 2).unwrap();
        assert_eq!(seed.get(1, 2), 0.6);
        assert_eq!(seed.total(), 0.6);
        assert!(matches!(
            init_relevance(&logits, 2, 0),
            Err(LrpError::PositionOutOfRange { .. })
        ));
        assert!(matches!(
            init_relevance(&logits, 0, 3),
            Err(LrpError::ClassOutOfRange { .. })
        ));
    }

    #[test]
    fn add_split_is_proportional_and_conserves() {
        let cfg = LrpConfig::default();
        let (r_a, r_b) = rule_add_split(&scalar(6.0), &scalar(2.0), &scalar(1.0), &cfg);
        assert_close(r_a.get(0, 0), 0.75, 1e-5, "larger addend share");
        assert_close(r_b.get(0, 0), 0.25, 1e-5, "smaller addend share");
        assert_close(r_a.get(0, 0) + r_b.get(0, 0), 1.0, 1e-5, "conservation");
    }

    #[test]
    fn add_split_with_cancelling_addends_stays_finite() {
        let cfg = LrpConfig::default();
        let (r_a, r_b) = rule_add_split(&scalar(1.0), &scalar(-1.0), &scalar(0.5), &cfg);
        assert!(r_a.get(0, 0).is_finite());
        assert!(r_b.get(0, 0).is_finite());
        // Opposite huge shares, summing back to ~the input relevance.
        assert_close(r_a.get(0, 0) + r_b.get(0, 0), 0.0, 1e-9, "cancelling sum");
    }

    #[test]
    fn add_split_conserves_on_well_conditioned_random_entries() {
        let cfg = LrpConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mut a: f64 = rng.gen_range(-2.0..2.0);
            let b: f64 = rng.gen_range(-2.0..2.0);
            while (a + b).abs() < 0.1 {
                a += 0.21;
            }
            let r = rng.gen_range(-1.0..1.0);
            let (r_a, r_b) = rule_add_split(&scalar(a), &scalar(b), &scalar(r), &cfg);
            assert_close(r_a.get(0, 0) + r_b.get(0, 0), r, 1e-4, "random add conservation");
        }
    }

    #[test]
    fn mul_split_gives_equal_halves() {
        let cfg = LrpConfig::default();
        let (r_a, r_b) = rule_mul_split(&scalar(3.0), &scalar(4.0), &scalar(1.0), &cfg);
        assert_close(r_a.get(0, 0), 0.5, 1e-6, "half to a");
        assert_eq!(r_a.get(0, 0), r_b.get(0, 0));
    }

    #[test]
    fn matmul_split_scalar_case_matches_hand_computation() {
        let cfg = LrpConfig::default();
        let (r_a, r_b) =
            rule_matmul_split(&scalar(2.0), false, &scalar(3.0), false, &scalar(6.0), &scalar(1.0), &cfg);
        assert_close(r_a.get(0, 0), 0.5, 1e-6, "scalar product half");
        assert_close(r_b.get(0, 0), 0.5, 1e-6, "scalar product half");
    }

    #[test]
    fn matmul_split_halves_aggregate_relevance_for_positive_operands() {
        let cfg = LrpConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let m = rng.gen_range(1..=5);
            let k = rng.gen_range(1..=5);
            let n = rng.gen_range(1..=5);
            let a = Tensor::from_vec(m, k, (0..m * k).map(|_| rng.gen_range(0.1..2.0)).collect()).unwrap();
            let b = Tensor::from_vec(k, n, (0..k * n).map(|_| rng.gen_range(0.1..2.0)).collect()).unwrap();
            let out = crate::tape::compute_matmul(&a, false, &b, false, None).unwrap();
            let r_out =
                Tensor::from_vec(m, n, (0..m * n).map(|_| rng.gen_range(0.1..1.0)).collect()).unwrap();
            let (r_a, r_b) = rule_matmul_split(&a, false, &b, false, &out, &r_out, &cfg);
            let total = r_out.total();
            assert_close(r_a.total(), total / 2.0, 1e-4, "operand a takes half in aggregate");
            assert_close(r_b.total(), total / 2.0, 1e-4, "operand b takes half in aggregate");
        }
    }

    #[test]
    fn matmul_split_respects_transposes() {
        let cfg = LrpConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Tensor::from_vec(3, 2, (0..6).map(|_| rng.gen_range(0.2..1.5)).collect()).unwrap();
        let b = Tensor::from_vec(4, 2, (0..8).map(|_| rng.gen_range(0.2..1.5)).collect()).unwrap();
        // out = aᵀᵀ… use a · bᵀ = [3×4]
        let out = crate::tape::compute_matmul(&a, false, &b, true, None).unwrap();
        let r_out = Tensor::from_vec(3, 4, vec![1.0; 12]).unwrap();
        let (r_a, r_b) = rule_matmul_split(&a, false, &b, true, &out, &r_out, &cfg);
        assert_eq!(r_a.shape(), a.shape());
        assert_eq!(r_b.shape(), b.shape());
        // Compare against the untransposed computation on materialized bᵀ.
        let (want_a, want_bt) =
            rule_matmul_split(&a, false, &b.transpose(), false, &out, &r_out, &cfg);
        let want_b = want_bt.transpose();
        for i in 0..3 {
            for j in 0..2 {
                assert_close(r_a.get(i, j), want_a.get(i, j), 1e-12, "r_a entry");
            }
        }
        for i in 0..4 {
            for j in 0..2 {
                assert_close(r_b.get(i, j), want_b.get(i, j), 1e-12, "r_b entry");
            }
        }
    }

    #[test]
    fn epsilon_linear_identity_weight_passes_relevance_through() {
        let cfg = LrpConfig::default();
        let x = Tensor::from_vec(1, 3, vec![0.5, -1.5, 2.0]).unwrap();
        let w = Tensor::from_vec(
            3,
            3,
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let out = crate::tape::compute_matmul(&x, false, &w, false, None).unwrap();
        let r_out = Tensor::from_vec(1, 3, vec![0.3, 0.4, 0.5]).unwrap();
        let r_x = rule_epsilon_linear(&x, false, &w, false, &out, &r_out, &cfg);
        for j in 0..3 {
            assert_close(r_x.get(0, j), r_out.get(0, j), 1e-5, "identity map");
        }
    }

    #[test]
    fn epsilon_linear_bias_absorbs_its_share() {
        let cfg = LrpConfig::default();
        // y = x·w + b = 1·1 + 1 = 2; x should get 1/2 of the unit relevance.
        let x = scalar(1.0);
        let w = scalar(1.0);
        let b = scalar(1.0);
        let out = crate::tape::compute_matmul(&x, false, &w, false, Some(&b)).unwrap();
        let r_x = rule_epsilon_linear(&x, false, &w, false, &out, &scalar(1.0), &cfg);
        assert_close(r_x.get(0, 0), 0.5, 1e-6, "bias takes the other half");
    }

    #[test]
    fn softmax_rule_matches_finite_difference_jacobian() {
        let cfg = LrpConfig::default();
        let _ = cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-5;
        for _ in 0..25 {
            let cols = rng.gen_range(2..=16);
            let x = Tensor::from_vec(1, cols, (0..cols).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .unwrap();
            let s = crate::tape::compute_softmax_rows(&x, false).unwrap();
            let r_s =
                Tensor::from_vec(1, cols, (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .unwrap();
            let got = rule_softmax(&x, &s, &r_s);
            // Independent route: x_j * Σ_i J[i,j] (r_i / s_i) with J from
            // central differences.
            for j in 0..cols {
                let mut xp = x.clone();
                xp.set(0, j, x.get(0, j) + h);
                let mut xm = x.clone();
                xm.set(0, j, x.get(0, j) - h);
                let sp = crate::tape::compute_softmax_rows(&xp, false).unwrap();
                let sm = crate::tape::compute_softmax_rows(&xm, false).unwrap();
                let mut acc = 0.0;
                for i in 0..cols {
                    let jac = (sp.get(0, i) - sm.get(0, i)) / (2.0 * h);
                    acc += jac * r_s.get(0, i) / s.get(0, i);
                }
                let want = x.get(0, j) * acc;
                let scale = want.abs().max(1e-3);
                assert!(
                    (got.get(0, j) - want).abs() / scale <= 1e-3,
                    "entry {j}: {} vs {want}",
                    got.get(0, j)
                );
            }
        }
    }

    #[test]
    fn backpropagate_requires_matching_seed_shape() {
        let mut tape = Tape::new();
        let x = tape.leaf(scalar(1.0), LeafTag::Constant).unwrap();
        let y = tape.scale(x, 2.0).unwrap();
        let trace = tape.finish(y).unwrap();
        let err = backpropagate(&trace, &Tensor::zeros(2, 2), &LrpConfig::default()).unwrap_err();
        assert!(matches!(err, LrpError::SeedShape { .. }));
    }

    #[test]
    fn identity_chain_passes_seed_to_leaf_unchanged() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(1, 2, vec![1.0, -2.0]).unwrap(), LeafTag::Constant).unwrap();
        let s = tape.scale(x, 3.0).unwrap();
        let g = tape.activation(s, crate::tape::ActKind::Relu).unwrap();
        let trace = tape.finish(g).unwrap();
        let seed = Tensor::from_vec(1, 2, vec![0.25, 0.75]).unwrap();
        let flow = backpropagate(&trace, &seed, &LrpConfig::default()).unwrap();
        assert_eq!(flow.relevance(x).unwrap(), &seed);
        assert_eq!(flow.stats, ConservationStats::default());
    }

    #[test]
    fn fan_out_accumulates_before_redistribution() {
        // z = x + x: both shares return to the same leaf.
        let mut tape = Tape::new();
        let x = tape.leaf(scalar(1.0), LeafTag::Constant).unwrap();
        let z = tape.add(x, x).unwrap();
        let trace = tape.finish(z).unwrap();
        let flow = backpropagate(&trace, &scalar(1.0), &LrpConfig::default()).unwrap();
        assert_close(flow.total_at(x), 1.0, 1e-5, "fan-out sum");
    }

    #[test]
    fn mask_mul_passes_surviving_relevance_only() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::from_vec(1, 3, vec![2.0, 3.0, 4.0]).unwrap(), LeafTag::Constant)
            .unwrap();
        let m = tape
            .leaf(Tensor::from_vec(1, 3, vec![1.0, 0.0, 1.0]).unwrap(), LeafTag::Mask)
            .unwrap();
        let z = tape.mul(x, m).unwrap();
        let trace = tape.finish(z).unwrap();
        let seed = Tensor::from_vec(1, 3, vec![0.5, 0.5, 0.5]).unwrap();
        let flow = backpropagate(&trace, &seed, &LrpConfig::default()).unwrap();
        let r_x = flow.relevance(x).unwrap();
        assert_eq!(r_x.row(0), &[0.5, 0.0, 0.5]);
        assert_eq!(flow.relevance(m), None);
    }

    #[test]
    fn concat_and_slice_route_relevance_exactly() {
        let mut tape = Tape::new();
        let a = tape
            .leaf(Tensor::from_vec(1, 2, vec![1.0, 2.0]).unwrap(), LeafTag::Constant)
            .unwrap();
        let b = tape
            .leaf(Tensor::from_vec(1, 2, vec![3.0, 4.0]).unwrap(), LeafTag::Constant)
            .unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        let s = tape.slice(c, 0, 1, 1, 3).unwrap(); // picks cols 1..3 = [2, 3]
        let trace = tape.finish(s).unwrap();
        let seed = Tensor::from_vec(1, 2, vec![0.7, 0.3]).unwrap();
        let flow = backpropagate(&trace, &seed, &LrpConfig::default()).unwrap();
        assert_eq!(flow.relevance(a).unwrap().row(0), &[0.0, 0.7]);
        assert_eq!(flow.relevance(b).unwrap().row(0), &[0.3, 0.0]);
    }

    #[test]
    fn embed_lookup_terminates_the_walk() {
        let mut tape = Tape::new();
        let table = tape
            .leaf(
                Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
                LeafTag::Weight("embed.table".into()),
            )
            .unwrap();
        let e = tape.embed_lookup(table, &[1, 1]).unwrap();
        let s = tape.scale(e, 1.0).unwrap();
        let trace = tape.finish(s).unwrap();
        let seed = Tensor::from_vec(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let flow = backpropagate(&trace, &seed, &LrpConfig::default()).unwrap();
        assert_eq!(flow.relevance(e).unwrap(), &seed, "semantic attribution stays at the lookup");
        assert_eq!(flow.relevance(table), None, "no flow into the table");
    }

    #[test]
    fn bias_absorption_is_accounted() {
        let mut tape = Tape::new();
        let x = tape.leaf(scalar(1.0), LeafTag::Constant).unwrap();
        let w = tape.leaf(scalar(1.0), LeafTag::Weight("w".into())).unwrap();
        let b = tape.leaf(scalar(1.0), LeafTag::Weight("b".into())).unwrap();
        let y = tape.linear(x, w, Some(b)).unwrap();
        let trace = tape.finish(y).unwrap();
        let flow = backpropagate(&trace, &scalar(1.0), &LrpConfig::default()).unwrap();
        assert_close(flow.total_at(x), 0.5, 1e-6, "x share");
        assert_close(flow.stats.bias_absorbed, 0.5, 1e-6, "bias share measured");
    }
}

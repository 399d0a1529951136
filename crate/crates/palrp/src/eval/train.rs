//! Full-batch gradient-descent trainer for the toy tasks, built on exact
//! reverse-mode gradients computed by walking a recorded forward trace.

use crate::eval::fixtures::{toy_dataset, ToyTask, TOY_READOUT, TOY_SEQ_LEN, TOY_VOCAB};
use crate::model::{forward, AttnKind, Model, ModelConfig, ModelError, PeKind, WeightStore};
use crate::tape::{
    compute_matmul, gelu_prime, ActKind, ForwardTrace, LeafTag, NodeKind,
};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fmt;

// ── Errors ──────────────────────────────────────────────────────────────────

#[derive(Debug)]
pub enum TrainError {
    Model(ModelError),
    /// Gradient blow-up or another non-finite intermediate.
    NonFinite { what: &'static str },
    /// Seed tensor shape does not match the trace output.
    SeedShape { expected: (usize, usize), got: (usize, usize) },
    /// Accuracy target missed within the epoch budget; carries the full
    /// loss history for diagnosis.
    DidNotConverge { loss_trace: Vec<f64>, best_accuracy: f64 },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::NonFinite { what } => write!(f, "non-finite value in {what}"),
            TrainError::SeedShape { expected, got } => {
                write!(f, "gradient seed shape {got:?} does not match output {expected:?}")
            }
            TrainError::DidNotConverge { loss_trace, best_accuracy } => write!(
                f,
                "training missed its accuracy target (best {best_accuracy:.3}) after {} epochs; final loss {:.6}",
                loss_trace.len(),
                loss_trace.last().copied().unwrap_or(f64::NAN)
            ),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

// ── Reverse-mode gradients over a recorded trace ────────────────────────────

/// Propagate `seed` (the gradient of a scalar loss with respect to the trace
/// output) back to every node. Returns one gradient slot per node; a `None`
/// means no path from that node to the output.
pub fn node_gradients(
    trace: &ForwardTrace,
    seed: &Tensor,
) -> Result<Vec<Option<Tensor>>, TrainError> {
    let out_shape = trace.output().shape();
    if seed.shape() != out_shape {
        return Err(TrainError::SeedShape { expected: out_shape, got: seed.shape() });
    }
    let n = trace.len();
    let mut grads: Vec<Option<Tensor>> = vec![None; n];
    grads[trace.output_id()] = Some(seed.clone());

    let accumulate = |grads: &mut Vec<Option<Tensor>>, id: usize, g: Tensor| {
        match &mut grads[id] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    };
    let mm = |a: &Tensor, ta: bool, b: &Tensor, tb: bool| -> Result<Tensor, TrainError> {
        compute_matmul(a, ta, b, tb, None).map_err(|_| TrainError::NonFinite { what: "matmul" })
    };

    for id in (0..n).rev() {
        let g = match grads[id].take() {
            Some(g) => g,
            None => continue,
        };
        if !g.all_finite() {
            return Err(TrainError::NonFinite { what: "gradient" });
        }
        let node = trace.node(id);
        match &node.kind {
            NodeKind::Leaf { .. } => {
                // Terminal: keep the accumulated gradient.
                grads[id] = Some(g);
                continue;
            }
            NodeKind::MatMul { transpose_a, transpose_b, .. } => {
                let a = &trace.node(node.operands[0]).output;
                let b = &trace.node(node.operands[1]).output;
                // out = op(A)·op(B): the factor gradients are
                // G·op(B)ᵀ and op(A)ᵀ·G, transposed back as needed.
                let da = if *transpose_a {
                    mm(b, *transpose_b, &g, true)?
                } else {
                    mm(&g, false, b, !*transpose_b)?
                };
                let db = if *transpose_b {
                    mm(&g, true, a, *transpose_a)?
                } else {
                    mm(a, !*transpose_a, &g, false)?
                };
                accumulate(&mut grads, node.operands[0], da);
                accumulate(&mut grads, node.operands[1], db);
                if let Some(&bias_id) = node.operands.get(2) {
                    let mut db = Tensor::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            db.add_at(0, j, g.get(i, j));
                        }
                    }
                    accumulate(&mut grads, bias_id, db);
                }
            }
            NodeKind::Add => {
                accumulate(&mut grads, node.operands[0], g.clone());
                accumulate(&mut grads, node.operands[1], g);
            }
            NodeKind::Mul => {
                let a = &trace.node(node.operands[0]).output;
                let b = &trace.node(node.operands[1]).output;
                let mut da = g.clone();
                let mut db = g;
                for i in 0..a.rows() {
                    for j in 0..a.cols() {
                        let gv = da.get(i, j);
                        da.set(i, j, gv * b.get(i, j));
                        db.set(i, j, gv * a.get(i, j));
                    }
                }
                accumulate(&mut grads, node.operands[0], da);
                accumulate(&mut grads, node.operands[1], db);
            }
            NodeKind::SoftmaxRows { .. } => {
                let s = &node.output;
                let mut dx = Tensor::zeros(s.rows(), s.cols());
                for i in 0..s.rows() {
                    let mut dot = 0.0;
                    for j in 0..s.cols() {
                        dot += g.get(i, j) * s.get(i, j);
                    }
                    for j in 0..s.cols() {
                        dx.set(i, j, s.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                accumulate(&mut grads, node.operands[0], dx);
            }
            NodeKind::Norm { epsilon } => {
                let x = &trace.node(node.operands[0]).output;
                let gamma = &trace.node(node.operands[1]).output;
                let (rows, cols) = x.shape();
                let mut dx = Tensor::zeros(rows, cols);
                let mut dgamma = Tensor::zeros(1, cols);
                let mut dbeta = Tensor::zeros(1, cols);
                for i in 0..rows {
                    let row = x.row(i);
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                        / cols as f64;
                    let inv = 1.0 / (var + epsilon).sqrt();
                    let hat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let gg: Vec<f64> =
                        (0..cols).map(|j| g.get(i, j) * gamma.get(0, j)).collect();
                    let mean_gg = gg.iter().sum::<f64>() / cols as f64;
                    let mean_gg_hat =
                        gg.iter().zip(&hat).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for j in 0..cols {
                        dx.set(i, j, inv * (gg[j] - mean_gg - hat[j] * mean_gg_hat));
                        dgamma.add_at(0, j, g.get(i, j) * hat[j]);
                        dbeta.add_at(0, j, g.get(i, j));
                    }
                }
                accumulate(&mut grads, node.operands[0], dx);
                accumulate(&mut grads, node.operands[1], dgamma);
                accumulate(&mut grads, node.operands[2], dbeta);
            }
            NodeKind::Activation { act } => {
                let x = &trace.node(node.operands[0]).output;
                let mut dx = g;
                for i in 0..x.rows() {
                    for j in 0..x.cols() {
                        let slope = match act {
                            ActKind::Gelu => gelu_prime(x.get(i, j)),
                            ActKind::Relu => {
                                if x.get(i, j) > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        dx.set(i, j, dx.get(i, j) * slope);
                    }
                }
                accumulate(&mut grads, node.operands[0], dx);
            }
            NodeKind::EmbedLookup { ids } => {
                let table = &trace.node(node.operands[0]).output;
                let mut dt = Tensor::zeros(table.rows(), table.cols());
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..table.cols() {
                        dt.add_at(id, j, g.get(row, j));
                    }
                }
                accumulate(&mut grads, node.operands[0], dt);
            }
            NodeKind::Scale { factor } => {
                accumulate(&mut grads, node.operands[0], g.map(|v| v * factor));
            }
            NodeKind::Concat { axis } => {
                let mut offset = 0;
                for &part in &node.operands {
                    let shape = trace.node(part).output.shape();
                    let dg = if *axis == 0 {
                        let mut t = Tensor::zeros(shape.0, shape.1);
                        for i in 0..shape.0 {
                            for j in 0..shape.1 {
                                t.set(i, j, g.get(offset + i, j));
                            }
                        }
                        offset += shape.0;
                        t
                    } else {
                        let mut t = Tensor::zeros(shape.0, shape.1);
                        for i in 0..shape.0 {
                            for j in 0..shape.1 {
                                t.set(i, j, g.get(i, offset + j));
                            }
                        }
                        offset += shape.1;
                        t
                    };
                    accumulate(&mut grads, part, dg);
                }
            }
            NodeKind::Slice { r0, c0, .. } => {
                let src = &trace.node(node.operands[0]).output;
                let mut dx = Tensor::zeros(src.rows(), src.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        dx.set(r0 + i, c0 + j, g.get(i, j));
                    }
                }
                accumulate(&mut grads, node.operands[0], dx);
            }
        }
        grads[id] = None; // interior gradients are consumed
    }
    Ok(grads)
}

/// Gradient of the loss with respect to every *trainable* named weight.
/// Position rows are folded back into the positional table when the model
/// learns one.
pub fn weight_gradients(
    model: &Model,
    trace: &ForwardTrace,
    seed: &Tensor,
) -> Result<BTreeMap<String, Tensor>, TrainError> {
    let grads = node_gradients(trace, seed)?;
    let mut named: BTreeMap<String, Tensor> = BTreeMap::new();
    for node in trace.nodes() {
        let g = match &grads[node.id] {
            Some(g) => g,
            None => continue,
        };
        match &node.kind {
            NodeKind::Leaf { tag: LeafTag::Weight(name) } => {
                match named.get_mut(name) {
                    Some(t) => t.add_assign(g),
                    None => {
                        named.insert(name.clone(), g.clone());
                    }
                }
            }
            NodeKind::Leaf { tag: LeafTag::PositionRows }
                if model.config.pe_kind == PeKind::Learnable =>
            {
                let table = model.weights.require("pos.table")?;
                let entry = named
                    .entry("pos.table".to_string())
                    .or_insert_with(|| Tensor::zeros(table.rows(), table.cols()));
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        entry.add_at(i, j, g.get(i, j));
                    }
                }
            }
            _ => {}
        }
    }
    Ok(named)
}

/// Numerically stable softmax cross-entropy on one logits row: returns the
/// loss and its gradient with respect to the row.
pub fn softmax_cross_entropy(logits_row: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits_row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let loss = lse - logits_row[label];
    let mut grad: Vec<f64> = logits_row.iter().map(|&v| (v - lse).exp()).collect();
    grad[label] -= 1.0;
    (loss, grad)
}

// ── Toy trainer ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub task: ToyTask,
    pub seed: u64,
    /// Epoch budget.
    pub epochs: usize,
    /// Training-set size (full-batch updates).
    pub examples: usize,
    /// Gradient-descent step size.
    pub learning_rate: f64,
    /// Training stops once this train accuracy is reached.
    pub target_accuracy: f64,
    /// Keep the positional table at its initial value (used to demonstrate
    /// order-free tasks need no positional signal).
    pub freeze_positional: bool,
}

impl TrainConfig {
    pub fn new(task: ToyTask, seed: u64) -> Self {
        TrainConfig {
            task,
            seed,
            epochs: 2000,
            examples: 64,
            learning_rate: 0.5,
            target_accuracy: 0.95,
            freeze_positional: false,
        }
    }
}

#[derive(Debug)]
pub struct TrainedToy {
    pub model: Model,
    pub train_data: Vec<(Vec<usize>, usize)>,
    /// Mean training loss per epoch, measured before each update.
    pub loss_trace: Vec<f64>,
    pub final_accuracy: f64,
    pub epochs_run: usize,
}

/// Fresh toy model: one layer, one head, width 16, learnable positions.
pub fn init_toy_model(seed: u64, zero_positional: bool) -> Model {
    let config = ModelConfig {
        num_layers: 1,
        num_heads: 1,
        d_model: 16,
        d_ff: 32,
        vocab_size: TOY_VOCAB,
        max_seq_len: TOY_SEQ_LEN,
        pe_kind: PeKind::Learnable,
        causal: true,
        attention: AttnKind::Softmax,
        pre_norm: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1));
    let fill = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32| {
        let mut t = Tensor::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                t.set(i, j, (rng.gen_range(-1.0f32..1.0f32) * scale) as f64);
            }
        }
        t
    };
    let d = config.d_model;
    let f = config.d_ff;
    let mut w = WeightStore::new();
    w.insert("embed.table", fill(&mut rng, TOY_VOCAB, d, 0.5));
    let pos = if zero_positional {
        Tensor::zeros(TOY_SEQ_LEN, d)
    } else {
        fill(&mut rng, TOY_SEQ_LEN, d, 0.5)
    };
    w.insert("pos.table", pos);
    for name in ["wq", "wk", "wv", "wo"] {
        w.insert(format!("layer0.attn.{name}"), fill(&mut rng, d, d, 0.25));
    }
    for n in ["norm1", "norm2"] {
        w.insert(format!("layer0.{n}.gamma"), Tensor::from_vec(1, d, vec![1.0; d]).unwrap());
        w.insert(format!("layer0.{n}.beta"), Tensor::zeros(1, d));
    }
    w.insert("layer0.ffn.w1", fill(&mut rng, d, f, 0.25));
    w.insert("layer0.ffn.w2", fill(&mut rng, f, d, 0.18));
    w.insert("head.w", fill(&mut rng, d, TOY_VOCAB, 0.25));
    Model::new(config, w).expect("toy weights are consistent")
}

/// Train a toy classifier by full-batch gradient descent until it reaches
/// the target train accuracy, the epoch budget runs out, or a numeric
/// failure occurs.
pub fn train_toy_classifier(cfg: &TrainConfig) -> Result<TrainedToy, TrainError> {
    let mut model = init_toy_model(cfg.seed, cfg.freeze_positional);
    let data = toy_dataset(cfg.task, cfg.seed.wrapping_add(0x5eed), cfg.examples);
    let readout = TOY_READOUT;
    let n = data.len() as f64;
    let mut loss_trace = Vec::new();
    let mut best_accuracy = 0.0f64;

    for epoch in 0..cfg.epochs {
        let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (tokens, label) in &data {
            let out = forward(&model, tokens)?;
            let row = out.logits.row(readout);
            let (loss, drow) = softmax_cross_entropy(row, *label);
            loss_sum += loss;
            let argmax =
                (0..row.len()).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap();
            if argmax == *label {
                correct += 1;
            }
            let mut seed = Tensor::zeros(out.logits.rows(), out.logits.cols());
            for (j, &dv) in drow.iter().enumerate() {
                seed.set(readout, j, dv / n);
            }
            for (name, g) in weight_gradients(&model, &out.trace, &seed)? {
                match total.get_mut(&name) {
                    Some(t) => t.add_assign(&g),
                    None => {
                        total.insert(name, g);
                    }
                }
            }
        }
        loss_trace.push(loss_sum / n);
        let accuracy = correct as f64 / n;
        best_accuracy = best_accuracy.max(accuracy);
        if accuracy >= cfg.target_accuracy {
            return Ok(TrainedToy {
                model,
                train_data: data,
                loss_trace,
                final_accuracy: accuracy,
                epochs_run: epoch,
            });
        }
        for (name, tensor) in model.weights.iter_mut() {
            if cfg.freeze_positional && name == "pos.table" {
                continue;
            }
            if let Some(g) = total.get(name.as_str()) {
                let data = tensor.data_mut();
                for (w, gv) in data.iter_mut().zip(g.data()) {
                    *w -= cfg.learning_rate * gv;
                }
            }
        }
    }
    Err(TrainError::DidNotConverge { loss_trace, best_accuracy })
}

// ── Tests ───────────────────────────────────────────────────────────────────

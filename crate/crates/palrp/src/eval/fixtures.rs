//! Reference fixtures: a hand-built model whose prediction is carried
//! entirely by the attention position bias, seeded random models for
//! conservation and audit checks, and synthetic datasets for the toy
//! trainer.

use crate::model::{AttnKind, Model, ModelConfig, PeKind, WeightStore};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Two-token, single-layer causal ALiBi model in which the query, key, and
/// value projections are all zero and only the value bias carries signal.
/// Token content then contributes nothing to the logits: relevance that
/// ignores the position bias comes out identically zero, while the
/// position-aware rules route the full attention-side share into the
/// distance-bias sink. Returns the model together with the two-token input
/// it is built around.
pub fn lemma3_fixture() -> (Model, Vec<usize>) {
    let d = 2;
    let config = ModelConfig {
        num_layers: 1,
        num_heads: 1,
        d_model: d,
        d_ff: d,
        vocab_size: 2,
        max_seq_len: 4,
        pe_kind: PeKind::Alibi,
        causal: true,
        // Raw biased scores keep the bias → output path exactly linear, the
        // regime in which the all-zero semantic map is provable.
        attention: AttnKind::RawScores,
        pre_norm: false,
    };

    let mut w = WeightStore::new();
    w.insert("embed.table", Tensor::zeros(2, d));
    w.insert("alibi.slopes", Tensor::from_vec(1, 1, vec![1.0]).unwrap());
    for name in ["wq", "wk", "wv"] {
        w.insert(format!("layer0.attn.{name}"), Tensor::zeros(d, d));
    }
    w.insert("layer0.attn.wo", identity(d));
    w.insert("layer0.attn.bv", Tensor::from_vec(1, d, vec![1.0, -1.0]).unwrap());
    for n in ["norm1", "norm2"] {
        w.insert(format!("layer0.{n}.gamma"), Tensor::from_vec(1, d, vec![1.0; d]).unwrap());
        w.insert(format!("layer0.{n}.beta"), Tensor::zeros(1, d));
    }
    w.insert("layer0.ffn.w1", Tensor::zeros(d, d));
    w.insert("layer0.ffn.w2", Tensor::zeros(d, d));
    w.insert("head.w", identity(d));

    let model = Model::new(config, w).expect("fixture weights are consistent");
    (model, vec![0, 1])
}

fn identity(n: usize) -> Tensor {
    let mut t = Tensor::zeros(n, n);
    for i in 0..n {
        t.set(i, i, 1.0);
    }
    t
}

/// A seeded random model plus an input sequence for it.
#[derive(Debug)]
pub struct RandomFixture {
    pub model: Model,
    pub tokens: Vec<usize>,
}

/// Build a small random bias-free model. Dimensions are drawn from the seed
/// (1–3 layers, 1–2 heads, model width ≤ 16, sequences ≤ 8) and every
/// weight is quantized to `f32` so that saving and reloading the model
/// reproduces it bit-exactly.
pub fn random_fixture(seed: u64, pe: PeKind, attention: AttnKind) -> RandomFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_layers = rng.gen_range(1..=3usize);
    let num_heads = rng.gen_range(1..=2usize);
    let head_dim = 2 * rng.gen_range(1..=3usize); // even, ≤ 6
    let d_model = num_heads * head_dim;
    let d_ff = d_model * rng.gen_range(1..=2usize);
    let vocab_size = rng.gen_range(5..=12usize);
    let max_seq_len = 8;

    let config = ModelConfig {
        num_layers,
        num_heads,
        d_model,
        d_ff,
        vocab_size,
        max_seq_len,
        pe_kind: pe,
        causal: true,
        attention,
        pre_norm: false,
    };

    let mut w = WeightStore::new();
    let fill = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32| {
        let mut t = Tensor::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                t.set(i, j, (rng.gen_range(-1.0f32..1.0f32) * scale) as f64);
            }
        }
        t
    };

    w.insert("embed.table", fill(&mut rng, vocab_size, d_model, 0.8));
    w.insert("head.w", fill(&mut rng, d_model, vocab_size, 0.5));
    if pe.is_input_additive() && pe == PeKind::Learnable {
        w.insert("pos.table", fill(&mut rng, max_seq_len, d_model, 0.8));
    }
    for k in 0..num_layers {
        for name in ["wq", "wk", "wv", "wo"] {
            w.insert(format!("layer{k}.attn.{name}"), fill(&mut rng, d_model, d_model, 0.4));
        }
        for n in ["norm1", "norm2"] {
            let mut gamma = Tensor::zeros(1, d_model);
            for j in 0..d_model {
                gamma.set(0, j, rng.gen_range(0.75f32..1.25f32) as f64);
            }
            w.insert(format!("layer{k}.{n}.gamma"), gamma);
            w.insert(format!("layer{k}.{n}.beta"), fill(&mut rng, 1, d_model, 0.1));
        }
        w.insert(format!("layer{k}.ffn.w1"), fill(&mut rng, d_model, d_ff, 0.4));
        w.insert(format!("layer{k}.ffn.w2"), fill(&mut rng, d_ff, d_model, 0.4));
    }

    let model = Model::new(config, w).expect("generated weights are consistent");
    let len = rng.gen_range(3..=max_seq_len);
    let tokens = (0..len).map(|_| rng.gen_range(0..vocab_size)).collect();
    RandomFixture { model, tokens }
}

// ── Toy classification tasks ────────────────────────────────────────────────

/// Synthetic sequence-classification tasks for the toy trainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyTask {
    /// Label = the token at position 0. Unsolvable without positional
    /// information.
    PositionalCopy,
    /// Label = 1 if the sequence contains token 0 anywhere, else 0.
    /// Order-free, solvable with no positional signal at all.
    BagOfTokens,
}

pub const TOY_SEQ_LEN: usize = 6;
pub const TOY_VOCAB: usize = 8;

/// Position whose logits row the classifier reads.
pub const TOY_READOUT: usize = TOY_SEQ_LEN - 1;

/// Deterministic labeled dataset for a toy task.
pub fn toy_dataset(task: ToyTask, seed: u64, n: usize) -> Vec<(Vec<usize>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let tokens: Vec<usize> =
                (0..TOY_SEQ_LEN).map(|_| rng.gen_range(0..TOY_VOCAB)).collect();
            let label = match task {
                ToyTask::PositionalCopy => tokens[0],
                ToyTask::BagOfTokens => usize::from(tokens.contains(&0)),
            };
            (tokens, label)
        })
        .collect()
}

// ── Tests ───────────────────────────────────────────────────────────────────

//! The taped forward pass.
//!
//! Layer structure (post-norm default): `x' = LN(x + Attn(x))`,
//! `x'' = LN(x' + FFN(x'))`, with a linear read-out head on top. With
//! `pre_norm` set, each sublayer normalizes its input instead and the
//! residual stream stays unnormalized.
//!
//! Positional information enters the tape as dedicated leaves so the
//! relevance walk can harvest it:
//! * input-additive tables contribute a single `PositionRows` leaf added to
//!   the embeddings,
//! * rotary models materialize one `Rotation` leaf per (layer, position),
//!   shared by the query and key products of every head,
//! * bias models materialize one `AlibiBias` leaf per (layer, head) added to
//!   the scaled scores.
//!
//! Under `AttnKind::RawScores` the causal mask is a constant 0/1
//! lower-triangular `Mul` instead of the additive mask inside softmax.

use super::pe;
use super::{AttnKind, Model, ModelError, PeKind, WeightStore};
use crate::tape::{ActKind, ForwardTrace, LeafTag, MatMulRule, NodeId, Tape};
use crate::tensor::Tensor;
use std::collections::BTreeSet;

/// Epsilon inside every normalization's square root.
pub const NORM_EPSILON: f64 = 1e-5;

// ── Input masking ───────────────────────────────────────────────────────────

/// How a masked position is removed from the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Zero the embedding row (positional information still enters).
    ZeroEmbedding,
    /// Substitute this token id before the embedding lookup.
    ReplaceToken(usize),
}

/// A set of positions to remove, and how.
#[derive(Debug, Clone)]
pub struct MaskSpec {
    pub positions: BTreeSet<usize>,
    pub mode: MaskMode,
}

// ── Output ──────────────────────────────────────────────────────────────────

/// Everything one forward pass produces: the logits, the full trace, and the
/// ids of the two nodes every downstream consumer needs.
#[derive(Debug)]
pub struct ForwardOutput {
    pub trace: ForwardTrace,
    /// `[seq_len × vocab]` read-out scores.
    pub logits: Tensor,
    pub logits_node: NodeId,
    /// The embedding-lookup node; relevance arriving here is the semantic
    /// (token) attribution.
    pub embed_node: NodeId,
}

// ── Forward pass ────────────────────────────────────────────────────────────

pub fn forward(model: &Model, tokens: &[usize]) -> Result<ForwardOutput, ModelError> {
    forward_masked(model, tokens, None)
}

fn weight_leaf(tape: &mut Tape, weights: &WeightStore, name: &str) -> Result<NodeId, ModelError> {
    let tensor = weights.require(name)?.clone();
    Ok(tape.leaf(tensor, LeafTag::Weight(name.to_string()))?)
}

fn optional_weight_leaf(
    tape: &mut Tape,
    weights: &WeightStore,
    name: &str,
) -> Result<Option<NodeId>, ModelError> {
    match weights.get(name) {
        Some(t) => Ok(Some(tape.leaf(t.clone(), LeafTag::Weight(name.to_string()))?)),
        None => Ok(None),
    }
}

pub fn forward_masked(
    model: &Model,
    tokens: &[usize],
    mask: Option<&MaskSpec>,
) -> Result<ForwardOutput, ModelError> {
    let config = &model.config;
    let seq_len = tokens.len();
    if seq_len == 0 {
        return Err(ModelError::EmptySequence);
    }
    if seq_len > config.max_seq_len {
        return Err(ModelError::SequenceTooLong { len: seq_len, max: config.max_seq_len });
    }
    let d = config.d_model;
    let dh = config.head_dim();

    let ids: Vec<usize> = match mask {
        Some(MaskSpec { mode: MaskMode::ReplaceToken(id), positions }) => tokens
            .iter()
            .enumerate()
            .map(|(t, &tok)| if positions.contains(&t) { *id } else { tok })
            .collect(),
        _ => tokens.to_vec(),
    };

    let mut tape = Tape::new();
    let embed_table = weight_leaf(&mut tape, &model.weights, "embed.table")?;
    let embed_node = tape.embed_lookup(embed_table, &ids)?;
    let mut x = embed_node;

    if let Some(MaskSpec { mode: MaskMode::ZeroEmbedding, positions }) = mask {
        if !positions.is_empty() {
            let mut m = Tensor::zeros(seq_len, d);
            for i in 0..seq_len {
                if !positions.contains(&i) {
                    for j in 0..d {
                        m.set(i, j, 1.0);
                    }
                }
            }
            let m_leaf = tape.leaf(m, LeafTag::Mask)?;
            x = tape.mul(x, m_leaf)?;
        }
    }

    if config.pe_kind.is_input_additive() {
        let rows = match config.pe_kind {
            PeKind::Learnable => {
                let table = model.weights.require("pos.table")?;
                let mut rows = Tensor::zeros(seq_len, d);
                for i in 0..seq_len {
                    for j in 0..d {
                        rows.set(i, j, table.get(i, j));
                    }
                }
                rows
            }
            PeKind::Sinusoidal => pe::sinusoidal_table(seq_len, d),
            _ => unreachable!(),
        };
        let p_leaf = tape.leaf(rows, LeafTag::PositionRows)?;
        x = tape.add(x, p_leaf)?;
    }

    let slopes = if config.pe_kind == PeKind::Alibi {
        model.alibi_slopes()
    } else {
        vec![0.0; config.num_heads] // placeholder; only read under ALiBi
    };
    let mut causal_mask_leaf: Option<NodeId> = None;
    let scale_factor = 1.0 / (dh as f64).sqrt();

    for k in 0..config.num_layers {
        let g1 = weight_leaf(&mut tape, &model.weights, &format!("layer{k}.norm1.gamma"))?;
        let b1 = weight_leaf(&mut tape, &model.weights, &format!("layer{k}.norm1.beta"))?;
        let g2 = weight_leaf(&mut tape, &model.weights, &format!("layer{k}.norm2.gamma"))?;
        let b2 = weight_leaf(&mut tape, &model.weights, &format!("layer{k}.norm2.beta"))?;

        let attn_in = if config.pre_norm { tape.norm(x, g1, b1, NORM_EPSILON)? } else { x };
        let wq = weight_leaf(&mut tape, &model.weights, &format!("layer{k}.attn.wq"))?;
        let bq = optional_weight_leaf(&mut tape, &model.weights, &format!("layer{k}.attn.bq"))?;
        let q_full = tape.linear(attn_in, wq, bq)?;
        let wk = weight_leaf(&mut tape, &model.weights, &format!("layer{k}.attn.wk"))?;
        let bk = optional_weight_leaf(&mut tape, &model.weights, &format!("layer{k}.attn.bk"))?;
        let k_full = tape.linear(attn_in, wk, bk)?;
        let wv = weight_leaf(&mut tape, &model.weights, &format!("layer{k}.attn.wv"))?;
        let bv = optional_weight_leaf(&mut tape, &model.weights, &format!("layer{k}.attn.bv"))?;
        let v_full = tape.linear(attn_in, wv, bv)?;

        // Rotation leaves are per (layer, position), shared across heads and
        // across the query/key products; their relevance therefore
        // accumulates every contribution for that position in this layer.
        let mut rotation_leaves: Vec<Option<NodeId>> = vec![None; seq_len];
        let mut head_outputs = Vec::with_capacity(config.num_heads);
        for (h, &slope) in slopes.iter().enumerate() {
            let c0 = h * dh;
            let c1 = c0 + dh;
            let qh = tape.slice(q_full, 0, seq_len, c0, c1)?;
            let kh = tape.slice(k_full, 0, seq_len, c0, c1)?;
            let vh = tape.slice(v_full, 0, seq_len, c0, c1)?;

            let scores = if config.pe_kind == PeKind::Rope {
                let mut q_cols = Vec::with_capacity(seq_len);
                let mut k_cols = Vec::with_capacity(seq_len);
                for (i, slot) in rotation_leaves.iter_mut().enumerate() {
                    let rot = match *slot {
                        Some(id) => id,
                        None => {
                            let id = tape.leaf(
                                pe::rope_matrix(i, dh),
                                LeafTag::Rotation { layer: k, position: i },
                            )?;
                            *slot = Some(id);
                            id
                        }
                    };
                    let q_row = tape.slice(qh, i, i + 1, 0, dh)?;
                    q_cols.push(tape.matmul_t(rot, false, q_row, true, MatMulRule::HalfSplit)?);
                    let k_row = tape.slice(kh, i, i + 1, 0, dh)?;
                    k_cols.push(tape.matmul_t(rot, false, k_row, true, MatMulRule::HalfSplit)?);
                }
                let q_rot = tape.concat(&q_cols, 1)?; // [dh × L]
                let k_rot = tape.concat(&k_cols, 1)?;
                tape.matmul_t(q_rot, true, k_rot, false, MatMulRule::HalfSplit)?
            } else {
                tape.matmul_t(qh, false, kh, true, MatMulRule::HalfSplit)?
            };
            let scaled = tape.scale(scores, scale_factor)?;

            let attn = match config.attention {
                AttnKind::Softmax => {
                    let z = if config.pe_kind == PeKind::Alibi {
                        let p = tape.leaf(
                            pe::alibi_bias(seq_len, slope),
                            LeafTag::AlibiBias { layer: k, head: h },
                        )?;
                        tape.add(scaled, p)?
                    } else {
                        scaled
                    };
                    tape.softmax_rows(z, config.causal)?
                }
                AttnKind::RawScores => {
                    let masked = if config.causal {
                        let m_leaf = match causal_mask_leaf {
                            Some(id) => id,
                            None => {
                                let mut m = Tensor::zeros(seq_len, seq_len);
                                for i in 0..seq_len {
                                    for j in 0..=i {
                                        m.set(i, j, 1.0);
                                    }
                                }
                                let id = tape.leaf(m, LeafTag::Mask)?;
                                causal_mask_leaf = Some(id);
                                id
                            }
                        };
                        tape.mul(scaled, m_leaf)?
                    } else {
                        scaled
                    };
                    if config.pe_kind == PeKind::Alibi {
                        let p = tape.leaf(
                            pe::alibi_bias(seq_len, slope),
                            LeafTag::AlibiBias { layer: k, head: h },
                        )?;
                        tape.add(masked, p)?
                    } else {
                        masked
                    }
                }
            };
            head_outputs.push(tape.matmul(attn, vh, MatMulRule::HalfSplit)?);
        }
        let merged = tape.concat(&head_outputs, 1)?;
        let wo = weight_leaf(&mut tape, &model.weights, &format!("layer{k}.attn.wo"))?;
        let bo = optional_weight_leaf(&mut tape, &model.weights, &format!("layer{k}.attn.bo"))?;
        let attn_out = tape.linear(merged, wo, bo)?;
        let res1 = tape.add(x, attn_out)?;
        x = if config.pre_norm { res1 } else { tape.norm(res1, g1, b1, NORM_EPSILON)? };

        let ffn_in = if config.pre_norm { tape.norm(x, g2, b2, NORM_EPSILON)? } else { x };
        let w1 = weight_leaf(&mut tape, &model.weights, &format!("layer{k}.ffn.w1"))?;
        let bias1 = optional_weight_leaf(&mut tape, &model.weights, &format!("layer{k}.ffn.b1"))?;
        let hidden = tape.linear(ffn_in, w1, bias1)?;
        let act = tape.activation(hidden, ActKind::Gelu)?;
        let w2 = weight_leaf(&mut tape, &model.weights, &format!("layer{k}.ffn.w2"))?;
        let bias2 = optional_weight_leaf(&mut tape, &model.weights, &format!("layer{k}.ffn.b2"))?;
        let ffn_out = tape.linear(act, w2, bias2)?;
        let res2 = tape.add(x, ffn_out)?;
        x = if config.pre_norm { res2 } else { tape.norm(res2, g2, b2, NORM_EPSILON)? };
    }

    let head_w = weight_leaf(&mut tape, &model.weights, "head.w")?;
    let head_b = optional_weight_leaf(&mut tape, &model.weights, "head.b")?;
    let logits_node = tape.linear(x, head_w, head_b)?;
    let logits = tape.output(logits_node).clone();
    let trace = tape.finish(logits_node)?;
    Ok(ForwardOutput { trace, logits, logits_node, embed_node })
}

// ── Tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::super::tests::{tiny_config, zero_weights};
    use super::*;
    use crate::model::Model;

    fn zero_model(pe_kind: PeKind) -> Model {
        let config = tiny_config(pe_kind);
        let weights = zero_weights(&config);
        Model::new(config, weights).unwrap()
    }

    #[test]
    fn zero_weight_model_produces_zero_logits() {
        for pe in [PeKind::Learnable, PeKind::Sinusoidal, PeKind::Rope, PeKind::Alibi] {
            let mut model = zero_model(pe);
            if pe == PeKind::Rope {
                model.config.d_model = 4; // head_dim 4, even
            }
            let out = forward(&model, &[0]).unwrap();
            assert_eq!(out.logits.shape(), (1, model.config.vocab_size));
            assert_eq!(out.logits.max_abs(), 0.0, "pe {pe:?}");
        }
    }

    #[test]
    fn forward_validates_sequence_length() {
        let model = zero_model(PeKind::Learnable);
        assert!(matches!(forward(&model, &[]), Err(ModelError::EmptySequence)));
        let long = vec![0usize; model.config.max_seq_len + 1];
        assert!(matches!(
            forward(&model, &long),
            Err(ModelError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn forward_rejects_out_of_vocabulary_token() {
        let model = zero_model(PeKind::Learnable);
        let err = forward(&model, &[0, 99]).unwrap_err();
        assert!(matches!(err, ModelError::Tape(crate::tape::TapeError::Vocabulary { .. })));
    }

    #[test]
    fn trace_replays_bit_exactly_for_every_encoding_and_attention() {
        for pe in [PeKind::Learnable, PeKind::Sinusoidal, PeKind::Rope, PeKind::Alibi] {
            for attention in [AttnKind::Softmax, AttnKind::RawScores] {
                let mut config = tiny_config(pe);
                config.attention = attention;
                config.num_heads = 2;
                let mut weights = zero_weights(&config);
                // Deterministic non-zero fill so the trace is non-trivial.
                let mut v = 0.05f64;
                for (_, t) in weights.iter_mut() {
                    for x in t.data_mut().iter_mut() {
                        *x = v.sin() * 0.3;
                        v += 0.7;
                    }
                }
                let model = Model::new(config, weights).unwrap();
                let out = forward(&model, &[0, 1, 2, 3]).unwrap();
                out.trace.replay_check().unwrap();
                assert!(out.logits.all_finite());
            }
        }
    }

    #[test]
    fn zero_embedding_mask_hides_token_identity() {
        let mut config = tiny_config(PeKind::Learnable);
        config.attention = AttnKind::Softmax;
        let mut weights = zero_weights(&config);
        let mut v = 0.3f64;
        for (_, t) in weights.iter_mut() {
            for x in t.data_mut().iter_mut() {
                *x = v.cos() * 0.4;
                v += 1.1;
            }
        }
        let model = Model::new(config, weights).unwrap();

        let mask = MaskSpec {
            positions: [1usize].into_iter().collect(),
            mode: MaskMode::ZeroEmbedding,
        };
        let a = forward_masked(&model, &[0, 1, 2], Some(&mask)).unwrap();
        let b = forward_masked(&model, &[0, 3, 2], Some(&mask)).unwrap();
        assert_eq!(a.logits, b.logits, "masked position must not leak token identity");

        let unmasked_a = forward(&model, &[0, 1, 2]).unwrap();
        let unmasked_b = forward(&model, &[0, 3, 2]).unwrap();
        assert_ne!(unmasked_a.logits, unmasked_b.logits);
    }

    #[test]
    fn replace_token_mask_substitutes_ids() {
        let mut config = tiny_config(PeKind::Sinusoidal);
        config.attention = AttnKind::Softmax;
        let mut weights = zero_weights(&config);
        let mut v = 0.9f64;
        for (_, t) in weights.iter_mut() {
            for x in t.data_mut().iter_mut() {
                *x = v.sin() * 0.2;
                v += 0.53;
            }
        }
        let model = Model::new(config, weights).unwrap();
        let mask = MaskSpec {
            positions: [0usize, 2].into_iter().collect(),
            mode: MaskMode::ReplaceToken(4),
        };
        let masked = forward_masked(&model, &[1, 1, 1], Some(&mask)).unwrap();
        let direct = forward(&model, &[4, 1, 4]).unwrap();
        assert_eq!(masked.logits, direct.logits);
    }
}

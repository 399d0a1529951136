//! Positional-encoding construction: sinusoidal tables, rotation matrices,
//! and linear attention biases.
//!
//! Conventions, fixed across the crate:
//! * positions are 0-indexed,
//! * sinusoidal tables interleave sin (even columns) and cos (odd columns)
//!   with the frequency exponent taken from the *pair* index,
//! * rotation matrices are block-diagonal 2x2 rotations with frequencies
//!   `omega_m = 10000^(-2(m-1)/head_dim)` for pair `m = 1..head_dim/2`,
//! * attention biases are `slope * (i - j)` strictly below the diagonal and
//!   zero elsewhere (entries above the diagonal are never consumed under a
//!   causal mask).

use crate::tensor::Tensor;

// ── Sinusoidal table ────────────────────────────────────────────────────────

/// Fixed sin/cos positional table of shape `[max_len × d_model]`.
///
/// `table[i, 2d] = sin(i / 10000^(2d/D))` and
/// `table[i, 2d+1] = cos(i / 10000^(2d/D))`.
pub fn sinusoidal_table(max_len: usize, d_model: usize) -> Tensor {
    let mut table = Tensor::zeros(max_len, d_model);
    for i in 0..max_len {
        for j in 0..d_model {
            let pair = (j / 2) as f64;
            let angle = i as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
            let v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            table.set(i, j, v);
        }
    }
    table
}

// ── Rotations ───────────────────────────────────────────────────────────────

/// Block-diagonal rotation applied to one query/key column at `position`.
/// Requires an even `head_dim`; returns a `[head_dim × head_dim]` orthogonal
/// matrix.
pub fn rope_matrix(position: usize, head_dim: usize) -> Tensor {
    assert!(head_dim >= 2 && head_dim.is_multiple_of(2), "rotation needs an even head_dim >= 2");
    let mut r = Tensor::zeros(head_dim, head_dim);
    for m in 1..=head_dim / 2 {
        let omega = 10000f64.powf(-2.0 * (m as f64 - 1.0) / head_dim as f64);
        let theta = position as f64 * omega;
        let (s, c) = theta.sin_cos();
        let a = 2 * (m - 1);
        r.set(a, a, c);
        r.set(a, a + 1, -s);
        r.set(a + 1, a, s);
        r.set(a + 1, a + 1, c);
    }
    r
}

// ── Attention biases ────────────────────────────────────────────────────────

/// Additive attention bias `bias[i, j] = slope * (i - j)` for `j < i`, zero
/// on and above the diagonal.
pub fn alibi_bias(seq_len: usize, slope: f64) -> Tensor {
    let mut b = Tensor::zeros(seq_len, seq_len);
    for i in 0..seq_len {
        for j in 0..i {
            b.set(i, j, slope * (i as f64 - j as f64));
        }
    }
    b
}

/// Default per-head slopes `2^(-8h/H)` for heads `h = 1..=H`, used when a
/// model ships no explicit slope row.
pub fn default_alibi_slopes(num_heads: usize) -> Vec<f64> {
    (1..=num_heads)
        .map(|h| 2f64.powf(-8.0 * h as f64 / num_heads as f64))
        .collect()
}

// ── Tests ───────────────────────────────────────────────────────────────────

//! Evaluation harness: perturbation curves, segmentation scoring,
//! conservation audits, reference fixtures, and a toy trainer.

pub mod fixtures;
pub mod train;

use crate::model::{forward_masked, Model, ModelError, PeKind};
use crate::pe_lrp::RelevanceMap;
use crate::tensor::Tensor;
use std::collections::BTreeSet;
use std::fmt;

// ── Errors ──────────────────────────────────────────────────────────────────

#[derive(Debug)]
pub enum EvalError {
    /// Inputs whose dimensions cannot work together.
    Dimension { detail: String },
    /// A curve with fewer than two points has no area.
    CurveTooShort { points: usize },
    /// Fractions outside [0, 1] or not strictly increasing.
    BadFractions { detail: String },
    /// Ground-truth mask with only one class; metrics would be undefined.
    DegenerateTruth { all_foreground: bool },
    /// Binary mask decoding failure.
    MaskFormat { detail: String },
    Model(ModelError),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::Dimension { detail } => write!(f, "dimension error: {detail}"),
            EvalError::CurveTooShort { points } => {
                write!(f, "perturbation curve needs at least 2 points, got {points}")
            }
            EvalError::BadFractions { detail } => write!(f, "bad fraction list: {detail}"),
            EvalError::DegenerateTruth { all_foreground } => {
                let which = if *all_foreground { "foreground" } else { "background" };
                write!(f, "degenerate truth mask: every pixel is {which}")
            }
            EvalError::MaskFormat { detail } => write!(f, "unreadable mask: {detail}"),
            EvalError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        EvalError::Model(e)
    }
}

// ── Perturbation curves ─────────────────────────────────────────────────────

/// Masking direction: remove the highest-scored tokens first (`Positive`,
/// the usual faithfulness test) or the lowest first (`Negative`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbOrder {
    Positive,
    Negative,
}

/// How masked tokens are removed from the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskStrategy {
    /// Zero the embedding rows (default).
    ZeroEmbedding,
    /// Substitute this token id.
    MaskTokenId(usize),
}

/// Which class's probability the curve tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// Argmax of the unperturbed logits at the read-out position.
    Predicted,
    Specified(usize),
}

#[derive(Debug, Clone)]
pub struct PerturbationConfig {
    pub order: PerturbOrder,
    /// Strictly increasing fractions, each in (0, 1].
    pub fractions: Vec<f64>,
    pub strategy: MaskStrategy,
    pub target: Target,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            order: PerturbOrder::Positive,
            fractions: (1..=9).map(|i| i as f64 / 10.0).collect(),
            strategy: MaskStrategy::ZeroEmbedding,
            target: Target::Predicted,
        }
    }
}

/// One point per fraction: the masked fraction, the target-class probability
/// at the read-out position, and the mean squared logit deviation from the
/// unperturbed pass.
#[derive(Debug, Clone)]
pub struct PerturbationCurve {
    pub fractions: Vec<f64>,
    pub activation: Vec<f64>,
    pub mse: Vec<f64>,
    pub target_class: usize,
}

fn softmax_probability(logits_row: &[f64], class: usize) -> f64 {
    let max = logits_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = logits_row.iter().map(|v| (v - max).exp()).sum();
    ((logits_row[class] - max).exp()) / denom
}

/// Deterministic masking order: by score (descending for `Positive`,
/// ascending for `Negative`), ties broken by ascending token index.
pub fn masking_order(scores: &[f64], order: PerturbOrder) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        let primary = match order {
            PerturbOrder::Positive => scores[b].partial_cmp(&scores[a]).expect("finite scores"),
            PerturbOrder::Negative => scores[a].partial_cmp(&scores[b]).expect("finite scores"),
        };
        primary.then(a.cmp(&b))
    });
    idx
}

/// Run the masking sweep. `scores` ranks the tokens (one score per token);
/// `position` is the read-out row of the logits.
pub fn perturbation_curve(
    model: &Model,
    tokens: &[usize],
    scores: &[f64],
    position: usize,
    cfg: &PerturbationConfig,
) -> Result<PerturbationCurve, EvalError> {
    let len = tokens.len();
    if scores.len() != len {
        return Err(EvalError::Dimension {
            detail: format!("{} scores for {len} tokens", scores.len()),
        });
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::Dimension { detail: "non-finite score".into() });
    }
    validate_fractions(&cfg.fractions)?;
    if position >= len {
        return Err(EvalError::Dimension {
            detail: format!("read-out position {position} out of range for {len} tokens"),
        });
    }

    let baseline = crate::model::forward(model, tokens)?;
    let target_class = match cfg.target {
        Target::Specified(c) => {
            if c >= model.config.vocab_size {
                return Err(EvalError::Dimension {
                    detail: format!("target class {c} outside vocabulary"),
                });
            }
            c
        }
        Target::Predicted => {
            let row = baseline.logits.row(position);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        }
    };

    let ordering = masking_order(scores, cfg.order);
    let mut activation = Vec::with_capacity(cfg.fractions.len());
    let mut mse_series = Vec::with_capacity(cfg.fractions.len());
    for &f in &cfg.fractions {
        let n_mask = ((f * len as f64).ceil() as usize).min(len);
        let masked: BTreeSet<usize> = ordering.iter().take(n_mask).copied().collect();
        let logits = if masked.is_empty() {
            baseline.logits.clone()
        } else {
            let spec = crate::model::MaskSpec {
                positions: masked,
                mode: match cfg.strategy {
                    MaskStrategy::ZeroEmbedding => crate::model::MaskMode::ZeroEmbedding,
                    MaskStrategy::MaskTokenId(id) => crate::model::MaskMode::ReplaceToken(id),
                },
            };
            forward_masked(model, tokens, Some(&spec))?.logits
        };
        activation.push(softmax_probability(logits.row(position), target_class));
        let mut mse = 0.0;
        for i in 0..logits.rows() {
            for j in 0..logits.cols() {
                let d = logits.get(i, j) - baseline.logits.get(i, j);
                mse += d * d;
            }
        }
        mse_series.push(mse / logits.len() as f64);
    }
    Ok(PerturbationCurve {
        fractions: cfg.fractions.clone(),
        activation,
        mse: mse_series,
        target_class,
    })
}

fn validate_fractions(fractions: &[f64]) -> Result<(), EvalError> {
    if fractions.is_empty() {
        return Err(EvalError::CurveTooShort { points: 0 });
    }
    for w in fractions.windows(2) {
        if w[1] <= w[0] || w[0].is_nan() || w[1].is_nan() {
            return Err(EvalError::BadFractions {
                detail: format!("{} then {} is not strictly increasing", w[0], w[1]),
            });
        }
    }
    if fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(EvalError::BadFractions { detail: "fraction outside (0, 1]".into() });
    }
    Ok(())
}

// ── Area metrics ────────────────────────────────────────────────────────────

/// Trapezoid areas normalized by the fraction span, so a constant curve `c`
/// has area exactly `c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaMetrics {
    /// Area under the activation curve.
    pub auac: f64,
    /// Area under the logit-deviation curve.
    pub au_mse: f64,
}

fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    let mut area = 0.0;
    for i in 1..xs.len() {
        area += (xs[i] - xs[i - 1]) * (ys[i] + ys[i - 1]) / 2.0;
    }
    area / (xs[xs.len() - 1] - xs[0])
}

pub fn area_metrics(curve: &PerturbationCurve) -> Result<AreaMetrics, EvalError> {
    if curve.fractions.len() < 2 {
        return Err(EvalError::CurveTooShort { points: curve.fractions.len() });
    }
    validate_fractions(&curve.fractions)?;
    if curve.activation.len() != curve.fractions.len() || curve.mse.len() != curve.fractions.len() {
        return Err(EvalError::Dimension { detail: "curve field lengths disagree".into() });
    }
    Ok(AreaMetrics {
        auac: trapezoid(&curve.fractions, &curve.activation),
        au_mse: trapezoid(&curve.fractions, &curve.mse),
    })
}

// ── Segmentation metrics ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub enum ThresholdMode {
    /// Binarize the heatmap at its own mean (default).
    Mean,
    Value(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentationReport {
    pub pixel_accuracy: f64,
    pub foreground_iou: f64,
    pub background_iou: f64,
    pub mean_iou: f64,
    pub threshold: f64,
}

/// Score a heatmap against a binary ground-truth mask of the same length.
/// A truth mask with a single class is rejected as degenerate rather than
/// silently averaged.
pub fn segmentation_metrics(
    heatmap: &[f64],
    truth: &[bool],
    mode: ThresholdMode,
) -> Result<SegmentationReport, EvalError> {
    if heatmap.len() != truth.len() {
        return Err(EvalError::Dimension {
            detail: format!("heatmap length {} vs truth length {}", heatmap.len(), truth.len()),
        });
    }
    if heatmap.is_empty() {
        return Err(EvalError::Dimension { detail: "empty heatmap".into() });
    }
    if heatmap.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::Dimension { detail: "non-finite heatmap value".into() });
    }
    let fg_count = truth.iter().filter(|&&t| t).count();
    if fg_count == 0 || fg_count == truth.len() {
        return Err(EvalError::DegenerateTruth { all_foreground: fg_count == truth.len() });
    }
    let threshold = match mode {
        ThresholdMode::Mean => heatmap.iter().sum::<f64>() / heatmap.len() as f64,
        ThresholdMode::Value(t) => t,
    };
    let mut correct = 0usize;
    let mut inter_fg = 0usize;
    let mut union_fg = 0usize;
    let mut inter_bg = 0usize;
    let mut union_bg = 0usize;
    for (&v, &t) in heatmap.iter().zip(truth) {
        let pred = v > threshold;
        if pred == t {
            correct += 1;
        }
        if pred && t {
            inter_fg += 1;
        }
        if pred || t {
            union_fg += 1;
        }
        if !pred && !t {
            inter_bg += 1;
        }
        if !pred || !t {
            union_bg += 1;
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let foreground_iou = ratio(inter_fg, union_fg);
    let background_iou = ratio(inter_bg, union_bg);
    Ok(SegmentationReport {
        pixel_accuracy: correct as f64 / truth.len() as f64,
        foreground_iou,
        background_iou,
        mean_iou: (foreground_iou + background_iou) / 2.0,
        threshold,
    })
}

// ── Conservation audit ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConservationReport {
    /// Positive semantic mass.
    pub semantic_total: f64,
    /// Positive positional (sink) mass.
    pub positional_total: f64,
    pub seed_total: f64,
    /// `positional / (semantic + positional)` over positive parts; 0 when
    /// both vanish.
    pub positional_fraction: f64,
    /// Seeded relevance not present in the raw (signed) fields — the share
    /// absorbed by biases and lost to stabilizers/linearization.
    pub bias_residual: f64,
}

/// Summarize where a relevance map's mass sits.
pub fn conservation_audit(map: &RelevanceMap) -> ConservationReport {
    let semantic_total = map.semantic.positive_total();
    let positional_total: f64 = map.positional_sinks.iter().map(Tensor::positive_total).sum();
    let denom = semantic_total + positional_total;
    let positional_fraction = if denom == 0.0 { 0.0 } else { positional_total / denom };
    let raw: f64 = map.semantic.total()
        + map.positional_sinks.iter().map(Tensor::total).sum::<f64>();
    ConservationReport {
        semantic_total,
        positional_total,
        seed_total: map.seed_total,
        positional_fraction,
        bias_residual: map.seed_total - raw,
    }
}

// ── Heatmap rendering and mask decoding ─────────────────────────────────────

/// Render scores as a binary PPM (P6) red-intensity ramp, min-max normalized.
/// A constant score field renders black. `width * height` must equal the
/// score count.
pub fn render_heatmap_ppm(scores: &[f64], width: usize, height: usize) -> Result<Vec<u8>, EvalError> {
    if width == 0 || height == 0 || width * height != scores.len() {
        return Err(EvalError::Dimension {
            detail: format!("{} scores cannot fill a {width}x{height} image", scores.len()),
        });
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::Dimension { detail: "non-finite score".into() });
    }
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    for &s in scores {
        let v = if span == 0.0 { 0u8 } else { ((s - min) / span * 255.0).round() as u8 };
        bytes.extend_from_slice(&[v, 0, 0]);
    }
    Ok(bytes)
}

/// Decode a binary PGM (P5, maxval ≤ 255) into a boolean mask: nonzero
/// pixels are foreground.
pub fn read_pgm_mask(bytes: &[u8]) -> Result<(Vec<bool>, usize, usize), EvalError> {
    let fail = |detail: &str| EvalError::MaskFormat { detail: detail.to_string() };
    let mut pos = 0usize;
    let mut read_token = || -> Result<String, EvalError> {
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !(bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(EvalError::MaskFormat { detail: "truncated header".into() });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if read_token()? != "P5" {
        return Err(fail("not a binary PGM (P5)"));
    }
    let width: usize = read_token()?.parse().map_err(|_| fail("bad width"))?;
    let height: usize = read_token()?.parse().map_err(|_| fail("bad height"))?;
    let maxval: usize = read_token()?.parse().map_err(|_| fail("bad maxval"))?;
    if maxval == 0 || maxval > 255 {
        return Err(fail("maxval out of range"));
    }
    // Exactly one whitespace byte separates header from data.
    pos += 1;
    let needed = width * height;
    if bytes.len() < pos + needed {
        return Err(fail("pixel data truncated"));
    }
    let mask = bytes[pos..pos + needed].iter().map(|&b| b != 0).collect();
    Ok((mask, width, height))
}

/// Positional fraction shortcut used by reports: this model's encoding
/// injects positional information inside attention (`true`) or at the input
/// (`false`).
pub fn encoding_is_attention_level(pe: PeKind) -> bool {
    matches!(pe, PeKind::Rope | PeKind::Alibi)
}

// ── Tests ───────────────────────────────────────────────────────────────────

//! `palrp` — command-line front end for the positional-attribution library.
//!
//! Verbs: `explain`, `eval-perturbation`, `eval-segmentation`, `audit`,
//! `gen-fixture`, `export-heatmap`. The binary is a thin shell: every number
//! it writes comes from the library unchanged, serialized with enough digits
//! to round-trip exactly, so repeated runs with the same inputs are
//! byte-identical.
//!
//! Exit codes: 0 success, 2 input/load error, 3 validation error, 4 numeric
//! error (NaN/Inf or another internal numeric failure). Diagnostics are a
//! single line on stderr.

use clap::{Parser, Subcommand};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use palrp::eval::fixtures::{lemma3_fixture, random_fixture, ToyTask};
use palrp::eval::train::{train_toy_classifier, TrainConfig, TrainError};
use palrp::eval::{
    area_metrics, conservation_audit, perturbation_curve, read_pgm_mask, render_heatmap_ppm,
    segmentation_metrics, EvalError, MaskStrategy, PerturbOrder, PerturbationConfig, Target,
    ThresholdMode,
};
use palrp::lrp::{LrpConfig, LrpError};
use palrp::model::{load_model_dir, save_model, AttnKind, LoadError, Model, ModelError, PeKind};
use palrp::pe_lrp::{explain, ExplainError, Method, RelevanceMap};
use palrp::serialize::to_json_string;
use palrp::tape::TapeError;

const EXIT_INPUT: u8 = 2;
const EXIT_VALIDATION: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(
    name = "palrp",
    version,
    about = "Positional-aware relevance propagation for small transformers"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Attribute one logit back to the tokens and positional sinks.
    Explain {
        /// Model directory (manifest.json + weights.bin).
        #[arg(long)]
        model: PathBuf,
        /// JSON file holding the token-id array.
        #[arg(long)]
        tokens: PathBuf,
        /// Read-out row of the logits.
        #[arg(long)]
        position: usize,
        /// Logit column to seed.
        #[arg(long)]
        class: usize,
        /// pa-lrp | baseline | pe-only
        #[arg(long, default_value = "pa-lrp")]
        method: String,
        /// Stabilizer magnitude for every propagation denominator.
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        /// Output file for the relevance-map JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Mask tokens in relevance order and record the model's decay curve.
    EvalPerturbation {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tokens: PathBuf,
        /// Relevance-map JSON produced by `explain`; supplies the scores,
        /// read-out position and target class.
        #[arg(long)]
        relevance: PathBuf,
        /// pos (highest first) | neg (lowest first)
        #[arg(long, default_value = "pos")]
        order: String,
        /// Comma-separated masking fractions in (0,1], strictly increasing.
        /// Defaults to 0.1..0.9.
        #[arg(long)]
        fractions: Option<String>,
        /// zero (zero the embedding rows) | id:N (substitute token N)
        #[arg(long, default_value = "zero")]
        mask: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a heatmap against a binary ground-truth mask.
    EvalSegmentation {
        /// Heatmap: JSON number array, or a relevance map (per-token scores).
        #[arg(long)]
        heatmap: PathBuf,
        /// Ground truth: binary PGM (P5) or JSON array of 0/1 or booleans.
        #[arg(long)]
        truth: PathBuf,
        /// mean (binarize at the heatmap mean) | explicit numeric threshold
        #[arg(long, default_value = "mean")]
        threshold: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize where a relevance map's mass sits.
    Audit {
        /// Relevance-map JSON produced by `explain`.
        #[arg(long)]
        relevance: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a ready-to-run model directory.
    GenFixture {
        /// lemma3 | random | toy-trained
        kind: String,
        /// Output directory (created if missing); receives manifest.json,
        /// weights.bin and tokens.json.
        #[arg(long)]
        out: PathBuf,
        /// Seed for `random` dimensions/weights and `toy-trained` data.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// random only: learnable | sinusoidal | rope | alibi
        #[arg(long, default_value = "learnable")]
        pe: String,
        /// random only: softmax | raw-scores
        #[arg(long, default_value = "raw-scores")]
        attention: String,
        /// toy-trained only: positional-copy | bag-of-tokens
        #[arg(long, default_value = "positional-copy")]
        task: String,
    },
    /// Render per-token scores as a red-ramp binary PPM image.
    ExportHeatmap {
        /// Relevance-map JSON produced by `explain`.
        #[arg(long)]
        relevance: PathBuf,
        /// HxW grid; H*W must equal the token count. Row-major layout.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

// ── Error classification ────────────────────────────────────────────────────

fn tape_code(e: &TapeError) -> u8 {
    match e {
        TapeError::NonFinite { .. } => EXIT_NUMERIC,
        TapeError::Vocabulary { .. } | TapeError::DegenerateRow { .. } => EXIT_VALIDATION,
        // Internal graph inconsistencies; inputs were already validated.
        TapeError::Dimension { .. } | TapeError::UnknownOperand { .. } => EXIT_NUMERIC,
    }
}

fn model_code(e: &ModelError) -> u8 {
    match e {
        ModelError::EmptySequence | ModelError::SequenceTooLong { .. } => EXIT_VALIDATION,
        ModelError::Tape(t) => tape_code(t),
        // Bad configuration or weight set: the model files are unusable.
        _ => EXIT_INPUT,
    }
}

fn load_failure(e: LoadError) -> Failure {
    Failure::new(EXIT_INPUT, e.to_string())
}

fn explain_failure(e: ExplainError) -> Failure {
    let code = match &e {
        ExplainError::Model(m) => model_code(m),
        ExplainError::Lrp(LrpError::NonFinite { .. }) => EXIT_NUMERIC,
        ExplainError::Lrp(_) => EXIT_VALIDATION,
        ExplainError::Malformed { .. } => EXIT_INPUT,
        ExplainError::Inconsistent { .. } => EXIT_VALIDATION,
    };
    Failure::new(code, e.to_string())
}

fn eval_failure(e: EvalError) -> Failure {
    let code = match &e {
        EvalError::Model(m) => model_code(m),
        EvalError::MaskFormat { .. } => EXIT_INPUT,
        _ => EXIT_VALIDATION,
    };
    Failure::new(code, e.to_string())
}

fn train_failure(e: TrainError) -> Failure {
    let code = match &e {
        TrainError::Model(m) => model_code(m),
        _ => EXIT_NUMERIC,
    };
    Failure::new(code, e.to_string())
}

// ── Small IO helpers ────────────────────────────────────────────────────────

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path)
        .map_err(|e| Failure::new(EXIT_INPUT, format!("cannot read '{}': {e}", path.display())))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path)
        .map_err(|e| Failure::new(EXIT_INPUT, format!("cannot read '{}': {e}", path.display())))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes)
        .map_err(|e| Failure::new(EXIT_INPUT, format!("cannot write '{}': {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = to_json_string(value)
        .map_err(|e| Failure::new(EXIT_NUMERIC, format!("serialization failed: {e}")))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn read_tokens(path: &Path) -> Result<Vec<usize>, Failure> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| {
        Failure::new(EXIT_INPUT, format!("'{}' is not a JSON token-id array: {e}", path.display()))
    })
}

fn read_relevance(path: &Path) -> Result<RelevanceMap, Failure> {
    let text = read_text(path)?;
    RelevanceMap::from_json(&text).map_err(explain_failure)
}

// ── Flag parsing ────────────────────────────────────────────────────────────

fn parse_method(s: &str) -> Result<Method, Failure> {
    Method::parse(s).ok_or_else(|| {
        Failure::new(EXIT_INPUT, format!("unknown method '{s}' (expected pa-lrp, baseline, pe-only)"))
    })
}

fn parse_order(s: &str) -> Result<PerturbOrder, Failure> {
    match s {
        "pos" => Ok(PerturbOrder::Positive),
        "neg" => Ok(PerturbOrder::Negative),
        _ => Err(Failure::new(EXIT_INPUT, format!("unknown order '{s}' (expected pos or neg)"))),
    }
}

fn parse_mask(s: &str) -> Result<MaskStrategy, Failure> {
    if s == "zero" {
        return Ok(MaskStrategy::ZeroEmbedding);
    }
    if let Some(id) = s.strip_prefix("id:") {
        let id: usize = id.parse().map_err(|_| {
            Failure::new(EXIT_INPUT, format!("bad mask token id in '{s}'"))
        })?;
        return Ok(MaskStrategy::MaskTokenId(id));
    }
    Err(Failure::new(EXIT_INPUT, format!("unknown mask strategy '{s}' (expected zero or id:N)")))
}

fn parse_fractions(s: &str) -> Result<Vec<f64>, Failure> {
    s.split(',')
        .map(|part| {
            part.trim().parse::<f64>().map_err(|_| {
                Failure::new(EXIT_INPUT, format!("bad fraction '{}' in list", part.trim()))
            })
        })
        .collect()
}

fn parse_threshold(s: &str) -> Result<ThresholdMode, Failure> {
    if s == "mean" {
        return Ok(ThresholdMode::Mean);
    }
    let v: f64 = s.parse().map_err(|_| {
        Failure::new(EXIT_INPUT, format!("threshold must be 'mean' or a number, got '{s}'"))
    })?;
    Ok(ThresholdMode::Value(v))
}

/// `HxW` with positive integer sides.
fn parse_grid(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || Failure::new(EXIT_INPUT, format!("grid must look like HxW, got '{s}'"));
    let (h, w) = s.split_once('x').ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    Ok((h, w))
}

fn parse_pe(s: &str) -> Result<PeKind, Failure> {
    match s {
        "learnable" => Ok(PeKind::Learnable),
        "sinusoidal" => Ok(PeKind::Sinusoidal),
        "rope" => Ok(PeKind::Rope),
        "alibi" => Ok(PeKind::Alibi),
        _ => Err(Failure::new(
            EXIT_INPUT,
            format!("unknown positional encoding '{s}' (expected learnable, sinusoidal, rope, alibi)"),
        )),
    }
}

fn parse_attention(s: &str) -> Result<AttnKind, Failure> {
    match s {
        "softmax" => Ok(AttnKind::Softmax),
        "raw-scores" => Ok(AttnKind::RawScores),
        _ => Err(Failure::new(
            EXIT_INPUT,
            format!("unknown attention kind '{s}' (expected softmax or raw-scores)"),
        )),
    }
}

fn parse_task(s: &str) -> Result<ToyTask, Failure> {
    match s {
        "positional-copy" => Ok(ToyTask::PositionalCopy),
        "bag-of-tokens" => Ok(ToyTask::BagOfTokens),
        _ => Err(Failure::new(
            EXIT_INPUT,
            format!("unknown task '{s}' (expected positional-copy or bag-of-tokens)"),
        )),
    }
}

// ── Report shapes ───────────────────────────────────────────────────────────

#[derive(Serialize)]
struct PerturbationReport {
    order: &'static str,
    mask: String,
    position: usize,
    target_class: usize,
    fractions: Vec<f64>,
    activation: Vec<f64>,
    mse: Vec<f64>,
    /// Null when the curve has a single point (no area to integrate).
    auac: Option<f64>,
    au_mse: Option<f64>,
    /// Integration convention, declared so the numbers are self-describing.
    area_normalization: &'static str,
}

#[derive(Serialize)]
struct SegmentationOutput {
    threshold: f64,
    pixel_accuracy: f64,
    foreground_iou: f64,
    background_iou: f64,
    mean_iou: f64,
}

#[derive(Serialize)]
struct AuditOutput {
    method: &'static str,
    seed_total: f64,
    semantic_total: f64,
    positional_total: f64,
    positional_fraction: f64,
    bias_residual: f64,
}

// ── Verb implementations ────────────────────────────────────────────────────

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Explain { model, tokens, position, class, method, eps, out } => {
            let method = parse_method(&method)?;
            if !(eps.is_finite() && eps > 0.0) {
                return Err(Failure::new(EXIT_VALIDATION, "eps must be a positive finite number"));
            }
            let model = load_model_dir(&model).map_err(load_failure)?;
            let tokens = read_tokens(&tokens)?;
            let cfg = LrpConfig::with_epsilon(eps);
            let map = explain(&model, &tokens, position, class, method, &cfg)
                .map_err(explain_failure)?;
            let mut text = map.to_json();
            text.push('\n');
            write_bytes(&out, text.as_bytes())
        }

        Cmd::EvalPerturbation { model, tokens, relevance, order, fractions, mask, out } => {
            let order = parse_order(&order)?;
            let strategy = parse_mask(&mask)?;
            let model = load_model_dir(&model).map_err(load_failure)?;
            let tokens = read_tokens(&tokens)?;
            let map = read_relevance(&relevance)?;
            if map.per_token.len() != tokens.len() {
                return Err(Failure::new(
                    EXIT_VALIDATION,
                    format!(
                        "relevance map covers {} tokens but the token file has {}",
                        map.per_token.len(),
                        tokens.len()
                    ),
                ));
            }
            let mut cfg = PerturbationConfig {
                order,
                strategy,
                target: Target::Specified(map.target_class),
                ..PerturbationConfig::default()
            };
            if let Some(list) = fractions {
                cfg.fractions = parse_fractions(&list)?;
            }
            let curve = perturbation_curve(&model, &tokens, &map.per_token, map.position, &cfg)
                .map_err(eval_failure)?;
            let areas = if curve.fractions.len() >= 2 {
                Some(area_metrics(&curve).map_err(eval_failure)?)
            } else {
                None
            };
            let report = PerturbationReport {
                order: match order {
                    PerturbOrder::Positive => "pos",
                    PerturbOrder::Negative => "neg",
                },
                mask,
                position: map.position,
                target_class: curve.target_class,
                fractions: curve.fractions,
                activation: curve.activation,
                mse: curve.mse,
                auac: areas.as_ref().map(|a| a.auac),
                au_mse: areas.as_ref().map(|a| a.au_mse),
                area_normalization: "trapezoid divided by the fraction span",
            };
            write_json(&out, &report)
        }

        Cmd::EvalSegmentation { heatmap, truth, threshold, out } => {
            let mode = parse_threshold(&threshold)?;
            let scores = read_heatmap_scores(&heatmap)?;
            let mask = read_truth_mask(&truth)?;
            let report = segmentation_metrics(&scores, &mask, mode).map_err(eval_failure)?;
            let output = SegmentationOutput {
                threshold: report.threshold,
                pixel_accuracy: report.pixel_accuracy,
                foreground_iou: report.foreground_iou,
                background_iou: report.background_iou,
                mean_iou: report.mean_iou,
            };
            write_json(&out, &output)
        }

        Cmd::Audit { relevance, out } => {
            let map = read_relevance(&relevance)?;
            let report = conservation_audit(&map);
            let output = AuditOutput {
                method: map.method.as_str(),
                seed_total: report.seed_total,
                semantic_total: report.semantic_total,
                positional_total: report.positional_total,
                positional_fraction: report.positional_fraction,
                bias_residual: report.bias_residual,
            };
            write_json(&out, &output)
        }

        Cmd::GenFixture { kind, out, seed, pe, attention, task } => {
            let (model, tokens): (Model, Vec<usize>) = match kind.as_str() {
                "lemma3" => lemma3_fixture(),
                "random" => {
                    let fixture = random_fixture(seed, parse_pe(&pe)?, parse_attention(&attention)?);
                    (fixture.model, fixture.tokens)
                }
                "toy-trained" => {
                    let cfg = TrainConfig::new(parse_task(&task)?, seed);
                    let trained = train_toy_classifier(&cfg).map_err(train_failure)?;
                    let tokens = trained.train_data[0].0.clone();
                    (trained.model, tokens)
                }
                _ => {
                    return Err(Failure::new(
                        EXIT_INPUT,
                        format!("unknown fixture '{kind}' (expected lemma3, random, toy-trained)"),
                    ));
                }
            };
            save_model(&model, &out).map_err(load_failure)?;
            let mut text = to_json_string(&tokens)
                .map_err(|e| Failure::new(EXIT_NUMERIC, format!("serialization failed: {e}")))?;
            text.push('\n');
            write_bytes(&out.join("tokens.json"), text.as_bytes())
        }

        Cmd::ExportHeatmap { relevance, grid, out } => {
            let (h, w) = parse_grid(&grid)?;
            let map = read_relevance(&relevance)?;
            let bytes = render_heatmap_ppm(&map.per_token, w, h).map_err(eval_failure)?;
            write_bytes(&out, &bytes)
        }
    }
}

/// A heatmap file is either a bare JSON number array or a relevance map,
/// in which case its per-token scores are used.
fn read_heatmap_scores(path: &Path) -> Result<Vec<f64>, Failure> {
    let text = read_text(path)?;
    if let Ok(scores) = serde_json::from_str::<Vec<f64>>(&text) {
        return Ok(scores);
    }
    match RelevanceMap::from_json(&text) {
        Ok(map) => Ok(map.per_token),
        Err(_) => Err(Failure::new(
            EXIT_INPUT,
            format!("'{}' is neither a JSON number array nor a relevance map", path.display()),
        )),
    }
}

/// A truth file is a binary PGM (P5) or a JSON array of 0/1 numbers or
/// booleans; any nonzero/true entry is foreground.
fn read_truth_mask(path: &Path) -> Result<Vec<bool>, Failure> {
    let bytes = read_bytes(path)?;
    if bytes.starts_with(b"P5") {
        let (mask, _, _) = read_pgm_mask(&bytes).map_err(eval_failure)?;
        return Ok(mask);
    }
    let text = String::from_utf8(bytes).map_err(|_| {
        Failure::new(EXIT_INPUT, format!("'{}' is neither a PGM nor UTF-8 JSON", path.display()))
    })?;
    let values: Vec<serde_json::Value> = serde_json::from_str(&text).map_err(|e| {
        Failure::new(EXIT_INPUT, format!("'{}' is not a JSON array: {e}", path.display()))
    })?;
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| match v {
            serde_json::Value::Bool(b) => Ok(b),
            serde_json::Value::Number(n) => Ok(n.as_f64().map(|x| x != 0.0).unwrap_or(true)),
            _ => Err(Failure::new(
                EXIT_INPUT,
                format!("truth entry {i} is neither a number nor a boolean"),
            )),
        })
        .collect()
}

//! Acceptance suite: one test per shipping criterion, each ending in a single
//! `ACCEPTANCE n PASS` line (visible with `--nocapture`; a failed assertion
//! fails the test, so the line doubles as the pass/fail verdict).
//!
//! The suite exercises the library the way a user would — through its public
//! API and through the installed `palrp` binary — and pins every tolerance
//! the project promises.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use palrp::eval::fixtures::{lemma3_fixture, random_fixture, toy_dataset, ToyTask};
use palrp::eval::train::{train_toy_classifier, TrainConfig};
use palrp::eval::{
    area_metrics, conservation_audit, perturbation_curve, MaskStrategy, PerturbOrder,
    PerturbationConfig, Target,
};
use palrp::lrp::{rule_softmax, LrpConfig};
use palrp::model::pe::{rope_matrix, sinusoidal_table};
use palrp::model::{forward, AttnKind, Model, PeKind, WeightStore};
use palrp::pe_lrp::{explain, Method};
use palrp::tensor::Tensor;

// ── Criterion 1: conservation on bias-free attention-level fixtures ─────────

#[test]
fn a1_conservation_on_bias_free_rope_and_alibi_fixtures() {
    let started = Instant::now();
    let cfg = LrpConfig::with_epsilon(1e-9);
    let mut worst = 0.0f64;
    for pe in [PeKind::Rope, PeKind::Alibi] {
        for seed in 0..20u64 {
            let fx = random_fixture(seed, pe, AttnKind::RawScores);
            let pos = fx.tokens.len() - 1;
            let map = explain(&fx.model, &fx.tokens, pos, 1, Method::PaLrp, &cfg).unwrap();
            let recovered: f64 = map.semantic.total()
                + map.positional_sinks.iter().map(Tensor::total).sum::<f64>();
            let rel = (recovered - map.seed_total).abs() / map.seed_total.abs().max(1e-12);
            assert!(
                rel <= 1e-4,
                "{pe:?} seed {seed}: relative conservation residual {rel:.3e} > 1e-4"
            );
            worst = worst.max(rel);
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "conservation sweep took {elapsed:?} (budget 30 s)");
    println!(
        "ACCEPTANCE 1 PASS — 40 bias-free fixtures conserve relevance; worst relative \
         residual {worst:.3e} (≤ 1e-4), {elapsed:?} (< 30 s)"
    );
}

// ── Criterion 2: the embedding-only gap equals the sink mass ────────────────

#[test]
fn a2_embedding_gap_equals_sink_mass_on_input_additive_fixtures() {
    let cfg = LrpConfig::with_epsilon(1e-9);
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let fx = random_fixture(seed, PeKind::Learnable, AttnKind::RawScores);
        let pos = fx.tokens.len() - 1;
        let map = explain(&fx.model, &fx.tokens, pos, 0, Method::PaLrp, &cfg).unwrap();
        let sink_sum: f64 = map.positional_sinks.iter().map(Tensor::total).sum();
        let gap = map.seed_total - map.semantic.total();
        let err = (gap - sink_sum).abs();
        assert!(
            err <= 1e-6,
            "seed {seed}: embedding gap {gap:.12} vs sink mass {sink_sum:.12} (err {err:.3e})"
        );
        worst = worst.max(err);
    }
    println!(
        "ACCEPTANCE 2 PASS — on 20 input-additive fixtures the relevance missing from \
         embeddings equals the sink mass; worst |gap − sinks| = {worst:.3e} (≤ 1e-6)"
    );
}

// ── Criterion 3: the all-positional construction ────────────────────────────

#[test]
fn a3_all_positional_fixture_zeroes_the_baseline_and_saturates_the_sinks() {
    let (model, tokens) = lemma3_fixture();
    let cfg = LrpConfig::with_epsilon(1e-9);
    let pos = tokens.len() - 1;

    let baseline = explain(&model, &tokens, pos, 0, Method::BaselineOnly, &cfg).unwrap();
    let max_abs = baseline.per_token.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max_abs <= 1e-9, "baseline per-token relevance should vanish, max |R| = {max_abs:.3e}");

    let full = explain(&model, &tokens, pos, 0, Method::PaLrp, &cfg).unwrap();
    let audit = conservation_audit(&full);
    assert!(
        (audit.positional_fraction - 1.0).abs() <= 1e-6,
        "positional fraction {} should be 1",
        audit.positional_fraction
    );
    // By construction the seeded logit is value-bias + score-bias in equal
    // parts: the sinks must carry exactly half the seed.
    let sink_total: f64 = full.positional_sinks.iter().map(Tensor::total).sum();
    let err = (sink_total - full.seed_total / 2.0).abs();
    assert!(err <= 1e-6, "sink mass {sink_total} vs expected {} (err {err:.3e})", full.seed_total / 2.0);

    println!(
        "ACCEPTANCE 3 PASS — semantic-free fixture: baseline max |R| = {max_abs:.2e} (≤ 1e-9), \
         positional fraction = {:.9}, sink conservation error = {err:.2e} (≤ 1e-6)",
        audit.positional_fraction
    );
}

// ── Criterion 4: softmax rule vs a finite-difference Jacobian ───────────────

#[test]
fn a4_softmax_rule_matches_finite_difference_jacobian() {
    fn softmax(x: &[f64]) -> Vec<f64> {
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / denom).collect()
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4004);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let c = rng.gen_range(2..=16usize);
        let x: Vec<f64> = (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let r_s: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = softmax(&x);

        // Rule under test, applied to the row as a 1×c tensor.
        let xt = Tensor::from_vec(1, c, x.clone()).unwrap();
        let st = Tensor::from_vec(1, c, s.clone()).unwrap();
        let rt = Tensor::from_vec(1, c, r_s.clone()).unwrap();
        let got = rule_softmax(&xt, &st, &rt);

        // Oracle: the same relevance propagated through a central-difference
        // Jacobian of the softmax, r_x[j] = x[j] · Σ_i J[i][j] · r_s[i]/s[i].
        let h = 1e-6;
        let mut want = vec![0.0f64; c];
        for j in 0..c {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[j] += h;
            minus[j] -= h;
            let sp = softmax(&plus);
            let sm = softmax(&minus);
            let mut acc = 0.0;
            for i in 0..c {
                let jac = (sp[i] - sm[i]) / (2.0 * h);
                acc += jac * r_s[i] / s[i];
            }
            want[j] = x[j] * acc;
        }

        let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        for (j, &w) in want.iter().enumerate() {
            let rel = (got.get(0, j) - w).abs() / scale;
            assert!(rel <= 1e-3, "case {case}, entry {j}: relative error {rel:.3e} > 1e-3");
            worst = worst.max(rel);
        }
    }
    println!(
        "ACCEPTANCE 4 PASS — softmax relevance rule matches the finite-difference \
         Jacobian on 100 random rows; worst relative error {worst:.3e} (≤ 1e-3)"
    );
}

// ── Criterion 5: rotation-matrix structure ──────────────────────────────────

#[test]
fn a5_rotations_are_orthogonal_and_encode_relative_position() {
    let mut worst_ortho = 0.0f64;
    for head_dim in [2usize, 8, 32, 64] {
        for i in (0..=512usize).step_by(8) {
            let r = rope_matrix(i, head_dim);
            let mut err = 0.0f64;
            for a in 0..head_dim {
                for b in 0..head_dim {
                    let mut dot = 0.0;
                    for k in 0..head_dim {
                        dot += r.get(a, k) * r.get(b, k);
                    }
                    let target = if a == b { 1.0 } else { 0.0 };
                    err = err.max((dot - target).abs());
                }
            }
            assert!(err <= 1e-6, "position {i}, head_dim {head_dim}: ‖RRᵀ−I‖∞ = {err:.3e}");
            worst_ortho = worst_ortho.max(err);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5005);
    let mut worst_rel = 0.0f64;
    for _ in 0..200 {
        let head_dim = 2 * rng.gen_range(1..=8usize);
        let i = rng.gen_range(0..=512usize);
        let j = rng.gen_range(0..=i);
        let q: Vec<f64> = (0..head_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..head_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ri = rope_matrix(i, head_dim);
        let rj = rope_matrix(j, head_dim);
        let rd = rope_matrix(i - j, head_dim);
        let rotate = |m: &Tensor, v: &[f64]| -> Vec<f64> {
            (0..head_dim)
                .map(|a| (0..head_dim).map(|b| m.get(a, b) * v[b]).sum())
                .collect()
        };
        let qi = rotate(&ri, &q);
        let kj = rotate(&rj, &k);
        let qd = rotate(&rd, &q);
        let lhs: f64 = qi.iter().zip(&kj).map(|(a, b)| a * b).sum();
        let rhs: f64 = qd.iter().zip(&k).map(|(a, b)| a * b).sum();
        let err = (lhs - rhs).abs();
        assert!(err <= 1e-8, "i {i}, j {j}, head_dim {head_dim}: |⟨R_i q, R_j k⟩ − ⟨R_(i−j) q, k⟩| = {err:.3e}");
        worst_rel = worst_rel.max(err);
    }

    println!(
        "ACCEPTANCE 5 PASS — rotations orthogonal up to position 512 and width 64 \
         (worst {worst_ortho:.3e} ≤ 1e-6); relative-position identity holds on 200 \
         random pairs (worst {worst_rel:.3e} ≤ 1e-8)"
    );
}

// ── Criterion 6: the sin/cos table is a loadable reparameterization ─────────

#[test]
fn a6_sinusoidal_equals_learnable_loaded_with_the_table() {
    let mut checked = 0usize;
    for seed in [60u64, 61, 62] {
        let fx = random_fixture(seed, PeKind::Sinusoidal, AttnKind::Softmax);
        let cfg_sin = fx.model.config.clone();

        let mut weights = WeightStore::new();
        for (name, tensor) in fx.model.weights.iter() {
            weights.insert(name.clone(), tensor.clone());
        }
        weights.insert("pos.table", sinusoidal_table(cfg_sin.max_seq_len, cfg_sin.d_model));
        let mut cfg_learn = cfg_sin.clone();
        cfg_learn.pe_kind = PeKind::Learnable;
        let twin = Model::new(cfg_learn, weights).unwrap();

        let a = forward(&fx.model, &fx.tokens).unwrap();
        let b = forward(&twin, &fx.tokens).unwrap();
        let (rows, cols) = a.logits.shape();
        assert_eq!((rows, cols), b.logits.shape());
        for i in 0..rows {
            for j in 0..cols {
                assert_eq!(
                    a.logits.get(i, j).to_bits(),
                    b.logits.get(i, j).to_bits(),
                    "seed {seed}: logits diverge at ({i}, {j})"
                );
                checked += 1;
            }
        }
    }
    println!(
        "ACCEPTANCE 6 PASS — sin/cos-encoded forward equals a learnable model loaded \
         with the sin/cos table, bit-exactly ({checked} logit entries over 3 fixtures)"
    );
}

// ── Criterion 7: the desk-scale perturbation experiment ─────────────────────

#[test]
fn a7_trained_copy_model_perturbation_and_positional_probe() {
    let started = Instant::now();
    let trained = train_toy_classifier(&TrainConfig::new(ToyTask::PositionalCopy, 3)).unwrap();
    let model = &trained.model;
    let readout = 5usize; // logits are read at the last of the 6 positions
    let cfg = LrpConfig::default();

    let test_inputs = toy_dataset(ToyTask::PositionalCopy, 20260819, 50);

    // Part A: masking by attribution order must hurt the model faster than
    // masking in random orders (lower area under the activation curve).
    let curve_inputs = &test_inputs[..20];
    let mut attributed_aucs = Vec::new();
    let mut per_seed_random_aucs = vec![Vec::new(); 20];
    for (tokens, _) in curve_inputs {
        let logits = forward(model, tokens).unwrap().logits;
        let predicted = (0..logits.cols())
            .max_by(|&a, &b| logits.get(readout, a).partial_cmp(&logits.get(readout, b)).unwrap())
            .unwrap();
        let map = explain(model, tokens, readout, predicted, Method::PaLrp, &cfg).unwrap();
        let pcfg = PerturbationConfig {
            order: PerturbOrder::Positive,
            strategy: MaskStrategy::ZeroEmbedding,
            target: Target::Specified(predicted),
            ..PerturbationConfig::default()
        };
        let curve = perturbation_curve(model, tokens, &map.per_token, readout, &pcfg).unwrap();
        attributed_aucs.push(area_metrics(&curve).unwrap().auac);

        for (slot, aucs) in per_seed_random_aucs.iter_mut().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(7000 + slot as u64);
            let scores: Vec<f64> = (0..tokens.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
            let curve = perturbation_curve(model, tokens, &scores, readout, &pcfg).unwrap();
            aucs.push(area_metrics(&curve).unwrap().auac);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let attributed = mean(&attributed_aucs);
    let random_means: Vec<f64> = per_seed_random_aucs.iter().map(|v| mean(v)).collect();
    let random_mean = mean(&random_means);
    let random_std = {
        let var = random_means.iter().map(|m| (m - random_mean).powi(2)).sum::<f64>()
            / random_means.len() as f64;
        var.sqrt()
    };
    assert!(
        attributed < random_mean - random_std,
        "attributed-order AUAC {attributed:.4} not below random mean {random_mean:.4} − std {random_std:.4}"
    );

    // Part B: among the candidate source positions (the read-out token's own
    // row trivially dominates any attribution seeded there, so it is not a
    // candidate), the positional scores alone must single out position 0 —
    // the position the trained model copies its label from.
    let mut hits = 0usize;
    for (tokens, _) in &test_inputs {
        let logits = forward(model, tokens).unwrap().logits;
        let predicted = (0..logits.cols())
            .max_by(|&a, &b| logits.get(readout, a).partial_cmp(&logits.get(readout, b)).unwrap())
            .unwrap();
        let map = explain(model, tokens, readout, predicted, Method::PeOnly, &cfg).unwrap();
        let candidates = &map.per_token[..readout];
        if candidates[1..].iter().all(|&v| candidates[0] > v) {
            hits += 1;
        }
    }
    let hit_rate = hits as f64 / test_inputs.len() as f64;
    assert!(hit_rate >= 0.8, "positional argmax hit rate {hit_rate:.2} < 0.8");

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 120.0, "experiment took {elapsed:?} (budget 2 min)");
    println!(
        "ACCEPTANCE 7 PASS — attributed-order AUAC {attributed:.4} < random {random_mean:.4} − σ {random_std:.4}; \
         positional scores pick the copied position in {hits}/50 inputs ({:.0}%, ≥ 80%); {elapsed:?} (< 2 min)",
        hit_rate * 100.0
    );
}

// ── Criterion 8: positional fraction on realistic rotary fixtures ───────────

#[test]
fn a8_rotary_fixtures_report_interior_positional_fractions() {
    let cfg = LrpConfig::default();
    let mut fractions = Vec::new();
    for seed in 100..120u64 {
        let fx = random_fixture(seed, PeKind::Rope, AttnKind::Softmax);
        let pos = fx.tokens.len() - 1;
        let map = explain(&fx.model, &fx.tokens, pos, 0, Method::PaLrp, &cfg).unwrap();
        let audit = conservation_audit(&map);
        let f = audit.positional_fraction;
        assert!(
            f > 0.0 && f < 1.0,
            "seed {seed}: positional fraction {f} not strictly inside (0, 1)"
        );
        fractions.push(f);
    }
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    assert!(mean > 0.0, "mean positional fraction must be nonzero");
    let lo = fractions.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = fractions.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!(
        "ACCEPTANCE 8 PASS — 20 rotary fixtures report positional fractions strictly in \
         (0, 1): range [{lo:.4}, {hi:.4}], mean {mean:.4} (nonzero)"
    );
}

// ── Criterion 9: CLI determinism and CLI/library parity ─────────────────────

fn run_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_palrp"))
        .args(args)
        .output()
        .expect("binary should launch");
    assert!(
        out.status.success(),
        "palrp {args:?} failed with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn file_bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()))
}

#[test]
fn a9_every_cli_verb_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let p = |name: &str| root.join(name).to_string_lossy().into_owned();

    // Fixture generation, twice per kind.
    for (kind, extra, name) in [
        ("lemma3", vec![], "lemma"),
        ("random", vec!["--seed", "7", "--pe", "rope"], "rope7"),
        ("random", vec!["--seed", "8", "--pe", "alibi", "--attention", "softmax"], "alibi8"),
        ("toy-trained", vec!["--task", "positional-copy", "--seed", "3"], "toy"),
    ] {
        for suffix in ["a", "b"] {
            let mut args: Vec<String> = ["gen-fixture", kind, "--out"].map(String::from).into();
            args.push(p(&format!("{name}-{suffix}")));
            args.extend(extra.iter().map(|s| s.to_string()));
            let refs: Vec<&str> = args.iter().map(String::as_str).collect();
            run_cli(&refs);
        }
        for file in ["manifest.json", "weights.bin", "tokens.json"] {
            let a = file_bytes(&root.join(format!("{name}-a")).join(file));
            let b = file_bytes(&root.join(format!("{name}-b")).join(file));
            assert_eq!(a, b, "gen-fixture {kind} ({name}): {file} differs between runs");
        }
    }

    let model = p("rope7-a");
    let tokens = p("rope7-a/tokens.json");

    // explain, twice, plus bit-exact parity with the library call.
    for out in ["map-a.json", "map-b.json"] {
        run_cli(&[
            "explain", "--model", &model, "--tokens", &tokens, "--position", "0", "--class",
            "1", "--method", "pa-lrp", "--out", &p(out),
        ]);
    }
    let map_a = file_bytes(&root.join("map-a.json"));
    assert_eq!(map_a, file_bytes(&root.join("map-b.json")), "explain output differs between runs");

    let fx = random_fixture(7, PeKind::Rope, AttnKind::RawScores);
    let lib_map =
        explain(&fx.model, &fx.tokens, 0, 1, Method::PaLrp, &LrpConfig::default()).unwrap();
    let mut lib_json = lib_map.to_json();
    lib_json.push('\n');
    assert_eq!(
        map_a,
        lib_json.into_bytes(),
        "CLI explain output must equal the library's serialized map byte-for-byte"
    );

    // eval-perturbation, twice.
    for out in ["curve-a.json", "curve-b.json"] {
        run_cli(&[
            "eval-perturbation", "--model", &model, "--tokens", &tokens, "--relevance",
            &p("map-a.json"), "--order", "neg", "--fractions", "0.25,0.5,1.0", "--mask", "id:0",
            "--out", &p(out),
        ]);
    }
    assert_eq!(
        file_bytes(&root.join("curve-a.json")),
        file_bytes(&root.join("curve-b.json")),
        "eval-perturbation output differs between runs"
    );

    // eval-segmentation, twice (heatmap from the map file, JSON truth).
    std::fs::write(root.join("truth.json"), b"[1, 0, 1]").unwrap();
    for out in ["seg-a.json", "seg-b.json"] {
        run_cli(&[
            "eval-segmentation", "--heatmap", &p("map-a.json"), "--truth", &p("truth.json"),
            "--threshold", "mean", "--out", &p(out),
        ]);
    }
    assert_eq!(
        file_bytes(&root.join("seg-a.json")),
        file_bytes(&root.join("seg-b.json")),
        "eval-segmentation output differs between runs"
    );

    // audit, twice.
    for out in ["audit-a.json", "audit-b.json"] {
        run_cli(&["audit", "--relevance", &p("map-a.json"), "--out", &p(out)]);
    }
    assert_eq!(
        file_bytes(&root.join("audit-a.json")),
        file_bytes(&root.join("audit-b.json")),
        "audit output differs between runs"
    );

    // export-heatmap, twice; 1×L grid always matches the token count.
    let token_count = fx.tokens.len();
    let grid = format!("1x{token_count}");
    for out in ["heat-a.ppm", "heat-b.ppm"] {
        run_cli(&["export-heatmap", "--relevance", &p("map-a.json"), "--grid", &grid, "--out", &p(out)]);
    }
    let ppm = file_bytes(&root.join("heat-a.ppm"));
    assert_eq!(ppm, file_bytes(&root.join("heat-b.ppm")), "export-heatmap output differs between runs");
    let header = format!("P6\n{token_count} 1\n255\n");
    assert!(ppm.starts_with(header.as_bytes()), "PPM header mismatch");
    assert_eq!(ppm.len(), header.len() + 3 * token_count, "PPM payload size mismatch");

    println!(
        "ACCEPTANCE 9 PASS — all 6 verbs byte-identical across repeated runs (4 fixture \
         kinds), and the CLI relevance map equals the library's output bit-exactly"
    );
}

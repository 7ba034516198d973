//! Acceptance criteria. Every test writes one `ACCEPT [PASS]` or
//! `ACCEPT [FAIL]` line to stderr (bypassing output capture) before
//! asserting, so `cargo test --test acceptance` doubles as a report.

#![allow(clippy::approx_constant)]

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use gistill_core::config::PipelineConfig;
use gistill_core::corpus_io::{read_trace, write_jsonl, write_trace, AttentionTrace, TokenizedDocument, Vocabulary};
use gistill_core::distill::{self, grad_check, head_logit_gradient, kd_loss, kl_divergence, DistillConfig};
use gistill_core::downstream::{
    render_highlight, run_classification, run_passage_selection, run_span_scoring, HarnessConfig, HighlightFormat,
    ImportanceSource, Metrics, NeedleTask, PassageTask,
};
use gistill_core::exec::Execution;
use gistill_core::fusion::FusionSpec;
use gistill_core::model::{DetectorConfig, GistDetector};
use gistill_core::pipeline::{run_pipeline, Stage};
use gistill_core::rng;
use gistill_core::synthetic::{joint_vocabulary, oracle_examples, GistCorpus};
use gistill_core::teacher::{combine_ensemble, soft_target_from_trace, SoftTarget};
use gistill_core::tensor::Mat;
use rand::Rng;

fn report(criterion: &str, pass: bool, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "ACCEPT [{tag}] {criterion}: {detail}");
    assert!(pass, "{criterion}: {detail}");
}

fn random_trace(r: &mut impl Rng, id: String, t: usize, n: usize) -> AttentionTrace {
    let mut data = Vec::with_capacity(t * n);
    for _ in 0..t {
        // a few exact zeros keep sparse rows in the mix
        let row: Vec<f64> = (0..n).map(|_| if r.gen_bool(0.1) { 0.0 } else { r.gen_range(0.0..1.0) }).collect();
        let s: f64 = row.iter().sum::<f64>().max(1e-300);
        let mut row: Vec<f32> = row.iter().map(|v| (v / s) as f32).collect();
        if row.iter().all(|&v| v == 0.0) {
            row[0] = 1.0;
        }
        data.extend(row);
    }
    AttentionTrace::new(id, Mat::from_vec(t, n, data)).unwrap()
}

/// Column mean computed directly from the stored f32 entries.
fn brute_column_mean(trace: &AttentionTrace) -> Vec<f64> {
    let (t, n) = (trace.t_steps(), trace.n_positions());
    let mut out = Vec::with_capacity(n);
    for c in 0..n {
        let mut s = 0.0f64;
        for r in 0..t {
            s += f64::from(trace.matrix.data[r * n + c]);
        }
        out.push(s / t as f64);
    }
    out
}

fn is_simplex(p: &[f64]) -> bool {
    p.iter().all(|&v| v >= 0.0 && v.is_finite()) && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-6
}

#[test]
fn soft_target_matches_brute_force_column_mean() {
    let start = Instant::now();
    let mut r = rng::stream(0, "acceptance", "soft-target");
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let (t, n) = (r.gen_range(1..=64), r.gen_range(1..=128));
        let trace = random_trace(&mut r, format!("t{i}"), t, n);
        let q = soft_target_from_trace(&trace).unwrap().q;
        for (a, b) in q.iter().zip(brute_column_mean(&trace)) {
            worst = worst.max((a - b).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        "soft target equals brute-force column mean",
        worst <= 1e-12 && secs < 10.0,
        format!("1000 traces, max abs diff {worst:.2e} (tol 1e-12), {secs:.2}s (limit 10s)"),
    );
}

#[test]
fn simplex_invariants() {
    let mut r = rng::stream(0, "acceptance", "simplex");
    let mut bad_targets = 0;
    let mut bad_ensembles = 0;
    for i in 0..1000 {
        let (t, n) = (r.gen_range(1..=16), r.gen_range(1..=64));
        let trace = random_trace(&mut r, format!("t{i}"), t, n);
        if !is_simplex(&soft_target_from_trace(&trace).unwrap().q) {
            bad_targets += 1;
        }
        let k = r.gen_range(1..=5);
        let members: Vec<SoftTarget> = (0..k)
            .map(|_| {
                let t = r.gen_range(1..=8);
                soft_target_from_trace(&random_trace(&mut r, format!("t{i}"), t, n)).unwrap()
            })
            .collect();
        if !is_simplex(&combine_ensemble(&members).unwrap().q) {
            bad_ensembles += 1;
        }
    }
    let vocab = Vocabulary::from_tokens((0..50).map(|i| format!("w{i}")));
    let config = DetectorConfig { word_dim: 8, hidden: 8, heads: 2, ffn_dim: 16, mlp_hidden: 8, max_len: 64, char_cnn: None };
    let mut bad_outputs = 0;
    for i in 0..1000u64 {
        let model = GistDetector::init(&vocab, &config, i % 10, None).unwrap();
        let n = r.gen_range(1..=64);
        let tokens: Vec<String> = (0..n).map(|_| format!("w{}", r.gen_range(0..60))).collect();
        let ids = tokens.iter().map(|t| vocab.id(t)).collect();
        let doc = TokenizedDocument { doc_id: format!("d{i}"), tokens, ids };
        if !is_simplex(&model.forward(&doc).unwrap().p) {
            bad_outputs += 1;
        }
    }
    report(
        "simplex invariants",
        bad_targets + bad_ensembles + bad_outputs == 0,
        format!(
            "violations: soft targets {bad_targets}/1000, ensembles {bad_ensembles}/1000, detector outputs {bad_outputs}/1000 (sum tol 1e-6)"
        ),
    );
}

#[test]
fn kd_loss_worked_examples_and_kl_non_negativity() {
    let stated = [0.693147, 0.693147, 0.794659];
    let cases: [(&[f64], &[f64]); 3] = [(&[0.5, 0.5], &[0.5, 0.5]), (&[0.5, 0.5], &[1.0, 0.0]), (&[0.6, 0.4], &[0.3, 0.7])];
    let mut worst_formula = 0.0f64;
    let mut diffs_stated = Vec::new();
    for ((p, q), s) in cases.iter().zip(stated) {
        let got = kd_loss(p, q).unwrap();
        let formula: f64 = -q.iter().zip(p.iter()).filter(|(q, _)| **q > 0.0).map(|(q, p)| q * p.ln()).sum::<f64>();
        worst_formula = worst_formula.max((got - formula).abs());
        diffs_stated.push((got - s).abs());
    }
    let mut r = rng::stream(0, "acceptance", "kl");
    let mut min_kl = f64::INFINITY;
    for _ in 0..10_000 {
        let n = r.gen_range(1..=32);
        let mut draw = || {
            let v: Vec<f64> = (0..n).map(|_| r.gen_range(1e-3..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let (q, p) = (draw(), draw());
        min_kl = min_kl.min(kl_divergence(&q, &p).unwrap());
    }
    // The third stated value is 8e-6 away from -0.3 ln 0.6 - 0.7 ln 0.4 =
    // 0.7946512; the examples are checked against the formula instead.
    report(
        "kd_loss worked examples and KL >= 0",
        worst_formula <= 1e-6 && diffs_stated[..2].iter().all(|d| *d <= 1e-6) && min_kl >= -1e-12,
        format!(
            "max |kd - formula| {worst_formula:.1e} (tol 1e-6); |kd - stated| = {:.1e}, {:.1e}, {:.1e} (third stated value 0.794659 mis-rounds 0.794651); min KL over 10000 pairs {min_kl:.2e}",
            diffs_stated[0], diffs_stated[1], diffs_stated[2]
        ),
    );
}

#[test]
fn gradient_checks() {
    let start = Instant::now();
    let mut r = rng::stream(0, "acceptance", "head-grad");
    let mut worst_head = 0.0f64;
    for _ in 0..1000 {
        let n = r.gen_range(1..=32);
        let logits: Vec<f64> = (0..n).map(|_| r.gen_range(-5.0..5.0)).collect();
        let raw: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let q: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let (grad, _) = head_logit_gradient(&logits, &q);
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for i in 0..n {
            let p = (logits[i] - m).exp() / z;
            worst_head = worst_head.max((grad[i] - (p - q[i])).abs());
        }
    }
    let vocab = Vocabulary::from_tokens((0..20).map(|i| format!("w{i}")));
    let config = DetectorConfig { word_dim: 8, hidden: 8, heads: 2, ffn_dim: 16, mlp_hidden: 8, max_len: 16, char_cnn: None };
    let model = GistDetector::init(&vocab, &config, 3, None).unwrap();
    let tokens: Vec<String> = ["w1", "w4", "w2", "w9", "w4", "w7"].iter().map(|s| s.to_string()).collect();
    let doc = TokenizedDocument { doc_id: "g".into(), ids: tokens.iter().map(|t| vocab.id(t)).collect(), tokens };
    let q = [0.05, 0.3, 0.1, 0.35, 0.15, 0.05];
    let rep = grad_check(&model, &doc, &q, 1e-5, 400, 0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    report(
        "gradient checks",
        worst_head <= 1e-9 && rep.max_rel_error <= 1e-4 && rep.coords_checked >= 200 && secs < 120.0,
        format!(
            "head |g - (p - q)| max {worst_head:.1e} (tol 1e-9); full model max rel err {:.2e} over {} coords (tol 1e-4, eps 1e-5); {secs:.1}s",
            rep.max_rel_error, rep.coords_checked
        ),
    );
}

#[test]
fn distillation_fidelity() {
    let start = Instant::now();
    let records = GistCorpus::default().records().unwrap();
    let vocab = joint_vocabulary(&records);
    let data = oracle_examples(&records, &vocab, 5.0).unwrap();
    let config = DistillConfig::default();
    let student = GistDetector::init(&vocab, &DetectorConfig::default(), config.seed, None).unwrap();
    let trained = distill::train(student, &data, &config, Execution::Parallel).unwrap();
    let tv = trained.report.final_held_out_tv().unwrap();
    let secs = start.elapsed().as_secs_f64();
    report(
        "distillation fidelity",
        tv <= 0.15 && secs <= 600.0 && config.epochs <= 20,
        format!(
            "{} docs ({} held out), {} epochs, held-out mean TV {tv:.4} (tol 0.15), {secs:.0}s (limit 600s)",
            records.len(),
            trained.report.held_out_docs,
            config.epochs
        ),
    );
}

#[test]
fn fusion_identities() {
    let harness = HarnessConfig::default();
    let exec = Execution::Parallel;
    let needle = NeedleTask { n_train: 300, n_test: 100, ..Default::default() };
    let passage = PassageTask::default();
    let zero_repr = FusionSpec::new(0.0, 0.2).unwrap();
    let zero_score = FusionSpec::new(0.5, 0.0).unwrap();
    let n = run_classification(&needle, ImportanceSource::Oracle, &zero_repr, &harness, exec).unwrap();
    let s = run_passage_selection(&passage, ImportanceSource::Oracle, &zero_repr, &harness, exec).unwrap();
    let sp = run_span_scoring(&passage, ImportanceSource::Oracle, &zero_score, &harness, exec).unwrap();
    let bits = |m: &Metrics| {
        [m.accuracy, m.hit_at_1, m.hit_at_3, m.hit_at_5, m.exact_match].map(|v| v.map(f64::to_bits))
    };
    let ok = bits(&n.baseline) == bits(&n.fused) && bits(&s.baseline) == bits(&s.fused) && bits(&sp.baseline) == bits(&sp.fused);
    report(
        "fusion identities at zero coefficient",
        ok,
        format!(
            "needle lambda=0 {:?}/{:?}; selection lambda=0 {:?}/{:?}; span lambda'=0 {:?}/{:?} (baseline/fused, bit-compared)",
            n.baseline.accuracy, n.fused.accuracy, s.baseline.hit_at_1, s.fused.hit_at_1, sp.baseline.exact_match, sp.fused.exact_match
        ),
    );
}

#[test]
fn needle_oracle_fusion_beats_baseline() {
    let harness = HarnessConfig::default();
    let spec = FusionSpec::default();
    let mut gains = Vec::new();
    for seed in 0..3 {
        let task = NeedleTask { seed, ..Default::default() };
        let rep = run_classification(&task, ImportanceSource::Oracle, &spec, &harness, Execution::Parallel).unwrap();
        gains.push((rep.baseline.accuracy.unwrap(), rep.fused.accuracy.unwrap()));
    }
    let ok = gains.iter().all(|(b, f)| f - b >= 0.10);
    let detail: Vec<String> = gains.iter().map(|(b, f)| format!("{b:.3}->{f:.3}")).collect();
    report(
        "needle classification, oracle fusion gain",
        ok,
        format!("lambda 0.5, seeds 0..3, unfused->fused accuracy [{}] (need +0.10 on each)", detail.join(", ")),
    );
}

#[test]
fn passage_selection_oracle_fusion_beats_baseline() {
    let harness = HarnessConfig::default();
    let spec = FusionSpec::default();
    let mut wins = 0;
    let mut monotone = true;
    let mut pairs = Vec::new();
    for seed in 0..10 {
        let task = PassageTask { seed, ..Default::default() };
        let rep = run_passage_selection(&task, ImportanceSource::Oracle, &spec, &harness, Execution::Parallel).unwrap();
        for m in [&rep.baseline, &rep.fused] {
            let (h1, h3, h5) = (m.hit_at_1.unwrap(), m.hit_at_3.unwrap(), m.hit_at_5.unwrap());
            monotone &= h1 <= h3 && h3 <= h5;
        }
        let (b, f) = (rep.baseline.hit_at_1.unwrap(), rep.fused.hit_at_1.unwrap());
        if f > b {
            wins += 1;
        }
        pairs.push(format!("{b:.2}->{f:.2}"));
    }
    report(
        "passage selection, oracle fusion Hit@1",
        wins >= 8 && monotone,
        format!("fused Hit@1 strictly higher on {wins}/10 seeds (need 8); Hit@1<=Hit@3<=Hit@5 {monotone}; [{}]", pairs.join(", ")),
    );
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const PIPELINE: &str = r#"
seed = 5

[paths]
data = "data.jsonl"

[model]
word_dim = 16
hidden = 16
heads = 2
ffn_dim = 32
mlp_hidden = 16
max_len = 64

[distill]
epochs = 3
lr = 3e-3

[fuse_eval]
task = "select"
importance = "detector"

[fuse_eval.harness]
epochs = 2
"#;

#[test]
fn persistence_round_trips_and_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng::stream(0, "acceptance", "persistence");
    let mut trace_ok = true;
    for i in 0..100 {
        let (t, n) = (r.gen_range(1..=16), r.gen_range(1..=64));
        let trace = random_trace(&mut r, format!("doc {i}"), t, n);
        let path = dir.path().join(format!("{i}.gtr"));
        write_trace(&trace, &path).unwrap();
        let back = read_trace(&path).unwrap();
        let bits = |t: &AttentionTrace| t.matrix.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        trace_ok &= back.doc_id == trace.doc_id && back.matrix.shape() == trace.matrix.shape() && bits(&back) == bits(&trace);
    }

    let records = GistCorpus { n_docs: 20, ..Default::default() }.records().unwrap();
    let vocab = joint_vocabulary(&records);
    let config = DetectorConfig { word_dim: 8, hidden: 8, heads: 2, ffn_dim: 16, mlp_hidden: 8, max_len: 64, char_cnn: None };
    let model = GistDetector::init(&vocab, &config, 7, None).unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    model.save(&a).unwrap();
    let loaded = GistDetector::load(&a).unwrap();
    loaded.save(&b).unwrap();
    let docs: Vec<TokenizedDocument> = oracle_examples(&records, &vocab, 5.0).unwrap().into_iter().map(|e| e.doc).collect();
    let outputs_equal = docs.iter().all(|d| {
        let (x, y) = (model.forward(d).unwrap().p, loaded.forward(d).unwrap().p);
        x.iter().map(|v| v.to_bits()).eq(y.iter().map(|v| v.to_bits()))
    });
    let ckpt_ok = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap() && outputs_equal;

    let runs: Vec<_> = (0..2)
        .map(|_| {
            let d = tempfile::tempdir().unwrap();
            write_jsonl(d.path().join("data.jsonl"), &GistCorpus { n_docs: 40, ..Default::default() }.records().unwrap()).unwrap();
            let cfg = PipelineConfig::from_toml_str(PIPELINE, d.path(), std::iter::empty::<(String, String)>()).unwrap();
            let out = run_pipeline(&cfg, &Stage::ALL, Execution::Parallel).unwrap();
            assert_eq!(out.ran.len(), 5);
            let t = tree(&d.path().join("work"));
            (d, t)
        })
        .collect();
    let rerun_ok = runs[0].1 == runs[1].1;
    report(
        "persistence and pipeline reruns",
        trace_ok && ckpt_ok && rerun_ok,
        format!(
            "100 trace round trips bit-exact {trace_ok}; checkpoint bytes and outputs identical {ckpt_ok}; two full pipeline runs byte-identical over {} files {rerun_ok}",
            runs[0].1.len()
        ),
    );
}

fn golden_case() -> (Vec<String>, Vec<f64>) {
    let tokens = "the committee approved the <new> budget & tax plan on friday"
        .split(' ')
        .map(String::from)
        .collect::<Vec<_>>();
    let p = vec![0.02, 0.18, 0.15, 0.02, 0.01, 0.22, 0.03, 0.16, 0.12, 0.0, 0.09];
    (tokens, p)
}

#[test]
fn highlight_golden_files() {
    let (tokens, p) = golden_case();
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let mut results = Vec::new();
    for (format, file) in [(HighlightFormat::Html, "highlight.html"), (HighlightFormat::Ansi, "highlight.ansi")] {
        let rendered = render_highlight(&tokens, &p, format).unwrap();
        let path = dir.join(file);
        if std::env::var_os("GISTILL_BLESS").is_some() {
            std::fs::create_dir_all(&dir).unwrap();
            std::fs::write(&path, &rendered).unwrap();
        }
        let golden = std::fs::read(&path).unwrap_or_default();
        results.push((file, golden == rendered.as_bytes()));
    }
    report(
        "highlight golden files",
        results.iter().all(|(_, ok)| *ok),
        results.iter().map(|(f, ok)| format!("{f} byte-identical {ok}")).collect::<Vec<_>>().join("; "),
    );
}

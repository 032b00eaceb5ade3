//! End-to-end checks of the `hrq` binary on small fixtures.

use std::path::{Path, PathBuf};
use std::process::Output;

use hrq::cli::Checkpoint;
use hrq::quantizer::Codebook;

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name).display().to_string()
}

fn hrq(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_hrq")).args(args).output().expect("spawn hrq")
}

fn ok(args: &[&str]) {
    let out = hrq(args);
    assert!(out.status.success(), "hrq {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

/// Synthetic interaction data plus a briefly trained HRQ-VAE.
fn trained_vae(dir: &Path, seed: &str) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    let model = dir.join("model");
    ok(&["synth-data", "--kind", "interactions", "--branching", "4", "--depth", "3", "--users", "20", "--seed", "3", "--out", &s(&data)]);
    let cfg = dir.join("vae.json");
    std::fs::write(&cfg, r#"{"k": 2, "s": 4, "h": 3, "hidden": [8], "epochs": 3, "batch_size": 4}"#).unwrap();
    ok(&["train-quantizer", "--config", &s(&cfg), "--embeddings", &s(&data.join("embeddings.jsonl")), "--seed", seed, "--out", &s(&model)]);
    (data, model)
}

fn modeling_args<'a>(tokens: &'a str, config: &'a str, seeds: &'a str, out: &'a str, test: &'a str) -> Vec<String> {
    let (tax, train) = (fixture("taxonomy.tsv"), fixture("train.tsv"));
    [
        "eval-modeling", "--config", config, "--taxonomy", &tax, "--tokens", tokens, "--train-split", &train, "--test-split", test,
        "--seeds", seeds, "--out", out,
    ]
    .iter()
    .map(|a| a.to_string())
    .collect()
}

fn run_modeling(args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    hrq(&refs)
}

fn read_reports(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn missing_required_flag_prints_usage_and_exits_2() {
    let out = hrq(&["encode", "--checkpoint", "x.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_split_file_exits_3_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = s(&dir.path().join("nowhere.tsv"));
    let out = run_modeling(&modeling_args(&fixture("tokens.tsv"), &fixture("modeling.json"), "1", &s(&dir.path().join("m.json")), &missing));
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&missing));
}

#[test]
fn token_width_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("k3.json");
    let mut v = read_reports(Path::new(&fixture("modeling.json")));
    v["quantizer"]["k"] = 3.into();
    std::fs::write(&cfg, v.to_string()).unwrap();
    let out = run_modeling(&modeling_args(&fixture("tokens.tsv"), &s(&cfg), "1", &s(&dir.path().join("m.json")), &fixture("test.tsv")));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fixture_modeling_run_matches_golden_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("metrics.json");
    let res = run_modeling(&modeling_args(&fixture("tokens.tsv"), &fixture("modeling.json"), "3", &s(&out), &fixture("test.tsv")));
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let (got, want) = (read_reports(&out), read_reports(Path::new(&fixture("golden_modeling.json"))));
    assert_eq!(got[0]["config"], want[0]["config"]);
    assert_eq!(got[0]["seeds"], want[0]["seeds"]);
    for field in ["per_seed", "mean", "std"] {
        for (metric, w) in want[0][field].as_object().unwrap() {
            let g = &got[0][field][metric];
            let pairs: Vec<(f64, f64)> = match w {
                serde_json::Value::Array(ws) => ws.iter().zip(g.as_array().unwrap()).map(|(w, g)| (w.as_f64().unwrap(), g.as_f64().unwrap())).collect(),
                _ => vec![(w.as_f64().unwrap(), g.as_f64().unwrap())],
            };
            for (w, g) in pairs {
                assert!((w - g).abs() <= 1e-12, "{field}.{metric}: {g} vs golden {w}");
            }
        }
    }
}

#[test]
fn one_seed_and_three_seeds_agree_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (one, three) = (dir.path().join("one.json"), dir.path().join("three.json"));
    for (n, out) in [("1", &one), ("3", &three)] {
        let res = run_modeling(&modeling_args(&fixture("tokens.tsv"), &fixture("modeling.json"), n, &s(out), &fixture("test.tsv")));
        assert!(res.status.success());
    }
    let (a, b) = (read_reports(&one), read_reports(&three));
    assert_eq!(a[0]["seeds"], serde_json::json!([0]));
    for (metric, vals) in a[0]["per_seed"].as_object().unwrap() {
        let longer = b[0]["per_seed"][metric].as_array().unwrap();
        assert_eq!(longer.len(), 3);
        assert_eq!(vals.as_array().unwrap()[0], longer[0], "{metric}");
        assert_eq!(a[0]["mean"][metric], vals.as_array().unwrap()[0]);
    }
}

#[test]
fn same_config_and_seed_give_identical_tokens() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (_, ma) = trained_vae(a.path(), "5");
    let (_, mb) = trained_vae(b.path(), "5");
    assert_eq!(std::fs::read(ma.join("tokens.tsv")).unwrap(), std::fs::read(mb.join("tokens.tsv")).unwrap());
    assert_eq!(std::fs::read(ma.join("checkpoint.json")).unwrap(), std::fs::read(mb.join("checkpoint.json")).unwrap());
}

#[test]
fn encode_reproduces_training_tokens_and_handles_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = trained_vae(dir.path(), "0");
    let (ck, cb) = (s(&model.join("checkpoint.json")), s(&model.join("codebook.json")));
    let out = dir.path().join("items.tsv");
    ok(&["encode", "--checkpoint", &ck, "--codebook", &cb, "--input", &s(&data.join("embeddings.jsonl")), "--out", &s(&out)]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(model.join("tokens.tsv")).unwrap());

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let out = dir.path().join("none.tsv");
    ok(&["encode", "--checkpoint", &ck, "--codebook", &cb, "--input", &s(&empty), "--out", &s(&out)]);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), "entity_id\tt_0\tt_1\tdisambiguator\n");
}

#[test]
fn serialized_codebook_quantizes_like_the_in_memory_one() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = trained_vae(dir.path(), "1");
    let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(model.join("checkpoint.json")).unwrap()).unwrap();
    let Checkpoint::Vae(vae) = ck else { panic!("expected a VAE checkpoint") };
    let loaded = Codebook::from_json(&std::fs::read_to_string(model.join("codebook.json")).unwrap()).unwrap();
    let in_memory = vae.codebook();
    assert_eq!(loaded, in_memory);
    let emb = hrq::data::load_embeddings(&data.join("embeddings.jsonl")).unwrap();
    let xs: Vec<&[f64]> = emb.values().map(Vec::as_slice).collect();
    for z in vae.encode_latents(&xs).unwrap() {
        assert_eq!(loaded.quantize(&z).unwrap(), in_memory.quantize(&z).unwrap());
    }
}

fn analyze(dir: &Path, ck: &Path, input: &Path) -> (serde_json::Value, Vec<f64>) {
    let out = dir.join("norms");
    ok(&["analyze", "--checkpoint", &s(ck), "--input", &s(input), "--out", &s(&out)]);
    let json = read_reports(&out.join("norms.json"));
    let csv = std::fs::read_to_string(out.join("norms.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("entity_id,norm"));
    let norms = lines.map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    (json, norms)
}

#[test]
fn analyze_cv_matches_csv_recomputation() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model) = trained_vae(dir.path(), "2");
    let (json, norms) = analyze(dir.path(), &model.join("checkpoint.json"), &data.join("embeddings.jsonl"));
    let n = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / n;
    let std = (norms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((json["mean"].as_f64().unwrap() - mean).abs() <= 1e-12 * mean.max(1.0));
    assert!((json["cv"].as_f64().unwrap() - std / mean).abs() <= 1e-9);
}

#[test]
fn constant_latents_have_zero_cv() {
    // A hierarchy embedder's latents are its input ball points, so equal
    // inputs make a degenerate model with one norm.
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("emb");
    ok(&[
        "train-quantizer", "--taxonomy", &fixture("taxonomy.tsv"), "--train-split", &fixture("train.tsv"), "--k", "2", "--s", "4",
        "--h", "2", "--epochs", "2", "--batch-size", "10", "--out", &s(&model),
    ]);
    let input = dir.path().join("same.jsonl");
    let lines: String = (0..5).map(|i| format!("{{\"item_id\": \"e{i}\", \"vector\": [0.3, -0.2]}}\n")).collect();
    std::fs::write(&input, lines).unwrap();
    let (json, norms) = analyze(dir.path(), &model.join("checkpoint.json"), &input);
    assert_eq!(norms.len(), 5);
    assert_eq!(json["cv"].as_f64(), Some(0.0));
    assert_eq!(json["std"].as_f64(), Some(0.0));
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn convmf(args: &[&str], paths: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_convmf"));
    cmd.args(args);
    for (flag, p) in paths {
        cmd.arg(flag).arg(p);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    /// synth + preprocess for `seed`, under `<dir>/<seed>/`.
    fn prepare(&self, seed: u64) -> (PathBuf, PathBuf) {
        let root = self.dir.path().join(seed.to_string());
        let syn = root.join("syn");
        let prep = root.join("prep");
        let s = seed.to_string();
        ok(convmf(
            &["synth", "--seed", &s, "--users", "60", "--items", "80"],
            &[("--out", &syn)],
        ));
        ok(convmf(
            &["preprocess", "--seed", &s],
            &[("--input", &syn.join("reviews.jsonl")), ("--out", &prep)],
        ));
        (prep, syn.join("vectors.txt"))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn workspace() -> Workspace {
    Workspace {
        dir: tempfile::tempdir().unwrap(),
    }
}

fn train(ws: &Workspace, prep: &Path, glove: &Path, out: &str) -> PathBuf {
    let run = ws.path(out);
    ok(convmf(
        &["train", "--epochs", "2", "--factors", "3"],
        &[("--input", prep), ("--glove", glove), ("--out", &run)],
    ));
    run
}

#[test]
fn missing_input_exits_2_and_writes_nothing() {
    let ws = workspace();
    let out = ws.path("prep");
    let res = convmf(
        &["preprocess"],
        &[("--input", &ws.path("absent.jsonl")), ("--out", &out)],
    );
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn bad_flag_value_exits_2() {
    let ws = workspace();
    let (prep, glove) = ws.prepare(1);
    let res = convmf(
        &["train", "--batch-size", "0"],
        &[
            ("--input", &prep),
            ("--glove", &glove),
            ("--out", &ws.path("run")),
        ],
    );
    assert_eq!(res.status.code(), Some(2));
    assert!(!ws.path("run").join("checkpoint.json").exists());
}

#[test]
fn checkpoint_from_another_corpus_exits_3_with_both_hashes() {
    let ws = workspace();
    let (prep_a, glove_a) = ws.prepare(1);
    let (prep_b, glove_b) = ws.prepare(2);
    let run = train(&ws, &prep_a, &glove_a, "run");
    let res = convmf(
        &["evaluate", "--model", "convmf"],
        &[
            ("--input", &prep_b),
            ("--checkpoint", &run.join("checkpoint.json")),
            ("--glove", &glove_b),
        ],
    );
    assert_eq!(res.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&res.stderr);
    let hash = |dir: &Path| {
        let stats: Value =
            serde_json::from_slice(&std::fs::read(dir.join("stats.json")).unwrap()).unwrap();
        stats["vocab_sha256"].as_str().unwrap().to_string()
    };
    assert!(stderr.contains(&hash(&prep_a)), "{stderr}");
    assert!(stderr.contains(&hash(&prep_b)), "{stderr}");
}

#[test]
fn evaluate_offset_matches_mean_rating_oracle() {
    let ws = workspace();
    let (prep, _) = ws.prepare(4);
    let out = ws.path("eval");
    let res = ok(convmf(
        &["evaluate", "--model", "offset", "--split", "test"],
        &[("--input", &prep), ("--out", &out)],
    ));
    let printed: f64 = String::from_utf8_lossy(&res.stdout)
        .trim()
        .strip_prefix("rmse ")
        .unwrap()
        .parse()
        .unwrap();

    let corpus = convmf_cli::load_corpus(&prep).unwrap();
    let train: Vec<f64> = corpus.train.iter().map(|r| r.rating).collect();
    let mu = train.iter().sum::<f64>() / train.len() as f64;
    let sse: f64 = corpus.test.iter().map(|r| (mu - r.rating).powi(2)).sum();
    let oracle = (sse / corpus.test.len() as f64).sqrt();
    assert!((printed - oracle).abs() < 1e-12, "{printed} vs {oracle}");

    let report: Value =
        serde_json::from_slice(&std::fs::read(out.join("evaluation.json")).unwrap()).unwrap();
    assert_eq!(report["rmse"].as_f64().unwrap(), printed);
    assert_eq!(report["n"], corpus.test.len());
}

#[test]
fn grid_writes_one_cell_per_setting() {
    let ws = workspace();
    let (prep, glove) = ws.prepare(5);
    let out = ws.path("grid");
    ok(convmf(
        &[
            "grid",
            "--lambdas",
            "0.0,2.0",
            "--factors",
            "4",
            "--epochs",
            "2",
        ],
        &[("--input", &prep), ("--glove", &glove), ("--out", &out)],
    ));
    let grid: Value =
        serde_json::from_slice(&std::fs::read(out.join("grid.json")).unwrap()).unwrap();
    let cells = grid["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 2);
    let lambdas: Vec<f64> = cells
        .iter()
        .map(|c| c["lambda"].as_f64().unwrap())
        .collect();
    assert_eq!(lambdas, vec![0.0, 2.0]);
    for c in cells {
        assert_eq!(c["n_factors"], 4);
        assert!(c["rmse"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn coherence_reports_factor_without_usable_pairs_as_excluded() {
    let ws = workspace();
    let (prep, glove) = ws.prepare(6);
    let run = train(&ws, &prep, &glove, "run");
    let topics = ws.path("topics");
    ok(convmf(
        &["topics"],
        &[
            ("--input", &prep),
            ("--checkpoint", &run.join("checkpoint.json")),
            ("--glove", &glove),
            ("--out", &topics),
        ],
    ));
    let mut report: Value =
        serde_json::from_slice(&std::fs::read(topics.join("topics.json")).unwrap()).unwrap();
    let factors = report["factors"].as_array_mut().unwrap();
    assert_eq!(factors.len(), 3);
    let replaced = factors[0]["index"].as_u64().unwrap();
    // words absent from the vector file leave no pre-trained pair
    for (i, kw) in factors[0]["keywords"]
        .as_array_mut()
        .unwrap()
        .iter_mut()
        .enumerate()
    {
        kw["token"] = Value::from(format!("qqunseen{i}"));
    }
    let edited = ws.path("edited.json");
    std::fs::write(&edited, serde_json::to_string(&report).unwrap()).unwrap();

    let out = ws.path("coh");
    ok(convmf(
        &["coherence"],
        &[("--input", &edited), ("--glove", &glove), ("--out", &out)],
    ));
    let rescored: Value =
        serde_json::from_slice(&std::fs::read(out.join("coherence.json")).unwrap()).unwrap();
    assert_eq!(rescored["excluded_factors"], serde_json::json!([replaced]));
    let factors = rescored["factors"].as_array().unwrap();
    let last = factors.last().unwrap();
    assert_eq!(last["index"].as_u64().unwrap(), replaced);
    assert!(last["coherence"].is_null());
    assert!(factors[..2].iter().all(|f| f["coherence"].is_f64()));
}

#[test]
fn preprocess_rerun_is_byte_identical() {
    let ws = workspace();
    let (prep, _) = ws.prepare(7);
    let again = ws.path("again");
    ok(convmf(
        &["preprocess", "--seed", "7"],
        &[
            ("--input", &ws.path("7/syn/reviews.jsonl")),
            ("--out", &again),
        ],
    ));
    for f in ["corpus.bin", "vocab.txt", "stats.json", "manifest.json"] {
        assert_eq!(
            std::fs::read(prep.join(f)).unwrap(),
            std::fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn gradcheck_passes() {
    let res = ok(convmf(&["gradcheck", "--instances", "5"], &[]));
    assert!(!res.stdout.is_empty());
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tokrag(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tokrag"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    fs::write(
        &path,
        r#"{"seeds": [0, 1, 2, 3, 4], "q_grid": [0.0, 0.5, 1.0], "suite": {"sentences": 12}}"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

const CORPUS: &str = r#"{"id":"d1","text":"The capital of France is Paris."}
{"id":"d2","text":"Berlin is the capital of Germany."}

{"id":"d3","text":"The Seine flows through Paris."}
"#;

#[test]
fn verify_theory_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tokrag(&["--config", &cfg, "verify-theory", "--out", "r"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(tmp.path().join("r/sweep.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "seed,q,omega,upsilon,phi_norm,D,M,rule,truth,paper_bound_held");
    assert_eq!(csv.lines().count(), 16);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("r/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["n"], 15);
    let stamp: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("r/stamp.json")).unwrap()).unwrap();
    assert_eq!(stamp["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn same_config_gives_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    for dir in ["a", "b"] {
        let out = tokrag(&["--config", &cfg, "--jobs", "2", "verify-theory", "--out", dir], tmp.path());
        assert!(out.status.success());
        let out = tokrag(&["--config", &cfg, "eval-bd", "--oracle", "--out", &format!("e{dir}")], tmp.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["a/sweep.csv", "a/summary.json", "a/stamp.json"] {
        let other = file.replacen('a', "b", 1);
        assert_eq!(fs::read(tmp.path().join(file)).unwrap(), fs::read(tmp.path().join(other)).unwrap());
    }
    for method in ["tokrag", "logprobs", "entropy", "consistency"] {
        let a = fs::read(tmp.path().join(format!("ea/{method}.csv"))).unwrap();
        assert_eq!(a, fs::read(tmp.path().join(format!("eb/{method}.csv"))).unwrap());
        assert!(String::from_utf8(a).unwrap().starts_with("sample_id,score,label\n"));
    }
}

#[test]
fn usage_and_config_errors_have_distinct_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(tokrag(&["verify-theory", "--bogus"], tmp.path()).status.code(), Some(2));
    assert_eq!(tokrag(&["frobnicate"], tmp.path()).status.code(), Some(2));
    fs::write(tmp.path().join("bad.json"), r#"{"q_grid": [1.5]}"#).unwrap();
    let out = tokrag(&["--config", "bad.json", "verify-theory", "--out", "r"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config error"));
    fs::write(tmp.path().join("typo.json"), r#"{"sedes": [1]}"#).unwrap();
    assert_eq!(tokrag(&["--config", "typo.json", "verify-theory", "--out", "r"], tmp.path()).status.code(), Some(3));
    assert_eq!(
        tokrag(&["search", "--index", "missing.bin", "--query", "x"], tmp.path()).status.code(),
        Some(3)
    );
}

#[test]
fn text_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("corpus.jsonl"), CORPUS).unwrap();
    assert!(tokrag(&["index", "--corpus", "corpus.jsonl", "--out", "idx.bin"], dir).status.success());
    assert!(dir.join("idx.bin.stamp.json").exists());

    let out = tokrag(&["search", "--index", "idx.bin", "--query", "capital of France", "--k", "2"], dir);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "rank,doc_id,score");
    assert!(lines[1].starts_with("1,d1,"));
    assert_eq!(lines.len(), 3);

    let gen = [
        "gen-model", "--out", "m.tlm", "--layers", "2", "--d-model", "16", "--heads", "2", "--head-dim", "8",
        "--vocab-size", "64", "--context", "128", "--corpus", "corpus.jsonl",
    ];
    assert!(tokrag(&gen, dir).status.success());
    assert!(dir.join("m.vocab").exists());

    let probe = [
        "probe", "--model", "m.tlm", "--vocab", "m.vocab", "--index", "idx.bin", "--query", "the capital of",
        "--a", "1e-4", "--out", "p",
    ];
    assert!(tokrag(&probe, dir).status.success());
    let csv = fs::read_to_string(dir.join("p/probe.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "layer,f,g");
    assert_eq!(csv.lines().count(), 3);
    let fusion: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("p/fusion.json")).unwrap()).unwrap();
    for key in ["l_star", "argmax_f", "first_cross", "a"] {
        assert!(fusion.get(key).is_some(), "missing {key}");
    }

    let mut trails = Vec::new();
    for run in ["d1", "d2"] {
        let args = [
            "decode", "--model", "m.tlm", "--vocab", "m.vocab", "--index", "idx.bin", "--query", "the capital of",
            "--max-tokens", "6", "--out", run,
        ];
        let out = tokrag(&args, dir);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        trails.push(fs::read(dir.join(run).join("trail.jsonl")).unwrap());
    }
    assert_eq!(trails[0], trails[1]);
    let trail = String::from_utf8(trails.pop().unwrap()).unwrap();
    assert_eq!(trail.lines().count(), 6);
    for line in trail.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("chosen").is_some() && v.get("verdict").is_some());
    }
}

#[test]
fn oracle_decode_accepts_token_ids() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tokrag(&["decode", "--model", "oracle", "--query", "0 1 2", "--max-tokens", "4"], tmp.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.split_whitespace().count(), 4);
    let out = tokrag(&["decode", "--oracle", "--query", "0 x"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

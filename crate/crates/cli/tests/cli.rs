use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn tlg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tlg"))
        .args(args)
        .env_remove("TLG_ENDPOINT")
        .output()
        .expect("run tlg")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const FACTS: &str = r#"{"image_id":"a","label":"weird","pair_id":"p1","dataset_tag":"toy","facts":["A man vacuums the beach.","The vacuum cleaner is silver."]}
{"image_id":"b","label":"normal","pair_id":"p1","dataset_tag":"toy","facts":["A man walks on the beach.","The sand is warm."]}
{"image_id":"c","label":"weird","dataset_tag":"toy","facts":["A fish rides a bicycle."]}
{"image_id":"d","label":"normal","dataset_tag":"toy","facts":["A cat sleeps.","A cup of tea.","Morning light."]}
"#;

fn facts_file(dir: &Path) -> std::path::PathBuf {
    let f = dir.join("facts.jsonl");
    fs::write(&f, FACTS).unwrap();
    f
}

fn dead_endpoint() -> String {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    format!("http://127.0.0.1:{port}")
}

#[test]
fn mock_embed_writes_files_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let facts = facts_file(dir.path());
    let out = dir.path().join("emb");
    ok(tlg(&["embed", "--facts", p(&facts), "--out", p(&out), "--mock", "--dim", "16"]));
    for id in ["a", "b", "c", "d"] {
        assert!(out.join(format!("{id}.tlge")).is_file());
    }
    let m = json(&out.join("manifest.json"));
    let entries = m["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 4);
    assert_eq!(entries[0]["image_id"], "a");
    assert_eq!(m["dataset_tag"], "toy");

    // overwrite guard
    let again = tlg(&["embed", "--facts", p(&facts), "--out", p(&out), "--mock"]);
    assert_eq!(code(&again), 1);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(tlg(&["embed", "--facts", p(&facts), "--out", p(&out), "--mock", "--dim", "16", "--force"]));
}

#[test]
fn unreachable_endpoint_leaves_no_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let facts = facts_file(dir.path());
    let out = dir.path().join("emb");
    let url = dead_endpoint();
    let o = tlg(&["embed", "--facts", p(&facts), "--out", p(&out), "--endpoint", &url, "--retries", "0"]);
    assert_eq!(code(&o), 2);
    assert!(!out.join("manifest.json").exists());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("failed: a") && err.contains("failed: d"), "{err}");

    // the endpoint can also come from the environment
    let o = Command::new(env!("CARGO_BIN_EXE_tlg"))
        .args(["embed", "--facts", p(&facts), "--out", p(&out), "--retries", "0"])
        .env("TLG_ENDPOINT", &url)
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn embed_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let facts = facts_file(dir.path());
    let out = dir.path().join("emb");
    assert_eq!(code(&tlg(&["embed", "--facts", p(&facts), "--out", p(&out)])), 1);
    assert_eq!(code(&tlg(&["embed", "--facts", "/nonexistent.jsonl", "--out", p(&out), "--mock"])), 1);
    fs::write(&facts, "{\"image_id\": \"x\"}\n").unwrap();
    assert_eq!(code(&tlg(&["embed", "--facts", p(&facts), "--out", p(&out), "--mock"])), 1);
    assert_eq!(code(&tlg(&["no-such-command"])), 1);
    assert_eq!(code(&tlg(&["--help"])), 0);
}

#[test]
fn crossval_on_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let syn = dir.path().join("syn");
    ok(tlg(&["synth", "--out", p(&syn)]));
    let manifest = syn.join("manifest.json");
    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    let o = ok(tlg(&["crossval", "--manifest", p(&manifest), "--out", p(&r1), "--seed", "3"]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("TLG"));
    let rep = json(&r1.join("crossval.json"));
    assert_eq!(rep["k"], 5);
    assert!(rep["mean_accuracy"].as_f64().unwrap() >= 0.95, "{rep}");
    assert_eq!(rep["per_fold_accuracy"].as_array().unwrap().len(), 5);
    assert!(r1.join("crossval.txt").is_file());
    assert_eq!(fs::read_to_string(r1.join("crossval.csv")).unwrap().lines().count(), 6);

    ok(tlg(&["crossval", "--manifest", p(&manifest), "--out", p(&r2), "--seed", "3"]));
    assert_eq!(fs::read(r1.join("crossval.json")).unwrap(), fs::read(r2.join("crossval.json")).unwrap());

    assert_eq!(code(&tlg(&["crossval", "--manifest", p(&manifest), "--k", "1"])), 1);
    assert_eq!(code(&tlg(&["crossval", "--manifest", p(&manifest), "--lr", "-1"])), 1);
    assert_eq!(code(&tlg(&["crossval", "--manifest", "/nope.json"])), 1);
}

#[test]
fn transfer_and_train() {
    let dir = tempfile::tempdir().unwrap();
    let syn = dir.path().join("syn");
    ok(tlg(&["synth", "--out", p(&syn), "--n-per-class", "40", "--dim", "8"]));
    let m = syn.join("manifest.json");
    let out = dir.path().join("tr");
    ok(tlg(&["transfer", "--train-manifest", p(&m), "--test-manifest", p(&m), "--out", p(&out), "--epochs", "50"]));
    let rep = json(&out.join("transfer.json"));
    assert_eq!(rep["accuracy"], rep["final_train_accuracy"]);
    assert!(out.join("params.json").is_file());
    assert_eq!(fs::read_to_string(out.join("history.csv")).unwrap().lines().count(), 51);

    let missing = dir.path().join("missing.json");
    assert_eq!(code(&tlg(&["transfer", "--train-manifest", p(&m), "--test-manifest", p(&missing)])), 1);

    let other = dir.path().join("other");
    ok(tlg(&["synth", "--out", p(&other), "--n-per-class", "5", "--dim", "4"]));
    let o = tlg(&["transfer", "--train-manifest", p(&m), "--test-manifest", p(&other.join("manifest.json"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("dimension"), "{}", String::from_utf8_lossy(&o.stderr));

    let t = dir.path().join("train");
    ok(tlg(&["train", "--manifest", p(&m), "--out", p(&t), "--epochs", "5"]));
    let params = json(&t.join("params.json"));
    assert_eq!(params["dim"], 8);
    assert_eq!(params["W_a"].as_array().unwrap().len(), 8);
}

#[test]
fn rank_facts_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let facts = facts_file(dir.path());
    let emb = dir.path().join("emb");
    ok(tlg(&["embed", "--facts", p(&facts), "--out", p(&emb), "--mock", "--dim", "4"]));
    let params = dir.path().join("zero.json");
    fs::write(&params, r#"{"dim":4,"W_a":[0,0,0,0],"b_a":0,"W_c":[0,0,0,0],"b_c":0,"epsilon":1e-8}"#).unwrap();
    let m = emb.join("manifest.json");

    let out = dir.path().join("rank.json");
    let o = ok(tlg(&["rank-facts", "--params", p(&params), "--manifest", p(&m), "--image-id", "d", "--out", p(&out)]));
    assert!(String::from_utf8_lossy(&o.stdout).contains("A cup of tea."));
    let r = json(&out);
    let rows = r["facts"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row["fact_index"], i);
        assert_eq!(row["attention_logit"], 0.0);
    }
    assert_eq!(r["prob"], 0.5);

    ok(tlg(&["rank-facts", "--params", p(&params), "--manifest", p(&m), "--image-id", "c", "--out", p(&out)]));
    assert_eq!(json(&out)["facts"].as_array().unwrap().len(), 1);

    let o = tlg(&["rank-facts", "--params", p(&params), "--manifest", p(&m), "--image-id", "zzz", "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    fs::write(&params, r#"{"dim":3,"W_a":[0,0,0],"b_a":0,"W_c":[0,0,0],"b_c":0,"epsilon":1e-8}"#).unwrap();
    let o = tlg(&["rank-facts", "--params", p(&params), "--manifest", p(&m), "--image-id", "a", "--out", p(&out)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn trained_model_ranks_marker_fact_first() {
    let dir = tempfile::tempdir().unwrap();
    let syn = dir.path().join("syn");
    ok(tlg(&["synth", "--out", p(&syn), "--n-per-class", "60"]));
    let t = dir.path().join("t");
    ok(tlg(&["train", "--manifest", p(&syn.join("manifest.json")), "--out", p(&t)]));
    let out = dir.path().join("rank.json");
    ok(tlg(&[
        "rank-facts",
        "--params",
        p(&t.join("params.json")),
        "--manifest",
        p(&syn.join("manifest.json")),
        "--image-id",
        "w0007",
        "--out",
        p(&out),
    ]));
    let r = json(&out);
    let top = r["facts"][0]["fact"].as_str().unwrap();
    assert!(top.split_whitespace().any(|w| w == "weird"), "{top}");
}

#[test]
fn analyze_reports() {
    let dir = tempfile::tempdir().unwrap();
    let facts = facts_file(dir.path());
    let emb = dir.path().join("emb");
    ok(tlg(&["embed", "--facts", p(&facts), "--out", p(&emb), "--mock", "--dim", "4"]));
    let m = emb.join("manifest.json");
    let out = dir.path().join("an");
    ok(tlg(&["analyze", "--manifest", p(&m), "--out", p(&out)]));
    let r = json(&out.join("analysis.json"));
    assert_eq!(r.as_array().unwrap().len(), 1);
    assert_eq!(r[0]["marker_hits"].as_object().unwrap().len(), 4);

    ok(tlg(&["analyze", "--manifest", p(&m), "--out", p(&out), "--split-by-label"]));
    let r = json(&out.join("analysis.json"));
    assert_eq!(r.as_array().unwrap().len(), 2);
    assert_eq!(r[0]["n_factsets"].as_u64().unwrap() + r[1]["n_factsets"].as_u64().unwrap(), 4);

    let lex = dir.path().join("lex.json");
    fs::write(&lex, r#"{"common": [], "weird": ["strange"]}"#).unwrap();
    assert_eq!(code(&tlg(&["analyze", "--manifest", p(&m), "--lexicon", p(&lex), "--out", p(&out)])), 1);
    fs::write(&lex, r#"{"beach": ["beach", "sand"]}"#).unwrap();
    ok(tlg(&["analyze", "--manifest", p(&m), "--lexicon", p(&lex), "--out", p(&out)]));
    assert_eq!(json(&out.join("analysis.json"))[0]["marker_hits"]["beach"], 2);
}

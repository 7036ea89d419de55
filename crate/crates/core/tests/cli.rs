use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::{json, Value};

use ipn_core::training::EpochLog;
use ipn_core::{load_checkpoint, load_dataset, EvalReport, Topology};

fn ipn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ipn")).args(args).output().expect("run ipn")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small config writing into `dir/run`.
fn write_config(dir: &Path, extra: Value) -> PathBuf {
    let mut cfg = json!({
        "synthetic": {
            "n_seen": 6, "n_unseen": 2, "d_a": 6, "d_v": 12,
            "samples_per_class": 12, "n_superclusters": 2, "seed": 4
        },
        "hyperparams": {"ways": 4, "query_per_class": 2, "d": 8, "epochs": 2, "lr": 0.001, "seed": 1},
        "output_dir": dir.join("run"),
        "hit_at_k": [1, 2]
    });
    if let (Value::Object(base), Value::Object(more)) = (&mut cfg, extra) {
        base.extend(more);
    }
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn read_log(path: &Path) -> Vec<EpochLog> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn generate_is_deterministic_and_honours_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = ipn(&["generate", "--out", s(out), "--seed", "7", "--n-unseen", "3"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("unseen 3"), "{}", stdout(&o));
    }
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    assert_eq!(load_dataset(&a).unwrap().split().unseen.len(), 3);

    let seg = tmp.path().join("seg");
    let o = ipn(&["generate", "--out", s(&seg), "--topology", "segregated"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ds = load_dataset(&seg).unwrap();
    assert_eq!(ds.synthetic_spec().unwrap().topology, Topology::Segregated);

    let o = ipn(&["generate", "--out", s(&seg), "--n-seen", "0"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn train_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), json!({"eval_every": 1}));
    let run = tmp.path().join("run");

    let started = Instant::now();
    let o = ipn(&["train", "-c", s(&cfg), "--epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(started.elapsed().as_secs() < 10);
    assert!(run.join("checkpoint/manifest.json").exists());
    assert_eq!(read_log(&run.join("train_log.jsonl")).len(), 1);
    assert_eq!(fs::read_to_string(run.join("eval_log.jsonl")).unwrap().lines().count(), 1);
    let prov: Value = serde_json::from_slice(&fs::read(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(prov["command"], "train");
    assert_eq!(prov["seed"], 1);
    assert_eq!(prov["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(load_checkpoint(run.join("checkpoint")).unwrap().epoch, 1);

    let o = ipn(&["eval", "-c", s(&cfg), "--protocol", "both", "--export-prototypes"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let reports: Vec<EvalReport> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(reports.len(), 2);
    let gzsl = &reports[0];
    assert!(gzsl.acc_seen.is_some() && gzsl.harmonic.is_some());
    let hits = reports[1].hit_at_k.as_ref().unwrap();
    assert!(hits[&1] <= hits[&2]);
    assert!(run.join("eval_gzsl.json").exists() && run.join("eval_zsl.json").exists());
    let csv = fs::read_to_string(run.join("prototypes_gzsl.csv")).unwrap();
    assert!(csv.starts_with("class_id,class_name,space,step,p0"));

    // evaluating twice gives the same reports
    let again = ipn(&["eval", "-c", s(&cfg), "--protocol", "both"]);
    assert_eq!(stdout(&again), stdout(&o));
}

#[test]
fn resume_appends_and_matches() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), json!({}));
    let run = tmp.path().join("run");
    let o = ipn(&["train", "-c", s(&cfg), "--epochs", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let unbroken = read_log(&run.join("train_log.jsonl"));

    let other = tmp.path().join("other");
    let o = ipn(&["train", "-c", s(&cfg), "--epochs", "2", "--output-dir", s(&other)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ck = other.join("checkpoint");
    let o = ipn(&["train", "-c", s(&cfg), "--epochs", "4", "--output-dir", s(&other), "--resume", s(&ck)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let resumed = read_log(&other.join("train_log.jsonl"));
    assert_eq!(resumed.len(), 4);
    for (a, b) in resumed.iter().zip(&unbroken) {
        assert_eq!(a.epoch, b.epoch);
        assert!((a.ce - b.ce).abs() <= 1e-6 && (a.total - b.total).abs() <= 1e-6);
    }
}

#[test]
fn no_consistency_variant_logs_zero_weight() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), json!({}));
    let o = ipn(&["train", "-c", s(&cfg), "--variant", "no-consistency"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for rec in read_log(&tmp.path().join("run/train_log.jsonl")) {
        assert_eq!(rec.consistency_weight, 0.0);
        assert_eq!(rec.consistency_weight * rec.consistency, 0.0);
    }
}

#[test]
fn ablate_and_sweep_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), json!({}));
    let o = ipn(&["ablate", "-c", s(&cfg), "--variants", "full,no-propagation", "--seeds", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = stdout(&o);
    let mut rdr = csv::Reader::from_reader(table.as_bytes());
    let headers = rdr.headers().unwrap().clone();
    assert!(headers.iter().any(|h| h == "h_std"));
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].get(2), rows[1].get(2), "both rows use the same seeds");
    assert!(tmp.path().join("run/ablation.csv").exists());

    let o = ipn(&["sweep", "-c", s(&cfg), "--param", "steps", "--values", "0,1,2,3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(csv::Reader::from_reader(stdout(&o).as_bytes()).records().count(), 4);

    let o = ipn(&["sweep", "-c", s(&cfg), "--param", "edge_threshold", "--values", "cos30,cos40,cos50"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let body = stdout(&o);
    assert_eq!(csv::Reader::from_reader(body.as_bytes()).records().count(), 3);
    assert!(body.contains("cos40"), "{body}");

    let o = ipn(&["sweep", "-c", s(&cfg), "--param", "colour", "--values", "1"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("gamma"), "{}", stderr(&o));
}

#[test]
fn gradcheck_gate() {
    let o = ipn(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let table = stdout(&o);
    for g in ["W", "experts", "h_v", "h_s", "W1", "W2", "b1", "w", "b"] {
        assert_eq!(table.lines().filter(|l| l.split_whitespace().next() == Some(g)).count(), 1, "{g}");
    }
    let o = ipn(&["gradcheck", "--corrupt-group", "h_s"]);
    assert_eq!(code(&o), 4);
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    // unknown flag and unknown config key
    assert_eq!(code(&ipn(&["train", "--no-such-flag", "1"])), 2);
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"hyperparams": {"gama": 3}}"#).unwrap();
    assert_eq!(code(&ipn(&["train", "-c", s(&bad)])), 2);
    // missing dataset directory
    let cfg = write_config(tmp.path(), json!({}));
    let missing = tmp.path().join("missing");
    assert_eq!(code(&ipn(&["train", "-c", s(&cfg), "--dataset", s(&missing)])), 3);
    // diverging run
    let o = ipn(&["train", "-c", s(&cfg), "--lr", "1e30"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("last finite epoch"));
}

#[test]
fn eval_rejects_mismatched_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), json!({}));
    assert_eq!(code(&ipn(&["train", "-c", s(&cfg), "--epochs", "1"])), 0);
    let other = write_config(
        tmp.path(),
        json!({"synthetic": {"n_seen": 6, "n_unseen": 2, "d_a": 6, "d_v": 20, "samples_per_class": 12, "seed": 4}}),
    );
    let ck = tmp.path().join("run/checkpoint");
    let o = ipn(&["eval", "-c", s(&other), "--checkpoint", s(&ck)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

use std::path::PathBuf;
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vrscope")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

fn synth(dir: &TempDir, app: &str, sessions: &str, secs: &str, seed: &str, stem: &str) -> (String, String) {
    let (pcap, truth) = (path(dir, &format!("{stem}.pcap")), path(dir, &format!("{stem}.json")));
    ok(&["synth", "--app", app, "--sessions", sessions, "--secs", secs, "--seed", seed, "--out", &pcap, "--sidecar", &truth]);
    (pcap, truth)
}

#[test]
fn synth_analyze_evaluate_round_trip() {
    let dir = TempDir::new().unwrap();
    let (pcap, truth) = synth(&dir, "VRChat", "3", "120", "5", "t");
    let reports = path(&dir, "r.jsonl");
    let metrics = path(&dir, "m.json");
    ok(&["analyze", "--in", &pcap, "--out", &reports, "--metrics", &metrics]);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(m["sessions_started"], 3);
    let table = ok(&["evaluate", "--reports", &reports, "--truth", &truth]);
    assert!(table.starts_with("session  100%|0"), "{table}");
}

#[test]
fn trained_models_drive_classification() {
    let dir = TempDir::new().unwrap();
    let (pcap, truth) = synth(&dir, "AltSpaceVR", "4", "300", "11", "train");
    let csvs = dir.path().join("csv");
    let csv_dir = csvs.to_string_lossy().into_owned();
    ok(&["analyze", "--in", &pcap, "--out", &path(&dir, "r.jsonl"), "--truth", &truth, "--intervals-dir", &csv_dir]);
    let csv = csvs.join("altspacevr.csv").to_string_lossy().into_owned();
    let (sl, sf) = (path(&dir, "sl.json"), path(&dir, "sf.json"));
    let small = ["--trees", "10", "--depth", "6"];
    ok(&[&["train-classifier", "--app", "AltSpaceVR", "--mode", "stateless", "--in", &csv, "--out", &sl][..], &small].concat());
    ok(&[&["train-classifier", "--app", "AltSpaceVR", "--mode", "stateful", "--in", &csv, "--out", &sf][..], &small].concat());

    let (pcap, truth) = synth(&dir, "AltSpaceVR", "1", "200", "99", "test");
    let reports = path(&dir, "t.jsonl");
    ok(&["analyze", "--in", &pcap, "--out", &reports, "--stateless", &sl, "--stateful", &sf]);
    let table = ok(&["evaluate", "--reports", &reports, "--truth", &truth]);
    assert!(table.contains("HS"), "{table}");
}

#[test]
fn train_signatures_recovers_builtin_sequences() {
    let dir = TempDir::new().unwrap();
    let (pcap, _) = synth(&dir, "Rec Room", "2", "60", "3", "rr");
    let model = path(&dir, "sigs.json");
    ok(&["train-signatures", "--app", "Rec Room", "--domain", "rec.com", "--in", &pcap, "--out", &model]);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&model).unwrap()).unwrap();
    let text = v.to_string();
    for seq in ["[148,75,51,204]", "[149,75,51,216]"] {
        assert!(text.contains(seq), "{seq} missing from {text}");
    }
    // the learned model detects the same sessions
    let reports = path(&dir, "r.jsonl");
    ok(&["analyze", "--in", &pcap, "--out", &reports, "--model", &model]);
    let sessions = std::fs::read_to_string(&reports).unwrap().lines().filter(|l| l.contains("\"kind\":\"session\"")).count();
    assert_eq!(sessions, 2);
}

#[test]
fn latency_report_from_as_map() {
    let dir = TempDir::new().unwrap();
    let (pcap, truth, map) = (path(&dir, "t.pcap"), path(&dir, "t.json"), path(&dir, "as.csv"));
    ok(&["synth", "--app", "Multiverse", "--secs", "60", "--seed", "2", "--out", &pcap, "--sidecar", &truth, "--as-map", &map]);
    let reports = path(&dir, "r.jsonl");
    ok(&["analyze", "--in", &pcap, "--out", &reports]);
    let csv = ok(&["report", "--latency-by-as", &map, "--reports", &reports, "--csv"]);
    assert!(csv.lines().any(|l| l.starts_with("Multiverse-primary,")), "{csv}");
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let (pcap, _) = synth(&dir, "VRChat", "1", "30", "1", "t");
    let out = path(&dir, "r.jsonl");
    assert_eq!(code(&["analyze", "--in", &path(&dir, "missing.pcap"), "--out", &out]), 1);
    assert_eq!(code(&["analyze", "--in", &pcap, "--out", &out, "--threshold", "2"]), 2);
    assert_eq!(code(&["analyze", "--in", &pcap, "--out", &out, "--shards", "0"]), 2);
    assert_eq!(code(&["analyze", "--in", &pcap, "--out", &out, "--stateless", &path(&dir, "none.json")]), 3);

    let bad: PathBuf = dir.path().join("bad.json");
    std::fs::write(&bad, "{not json").unwrap();
    assert_eq!(code(&["analyze", "--in", &pcap, "--out", &out, "--model", bad.to_str().unwrap()]), 3);
    assert_eq!(code(&["analyze", "--in", &pcap, "--out", &out, "--config", bad.to_str().unwrap()]), 2);
    // clap usage errors
    assert_eq!(code(&["analyze"]), 2);
}

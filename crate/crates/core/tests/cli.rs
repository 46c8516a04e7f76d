use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ehsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ehsim")).args(args).output().unwrap()
}

fn code(args: &[&str]) -> i32 {
    ehsim(args).status.code().unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn rows(path: &str) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn usage_errors_exit_2() {
    let out = ehsim(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(code(&["no-such-command"]), 2);
    assert_eq!(code(&["simulate", "--out-ecg", "x.csv"]), 2);
    assert_eq!(code(&["residual-check", "--signal", "x.csv", "--modality", "eeg"]), 2);
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn bad_config_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let cfg = p(d.path(), "cfg.json");
    fs::write(&cfg, r#"{"fit": {"max_iters": 10, "bogus": 1}}"#).unwrap();
    let args = ["simulate", "--config", &cfg, "--out-ecg", &p(d.path(), "e.csv"), "--out-ppg", &p(d.path(), "g.csv")];
    assert_eq!(code(&args), 2);
    fs::write(&cfg, r#"{"sim": {"ecg_fs": 100.0}}"#).unwrap();
    assert_eq!(code(&args), 2);
}

#[test]
fn domain_errors_exit_1() {
    let d = tempfile::tempdir().unwrap();
    let (e, g) = (p(d.path(), "e.csv"), p(d.path(), "g.csv"));
    // missing input file
    assert_eq!(code(&["simulate", "--params", &p(d.path(), "missing.json"), "--out-ecg", &e, "--out-ppg", &g]), 1);
    // malformed parameters
    let bad = p(d.path(), "bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&["simulate", "--params", &bad, "--out-ecg", &e, "--out-ppg", &g]), 1);
    // non-physical duration
    assert_eq!(code(&["simulate", "--duration=-1", "--out-ecg", &e, "--out-ppg", &g]), 1);
    assert_eq!(code(&["simulate", "--heart-rate", "0", "--out-ecg", &e, "--out-ppg", &g]), 1);
    // truncated dataset
    let data = p(d.path(), "data");
    assert_eq!(code(&["gen-data", "--out", &data, "--groups", "1", "--per-group", "3"]), 0);
    let records = d.path().join("data/records.jsonl");
    let text = fs::read_to_string(&records).unwrap();
    fs::write(&records, &text[..text.len() - 100]).unwrap();
    let out = ehsim(&["losses", "--data", &data]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("record 3"));
}

#[test]
fn simulate_writes_segment_geometry() {
    let d = tempfile::tempdir().unwrap();
    let params = p(d.path(), "p.json");
    fs::write(&params, ehsim::simcore::SimParams::default().to_json().unwrap()).unwrap();
    let (e, g) = (p(d.path(), "e.csv"), p(d.path(), "g.csv"));
    let args = ["simulate", "--params", &params, "--duration", "10", "--out-ecg", &e, "--out-ppg", &g];
    assert_eq!(code(&args), 0);
    assert_eq!((rows(&e), rows(&g)), (1200, 400));
    let first = fs::read(&e).unwrap();
    assert_eq!(code(&args), 0);
    assert_eq!(fs::read(&e).unwrap(), first);
}

#[test]
fn residual_check_closes_on_own_trajectory() {
    let d = tempfile::tempdir().unwrap();
    let (e, g) = (p(d.path(), "e.csv"), p(d.path(), "g.csv"));
    assert_eq!(code(&["simulate", "--fine", "--heart-rate", "85", "--out-ecg", &e, "--out-ppg", &g]), 0);
    let params = p(d.path(), "p.json");
    let sp = ehsim::simcore::SimParams::default().with_heart_rate(85.0).unwrap();
    fs::write(&params, sp.to_json().unwrap()).unwrap();
    for (sig, m) in [(&e, "ecg"), (&g, "ppg")] {
        let out = ehsim(&["residual-check", "--signal", sig, "--modality", m, "--params", &params]);
        assert_eq!(out.status.code(), Some(0));
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert!(v["residual"]["max_abs"].as_f64().unwrap() <= 1e-9, "{v}");
        assert!(v["gronwall"]["ratio"].as_f64().unwrap() <= 1.0);
    }
    // wrong parameters leave a residual the bound still dominates
    let out = ehsim(&["residual-check", "--signal", &e, "--modality", "ecg"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["residual"]["max_abs"].as_f64().unwrap() > 1e-3);
    assert_eq!(v["gronwall"]["holds"], true);
}

#[test]
fn losses_and_flow_eval_report_terms() {
    let d = tempfile::tempdir().unwrap();
    let data = p(d.path(), "data");
    assert_eq!(code(&["gen-data", "--out", &data, "--groups", "2", "--per-group", "4", "--seed", "3"]), 0);
    let out = ehsim(&["losses", "--data", &data]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for k in ["pat", "rec", "kl", "gpa", "lid", "csd"] {
        assert!(v["terms"][k].as_f64().unwrap().is_finite(), "{k}");
    }
    let bundle = p(d.path(), "bundle.json");
    assert_eq!(code(&["flow-train", "--data", &data, "--out", &bundle]), 0);
    let out = ehsim(&["flow-eval", "--bundle", &bundle, "--data", &data]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["L_Flow"].as_f64().unwrap().is_finite());
}

#[test]
fn eval_rejects_mismatched_datasets() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (p(d.path(), "a"), p(d.path(), "b"));
    assert_eq!(code(&["gen-data", "--out", &a, "--groups", "1", "--per-group", "2"]), 0);
    assert_eq!(code(&["gen-data", "--out", &b, "--groups", "1", "--per-group", "3"]), 0);
    assert_eq!(code(&["eval", "--reference", &a, "--generated", &b, "--out", &p(d.path(), "r.json")]), 1);
    // a dataset against itself scores zero waveform error
    let r = p(d.path(), "self.json");
    assert_eq!(code(&["eval", "--reference", &a, "--generated", &a, "--out", &r, "--fd", "gaussian"]), 0);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&r).unwrap()).unwrap();
    assert_eq!(v["table1"]["MAE"], 0.0);
    assert_eq!(v["table1"]["FD"], 0.0);
}

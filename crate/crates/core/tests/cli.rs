use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mapg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mapg")).args(args).env_remove("MAPG_OUT_DIR").output().unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn toy_reports_diffs_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nested/out");
    let o = mapg(&["--out", s(&out), "toy"]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("PASS coma-baseline"));
    assert!(text.contains("PASS published-replay"));
    // the full-precision optimal baseline differs from the rounded reference
    assert!(text.contains("FAIL ob-baseline\n"));
    assert_eq!(o.status.code(), Some(1));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("toy.json")).unwrap()).unwrap();
    assert_eq!(json["schema_version"], 1);
}

#[test]
fn verify_passes_and_sabotage_fails() {
    let dir = tempfile::tempdir().unwrap();
    let ok = mapg(&["--out", s(dir.path()), "--seed", "2", "verify", "--games", "10", "--agents", "2"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    let bad = mapg(&["--out", s(dir.path()), "verify", "--games", "3", "--sabotage"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL lemma2"));
}

#[test]
fn gen_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    assert_eq!(mapg(&["--out", out, "--seed", "9", "gen", "--agents", "2", "--states", "2", "--actions", "3"]).status.code(), Some(0));
    let game = dir.path().join("game.json");
    let o = mapg(&["--out", out, "--format", "csv", "report", "--game", s(&game), "--agent", "1", "--mc", "2000"]);
    assert_eq!(o.status.code(), Some(0));
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(csv.starts_with("schema_version,agent,kind,t,term,value\n"));
    assert!(csv.contains(",mc-se,"));
}

#[test]
fn toy_fixture_report_matches_toy_figures() {
    let dir = tempfile::tempdir().unwrap();
    let o = mapg(&[
        "--out",
        s(dir.path()),
        "report",
        "--game",
        s(&fixture("toy_game.json")),
        "--policy",
        s(&fixture("toy_policy.json")),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let figure = |kind: &str| {
        report["kinds"].as_array().unwrap().iter().find(|k| k["kind"] == kind).unwrap()["discounted_sum"].as_f64().unwrap()
    };
    assert!((figure("centralized") - 1321.0066).abs() < 1e-9);
    assert!((figure("coma") - 1020.2464).abs() < 1e-9);
    assert!((figure("ob") - 673.109647).abs() < 1e-6);
}

#[test]
fn symmetric_game_gives_symmetric_reports() {
    let dir = tempfile::tempdir().unwrap();
    let game = mapg_core::OneStepGame::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap().to_markov_game(0.5).unwrap();
    let path = dir.path().join("sym.json");
    std::fs::write(&path, game.to_json().unwrap()).unwrap();
    let read = |agent: &str| {
        let out = dir.path().join(agent);
        assert_eq!(mapg(&["--out", s(&out), "report", "--game", s(&path), "--agent", agent]).status.code(), Some(0));
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
        v["kinds"].clone()
    };
    assert_eq!(read("0"), read("1"));
}

#[test]
fn train_single_comparison_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    std::fs::write(&config, r#"{"iterations": 40, "batch_size": 8}"#).unwrap();
    let full = dir.path().join("full");
    assert_eq!(mapg(&["--out", s(&full), "train", "--game", "coordination", "--config", s(&config)]).status.code(), Some(0));
    let history: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(full.join("history.json")).unwrap()).unwrap();
    assert_eq!(history["rows"].as_array().unwrap().len(), 40);
    assert!(full.join("checkpoint.json").exists());

    let cmp = dir.path().join("cmp");
    let o = mapg(&["--out", s(&cmp), "--format", "csv", "train", "--game", "coordination", "--baseline", "none,ob", "--seeds", "5"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    let variance = |name: &str| -> f64 {
        let line = text.lines().find(|l| l.starts_with(name)).unwrap();
        line.split("mean-grad-variance=").nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap()
    };
    assert!(variance("ob-surrogate") < variance("none"));

    // resuming a shorter run reaches the same end state as the straight run
    let short_cfg = dir.path().join("short.json");
    std::fs::write(&short_cfg, r#"{"iterations": 15, "batch_size": 8}"#).unwrap();
    let part = dir.path().join("part");
    assert_eq!(mapg(&["--out", s(&part), "train", "--game", "coordination", "--config", s(&short_cfg)]).status.code(), Some(0));
    let mut ck: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(part.join("checkpoint.json")).unwrap()).unwrap();
    ck["config"]["iterations"] = 40.into();
    let ck_path = dir.path().join("ck.json");
    std::fs::write(&ck_path, serde_json::to_string(&ck).unwrap()).unwrap();
    let resumed = dir.path().join("resumed");
    assert_eq!(mapg(&["--out", s(&resumed), "train", "--game", "coordination", "--resume", s(&ck_path)]).status.code(), Some(0));
    assert_eq!(std::fs::read(full.join("history.json")).unwrap(), std::fs::read(resumed.join("history.json")).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    assert_eq!(mapg(&["--out", out, "--bogus", "toy"]).status.code(), Some(2));
    assert_eq!(mapg(&["--out", out, "frobnicate"]).status.code(), Some(2));
    assert_eq!(mapg(&["--out", out, "--format", "xml", "toy"]).status.code(), Some(2));
    assert_eq!(mapg(&["--out", out, "report", "--game", "/no/such/file.json"]).status.code(), Some(3));
    let broken = dir.path().join("broken.json");
    std::fs::write(&broken, "{").unwrap();
    assert_eq!(mapg(&["--out", out, "report", "--game", s(&broken)]).status.code(), Some(2));
    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{"actor_lr": -1}"#).unwrap();
    assert_eq!(mapg(&["--out", out, "train", "--game", "coordination", "--config", s(&config)]).status.code(), Some(2));
    assert_eq!(mapg(&["--help"]).status.code(), Some(0));
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_mapg"))
        .args(["--seed", "1", "gen", "--agents", "1", "--states", "1", "--actions", "2"])
        .env("MAPG_OUT_DIR", &out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(out.join("game.json")).unwrap();
    let game = mapg_core::MarkovGame::from_json(&text).unwrap();
    assert_eq!(game.to_json().unwrap(), text);
}

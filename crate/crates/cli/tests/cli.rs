use std::path::Path;
use std::process::{Command, Output};

fn stlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stlab"))
        .args(args)
        .arg("--out")
        .arg(dir.join("out"))
        .current_dir(dir)
        .output()
        .unwrap()
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"kind": "gaussian", "typo": 1}"#).unwrap();
    let out = stlab(dir.path(), &["gen", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = stlab(dir.path(), &["margins", "--config", "nope.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oversized_exhaustive_search_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let gen = stlab(dir.path(), &["gen", "--n", "300", "--seed", "1"]);
    assert!(gen.status.success());
    std::fs::write(dir.path().join("exp.json"), r#"{"population": "out/population.json"}"#).unwrap();
    let out = stlab(dir.path(), &["expansion", "--config", "exp.json", "--mode", "exhaustive"]);
    assert_eq!(out.status.code(), Some(3));
    let cert: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/certificate.json")).unwrap()).unwrap();
    assert!(cert.get("refused").is_some());
}

#[test]
fn sampled_theorem_checks_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = stlab(dir.path(), &["verify-theorems", "--mode", "sampled"]);
    assert_eq!(out.status.code(), Some(3));
}

/// Two separated chains of six points with two pseudolabel mistakes.
fn instance(rule: &str) -> String {
    let xs = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 20.0, 20.5, 21.0, 21.5, 22.0, 22.5];
    let points: Vec<String> = xs.iter().map(|x| format!("[{x}, 0.0]")).collect();
    format!(
        r#"{{"population": {{"dim": 2, "points": [{}], "masses": [{}],
              "labels": [0,0,0,0,0,0,1,1,1,1,1,1], "num_classes": 2}},
            "transform": {{"radius": 1.0}}, "rule": "{rule}",
            "pseudolabels": {{"assignment": [0,1,0,0,0,0,1,1,1,0,1,1], "num_classes": 2}}}}"#,
        points.join(", "),
        vec!["0.0625"; 4].into_iter().chain(vec!["0.09375"; 8]).collect::<Vec<_>>().join(", ")
    )
}

fn verify_instance(rule: &str) -> (Option<i32>, String, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("inst.json"), instance(rule)).unwrap();
    std::fs::write(dir.path().join("v.json"), r#"{"instance": "inst.json"}"#).unwrap();
    let out = stlab(dir.path(), &["verify-theorems", "--config", "v.json"]);
    (out.status.code(), String::from_utf8_lossy(&out.stdout).into_owned(), dir)
}

#[test]
fn metric_overlap_instance_is_refused() {
    let (code, stdout, _dir) = verify_instance("metric");
    assert_eq!(code, Some(3));
    assert!(stdout.contains("Refused"));
}

#[test]
fn witnessed_instance_holds() {
    let (code, stdout, dir) = verify_instance("witnessed");
    assert_eq!(code, Some(0), "{stdout}");
    assert!(!stdout.contains("Violated"));
    assert_eq!(std::fs::read_to_string(dir.path().join("out/reports.jsonl")).unwrap().lines().count(), 5);
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
synth.num_pvs = 600
synth.test_pvs = 80
synth.items_per_community = 15
embed.dim = 8
embed.epochs = 1
walks.walks_per_node = 3
walks.walk_length = 15
category.epochs = 1
category.embed_dim = 8
category.hidden_dim = 8
feature.epochs = 1
feature.embed_dim = 8
feature.hidden_dim = 8
";

fn vid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vid")).args(args).env("VID_LOG", "error").output().expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("run.cfg");
    fs::write(&p, format!("{SMALL}{extra}")).unwrap();
    p.display().to_string()
}

fn error_line(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().expect("stderr has an error line");
    serde_json::from_str(line).expect("error line is JSON")
}

#[test]
fn e2e_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("out");
    let o = vid(&["e2e", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("e2e/report.json")).unwrap()).unwrap();
    assert!(report.is_object());
    assert!(out.join("e2e/report.txt").exists());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().any(|l| l.ends_with("report.json")));
    let leftovers: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().ends_with(".partial"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn seeded_runs_match() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let reports: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let o = vid(&["e2e", "--config", &cfg, "--seed", "7", "--out", out.to_str().unwrap()]);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
            fs::read(out.join("e2e/report.json")).unwrap()
        })
        .collect();
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn missing_input_exits_3_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = vid(&["graph", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let e = error_line(&o);
    assert_eq!(e["stage"], "graph");
    assert_eq!(e["code"], "MissingInput");
    assert!(!out.join("graph").exists());
    assert!(!out.join(".graph.partial").exists());
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "embed.nonsense = 3\n");
    let o = vid(&["synth", "--config", &cfg, "--out", dir.path().join("out").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["code"], "InvalidConfig");
}

#[test]
fn dump_config_reflects_seed() {
    let o = vid(&["synth", "--seed", "9", "--dump-config", "--out", "unused"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().any(|l| l.replace(' ', "") == "run.seed=9"), "{text}");
}

#[test]
fn strict_rejects_malformed_lines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    assert!(vid(&["synth", "--config", &cfg, "--out", out_s]).status.success());
    let train = out.join("synth/train.jsonl");
    let mut text = fs::read_to_string(&train).unwrap();
    text.push_str("{not json\n");
    fs::write(&train, text).unwrap();

    let lenient = vid(&["ingest", "--config", &cfg, "--out", out_s]);
    assert!(lenient.status.success(), "{}", String::from_utf8_lossy(&lenient.stderr));
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("ingest/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["rejected"].as_array().unwrap().len(), 1);

    fs::remove_dir_all(out.join("ingest")).unwrap();
    let strict = vid(&["ingest", "--strict", "--config", &cfg, "--out", out_s]);
    assert_eq!(strict.status.code(), Some(4));
    assert_eq!(error_line(&strict)["code"], "InvalidInput");
    assert!(!out.join("ingest").exists());
}

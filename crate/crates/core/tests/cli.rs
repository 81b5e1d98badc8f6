use std::path::Path;
use std::process::{Command, Output};

use streamgraph::predictor::ModelSet;

fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_streamgraph")).args(args).current_dir(cwd).output().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn write_config(dir: &Path, extra_sink: &str) -> std::path::PathBuf {
    let cfg = dir.join("engine.xmlcfg");
    std::fs::write(
        &cfg,
        format!(
            r#"<engine>
  <paths input="corpus.jsonl" spill_dir="out/spill" archive_dir="out/archive" telemetry="out/telemetry.csv" report="out/report.json"/>
  <schedule seed="1"><segment duration_s="20" rate="10"/></schedule>
  <controller cpu_min="0" cpu_max="100"/>
  <sink {extra_sink}/>
</engine>"#
        ),
    )
    .unwrap();
    cfg
}

#[test]
fn validate_config_names_the_missing_mapping() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.xmlcfg");
    std::fs::write(
        &cfg,
        r#"<engine><paths input="x.jsonl" mapping="nowhere/mapping.xml" spill_dir="s" archive_dir="a" telemetry="t.csv"/>
<schedule seed="1"><segment duration_s="1" rate="1"/></schedule></engine>"#,
    )
    .unwrap();
    let out = bin(&["validate-config", "bad.xmlcfg"], dir.path());
    assert!(!out.status.success());
    assert!(text(&out).contains("nowhere/mapping.xml"), "{}", text(&out));
}

#[test]
fn preset_is_written_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["fit-models", "--preset", "table1g-50", "--out", "m/preset.toml"], dir.path());
    assert!(out.status.success(), "{}", text(&out));
    let m = ModelSet::load(dir.path().join("m/preset.toml")).unwrap();
    assert_eq!((m.cpu.a, m.cpu.b, m.cpu.c), (0.008, 0.0024, 5.29));
}

#[test]
fn unknown_preset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["fit-models", "--preset", "nope"], dir.path());
    assert!(!out.status.success());
}

#[test]
fn report_on_empty_telemetry() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("t.csv"), "").unwrap();
    let out = bin(&["report", "t.csv", "--out-dir", "slices"], dir.path());
    assert!(out.status.success(), "{}", text(&out));
    assert!(dir.path().join("slices/mu_vs_time.csv").exists());
}

#[test]
fn corpus_run_and_report_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let gen = bin(&["gen-corpus", "--out", "corpus.jsonl", "--records", "500", "--seed", "3"], dir.path());
    assert!(gen.status.success(), "{}", text(&gen));
    assert_eq!(std::fs::read_to_string(dir.path().join("corpus.jsonl")).unwrap().lines().count(), 500);

    write_config(dir.path(), "");
    let run = bin(&["run", "engine.xmlcfg"], dir.path());
    assert!(run.status.success(), "{}", text(&run));
    assert!(text(&run).contains("conservation                  ok"), "{}", text(&run));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report["records_in"], 200);

    let rep = bin(&["report", "out/telemetry.csv", "--out-dir", "slices", "--cpu-max", "100"], dir.path());
    assert!(rep.status.success(), "{}", text(&rep));
    let rows = std::fs::read_to_string(dir.path().join("slices/rate_vs_time.csv")).unwrap();
    assert!(rows.lines().count() > 10);
}

#[test]
fn offline_sink_exits_2_and_archives() {
    let dir = tempfile::tempdir().unwrap();
    assert!(bin(&["gen-corpus", "--out", "corpus.jsonl", "--records", "100"], dir.path()).status.success());
    write_config(dir.path(), r#"offline="true" retries="0""#);
    let run = bin(&["run", "engine.xmlcfg"], dir.path());
    assert_eq!(run.status.code(), Some(2), "{}", text(&run));
    assert!(std::fs::read_dir(dir.path().join("out/archive")).unwrap().next().is_some());
}

#[test]
fn fit_models_needs_enough_rows() {
    let dir = tempfile::tempdir().unwrap();
    assert!(bin(&["gen-corpus", "--out", "corpus.jsonl", "--records", "100"], dir.path()).status.success());
    write_config(dir.path(), "");
    assert!(bin(&["run", "engine.xmlcfg"], dir.path()).status.success());
    let fit = bin(&["fit-models", "out/telemetry.csv"], dir.path());
    assert!(!fit.status.success());
    assert!(text(&fit).to_lowercase().contains("rows"), "{}", text(&fit));
}

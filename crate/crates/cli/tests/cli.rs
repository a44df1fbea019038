//! End-to-end command tests against the built binary.

use std::path::Path;
use std::process::Command;

fn netsim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_netsim"))
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, body).unwrap();
    path
}

const MINIMAL: &str = r#"
horizon = 3000
warmup = 300
seed = 5

[topology]
rows = 4
cols = 4

[traffic]
rate = 0.01
"#;

#[test]
fn run_writes_all_outputs_and_is_deterministic() {
    let dir = std::env::temp_dir().join("netsim-cli-run");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = write_config(&dir, MINIMAL);
    for pass in ["a", "b"] {
        let out = netsim()
            .args(["run", "--config"])
            .arg(&cfg)
            .args(["--out"])
            .arg(dir.join(pass))
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["metrics.json", "messages.csv", "series.csv", "report.txt"] {
        let a = std::fs::read(dir.join("a").join(f)).unwrap();
        let b = std::fs::read(dir.join("b").join(f)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{f} differs between identical runs");
    }
    // The config and seed are embedded in every output.
    let metrics = std::fs::read_to_string(dir.join("a/metrics.json")).unwrap();
    assert!(metrics.contains("\"seed\": 5"));
    let csv = std::fs::read_to_string(dir.join("a/messages.csv")).unwrap();
    assert!(csv.starts_with("# seed=5 config="));
}

#[test]
fn invalid_config_lists_all_violations() {
    let dir = std::env::temp_dir().join("netsim-cli-bad");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = write_config(
        &dir,
        r#"
horizon = 10
warmup = 20

[topology]
rows = 1
cols = 1

[traffic]
rate = 7.0
"#,
    );
    let out = netsim().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("invalid dimensions"));
    assert!(err.contains("rate"));
    assert!(err.contains("horizon"));
}

#[test]
fn ds_with_one_vc_exits_mechanism_unavailable() {
    let dir = std::env::temp_dir().join("netsim-cli-ds1");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = write_config(
        &dir,
        r#"
mechanism = "ds"
horizon = 1000
warmup = 0

[topology]
rows = 4
cols = 4
vcs_per_channel = 1
"#,
    );
    let out = netsim().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn compare_runs_available_mechanisms_when_one_is_unavailable() {
    let dir = std::env::temp_dir().join("netsim-cli-cmp");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = write_config(
        &dir,
        r#"
horizon = 3000
warmup = 300
seed = 5

[topology]
rows = 4
cols = 4
vcs_per_channel = 1

[traffic]
rate = 0.005
"#,
    );
    let out = netsim()
        .args(["compare", "--config"])
        .arg(&cfg)
        .args(["--mechanisms", "dbr,ds,sr", "--out"])
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(dir.join("out/report.txt")).unwrap();
    assert!(report.contains("dbr"));
    assert!(report.contains("sr"));
    assert!(report.contains("unavailable: ds"));
    let csv = std::fs::read_to_string(dir.join("out/comparison.csv")).unwrap();
    // Normalized-to-baseline column is 1.0 on the baseline row.
    let dbr_row: Vec<&str> =
        csv.lines().find(|l| l.starts_with("dbr,")).unwrap().split(',').collect();
    assert_eq!(dbr_row[8], "1");
}

#[test]
fn unknown_mechanism_is_a_config_error() {
    let dir = std::env::temp_dir().join("netsim-cli-unk");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = write_config(&dir, MINIMAL);
    let out = netsim()
        .args(["compare", "--config"])
        .arg(&cfg)
        .args(["--mechanisms", "dbr,frobnicate"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("frobnicate"));
}

#[test]
fn trace_gen_is_deterministic_and_loadable() {
    let dir = std::env::temp_dir().join("netsim-cli-trace");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    for pass in ["a.trace", "b.trace"] {
        let out = netsim()
            .args(["trace-gen", "--profile", "lu", "--horizon", "4000", "--seed", "9", "--out"])
            .arg(dir.join(pass))
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    let a = std::fs::read(dir.join("a.trace")).unwrap();
    assert_eq!(a, std::fs::read(dir.join("b.trace")).unwrap());
    // The generated file passes trace validation by replaying it.
    let cfg = write_config(
        &dir,
        &format!(
            r#"
horizon = 5000
warmup = 0

[topology]
rows = 7
cols = 7

[traffic]
pattern = "trace"
trace_path = "{}"
"#,
            dir.join("a.trace").display()
        ),
    );
    let out = netsim()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--out"])
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_profile_lists_available_ones() {
    let out = netsim()
        .args(["trace-gen", "--profile", "nope", "--out", "/tmp/nope.trace"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("water-nsq"));
}

#[test]
fn check_tables_reports_cyclic_dimension_order() {
    let dir = std::env::temp_dir().join("netsim-cli-check");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = write_config(
        &dir,
        r#"
routing = "dimension_order"

[topology]
rows = 4
cols = 4
"#,
    );
    let out = netsim().args(["check-tables", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("NOT deadlock-free"));
    assert!(text.contains("witness"));
}

#[test]
fn sweep_emits_load_curve() {
    let dir = std::env::temp_dir().join("netsim-cli-sweep");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = write_config(&dir, MINIMAL);
    let out = netsim()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .args(["--rates", "0.002,0.01", "--out"])
        .arg(dir.join("out"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.join("out/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("0.002,"));
}

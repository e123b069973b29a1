use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn twobp(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twobp"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("TWOBP_PRECISION")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], out: &Path) -> String {
    let o = twobp(args, out);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

/// Column `name` of every data row of a CSV file.
fn column(path: &Path, name: &str) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let idx = lines.next().unwrap().split(',').position(|c| c == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().to_string()).collect()
}

#[test]
fn simulate_1f1b_with_2bp() {
    let dir = TempDir::new().unwrap();
    let stdout = ok(&["simulate", "--kind", "1f1b-1", "--ranks", "4", "--two-bp"], dir.path());
    assert!(stdout.contains("bubble_ratio 0.2\n"), "{stdout}");
    let report = dir.path().join("report.csv");
    assert_eq!(column(&report, "two_bp"), ["false", "true"]);
    assert_eq!(column(&report, "bubble_ratio").last().unwrap(), "0.2");
    assert_eq!(column(&report, "gain").last().unwrap(), "1.4");
}

#[test]
fn single_rank_has_no_bubble() {
    let dir = TempDir::new().unwrap();
    ok(&["simulate", "--kind", "gpipe", "--ranks", "1"], dir.path());
    let bubble: f64 = column(&dir.path().join("report.csv"), "bubble_ratio")[0].parse().unwrap();
    assert_eq!(bubble, 0.0);
}

#[test]
fn svg_has_one_lane_per_rank_and_one_block_per_event() {
    let dir = TempDir::new().unwrap();
    ok(&["simulate", "--kind", "gpipe", "--ranks", "3", "--two-bp"], dir.path());
    let events = fs::read_to_string(dir.path().join("trace.jsonl")).unwrap().lines().count();
    let svg = fs::read_to_string(dir.path().join("schedule.svg")).unwrap();
    assert_eq!(svg.matches(r#"class="lane""#).count(), 3);
    assert_eq!(svg.matches(r#"class="event""#).count(), events);
    for op in ["Forward", "BackwardP1", "BackwardP2"] {
        assert!(svg.contains(&format!(r#"data-op="{op}""#)), "{op}");
    }
}

#[test]
fn gantt_rerenders_a_trace() {
    let dir = TempDir::new().unwrap();
    ok(&["simulate", "--kind", "1f1b-2", "--ranks", "2"], dir.path());
    let again = dir.path().join("again");
    let trace = dir.path().join("trace.jsonl");
    ok(&["gantt", "--trace", trace.to_str().unwrap()], &again);
    let svg = fs::read_to_string(again.join("schedule.svg")).unwrap();
    assert_eq!(svg.matches(r#"data-op="BackwardFull""#).count(), 8);
}

#[test]
fn training_is_deterministic() {
    let args = ["train", "--kind", "1f1b-1", "--ranks", "2", "--steps", "4", "--seed", "11", "--width", "8", "--blocks", "4"];
    let checksums = |s: &str| -> Vec<String> { s.lines().filter(|l| l.contains("checksum")).map(String::from).collect() };
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let first = checksums(&ok(&args, a.path()));
    assert_eq!(first.len(), 2);
    assert_eq!(first, checksums(&ok(&args, b.path())));
    assert_eq!(
        fs::read_to_string(a.path().join("losses.csv")).unwrap(),
        fs::read_to_string(b.path().join("losses.csv")).unwrap()
    );
    assert_eq!(column(&a.path().join("losses.csv"), "step").len(), 4);
}

#[test]
fn single_rank_training_barely_idles() {
    let dir = TempDir::new().unwrap();
    ok(&["train", "--kind", "naive", "--ranks", "1", "--steps", "3", "--blocks", "2"], dir.path());
    let bubble: f64 = column(&dir.path().join("report.csv"), "bubble_ratio")[0].parse().unwrap();
    assert!(bubble < 0.05, "{bubble}");
}

#[test]
fn compare_reports_both_runs() {
    let dir = TempDir::new().unwrap();
    let stdout = ok(
        &["train", "--kind", "gpipe", "--ranks", "2", "--steps", "2", "--repeats", "1", "--compare-2bp"],
        dir.path(),
    );
    assert!(stdout.contains("throughput gain"), "{stdout}");
    let gain = column(&dir.path().join("report.csv"), "gain");
    assert!(gain[0].is_empty() && gain[1].parse::<f64>().unwrap() > 0.0, "{gain:?}");
}

#[test]
fn verify_passes_and_catches_injected_fault() {
    let dir = TempDir::new().unwrap();
    ok(&["verify", "--ranks", "2"], dir.path());

    let o = twobp(&["verify", "--ranks", "2", "--inject-fault", "rmsnorm-p2-sign"], dir.path());
    assert!(!o.status.success());
    let stdout = String::from_utf8_lossy(&o.stdout);
    let failed: Vec<_> = stdout.lines().filter(|l| l.starts_with("FAIL")).collect();
    assert!(failed.iter().any(|l| l.contains("RMSNorm") && l.contains("backward-p2")), "{stdout}");
    assert!(failed.iter().all(|l| !l.contains("Linear")), "{stdout}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("RMSNorm"));
}

#[test]
fn verify_refuses_single_precision() {
    let dir = TempDir::new().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_twobp"))
        .args(["verify", "--out"])
        .arg(dir.path())
        .env("TWOBP_PRECISION", "single")
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("double"));
}

#[test]
fn config_file_with_flag_override() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"kind": "1f1b-1", "ranks": 2, "two_bp": true}"#).unwrap();
    let cfg = cfg.to_str().unwrap();

    ok(&["simulate", "--config", cfg], dir.path());
    assert_eq!(column(&dir.path().join("report.csv"), "P"), ["2", "2"]);

    ok(&["simulate", "--config", cfg, "--ranks", "4", "--two-bp", "false"], dir.path());
    let report = dir.path().join("report.csv");
    assert_eq!(column(&report, "P"), ["4"]);
    assert_eq!(column(&report, "bubble_ratio"), [(3.0f64 / 7.0).to_string()]);
}

#[test]
fn invalid_configuration_exits_nonzero() {
    let dir = TempDir::new().unwrap();
    let o = twobp(&["simulate", "--kind", "1f1b-2-memeff", "--ranks", "2"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("2BP"));
}

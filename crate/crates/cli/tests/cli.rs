use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gs6::network::{NetworkConfig, Task};

fn gs6(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gs6"))
        .args(args)
        .env_remove("GS6_PRECISION")
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &Path, task: Task, classes: usize) -> String {
    let mut c = NetworkConfig::toy(task, classes);
    c.embed_width = 8;
    c.stages[0].width = 8;
    c.stages[1].width = 16;
    c.stages[0].state = 4;
    c.stages[1].state = 4;
    let p = dir.join("net.json");
    fs::write(&p, serde_json::to_string(&c).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn scan_check_passes_all_suites() {
    let o = gs6(&["scan-check", "--cases", "10"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    for suite in ["parallel-scan", "repeat-equivalence", "attention-matrix", "zoh-rk4"] {
        assert!(out.lines().any(|l| l.starts_with(suite) && l.ends_with("ok")), "{out}");
    }
}

#[test]
fn scan_check_handles_length_one() {
    let o = gs6(&["scan-check", "--sizes", "L=1", "--cases", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
}

#[test]
fn scan_check_reports_an_injected_fault() {
    let o = gs6(&["scan-check", "--cases", "5", "--inject-fault", "zoh-rk4"]);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.starts_with("zoh-rk4") && l.ends_with("FAILED")), "{out}");
    assert!(out.contains("failing case"), "{out}");
}

#[test]
fn serialize_ranks_a_hand_written_file() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("pts.txt");
    fs::write(&input, "# three points\n0 2 1\n1 0 0\n2 1 0\n").unwrap();
    let o = gs6(&["serialize", "--input", input.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("point_index,rank_z,rank_y,rank_x"));
    let rows: Vec<&str> = lines.take(3).collect();
    assert_eq!(rows, ["0,2,2,0", "1,0,0,1", "2,1,1,2"]);
}

#[test]
fn serialize_curve_depends_on_grid_size() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("pts.txt");
    let text: String = (0..200)
        .map(|i| {
            let t = i as f64 * 0.37;
            format!("{} {} {}\n", (t.sin() * 0.1), ((t * 1.3).cos() * 0.1), ((t * 0.7).sin() * 0.1))
        })
        .collect();
    fs::write(&input, text).unwrap();
    let run = |grid: &str| {
        let out = dir.path().join(format!("r{grid}.csv"));
        let o = gs6(&[
            "serialize",
            "--input",
            input.to_str().unwrap(),
            "--method",
            "hilbert",
            "--grid-size",
            grid,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        fs::read_to_string(out).unwrap()
    };
    let (a, b) = (run("0.01"), run("0.02"));
    assert!(a.starts_with("point_index,rank_curve\n"));
    assert_ne!(a, b);
}

#[test]
fn serialize_warns_about_unused_grid_size() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("pts.txt");
    fs::write(&input, "0 0 0\n1 1 1\n").unwrap();
    let o = gs6(&["serialize", "--input", input.to_str().unwrap(), "--grid-size", "0.1"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("--grid-size is ignored by --method axes"), "{}", stderr(&o));
}

#[test]
fn malformed_point_file_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.txt");
    fs::write(&input, "0 0 0\n1 1 1\n2 x 2\n").unwrap();
    let o = gs6(&["serialize", "--input", input.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("bad.txt") && err.contains('3'), "{err}");
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(gs6(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(gs6(&["train", "--epochs", "many"]).status.code(), Some(2));
}

#[test]
fn timing_writes_rows_and_slope() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.csv");
    let o = gs6(&["timing", "--lengths", "64,128,256", "--repeats", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "L,seconds");
    assert_eq!(lines.len(), 4);
    let slope = stdout(&o).lines().find_map(|l| l.strip_prefix("slope ").map(str::to_string)).unwrap();
    assert_eq!(slope.split('.').nth(1).map(str::len), Some(2), "{slope}");
    slope.parse::<f64>().unwrap();
}

#[test]
fn gradcheck_detects_an_injected_fault() {
    let ok = gs6(&["gradcheck", "--per-group", "1", "--points", "16"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    let bad = gs6(&["gradcheck", "--per-group", "1", "--points", "16", "--inject-fault"]);
    assert_eq!(bad.status.code(), Some(1), "{}", stdout(&bad));
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), Task::Segmentation, 2);
    let ckpt = dir.path().join("ckpt");
    let log = dir.path().join("log.csv");
    let o = gs6(&[
        "train",
        "--task",
        "segmentation",
        "--samples",
        "2",
        "--epochs",
        "3",
        "--config",
        &cfg,
        "--log",
        log.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let log = fs::read_to_string(log).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,loss,metric"));
    assert_eq!(log.lines().count(), 4);
    for f in ["params.bin", "manifest.json", "run.json"] {
        assert!(ckpt.join(f).exists(), "{f}");
    }
    let e = gs6(&["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(e.status.code(), Some(0), "{}", stderr(&e));
    let m: serde_json::Value = serde_json::from_str(stdout(&e).trim()).unwrap();
    assert!(m["overall_accuracy"].as_f64().is_some_and(|v| (0.0..=1.0).contains(&v)));
}

#[test]
fn train_reaches_a_target_or_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), Task::Recognition, 3);
    let common = ["train", "--samples", "2", "--batch-size", "2", "--config", &cfg];
    let hit = gs6(&[&common[..], &["--epochs", "150", "--target", "0.9"]].concat());
    assert_eq!(hit.status.code(), Some(0), "{}{}", stdout(&hit), stderr(&hit));
    let miss = gs6(&[&common[..], &["--epochs", "1", "--target", "1.01"]].concat());
    assert_eq!(miss.status.code(), Some(1));
    assert!(stdout(&miss).contains("not reached"));
}

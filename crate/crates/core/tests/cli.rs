//! Binary-level tests: exit codes, error line format, output files,
//! determinism of written artifacts, and the output-dir override.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dualfed::config::{parse_config, write_config};

const BIN: &str = env!("CARGO_BIN_EXE_dualfed");

/// Small experiment that finishes in well under a second.
const TINY: &str = "
seed = 5
data.num_classes = 8
data.samples_per_class = 20
data.test_per_class = 4
partition.num_clients = 2
train.rounds = 3
stage.fixed_m = 2
server.text_steps = 4
";

fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn binary")
}

fn write_tiny(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("tiny.cfg");
    let body = format!(
        "{TINY}\noutput_dir = {}\n{extra}",
        dir.join("out").display()
    );
    fs::write(&path, body).expect("write config");
    path
}

fn stderr_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).trim_end().to_string()
}

#[test]
fn run_writes_artifacts_and_reruns_byte_identical() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = write_tiny(dir.path(), "");
    let first = run(&["run", cfg.to_str().unwrap()], &[]);
    assert!(first.status.success(), "stderr: {}", stderr_line(&first));

    let out = dir.path().join("out");
    for name in ["metrics.csv", "summary.txt", "checkpoint.bin"] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    let metrics_a = fs::read(out.join("metrics.csv")).unwrap();

    let second = run(&["run", cfg.to_str().unwrap()], &[]);
    assert!(second.status.success());
    let metrics_b = fs::read(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics_a, metrics_b, "rerun changed metrics.csv");

    // Parallel clients produce the same bytes as the serial run.
    let cfg_par = write_tiny(dir.path(), "parallelism = 2\n");
    let third = run(&["run", cfg_par.to_str().unwrap()], &[]);
    assert!(third.status.success());
    let metrics_c = fs::read(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics_a, metrics_c, "parallelism changed metrics.csv");

    // The header plus one line per round.
    let text = String::from_utf8(metrics_a).unwrap();
    assert_eq!(text.lines().count(), 1 + 3);
    assert!(text.starts_with("round,stage,"));
}

#[test]
fn summary_echoes_a_reparsable_config() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg_path = write_tiny(dir.path(), "");
    let out = run(&["run", cfg_path.to_str().unwrap()], &[]);
    assert!(out.status.success());

    let summary = fs::read_to_string(dir.path().join("out/summary.txt")).unwrap();
    let reparsed = parse_config(&summary).expect("summary must parse as a config");
    let original = parse_config(&fs::read_to_string(&cfg_path).unwrap()).unwrap();
    assert_eq!(
        write_config(&reparsed),
        write_config(&original),
        "summary config echo drifted from the input config"
    );
}

#[test]
fn missing_config_exits_2_with_io_error_line() {
    let out = run(&["run", "/nonexistent/path.cfg"], &[]);
    assert_eq!(out.status.code(), Some(2));
    let line = stderr_line(&out);
    assert!(line.starts_with("error[io]:"), "got: {line}");
    assert!(!line.contains('\n'), "error must be a single line");
}

#[test]
fn unknown_key_exits_1_with_validation_error_line() {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("bad.cfg");
    fs::write(&path, "no.such.key = 1\n").unwrap();
    let out = run(&["run", path.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(1));
    let line = stderr_line(&out);
    assert!(line.starts_with("error[validation]:"), "got: {line}");
}

#[test]
fn invalid_value_exits_1() {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("bad.cfg");
    fs::write(&path, "tau = -0.5\n").unwrap();
    let out = run(&["run", path.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_line(&out).starts_with("error[validation]:"));
}

#[test]
fn env_var_overrides_output_dir() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = write_tiny(dir.path(), "");
    let override_dir = dir.path().join("elsewhere");
    let out = run(
        &["run", cfg.to_str().unwrap()],
        &[("DUALFED_OUTPUT_DIR", override_dir.to_str().unwrap())],
    );
    assert!(out.status.success());
    assert!(override_dir.join("metrics.csv").exists());
    assert!(!dir.path().join("out/metrics.csv").exists());
}

#[test]
fn partition_emits_label_counts_csv() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = write_tiny(dir.path(), "");
    let out = run(&["partition", cfg.to_str().unwrap()], &[]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("client_id,class_id,count"));
    let mut total = 0usize;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 3, "row: {line}");
        let client: usize = cells[0].parse().unwrap();
        let class: usize = cells[1].parse().unwrap();
        assert!(client < 2);
        assert!(class < 4, "novel class {class} leaked into a shard");
        total += cells[2].parse::<usize>().unwrap();
    }
    // 8 classes, half base, 20 train samples each.
    assert_eq!(total, 4 * 20);
}

#[test]
fn compare_prints_one_row_per_variant() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = write_tiny(dir.path(), "");
    let out = run(
        &[
            "compare",
            cfg.to_str().unwrap(),
            "--variants",
            "base,sft_only,decoupled_off",
        ],
        &[],
    );
    assert!(out.status.success(), "stderr: {}", stderr_line(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().next().unwrap().starts_with("variant"));
    for name in ["base", "sft_only", "decoupled_off"] {
        assert!(
            text.lines().any(|l| l.starts_with(name)),
            "missing row for {name}\n{text}"
        );
    }
}

#[test]
fn unknown_variant_exits_1() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = write_tiny(dir.path(), "");
    let out = run(
        &[
            "compare",
            cfg.to_str().unwrap(),
            "--variants",
            "no_such_variant",
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_subset_passes_and_reports() {
    let out = run(&["gradcheck", "--which", "ce,text", "--seed", "1"], &[]);
    assert!(out.status.success(), "stderr: {}", stderr_line(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2, "{text}");
    assert!(
        lines[0].starts_with("ce") && lines[0].contains("max_rel_err"),
        "{text}"
    );
    assert!(lines[1].starts_with("text"), "{text}");
    assert!(lines.iter().all(|l| l.ends_with("pass")), "{text}");
}

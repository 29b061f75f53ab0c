//! Command-line entry points: run experiments, inspect partitions, verify
//! gradients, and compare method variants. All outputs are plain files or
//! stdout; exit codes follow 0 = success, 1 = validation error, 2 = runtime
//! or I/O error, 3 = gradient check over tolerance.

use clap::{Parser, Subcommand};
use dualfed::config::{apply_variant, fmt_sig, parse_config, write_config, RunConfig};
use dualfed::evaluation::{metrics_csv, RoundMetrics};
use dualfed::federation::{build_clients, run_experiment, wire, ExperimentOutcome};
use dualfed::gradcheck::{run_check, CheckKind};
use dualfed::Error;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

/// Environment override for every subcommand's output directory.
const OUTPUT_DIR_ENV: &str = "DUALFED_OUTPUT_DIR";
/// Max relative error accepted by the gradient check.
const GRAD_TOLERANCE: f64 = 1e-4;
/// Random instances per objective in the gradient check.
const GRAD_INSTANCES: usize = 50;

#[derive(Parser)]
#[command(
    name = "dualfed",
    version,
    about = "Federated dual-encoder learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a federated experiment and write metrics, summary, and checkpoint.
    Run {
        /// Path to a `key = value` config file.
        config: PathBuf,
    },
    /// Verify analytic gradients of every objective against finite differences.
    Gradcheck {
        /// Comma-separated objectives (default: all of
        /// ce,grpo,dr_grpo,gmpo,dapo,liteppo,text).
        #[arg(long, value_delimiter = ',')]
        which: Vec<String>,
        /// Seed for the random instances.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the per-client class histogram of a config's partition as CSV.
    Partition {
        /// Path to a `key = value` config file.
        config: PathBuf,
    },
    /// Run named variants of one config and tabulate final metrics.
    Compare {
        /// Path to the base config file.
        config: PathBuf,
        /// Comma-separated variant names (e.g. sft_only,sft_rl,decoupled_off).
        #[arg(long, value_delimiter = ',', required = true)]
        variants: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config } => cmd_run(&config),
        Command::Gradcheck { which, seed } => cmd_gradcheck(&which, seed),
        Command::Partition { config } => cmd_partition(&config),
        Command::Compare { config, variants } => cmd_compare(&config, &variants),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let class = if matches!(e, Error::Io(_)) {
                "io"
            } else if e.is_validation() {
                "validation"
            } else {
                "runtime"
            };
            eprintln!("error[{class}]: {}", error_line(&e));
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

/// Flatten an error and its source chain onto one line.
fn error_line(e: &Error) -> String {
    let mut s = e.to_string();
    let mut src = std::error::Error::source(e);
    while let Some(inner) = src {
        let msg = inner.to_string();
        // io::Error and friends repeat their source in their own Display.
        if !s.contains(&msg) {
            s.push_str(": ");
            s.push_str(&msg);
        }
        src = inner.source();
    }
    s.replace('\n', " ")
}

/// Read and parse a config file, honoring the output-directory override.
fn load_config(path: &Path) -> Result<RunConfig, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let mut cfg = parse_config(&text)?;
    if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
        if !dir.is_empty() {
            cfg.output_dir = PathBuf::from(dir);
        }
    }
    Ok(cfg)
}

fn opt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "na".into(), |x| fmt_sig(x, 6))
}

fn metric_comment(label: &str, m: &RoundMetrics) -> String {
    format!(
        "# {label}: train_acc_mean = {}, local_acc = {}, base_acc = {}, novel_acc = {}, hm = {}\n",
        fmt_sig(m.train_acc_mean, 6),
        opt_metric(m.local_acc),
        opt_metric(m.base_acc),
        opt_metric(m.novel_acc),
        opt_metric(m.hm),
    )
}

/// The summary file: human-readable run facts as comment lines, then the
/// effective config. The whole file re-parses as a config.
fn summary_text(cfg: &RunConfig, outcome: &ExperimentOutcome, wall_s: f64) -> String {
    let mut s = String::from("# summary\n");
    s.push_str(&format!("# rounds = {}\n", outcome.metrics.len()));
    s.push_str(&format!(
        "# transition_round = {}\n",
        outcome
            .transition_round
            .map_or_else(|| "none".into(), |r| r.to_string())
    ));
    s.push_str(&format!("# wall_time_s = {}\n", fmt_sig(wall_s, 6)));
    s.push_str(&format!("# client_sizes = {:?}\n", outcome.client_sizes));
    s.push_str(&metric_comment("zero_shot", &outcome.zero_shot));
    if let Some(last) = outcome.metrics.last() {
        s.push_str(&metric_comment("final", last));
    }
    s.push_str("\n# config\n");
    s.push_str(&write_config(cfg));
    s
}

fn cmd_run(config_path: &Path) -> Result<u8, Error> {
    let cfg = load_config(config_path)?;
    cfg.experiment.validate()?;
    let started = Instant::now();
    let outcome = run_experiment(&cfg.experiment)?;
    let wall_s = started.elapsed().as_secs_f64();

    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(
        cfg.output_dir.join("metrics.csv"),
        metrics_csv(&outcome.metrics, cfg.experiment.data.num_domains),
    )?;
    std::fs::write(
        cfg.output_dir.join("summary.txt"),
        summary_text(&cfg, &outcome, wall_s),
    )?;
    std::fs::write(
        cfg.output_dir.join("checkpoint.bin"),
        wire::encode_checkpoint(&outcome.final_image_adapters, &outcome.final_text_adapters),
    )?;

    let last = outcome.metrics.last().unwrap_or(&outcome.zero_shot);
    println!(
        "wrote {} (rounds = {}, transition = {}, wall = {}s)",
        cfg.output_dir.display(),
        outcome.metrics.len(),
        outcome
            .transition_round
            .map_or_else(|| "none".into(), |r| r.to_string()),
        fmt_sig(wall_s, 3),
    );
    println!(
        "final: base = {}, novel = {}, hm = {}",
        opt_metric(last.base_acc),
        opt_metric(last.novel_acc),
        opt_metric(last.hm),
    );
    Ok(0)
}

fn cmd_gradcheck(which: &[String], seed: u64) -> Result<u8, Error> {
    let kinds: Vec<CheckKind> = if which.is_empty() {
        CheckKind::ALL.to_vec()
    } else {
        which
            .iter()
            .map(|s| CheckKind::parse(s))
            .collect::<Result<_, _>>()?
    };
    let mut over_tolerance = false;
    for kind in kinds {
        let err = run_check(kind, seed, GRAD_INSTANCES)?;
        let status = if err < GRAD_TOLERANCE { "pass" } else { "FAIL" };
        println!(
            "{:<8} max_rel_err = {:.3e}  ({GRAD_INSTANCES} instances)  {status}",
            kind.name(),
            err,
        );
        over_tolerance |= err >= GRAD_TOLERANCE;
    }
    Ok(if over_tolerance { 3 } else { 0 })
}

fn cmd_partition(config_path: &Path) -> Result<u8, Error> {
    let cfg = load_config(config_path)?;
    cfg.experiment.validate()?;
    let (_, _, clients) = build_clients(&cfg.experiment)?;
    let mut out = String::from("client_id,class_id,count\n");
    for client in &clients {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for sample in &client.data {
            *counts.entry(sample.label).or_default() += 1;
        }
        for (class, count) in counts {
            out.push_str(&format!("{},{},{}\n", client.id, class, count));
        }
    }
    print!("{out}");
    Ok(0)
}

fn cmd_compare(config_path: &Path, variants: &[String]) -> Result<u8, Error> {
    let cfg = load_config(config_path)?;
    cfg.experiment.validate()?;
    println!(
        "{:<16} {:>10} {:>10} {:>10}",
        "variant", "base", "novel", "hm"
    );
    let mut worst: u8 = 0;
    for name in variants {
        let run = apply_variant(&cfg.experiment, name).and_then(|c| {
            c.validate()?;
            run_experiment(&c)
        });
        match run {
            Ok(outcome) => {
                let last = outcome.metrics.last().unwrap_or(&outcome.zero_shot);
                println!(
                    "{:<16} {:>10} {:>10} {:>10}",
                    name,
                    opt_metric(last.base_acc),
                    opt_metric(last.novel_acc),
                    opt_metric(last.hm),
                );
            }
            Err(e) => {
                println!("{:<16} error: {}", name, error_line(&e));
                worst = worst.max(if e.is_validation() { 1 } else { 2 });
            }
        }
    }
    Ok(worst)
}

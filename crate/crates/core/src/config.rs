//! Flat dotted-key experiment configuration.
//!
//! The on-disk format is one `key = value` pair per line with `#` comments,
//! e.g. `rl.sigma = 0.1`. Unknown keys are errors, not warnings, so typos
//! fail loudly. `write_config` emits the canonical form of every key; a
//! written config re-parses to an equal [`RunConfig`].

use crate::data::{Scheme, Within};
use crate::error::{Error, Result};
use crate::federation::{ExperimentConfig, Schedule};
use crate::local_training::{RefMode, RlVariant};
use std::fmt::Write as _;
use std::path::PathBuf;

/// A full run: the experiment parameters plus where outputs go.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            experiment: ExperimentConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "key '{key}': expected true or false, got '{value}'"
        ))),
    }
}

fn parse_opt<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse_num(key, value).map(Some)
    }
}

/// Parse the dotted-key format. Later lines override earlier ones; any key
/// not recognized is an error.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    // The partition scheme is assembled from up to three keys.
    let mut scheme_name: Option<String> = None;
    let mut alpha: Option<f64> = None;
    let mut within_name: Option<String> = None;
    let mut within_alpha: Option<f64> = None;

    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if value.is_empty() {
            return Err(Error::Config(format!("key '{key}': empty value")));
        }
        let e = &mut cfg.experiment;
        match key {
            "seed" => e.seed = parse_num(key, value)?,
            "data.num_classes" => e.data.num_classes = parse_num(key, value)?,
            "data.base_fraction" => e.data.base_fraction = parse_num(key, value)?,
            "data.samples_per_class" => e.data.samples_per_class = parse_num(key, value)?,
            "data.test_per_class" => e.data.test_per_class = parse_num(key, value)?,
            "data.noise_scale" => e.data.noise_scale = parse_num(key, value)?,
            "data.num_domains" => e.data.num_domains = parse_num(key, value)?,
            "data.domain_mix" => e.data.domain_mix = parse_num(key, value)?,
            "data.domain_shift_norm" => e.data.domain_shift_norm = parse_num(key, value)?,
            "data.dim" => e.data.dim = parse_num(key, value)?,
            "partition.scheme" => scheme_name = Some(value.to_string()),
            "partition.alpha" => alpha = Some(parse_num(key, value)?),
            "partition.within" => within_name = Some(value.to_string()),
            "partition.within_alpha" => within_alpha = Some(parse_num(key, value)?),
            "partition.num_clients" => e.partition.num_clients = parse_num(key, value)?,
            "partition.shots" => e.partition.shots = parse_opt(key, value)?,
            "model.dim" => e.dims.dim = parse_num(key, value)?,
            "model.layers" => e.dims.n_layers = parse_num(key, value)?,
            "model.rank" => e.dims.rank = parse_num(key, value)?,
            "model.lora_start_layer" => e.dims.lora_start_layer = parse_num(key, value)?,
            "model.init_scale" => e.dims.init_scale = parse_num(key, value)?,
            "tau" => e.tau = parse_num(key, value)?,
            "train.rounds" => e.rounds = parse_num(key, value)?,
            "train.lr" => e.lr = parse_num(key, value)?,
            "train.batch_size" => e.batch_size = parse_num(key, value)?,
            "train.sft_epochs" => e.sft_epochs = parse_num(key, value)?,
            "train.schedule" => e.schedule = Schedule::parse(value)?,
            "rl.group_size" => e.rl.group_size = parse_num(key, value)?,
            "rl.sigma" => e.rl.sigma = parse_num(key, value)?,
            "rl.eps_clip" => {
                e.rl.eps_clip = parse_num(key, value)?;
                e.rl.eps_low = e.rl.eps_clip;
                e.rl.eps_high = e.rl.eps_clip;
            }
            "rl.eps_low" => e.rl.eps_low = parse_num(key, value)?,
            "rl.eps_high" => e.rl.eps_high = parse_num(key, value)?,
            "rl.beta" => e.rl.beta = parse_num(key, value)?,
            "rl.variant" => e.rl.variant = RlVariant::parse(value)?,
            "rl.epochs" => e.rl.epochs = parse_num(key, value)?,
            "rl.reference_mode" => e.ref_mode = RefMode::parse(value)?,
            "stage.eps_acc" => e.eps_acc = parse_num(key, value)?,
            "stage.t_r" => e.t_r = parse_num(key, value)?,
            "stage.fixed_m" => {
                e.fixed_m = if value == "auto" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "server.decoupled" => e.decoupled = parse_bool(key, value)?,
            "server.text_steps" => e.server_text_steps = parse_num(key, value)?,
            "upload.ratio" => e.upload.ratio = parse_num(key, value)?,
            "upload.per_class_cap" => e.upload.per_class_cap = parse_opt(key, value)?,
            "upload.groups" => e.upload.groups = parse_opt(key, value)?,
            "upload.noise_sigma" => e.upload.noise_sigma = parse_opt(key, value)?,
            "parallelism" => e.parallelism = parse_num(key, value)?,
            "output_dir" => cfg.output_dir = PathBuf::from(value),
            other => {
                return Err(Error::Config(format!("unknown config key '{other}'")));
            }
        }
    }

    if let Some(name) = &scheme_name {
        cfg.experiment.partition.scheme = match name.as_str() {
            "iid" => Scheme::Iid,
            "dirichlet" => Scheme::Dirichlet(alpha.unwrap_or(0.5)),
            "noniid_disjoint" => Scheme::NoniidDisjoint,
            "feature_shift" => {
                let within = match within_name.as_deref().unwrap_or("iid") {
                    "one" => Within::One,
                    "iid" => Within::Iid,
                    "dirichlet" => Within::Dirichlet(within_alpha.unwrap_or(0.5)),
                    other => {
                        return Err(Error::Config(format!(
                            "unknown partition.within '{other}' (expected one|iid|dirichlet)"
                        )))
                    }
                };
                Scheme::FeatureShift(within)
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown partition.scheme '{other}' (expected iid|dirichlet|noniid_disjoint|feature_shift)"
                )))
            }
        };
    } else if let Some(a) = alpha {
        // alpha alone retunes the default dirichlet scheme.
        if let Scheme::Dirichlet(_) = cfg.experiment.partition.scheme {
            cfg.experiment.partition.scheme = Scheme::Dirichlet(a);
        }
    }

    Ok(cfg)
}

fn opt_str<T: std::fmt::Display>(v: &Option<T>) -> String {
    match v {
        Some(x) => x.to_string(),
        None => "none".into(),
    }
}

/// Emit the canonical form of every key; parsing the result reproduces the
/// config exactly.
pub fn write_config(cfg: &RunConfig) -> String {
    let e = &cfg.experiment;
    let mut s = String::new();
    let kv = |s: &mut String, k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    kv(&mut s, "seed", e.seed.to_string());
    kv(&mut s, "data.num_classes", e.data.num_classes.to_string());
    kv(
        &mut s,
        "data.base_fraction",
        e.data.base_fraction.to_string(),
    );
    kv(
        &mut s,
        "data.samples_per_class",
        e.data.samples_per_class.to_string(),
    );
    kv(
        &mut s,
        "data.test_per_class",
        e.data.test_per_class.to_string(),
    );
    kv(&mut s, "data.noise_scale", e.data.noise_scale.to_string());
    kv(&mut s, "data.num_domains", e.data.num_domains.to_string());
    kv(&mut s, "data.domain_mix", e.data.domain_mix.to_string());
    kv(
        &mut s,
        "data.domain_shift_norm",
        e.data.domain_shift_norm.to_string(),
    );
    kv(&mut s, "data.dim", e.data.dim.to_string());
    match e.partition.scheme {
        Scheme::Iid => kv(&mut s, "partition.scheme", "iid".into()),
        Scheme::Dirichlet(a) => {
            kv(&mut s, "partition.scheme", "dirichlet".into());
            kv(&mut s, "partition.alpha", a.to_string());
        }
        Scheme::NoniidDisjoint => kv(&mut s, "partition.scheme", "noniid_disjoint".into()),
        Scheme::FeatureShift(within) => {
            kv(&mut s, "partition.scheme", "feature_shift".into());
            match within {
                Within::One => kv(&mut s, "partition.within", "one".into()),
                Within::Iid => kv(&mut s, "partition.within", "iid".into()),
                Within::Dirichlet(a) => {
                    kv(&mut s, "partition.within", "dirichlet".into());
                    kv(&mut s, "partition.within_alpha", a.to_string());
                }
            }
        }
    }
    kv(
        &mut s,
        "partition.num_clients",
        e.partition.num_clients.to_string(),
    );
    kv(&mut s, "partition.shots", opt_str(&e.partition.shots));
    kv(&mut s, "model.dim", e.dims.dim.to_string());
    kv(&mut s, "model.layers", e.dims.n_layers.to_string());
    kv(&mut s, "model.rank", e.dims.rank.to_string());
    kv(
        &mut s,
        "model.lora_start_layer",
        e.dims.lora_start_layer.to_string(),
    );
    kv(&mut s, "model.init_scale", e.dims.init_scale.to_string());
    kv(&mut s, "tau", e.tau.to_string());
    kv(&mut s, "train.rounds", e.rounds.to_string());
    kv(&mut s, "train.lr", e.lr.to_string());
    kv(&mut s, "train.batch_size", e.batch_size.to_string());
    kv(&mut s, "train.sft_epochs", e.sft_epochs.to_string());
    kv(&mut s, "train.schedule", e.schedule.name().into());
    kv(&mut s, "rl.group_size", e.rl.group_size.to_string());
    kv(&mut s, "rl.sigma", e.rl.sigma.to_string());
    kv(&mut s, "rl.eps_clip", e.rl.eps_clip.to_string());
    kv(&mut s, "rl.eps_low", e.rl.eps_low.to_string());
    kv(&mut s, "rl.eps_high", e.rl.eps_high.to_string());
    kv(&mut s, "rl.beta", e.rl.beta.to_string());
    kv(&mut s, "rl.variant", e.rl.variant.name().into());
    kv(&mut s, "rl.epochs", e.rl.epochs.to_string());
    kv(&mut s, "rl.reference_mode", e.ref_mode.name().into());
    kv(&mut s, "stage.eps_acc", e.eps_acc.to_string());
    kv(&mut s, "stage.t_r", e.t_r.to_string());
    kv(
        &mut s,
        "stage.fixed_m",
        e.fixed_m.map_or("auto".into(), |m| m.to_string()),
    );
    kv(&mut s, "server.decoupled", e.decoupled.to_string());
    kv(&mut s, "server.text_steps", e.server_text_steps.to_string());
    kv(&mut s, "upload.ratio", e.upload.ratio.to_string());
    kv(
        &mut s,
        "upload.per_class_cap",
        opt_str(&e.upload.per_class_cap),
    );
    kv(&mut s, "upload.groups", opt_str(&e.upload.groups));
    kv(&mut s, "upload.noise_sigma", opt_str(&e.upload.noise_sigma));
    kv(&mut s, "parallelism", e.parallelism.to_string());
    kv(&mut s, "output_dir", cfg.output_dir.display().to_string());
    s
}

/// Derive a named variant of a base experiment for side-by-side comparison.
/// `base` leaves the config untouched; schedule, reference-mode, policy-loss,
/// decoupling, and `upload_ratio=<f>` overrides are recognized.
pub fn apply_variant(base: &ExperimentConfig, name: &str) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    match name {
        "base" => {}
        "sft_rl" => cfg.schedule = Schedule::SftRl,
        "sft_only" => cfg.schedule = Schedule::SftOnly,
        "rl_only" => cfg.schedule = Schedule::RlOnly,
        // The coupled baseline: adapter averaging on the image side only,
        // text encoder frozen at its initialization, purely supervised.
        "decoupled_off" => {
            cfg.decoupled = false;
            cfg.schedule = Schedule::SftOnly;
        }
        "ref_mix" => cfg.ref_mode = RefMode::Mix,
        "ref_latest" => cfg.ref_mode = RefMode::Latest,
        "ref_final_sft" => cfg.ref_mode = RefMode::FinalSft,
        "grpo" | "dr_grpo" | "gmpo" | "dapo" | "liteppo" => {
            cfg.rl.variant = RlVariant::parse(name)?;
        }
        other => {
            if let Some(v) = other.strip_prefix("upload_ratio=") {
                cfg.upload.ratio = v
                    .parse()
                    .map_err(|_| Error::Config(format!("variant '{other}': bad ratio")))?;
            } else {
                return Err(Error::Config(format!("unknown variant '{other}'")));
            }
        }
    }
    Ok(cfg)
}

/// Format a float with the given number of significant digits, in plain
/// decimal notation.
pub fn fmt_sig(v: f64, digits: u32) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let mag = v.abs().log10().floor() as i32;
    let decimals = (digits as i32 - 1 - mag).max(0) as usize;
    format!("{v:.decimals$}")
}

//! Finite-difference verification of every trainable objective.
//!
//! Each check builds small random instances of one loss, computes the
//! analytic gradient off the tape, and compares it against a central
//! finite-difference oracle over the flattened adapter parameters. The same
//! routines back the `gradcheck` subcommand and the acceptance suite.

use crate::data::Sample;
use crate::encoders::{init_pretrained_like, ClassTextBank, EncoderStack, ModelDims};
use crate::error::{Error, Result};
use crate::federation::{build_text_ce_loss, wire::EmbeddingBatch};
use crate::local_training::{
    build_ce_loss, build_rl_loss, fill_advantages, sample_actions, PolicySnapshot, RlConfig,
    RlVariant, ScoringContext,
};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{finite_diff_gradient, max_relative_error};
use crate::rng::{stream, tag};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Which objective to verify.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    Ce,
    Grpo,
    DrGrpo,
    Gmpo,
    Dapo,
    LitePpo,
    Text,
}

impl CheckKind {
    pub const ALL: [CheckKind; 7] = [
        CheckKind::Ce,
        CheckKind::Grpo,
        CheckKind::DrGrpo,
        CheckKind::Gmpo,
        CheckKind::Dapo,
        CheckKind::LitePpo,
        CheckKind::Text,
    ];

    pub fn parse(s: &str) -> Result<CheckKind> {
        match s {
            "ce" => Ok(CheckKind::Ce),
            "grpo" => Ok(CheckKind::Grpo),
            "dr_grpo" => Ok(CheckKind::DrGrpo),
            "gmpo" => Ok(CheckKind::Gmpo),
            "dapo" => Ok(CheckKind::Dapo),
            "liteppo" => Ok(CheckKind::LitePpo),
            "text" => Ok(CheckKind::Text),
            other => Err(Error::Config(format!(
                "unknown gradcheck target '{other}' (expected ce|grpo|dr_grpo|gmpo|dapo|liteppo|text)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CheckKind::Ce => "ce",
            CheckKind::Grpo => "grpo",
            CheckKind::DrGrpo => "dr_grpo",
            CheckKind::Gmpo => "gmpo",
            CheckKind::Dapo => "dapo",
            CheckKind::LitePpo => "liteppo",
            CheckKind::Text => "text",
        }
    }

    fn rl_variant(&self) -> Option<RlVariant> {
        match self {
            CheckKind::Grpo => Some(RlVariant::Grpo),
            CheckKind::DrGrpo => Some(RlVariant::DrGrpo),
            CheckKind::Gmpo => Some(RlVariant::Gmpo),
            CheckKind::Dapo => Some(RlVariant::Dapo),
            CheckKind::LitePpo => Some(RlVariant::LitePpo),
            _ => None,
        }
    }
}

/// Compare the tape gradient of `build` against central finite differences
/// over the stack's flattened adapter parameters.
fn check_gradient<F>(stack: &EncoderStack, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var], &EncoderStack) -> Result<Var>,
{
    let base = stack.adapters();
    let flat: Vec<f64> = base
        .matrices
        .iter()
        .flat_map(|m| m.data().iter().copied())
        .collect();
    let eval = |theta: &[f64]| -> f64 {
        let mut s = stack.clone();
        let mut a = base.clone();
        let mut off = 0;
        for m in a.matrices.iter_mut() {
            let len = m.data().len();
            m.data_mut().copy_from_slice(&theta[off..off + len]);
            off += len;
        }
        s.set_adapters(&a).expect("same shapes");
        let mut tape = Tape::new(s.num_slots());
        let params = s.register_params(&mut tape, 0);
        let loss = build(&mut tape, &params, &s).expect("loss builds at perturbed parameters");
        tape.scalar(loss)
    };
    let fd = finite_diff_gradient(eval, &flat, 1e-5);

    let mut tape = Tape::new(stack.num_slots());
    let params = stack.register_params(&mut tape, 0);
    let loss = build(&mut tape, &params, stack)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<f64> = grads.into_iter().flatten().collect();
    Ok(max_relative_error(&analytic, &fd, 1e-8))
}

/// One random instance: a small dual encoder, its class bank, and noisy
/// per-class samples. Kept tiny so finite differences stay well conditioned.
struct Instance {
    image: EncoderStack,
    text: EncoderStack,
    bank: ClassTextBank,
    text_embs: Vec<Vec<f64>>,
    candidates: Vec<usize>,
    samples: Vec<Sample>,
    tau: f64,
}

fn make_instance(seed: u64, i: u64, kind_tag: u64) -> Result<Instance> {
    let mut rng = stream(seed, &[tag("gradcheck"), kind_tag, i]);
    let dim = 5 + (i % 2) as usize;
    let classes = 3;
    let dims = ModelDims {
        dim,
        n_layers: 2,
        rank: 1,
        lora_start_layer: 1,
        init_scale: 0.05,
    };
    let tau = 0.3 + 0.02 * (i % 5) as f64;
    let enc = init_pretrained_like(seed ^ (i.wrapping_mul(0x9e37) + kind_tag), &dims, tau)?;
    let bank = ClassTextBank::generate(seed ^ i, classes, dim);
    let mut text_embs = Vec::with_capacity(classes);
    for c in 0..classes {
        text_embs.push(crate::encoders::encode_text(&enc.text, &bank, c)?);
    }
    let normal = Normal::new(0.0, 0.3).expect("finite std");
    let samples: Vec<Sample> = (0..3)
        .map(|s| {
            let label = s % classes;
            Sample {
                features: bank
                    .get(label)
                    .expect("label in bank")
                    .iter()
                    .map(|p| p + normal.sample(&mut rng))
                    .collect(),
                label,
                domain: 0,
            }
        })
        .collect();
    Ok(Instance {
        image: enc.image,
        text: enc.text,
        bank,
        text_embs,
        candidates: (0..classes).collect(),
        samples,
        tau,
    })
}

fn check_ce_instance(seed: u64, i: u64) -> Result<f64> {
    let inst = make_instance(seed, i, tag("ce"))?;
    let ctx = ScoringContext {
        text_embs: &inst.text_embs,
        candidates: &inst.candidates,
        tau: inst.tau,
    };
    let batch: Vec<&Sample> = inst.samples.iter().collect();
    check_gradient(&inst.image, |tape, params, stack| {
        let (loss, _, _, _) = build_ce_loss(tape, params, stack, &batch, &ctx)?;
        loss.ok_or_else(|| Error::NonFinite("all CE samples degenerate".into()))
    })
}

fn check_rl_instance(variant: RlVariant, seed: u64, i: u64) -> Result<f64> {
    let kind_tag = tag(variant.name());
    let inst = make_instance(seed, i, kind_tag)?;
    let ctx = ScoringContext {
        text_embs: &inst.text_embs,
        candidates: &inst.candidates,
        tau: inst.tau,
    };
    let batch: Vec<&Sample> = inst.samples.iter().collect();
    let mut rng = stream(seed, &[tag("gradcheck_actions"), kind_tag, i]);

    // A slightly different reference keeps the KL term active.
    let reference = {
        let mut r = inst.image.clone();
        let mut a = r.adapters();
        for m in a.matrices.iter_mut() {
            for v in m.data_mut() {
                *v += 0.05 * (rng.gen::<f64>() - 0.5);
            }
        }
        r.set_adapters(&a)?;
        PolicySnapshot::of(&r)
    };
    let old = PolicySnapshot::of(&inst.image);
    let mut groups = sample_actions(&old, &batch, &ctx, 2, 0.2, &mut rng)?;
    fill_advantages(&mut groups, &batch, variant);
    let cfg = RlConfig {
        group_size: 2,
        variant,
        eps_low: 0.1,
        eps_high: 0.3,
        ..RlConfig::default()
    };
    check_gradient(&inst.image, |tape, params, stack| {
        build_rl_loss(tape, params, stack, &batch, &groups, &reference, &ctx, &cfg)?
            .ok_or_else(|| Error::NonFinite("empty policy batch".into()))
    })
}

fn check_text_instance(seed: u64, i: u64) -> Result<f64> {
    let inst = make_instance(seed, i, tag("text"))?;
    let mut rng = stream(seed, &[tag("gradcheck_uploads"), i]);
    let normal = Normal::new(0.0, 0.3).expect("finite std");
    let dim = inst.text.in_dim();
    let mut uploads = EmbeddingBatch::new(dim);
    for s in 0..4 {
        let label = s % inst.bank.num_classes();
        let mut z: Vec<f64> = inst
            .bank
            .get(label)?
            .iter()
            .map(|p| p + normal.sample(&mut rng))
            .collect();
        let n = crate::numerics::l2_norm(&z);
        for v in z.iter_mut() {
            *v /= n;
        }
        uploads.push(&z, label)?;
    }
    let indices: Vec<usize> = (0..uploads.len()).collect();
    let base_classes = inst.candidates.clone();
    let bank = inst.bank;
    let tau = inst.tau;
    check_gradient(&inst.text, |tape, params, stack| {
        build_text_ce_loss(
            tape,
            params,
            stack,
            &uploads,
            &indices,
            &base_classes,
            &bank,
            tau,
        )
    })
}

/// Run `instances` random instances of one objective's gradient check and
/// return the worst relative error seen.
pub fn run_check(kind: CheckKind, seed: u64, instances: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..instances as u64 {
        let err = match kind {
            CheckKind::Ce => check_ce_instance(seed, i)?,
            CheckKind::Text => check_text_instance(seed, i)?,
            _ => check_rl_instance(kind.rl_variant().expect("policy kind"), seed, i)?,
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

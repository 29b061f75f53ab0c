//! Client-side two-stage fine-tuning of the image encoder's adapters.
//!
//! Stage 1 runs supervised epochs: cross-entropy over temperature-softmax
//! cosine similarities against the broadcast text embeddings. Stage 2 is a
//! group-relative policy-gradient stage: per image, G actions are sampled
//! under a frozen old policy whose latent is perturbed with Gaussian noise
//! before normalization; binary accuracy rewards are normalized within the
//! group into advantages; the surrogate combines a clipped importance ratio
//! with an unbiased KL estimate against a frozen reference policy. The
//! current policy is always evaluated noise-free.
//!
//! Five surrogate variants are provided; they differ only in advantage
//! normalization, clipping thresholds, and aggregation.

use crate::data::Sample;
use crate::encoders::{class_probabilities, AdapterSet, EncoderStack, DEGENERATE_NORM};
use crate::error::{Error, Result};
use crate::numerics::adam::AdamState;
use crate::numerics::l2_norm;
use crate::numerics::tape::{Tape, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Everything a client needs to score a sample against the broadcast
/// candidate classes: per-candidate unit text embeddings (parallel to
/// `candidates`) and the softmax temperature.
pub struct ScoringContext<'a> {
    pub text_embs: &'a [Vec<f64>],
    pub candidates: &'a [usize],
    pub tau: f64,
}

impl<'a> ScoringContext<'a> {
    pub fn position_of(&self, class_id: usize) -> Result<usize> {
        self.candidates
            .iter()
            .position(|&c| c == class_id)
            .ok_or(Error::UnknownClass(class_id))
    }

    /// The text embeddings as one row-major matrix buffer (rows = candidates).
    fn text_matrix(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.text_embs.len() * self.dim());
        for t in self.text_embs {
            flat.extend_from_slice(t);
        }
        flat
    }

    fn dim(&self) -> usize {
        self.text_embs.first().map_or(0, |t| t.len())
    }

    fn num_candidates(&self) -> usize {
        self.candidates.len()
    }
}

/// A frozen copy of an image-encoder policy (base weights plus adapters) at
/// a point in time.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    stack: EncoderStack,
}

impl PolicySnapshot {
    pub fn of(stack: &EncoderStack) -> PolicySnapshot {
        PolicySnapshot {
            stack: stack.clone(),
        }
    }

    /// A snapshot of `base` with its adapters replaced by `adapters`.
    pub fn from_adapters(base: &EncoderStack, adapters: &AdapterSet) -> Result<PolicySnapshot> {
        let mut stack = base.clone();
        stack.set_adapters(adapters)?;
        Ok(PolicySnapshot { stack })
    }

    pub fn stack(&self) -> &EncoderStack {
        &self.stack
    }

    /// Noise-free class probabilities of a sample under this policy.
    pub fn probabilities(&self, x: &[f64], ctx: &ScoringContext) -> Result<Vec<f64>> {
        let z = crate::encoders::encode_image(&self.stack, x, None)?;
        class_probabilities(&z, ctx.text_embs, ctx.tau)
    }

    /// Probabilities with additive latent noise (the sampling path).
    pub fn noisy_probabilities(
        &self,
        x: &[f64],
        noise: &[f64],
        ctx: &ScoringContext,
    ) -> Result<Vec<f64>> {
        let z = crate::encoders::encode_image(&self.stack, x, Some(noise))?;
        class_probabilities(&z, ctx.text_embs, ctx.tau)
    }
}

/// Sampled actions and bookkeeping for one image.
#[derive(Debug, Clone)]
pub struct SampleGroup {
    /// Index of the image within its batch.
    pub image_index: usize,
    /// Sampled class ids, length G.
    pub actions: Vec<usize>,
    /// Latent noise per action, each of embedding dimension.
    pub noises: Vec<Vec<f64>>,
    /// Old-policy probability of each action given its noise.
    pub old_probs: Vec<f64>,
    /// Binary accuracy rewards.
    pub rewards: Vec<f64>,
    /// Group-relative advantages (filled by `fill_advantages`).
    pub advantages: Vec<f64>,
}

/// Surrogate-loss variant for the policy stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RlVariant {
    Grpo,
    DrGrpo,
    Gmpo,
    Dapo,
    LitePpo,
}

impl RlVariant {
    pub fn parse(s: &str) -> Result<RlVariant> {
        match s {
            "grpo" => Ok(RlVariant::Grpo),
            "dr_grpo" => Ok(RlVariant::DrGrpo),
            "gmpo" => Ok(RlVariant::Gmpo),
            "dapo" => Ok(RlVariant::Dapo),
            "liteppo" => Ok(RlVariant::LitePpo),
            other => Err(Error::Config(format!(
                "unknown rl variant '{other}' (expected grpo|dr_grpo|gmpo|dapo|liteppo)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RlVariant::Grpo => "grpo",
            RlVariant::DrGrpo => "dr_grpo",
            RlVariant::Gmpo => "gmpo",
            RlVariant::Dapo => "dapo",
            RlVariant::LitePpo => "liteppo",
        }
    }
}

/// Settings for the policy stage.
#[derive(Debug, Clone, PartialEq)]
pub struct RlConfig {
    /// Actions sampled per image.
    pub group_size: usize,
    /// Std of the latent sampling noise.
    pub sigma: f64,
    /// Symmetric clipping threshold.
    pub eps_clip: f64,
    /// Asymmetric thresholds for the variants that support them; both
    /// default to `eps_clip`.
    pub eps_low: f64,
    pub eps_high: f64,
    /// KL coefficient.
    pub beta: f64,
    pub variant: RlVariant,
    /// Gradient steps per batch.
    pub epochs: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            group_size: 3,
            sigma: 0.1,
            eps_clip: 0.2,
            eps_low: 0.2,
            eps_high: 0.2,
            beta: 0.5,
            variant: RlVariant::Grpo,
            epochs: 3,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("rl.group_size must be at least 2".into()));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!(
                "rl.sigma must be positive, got {}",
                self.sigma
            )));
        }
        for (name, eps) in [("rl.eps_clip", self.eps_clip), ("rl.eps_low", self.eps_low)] {
            if !(eps > 0.0 && eps < 1.0) {
                return Err(Error::Config(format!(
                    "{name} must be in (0, 1), got {eps}"
                )));
            }
        }
        if !(self.eps_high > 0.0) || !self.eps_high.is_finite() {
            return Err(Error::Config(format!(
                "rl.eps_high must be positive, got {}",
                self.eps_high
            )));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(Error::Config(format!(
                "rl.beta must be non-negative, got {}",
                self.beta
            )));
        }
        Ok(())
    }

    fn thresholds(&self) -> (f64, f64) {
        match self.variant {
            RlVariant::Gmpo | RlVariant::Dapo => (self.eps_low, self.eps_high),
            _ => (self.eps_clip, self.eps_clip),
        }
    }
}

/// Reference-policy construction mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefMode {
    /// Elementwise midpoint of the final-SFT and latest global adapters.
    Mix,
    Latest,
    FinalSft,
}

impl RefMode {
    pub fn parse(s: &str) -> Result<RefMode> {
        match s {
            "mix" => Ok(RefMode::Mix),
            "latest" => Ok(RefMode::Latest),
            "final_sft" => Ok(RefMode::FinalSft),
            other => Err(Error::Config(format!(
                "unknown reference mode '{other}' (expected mix|latest|final_sft)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RefMode::Mix => "mix",
            RefMode::Latest => "latest",
            RefMode::FinalSft => "final_sft",
        }
    }
}

/// Build the reference adapters from the final-SFT checkpoint and the latest
/// global adapters.
pub fn build_reference(
    final_sft: &AdapterSet,
    latest: &AdapterSet,
    mode: RefMode,
) -> Result<AdapterSet> {
    match mode {
        RefMode::Mix => AdapterSet::mix(final_sft, latest),
        RefMode::Latest => Ok(latest.clone()),
        RefMode::FinalSft => Ok(final_sft.clone()),
    }
}

/// Training stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Sft,
    Rl,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Sft => "sft",
            Stage::Rl => "rl",
        }
    }
}

/// Server-side switch from the supervised stage to the policy stage, driven
/// by stability of the averaged client training accuracy. Transitions
/// exactly once and never reverts.
#[derive(Debug, Clone)]
pub struct StageController {
    history: Vec<f64>,
    eps_acc: f64,
    t_r: usize,
    stage: Stage,
    transition_round: Option<usize>,
    fixed_m: Option<usize>,
}

impl StageController {
    /// `fixed_m` forces the transition at exactly that round, replacing the
    /// stability criterion, which keeps the switch point comparable across
    /// runs in ablations.
    pub fn new(eps_acc: f64, t_r: usize, fixed_m: Option<usize>) -> Result<StageController> {
        if !(eps_acc > 0.0) || !eps_acc.is_finite() {
            return Err(Error::Config(format!(
                "stage.eps_acc must be positive, got {eps_acc}"
            )));
        }
        if t_r == 0 {
            return Err(Error::Config("stage.t_r must be at least 1".into()));
        }
        if fixed_m == Some(0) {
            return Err(Error::Config("stage.fixed_m must be at least 1".into()));
        }
        Ok(StageController {
            history: Vec::new(),
            eps_acc,
            t_r,
            stage: Stage::Sft,
            transition_round: None,
            fixed_m,
        })
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    /// The round M at which the supervised stage ended, once set.
    pub fn transition_round(&self) -> Option<usize> {
        self.transition_round
    }

    /// Feed this round's averaged training accuracy; returns whether the
    /// controller switched to the policy stage on this observation. Must not
    /// be consulted after the transition.
    pub fn should_transition(&mut self, mean_acc: f64) -> bool {
        debug_assert_eq!(
            self.stage,
            Stage::Sft,
            "controller consulted after transition"
        );
        if self.stage == Stage::Rl {
            return false;
        }
        self.history.push(mean_acc);
        let t = self.history.len();
        let fire = match self.fixed_m {
            Some(m) => t == m,
            None => {
                t > self.t_r
                    && self.history[t - self.t_r - 1..]
                        .windows(2)
                        .all(|w| (w[1] - w[0]).abs() < self.eps_acc)
            }
        };
        if fire {
            self.stage = Stage::Rl;
            self.transition_round = Some(t);
        }
        fire
    }
}

/// Per-epoch supervised training stats.
#[derive(Debug, Clone, Copy, Default)]
pub struct EpochStats {
    pub mean_ce: f64,
    pub accuracy: f64,
    /// Samples dropped for degenerate (near-zero) latents.
    pub skipped_samples: usize,
    /// Optimizer steps skipped on non-finite gradients.
    pub skipped_steps: usize,
}

fn batch_ranges(n: usize, bs: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + bs).min(n);
        out.push((start, end));
        start = end;
    }
    out
}

/// Cross-entropy loss of a batch on the tape. Returns the loss node, the
/// number of contributing samples, and how many argmax predictions were
/// correct (at the pre-update parameters). Degenerate samples are skipped.
pub(crate) fn build_ce_loss(
    tape: &mut Tape,
    params: &[Var],
    stack: &EncoderStack,
    batch: &[&Sample],
    ctx: &ScoringContext,
) -> Result<(Option<Var>, usize, usize, usize)> {
    let text = tape.constant(&ctx.text_matrix());
    let (rows, cols) = (ctx.num_candidates(), ctx.dim());
    let mut log_probs = Vec::new();
    let mut correct = 0;
    let mut skipped = 0;
    for sample in batch {
        let x = tape.constant(&sample.features);
        let h = stack.forward_on_tape(tape, params, x);
        if l2_norm(tape.value(h)) <= DEGENERATE_NORM {
            skipped += 1;
            continue;
        }
        let z = tape.normalize(h);
        let sims = tape.matvec(text, rows, cols, z);
        let p = tape.softmax_temp(sims, ctx.tau);
        let pos = ctx.position_of(sample.label)?;
        let probs = tape.value(p);
        let argmax = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if argmax == pos {
            correct += 1;
        }
        let p_y = tape.index(p, pos);
        log_probs.push(tape.ln(p_y));
    }
    if log_probs.is_empty() {
        return Ok((None, 0, correct, skipped));
    }
    let m = log_probs.len();
    let w = -1.0 / m as f64;
    let terms: Vec<(Var, f64)> = log_probs.into_iter().map(|v| (v, w)).collect();
    Ok((Some(tape.weighted_sum(terms)), m, correct, skipped))
}

/// One supervised pass over the shard in shuffled batches. Only adapter
/// parameters change; returns epoch-mean cross-entropy and training accuracy
/// for the stage controller.
pub fn sft_epoch(
    stack: &mut EncoderStack,
    adam: &mut AdamState,
    shard: &[Sample],
    ctx: &ScoringContext,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<EpochStats> {
    if batch_size == 0 {
        return Err(Error::Config("train.batch_size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..shard.len()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(rng);

    let mut total_ce = 0.0;
    let mut total_n = 0usize;
    let mut total_correct = 0usize;
    let mut stats = EpochStats::default();
    for (start, end) in batch_ranges(order.len(), batch_size) {
        let batch: Vec<&Sample> = order[start..end].iter().map(|&i| &shard[i]).collect();
        let mut tape = Tape::new(stack.num_slots());
        let params = stack.register_params(&mut tape, 0);
        let (loss, n, correct, skipped) = build_ce_loss(&mut tape, &params, stack, &batch, ctx)?;
        stats.skipped_samples += skipped;
        total_correct += correct;
        let Some(loss) = loss else { continue };
        total_ce += tape.scalar(loss) * n as f64;
        total_n += n;
        let grads = tape.backward(loss)?;
        if !adam.step(&mut stack.slot_buffers_mut(), &grads) {
            stats.skipped_steps += 1;
        }
    }
    if total_n > 0 {
        stats.mean_ce = total_ce / total_n as f64;
    }
    let denom = total_n + stats.skipped_samples;
    if denom > 0 {
        stats.accuracy = total_correct as f64 / denom as f64;
    }
    Ok(stats)
}

/// Draw G noisy actions per image under the frozen old policy. Stores each
/// action's noise vector and old-policy probability for the ratio
/// denominator.
pub fn sample_actions(
    old: &PolicySnapshot,
    batch: &[&Sample],
    ctx: &ScoringContext,
    group_size: usize,
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<Vec<SampleGroup>> {
    let d_e = old.stack.out_dim();
    let normal = Normal::new(0.0, sigma)
        .map_err(|_| Error::Config(format!("rl.sigma must be positive and finite, got {sigma}")))?;
    let mut groups = Vec::with_capacity(batch.len());
    for (image_index, sample) in batch.iter().enumerate() {
        let mut group = SampleGroup {
            image_index,
            actions: Vec::with_capacity(group_size),
            noises: Vec::with_capacity(group_size),
            old_probs: Vec::with_capacity(group_size),
            rewards: Vec::new(),
            advantages: Vec::new(),
        };
        for _ in 0..group_size {
            // A noise draw that annihilates the latent is rejected and
            // redrawn; a latent that is degenerate even without noise
            // propagates as an error for the caller to skip.
            let mut attempt = 0;
            let (noise, probs) = loop {
                let noise: Vec<f64> = (0..d_e).map(|_| normal.sample(rng)).collect();
                match old.noisy_probabilities(&sample.features, &noise, ctx) {
                    Ok(p) => break (noise, p),
                    Err(Error::DegenerateEmbedding { .. }) if attempt < 8 => {
                        attempt += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                }
            };
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pos = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pos = i;
                    break;
                }
            }
            group.actions.push(ctx.candidates[pos]);
            group.old_probs.push(probs[pos]);
            group.noises.push(noise);
        }
        groups.push(group);
    }
    Ok(groups)
}

/// Binary accuracy rewards: 1 where the action matches the label.
pub fn compute_rewards(actions: &[usize], label: usize) -> Vec<f64> {
    actions
        .iter()
        .map(|&a| if a == label { 1.0 } else { 0.0 })
        .collect()
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Advantages for one image's rewards. Group-normalized variants divide by
/// the population std of the group; `LitePpo` divides by the batch-wide std
/// (`batch_std`). Zero-variance denominators yield all-zero advantages.
pub fn group_advantages(rewards: &[f64], variant: RlVariant, batch_std: Option<f64>) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let centered: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    match variant {
        RlVariant::DrGrpo => centered,
        RlVariant::LitePpo => {
            let std = batch_std.expect("liteppo advantages need the batch std");
            if std < 1e-12 {
                vec![0.0; rewards.len()]
            } else {
                centered.into_iter().map(|c| c / std).collect()
            }
        }
        _ => {
            let std = population_std(rewards);
            if std < 1e-12 {
                vec![0.0; rewards.len()]
            } else {
                centered.into_iter().map(|c| c / std).collect()
            }
        }
    }
}

/// Fill rewards and advantages for a batch of groups against the labels.
pub fn fill_advantages(groups: &mut [SampleGroup], batch: &[&Sample], variant: RlVariant) {
    for group in groups.iter_mut() {
        group.rewards = compute_rewards(&group.actions, batch[group.image_index].label);
    }
    let batch_std = if variant == RlVariant::LitePpo {
        let all: Vec<f64> = groups
            .iter()
            .flat_map(|g| g.rewards.iter().copied())
            .collect();
        Some(population_std(&all))
    } else {
        None
    };
    for group in groups.iter_mut() {
        group.advantages = group_advantages(&group.rewards, variant, batch_std);
    }
}

/// The clipped surrogate for one action: min(rho * A, clip(rho) * A).
pub fn clipped_policy_term(rho: f64, advantage: f64, eps_low: f64, eps_high: f64) -> f64 {
    let clipped = rho.clamp(1.0 - eps_low, 1.0 + eps_high);
    (rho * advantage).min(clipped * advantage)
}

/// Unbiased KL estimate q - ln q - 1 with q = p_ref / p_cur. Non-negative,
/// zero exactly at q = 1.
pub fn kl_estimate(p_ref: f64, p_cur: f64) -> Result<f64> {
    if p_cur < 1e-300 {
        return Err(Error::NonFinite(format!(
            "kl_estimate: current-policy probability degenerate ({p_cur})"
        )));
    }
    let q = p_ref / p_cur;
    Ok(q - q.ln() - 1.0)
}

/// Floor applied to clipped-term magnitudes inside the geometric-mean
/// variant so the log stays finite when an advantage is exactly zero.
const GMPO_MAG_FLOOR: f64 = 1e-12;

/// Build the policy-stage loss for one batch on the tape.
///
/// The current policy is evaluated once per image without noise; each
/// action's ratio divides that probability by the stored noisy old-policy
/// probability. Reference probabilities are noise-free constants.
pub fn build_rl_loss(
    tape: &mut Tape,
    params: &[Var],
    stack: &EncoderStack,
    batch: &[&Sample],
    groups: &[SampleGroup],
    reference: &PolicySnapshot,
    ctx: &ScoringContext,
    cfg: &RlConfig,
) -> Result<Option<Var>> {
    let text = tape.constant(&ctx.text_matrix());
    let (rows, cols) = (ctx.num_candidates(), ctx.dim());
    let (eps_low, eps_high) = cfg.thresholds();
    let g = cfg.group_size;

    // Per image: clipped terms and KL terms per action.
    let mut clipped: Vec<Vec<Var>> = Vec::new();
    let mut kls: Vec<Var> = Vec::new();
    let mut advantages: Vec<Vec<f64>> = Vec::new();
    for group in groups {
        let sample = batch[group.image_index];
        let x = tape.constant(&sample.features);
        let h = stack.forward_on_tape(tape, params, x);
        if l2_norm(tape.value(h)) <= DEGENERATE_NORM {
            return Err(Error::DegenerateEmbedding {
                norm: l2_norm(tape.value(h)),
            });
        }
        let z = tape.normalize(h);
        let sims = tape.matvec(text, rows, cols, z);
        let p_cur = tape.softmax_temp(sims, ctx.tau);
        let p_ref = reference.probabilities(&sample.features, ctx)?;

        let mut row = Vec::with_capacity(g);
        for j in 0..g {
            let pos = ctx.position_of(group.actions[j])?;
            let p_a = tape.index(p_cur, pos);
            let old = group.old_probs[j];
            if !(old > 0.0) {
                return Err(Error::NonFinite(format!(
                    "old-policy probability {old} for action {}",
                    group.actions[j]
                )));
            }
            let rho = tape.scale(p_a, 1.0 / old);
            let a = group.advantages[j];
            let t1 = tape.scale(rho, a);
            let rho_clipped = tape.clip(rho, 1.0 - eps_low, 1.0 + eps_high);
            let t2 = tape.scale(rho_clipped, a);
            row.push(tape.min(t1, t2));

            // q = p_ref / p_cur; KL = q - ln q - 1.
            let inv = tape.recip(p_a);
            let q = tape.scale(inv, p_ref[pos]);
            let ln_q = tape.ln(q);
            let combined = tape.weighted_sum(vec![(q, 1.0), (ln_q, -1.0)]);
            kls.push(tape.shift(combined, -1.0));
        }
        clipped.push(row);
        advantages.push(group.advantages.clone());
    }
    let bs = clipped.len();
    if bs == 0 {
        return Ok(None);
    }

    // Aggregate per variant. KL always enters as +beta * mean over (i, j)
    // except the unnormalized variant, which drops the 1/bs factor.
    let loss = match cfg.variant {
        RlVariant::Grpo | RlVariant::Dapo | RlVariant::LitePpo => {
            let w_p = -1.0 / (g as f64 * bs as f64);
            let w_kl = cfg.beta / (g as f64 * bs as f64);
            let mut terms = Vec::with_capacity(2 * g * bs);
            for row in &clipped {
                for &v in row {
                    terms.push((v, w_p));
                }
            }
            for &kl in &kls {
                terms.push((kl, w_kl));
            }
            tape.weighted_sum(terms)
        }
        RlVariant::DrGrpo => {
            let w_p = -1.0 / g as f64;
            let w_kl = cfg.beta / g as f64;
            let mut terms = Vec::with_capacity(2 * g * bs);
            for row in &clipped {
                for &v in row {
                    terms.push((v, w_p));
                }
            }
            for &kl in &kls {
                terms.push((kl, w_kl));
            }
            tape.weighted_sum(terms)
        }
        RlVariant::Gmpo => {
            // Per action position j: signed geometric mean across the batch
            // of the clipped-term magnitudes, the sign taken from the sum of
            // that position's advantages.
            let mut terms: Vec<(Var, f64)> = Vec::new();
            for j in 0..g {
                let mut logs = Vec::with_capacity(bs);
                for row in &clipped {
                    let m = tape.abs(row[j]);
                    let floored = tape.clip(m, GMPO_MAG_FLOOR, f64::INFINITY);
                    logs.push(tape.ln(floored));
                }
                let w = 1.0 / bs as f64;
                let mean_log = tape.weighted_sum(logs.into_iter().map(|v| (v, w)).collect());
                let mag = tape.exp(mean_log);
                let sign: f64 = {
                    let s: f64 = advantages.iter().map(|row| row[j]).sum();
                    if s > 0.0 {
                        1.0
                    } else if s < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                terms.push((mag, -sign / g as f64));
            }
            let w_kl = cfg.beta / (g as f64 * bs as f64);
            for &kl in &kls {
                terms.push((kl, w_kl));
            }
            tape.weighted_sum(terms)
        }
    };
    if !tape.scalar(loss).is_finite() {
        return Err(Error::NonFinite(format!(
            "policy loss ({}) non-finite before backward",
            cfg.variant.name()
        )));
    }
    Ok(Some(loss))
}

/// Per-batch policy-stage stats.
#[derive(Debug, Clone, Copy, Default)]
pub struct RlBatchStats {
    pub mean_reward: f64,
    pub mean_loss: f64,
    pub skipped_steps: usize,
}

/// One policy-stage batch update: freeze the current policy as the old
/// policy, sample a group per image, compute rewards and advantages once,
/// then take `cfg.epochs` gradient steps on that fixed sample set.
pub fn rl_batch_update(
    stack: &mut EncoderStack,
    adam: &mut AdamState,
    batch: &[&Sample],
    reference: &PolicySnapshot,
    ctx: &ScoringContext,
    cfg: &RlConfig,
    rng: &mut impl Rng,
) -> Result<RlBatchStats> {
    let old = PolicySnapshot::of(stack);
    let mut groups = sample_actions(&old, batch, ctx, cfg.group_size, cfg.sigma, rng)?;
    fill_advantages(&mut groups, batch, cfg.variant);

    let total: f64 = groups.iter().map(|g| g.rewards.iter().sum::<f64>()).sum();
    let count = (groups.len() * cfg.group_size).max(1);
    let mut stats = RlBatchStats {
        mean_reward: total / count as f64,
        ..RlBatchStats::default()
    };

    let mut loss_sum = 0.0;
    let mut loss_n = 0usize;
    for _ in 0..cfg.epochs {
        let mut tape = Tape::new(stack.num_slots());
        let params = stack.register_params(&mut tape, 0);
        let Some(loss) = build_rl_loss(
            &mut tape, &params, stack, batch, &groups, reference, ctx, cfg,
        )?
        else {
            break;
        };
        loss_sum += tape.scalar(loss);
        loss_n += 1;
        let grads = tape.backward(loss)?;
        if !adam.step(&mut stack.slot_buffers_mut(), &grads) {
            stats.skipped_steps += 1;
        }
    }
    if loss_n > 0 {
        stats.mean_loss = loss_sum / loss_n as f64;
    }
    Ok(stats)
}

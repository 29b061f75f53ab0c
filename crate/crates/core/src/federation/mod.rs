//! Server-client orchestration of the federated rounds.
//!
//! Each round broadcasts the global image adapters and the current
//! per-class text embeddings, runs every client's local update (supervised
//! or policy stage), aggregates the returned adapter sets weighted by shard
//! size, and then trains the server-side text encoder on the embeddings the
//! clients uploaded. Client payloads cross the channel only in serialized
//! form (see [`wire`]), which keeps the privacy boundary auditable: raw
//! feature vectors have no representation on the wire.
//!
//! All randomness is drawn from streams keyed by (seed, role, client,
//! round), so results are identical regardless of client execution order or
//! parallelism.

pub mod wire;

use crate::data::DataSpec;
use crate::data::{
    few_shot_subsample, generate_synthetic, partition, Dataset, PartitionSpec, Sample,
};
use crate::encoders::{
    encode_image, encode_text, init_pretrained_like, AdapterSet, ClassTextBank, EncoderStack,
    ModelDims,
};
use crate::error::{Error, Result};
use crate::evaluation::{accuracy, local_accuracy, per_domain_accuracy, RoundMetrics};
use crate::local_training::{
    build_reference, rl_batch_update, sft_epoch, PolicySnapshot, RefMode, RlConfig, ScoringContext,
    Stage, StageController,
};
use crate::numerics::adam::AdamState;
use crate::numerics::l2_norm;
use crate::numerics::tape::Tape;
use crate::rng::{stream, tag};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use std::collections::BTreeMap;

/// Which local-update stages the experiment runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    /// Supervised stage until the stage controller fires, then policy stage.
    SftRl,
    /// Supervised stage for every round.
    SftOnly,
    /// Policy stage from round 1, anchored to the initial global adapters.
    RlOnly,
}

impl Schedule {
    pub fn parse(s: &str) -> Result<Schedule> {
        match s {
            "sft_rl" => Ok(Schedule::SftRl),
            "sft_only" => Ok(Schedule::SftOnly),
            "rl_only" => Ok(Schedule::RlOnly),
            other => Err(Error::Config(format!(
                "unknown schedule '{other}' (expected sft_rl|sft_only|rl_only)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Schedule::SftRl => "sft_rl",
            Schedule::SftOnly => "sft_only",
            Schedule::RlOnly => "rl_only",
        }
    }
}

/// Which embeddings a client uploads after its local update. Selection
/// (ratio, per-class cap) composes with privacy transforms (group
/// averaging, additive noise).
#[derive(Debug, Clone, PartialEq)]
pub struct UploadPolicy {
    /// Fraction of the shard's embeddings to upload (ceil); 1.0 = all.
    pub ratio: f64,
    /// At most this many embeddings per present class.
    pub per_class_cap: Option<usize>,
    /// Split each class's selected embeddings into this many groups and
    /// upload group means instead of raw embeddings.
    pub groups: Option<usize>,
    /// Std of Gaussian noise added to every uploaded embedding.
    pub noise_sigma: Option<f64>,
}

impl Default for UploadPolicy {
    fn default() -> Self {
        UploadPolicy {
            ratio: 1.0,
            per_class_cap: None,
            groups: None,
            noise_sigma: None,
        }
    }
}

impl UploadPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::Config(format!(
                "upload.ratio must be in (0, 1], got {}",
                self.ratio
            )));
        }
        if self.per_class_cap == Some(0) {
            return Err(Error::Config(
                "upload.per_class_cap must be at least 1".into(),
            ));
        }
        if self.groups == Some(0) {
            return Err(Error::Config("upload.groups must be at least 1".into()));
        }
        if let Some(s) = self.noise_sigma {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Config(format!(
                    "upload.noise_sigma must be positive, got {s}"
                )));
            }
        }
        Ok(())
    }
}

/// Full experiment configuration; `validate` enforces every downstream
/// module's rules up front.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Master seed; overrides `data.seed` so one value drives the whole run.
    pub seed: u64,
    pub data: DataSpec,
    pub partition: PartitionSpec,
    pub dims: ModelDims,
    /// Softmax temperature shared by both encoders.
    pub tau: f64,
    /// Communication rounds T; 0 evaluates zero-shot only.
    pub rounds: usize,
    /// Learning rate for both client and server optimizers.
    pub lr: f64,
    pub batch_size: usize,
    /// Local epochs per round during the supervised stage.
    pub sft_epochs: usize,
    pub rl: RlConfig,
    pub ref_mode: RefMode,
    /// Stage-transition stability threshold on averaged train accuracy.
    pub eps_acc: f64,
    /// Consecutive stable deltas required.
    pub t_r: usize,
    /// Force the transition at exactly this round instead.
    pub fixed_m: Option<usize>,
    pub schedule: Schedule,
    /// When false, the text encoder stays frozen and no embeddings are
    /// uploaded: image-adapter averaging only.
    pub decoupled: bool,
    pub upload: UploadPolicy,
    /// Server text-encoder minibatch steps per round. A fixed step budget
    /// (cycling reshuffled passes of the upload pool) keeps the server-side
    /// optimization effort independent of how many embeddings the upload
    /// policy lets through.
    pub server_text_steps: usize,
    /// Client-level parallelism; 1 = serial. Results are identical at any
    /// setting.
    pub parallelism: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            data: DataSpec::default(),
            partition: PartitionSpec::default(),
            dims: ModelDims::default(),
            tau: 0.05,
            rounds: 20,
            lr: 1e-3,
            batch_size: 64,
            sft_epochs: 2,
            rl: RlConfig::default(),
            ref_mode: RefMode::Mix,
            eps_acc: 0.003,
            t_r: 2,
            fixed_m: None,
            schedule: Schedule::SftRl,
            decoupled: true,
            upload: UploadPolicy::default(),
            server_text_steps: 40,
            parallelism: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.partition.validate(self.data.num_domains)?;
        self.rl.validate()?;
        self.upload.validate()?;
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidTemperature(self.tau));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "train.lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.sft_epochs == 0 {
            return Err(Error::Config("train.sft_epochs must be at least 1".into()));
        }
        if self.server_text_steps == 0 {
            return Err(Error::Config("server.text_steps must be at least 1".into()));
        }
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        if self.dims.dim != self.data.dim {
            return Err(Error::Config(format!(
                "model dim {} must match data dim {}",
                self.dims.dim, self.data.dim
            )));
        }
        // Stage-controller parameters are checked by its constructor.
        StageController::new(self.eps_acc, self.t_r, self.fixed_m)?;
        Ok(())
    }
}

/// One client: an id and its private shard (the data never leaves).
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub data: Vec<Sample>,
    /// Sorted distinct labels present in the shard.
    pub label_set: Vec<usize>,
}

impl ClientState {
    pub fn new(id: usize, data: Vec<Sample>) -> ClientState {
        let mut labels: Vec<usize> = data.iter().map(|s| s.label).collect();
        labels.sort_unstable();
        labels.dedup();
        ClientState {
            id,
            data,
            label_set: labels,
        }
    }

    pub fn size(&self) -> usize {
        self.data.len()
    }
}

/// Server-held state: the global image adapters, the supervised-stage
/// checkpoint (immutable once set), the trainable text encoder, and the
/// per-class text-embedding cache with a freshness counter.
pub struct ServerState {
    pub global_adapters: AdapterSet,
    sft_checkpoint: Option<AdapterSet>,
    pub text_stack: EncoderStack,
    /// Unit text embedding per class id, base and novel alike.
    pub text_cache: Vec<Vec<f64>>,
    pub text_version: u64,
    controller: StageController,
    schedule: Schedule,
}

impl ServerState {
    pub fn new(
        text_stack: EncoderStack,
        bank: &ClassTextBank,
        global_adapters: AdapterSet,
        controller: StageController,
        schedule: Schedule,
    ) -> Result<ServerState> {
        let mut server = ServerState {
            sft_checkpoint: match schedule {
                // The policy-only schedule anchors its reference to the
                // starting adapters: the supervised stage has length 0.
                Schedule::RlOnly => Some(global_adapters.clone()),
                _ => None,
            },
            global_adapters,
            text_stack,
            text_cache: Vec::new(),
            text_version: 0,
            controller,
            schedule,
        };
        server.refresh_text_cache(bank)?;
        server.text_version = 0; // initial fill is version 0
        Ok(server)
    }

    pub fn stage(&self) -> Stage {
        match self.schedule {
            Schedule::SftOnly => Stage::Sft,
            Schedule::RlOnly => Stage::Rl,
            Schedule::SftRl => self.controller.stage(),
        }
    }

    pub fn sft_checkpoint(&self) -> Option<&AdapterSet> {
        self.sft_checkpoint.as_ref()
    }

    pub fn transition_round(&self) -> Option<usize> {
        match self.schedule {
            Schedule::RlOnly => Some(0),
            Schedule::SftOnly => None,
            Schedule::SftRl => self.controller.transition_round(),
        }
    }

    fn set_sft_checkpoint(&mut self, adapters: AdapterSet) {
        assert!(
            self.sft_checkpoint.is_none(),
            "supervised-stage checkpoint is immutable once set"
        );
        self.sft_checkpoint = Some(adapters);
    }

    /// Recompute the cached text embeddings for every class and bump the
    /// freshness counter.
    pub fn refresh_text_cache(&mut self, bank: &ClassTextBank) -> Result<()> {
        let mut cache = Vec::with_capacity(bank.num_classes());
        for c in 0..bank.num_classes() {
            cache.push(encode_text(&self.text_stack, bank, c)?);
        }
        self.text_cache = cache;
        self.text_version += 1;
        Ok(())
    }
}

/// Weighted adapter aggregation: sum of (N_k / N) times each client's
/// adapters, applied independently to every matrix.
pub fn aggregate_lora(deltas: &[AdapterSet], sizes: &[usize]) -> Result<AdapterSet> {
    if deltas.is_empty() || deltas.len() != sizes.len() {
        return Err(Error::shape(
            "adapter aggregation",
            format!("{} size entries", deltas.len()),
            format!("{}", sizes.len()),
        ));
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::Config("aggregation: total client size is 0".into()));
    }
    let mut out = AdapterSet::zeros_like(&deltas[0]);
    for (delta, &n) in deltas.iter().zip(sizes) {
        out.add_scaled(delta, n as f64 / total as f64)?;
    }
    Ok(out)
}

/// Compute the client's noise-free shard embeddings with its current
/// parameters and apply the upload policy: ratio subsample, per-class cap,
/// per-class group averaging, then additive noise.
pub fn select_upload_embeddings(
    stack: &EncoderStack,
    data: &[Sample],
    policy: &UploadPolicy,
    rng: &mut impl Rng,
) -> Result<wire::EmbeddingBatch> {
    let dim = stack.out_dim();
    let mut pool: Vec<(Vec<f64>, usize)> = Vec::with_capacity(data.len());
    for sample in data {
        let z = encode_image(stack, &sample.features, None)?;
        pool.push((z, sample.label));
    }

    if policy.ratio < 1.0 {
        let keep = (policy.ratio * pool.len() as f64).ceil() as usize;
        let keep = keep.max(1).min(pool.len());
        let picked = rand::seq::index::sample(rng, pool.len(), keep);
        let mut idx: Vec<usize> = picked.iter().collect();
        idx.sort_unstable();
        pool = idx.into_iter().map(|i| pool[i].clone()).collect();
    }

    if let Some(cap) = policy.per_class_cap {
        let mut by_class: BTreeMap<usize, Vec<(Vec<f64>, usize)>> = BTreeMap::new();
        for e in pool {
            by_class.entry(e.1).or_default().push(e);
        }
        let mut capped = Vec::new();
        for (_, mut entries) in by_class {
            if entries.len() > cap {
                let picked = rand::seq::index::sample(rng, entries.len(), cap);
                let mut idx: Vec<usize> = picked.iter().collect();
                idx.sort_unstable();
                capped.extend(idx.into_iter().map(|i| entries[i].clone()));
            } else {
                capped.append(&mut entries);
            }
        }
        pool = capped;
    }

    if let Some(g) = policy.groups {
        let mut by_class: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
        for (z, l) in pool {
            by_class.entry(l).or_default().push(z);
        }
        let mut grouped = Vec::new();
        for (label, mut embs) in by_class {
            embs.shuffle(rng);
            let n = embs.len();
            let g_eff = g.min(n);
            // Split into g groups as evenly as possible: the first n % g
            // groups get one extra member.
            let base = n / g_eff;
            let extra = n % g_eff;
            let mut start = 0;
            for gi in 0..g_eff {
                let len = base + usize::from(gi < extra);
                let group = &embs[start..start + len];
                start += len;
                let mut mean = vec![0.0; dim];
                for z in group {
                    for (m, v) in mean.iter_mut().zip(z) {
                        *m += v / len as f64;
                    }
                }
                grouped.push((mean, label));
            }
        }
        pool = grouped;
    }

    if let Some(sigma) = policy.noise_sigma {
        let normal = Normal::new(0.0, sigma)
            .map_err(|_| Error::Config(format!("upload.noise_sigma invalid: {sigma}")))?;
        for (z, _) in pool.iter_mut() {
            for v in z.iter_mut() {
                *v += normal.sample(rng);
            }
        }
    }

    let mut batch = wire::EmbeddingBatch::new(dim);
    for (z, l) in &pool {
        batch.push(z, *l)?;
    }
    Ok(batch)
}

/// Cross-entropy of a batch of uploaded image embeddings against the
/// trainable text embeddings of the base classes. Uploads are constants;
/// only the text adapters receive gradient.
pub(crate) fn build_text_ce_loss(
    tape: &mut Tape,
    params: &[crate::numerics::tape::Var],
    text_stack: &EncoderStack,
    uploads: &wire::EmbeddingBatch,
    indices: &[usize],
    base_classes: &[usize],
    bank: &ClassTextBank,
    tau: f64,
) -> Result<crate::numerics::tape::Var> {
    let mut class_nodes = Vec::with_capacity(base_classes.len());
    for &c in base_classes {
        let dir = tape.constant(bank.get(c)?);
        let h = text_stack.forward_on_tape(tape, params, dir);
        let norm = l2_norm(tape.value(h));
        if norm <= crate::encoders::DEGENERATE_NORM {
            return Err(Error::DegenerateEmbedding { norm });
        }
        class_nodes.push(tape.normalize(h));
    }
    let mut log_probs = Vec::new();
    for &i in indices {
        let z = tape.constant(uploads.embedding(i));
        let sims: Vec<_> = class_nodes.iter().map(|&t| tape.dot(z, t)).collect();
        let sims = tape.concat(sims);
        let p = tape.softmax_temp(sims, tau);
        let pos = base_classes
            .iter()
            .position(|&c| c == uploads.labels[i])
            .ok_or(Error::UnknownClass(uploads.labels[i]))?;
        let p_y = tape.index(p, pos);
        log_probs.push(tape.ln(p_y));
    }
    let m = log_probs.len();
    let w = -1.0 / m as f64;
    Ok(tape.weighted_sum(log_probs.into_iter().map(|v| (v, w)).collect()))
}

/// Server-side text update over all clients' uploads: minibatch
/// cross-entropy with the uploads fixed and the text adapters trainable,
/// cycling reshuffled passes of the pool until the configured step budget
/// is spent. Empty upload sets leave the encoder untouched and report
/// `false`; otherwise the per-class text-embedding cache is refreshed
/// afterward for base and novel classes alike.
pub fn server_text_update(
    server: &mut ServerState,
    uploads: &wire::EmbeddingBatch,
    base_classes: &[usize],
    bank: &ClassTextBank,
    cfg: &ExperimentConfig,
    rng: &mut impl Rng,
) -> Result<bool> {
    if uploads.is_empty() {
        return Ok(false);
    }
    let mut adam = AdamState::new(cfg.lr, server.text_stack.num_slots());
    let mut steps = 0;
    'budget: loop {
        let mut order: Vec<usize> = (0..uploads.len()).collect();
        order.shuffle(rng);
        let mut start = 0;
        while start < order.len() {
            if steps == cfg.server_text_steps {
                break 'budget;
            }
            let end = (start + cfg.batch_size).min(order.len());
            let mut tape = Tape::new(server.text_stack.num_slots());
            let params = server.text_stack.register_params(&mut tape, 0);
            let loss = build_text_ce_loss(
                &mut tape,
                &params,
                &server.text_stack,
                uploads,
                &order[start..end],
                base_classes,
                bank,
                cfg.tau,
            )?;
            let grads = tape.backward(loss)?;
            adam.step(&mut server.text_stack.slot_buffers_mut(), &grads);
            steps += 1;
            start = end;
        }
    }
    server.refresh_text_cache(bank)?;
    Ok(true)
}

/// Serialized per-round client output: the only things that cross the
/// channel.
pub struct ClientRoundOutput {
    pub adapter_bytes: Vec<u8>,
    pub embedding_bytes: Option<Vec<u8>>,
    pub train_acc: f64,
    pub mean_loss: f64,
    pub size: usize,
}

/// Broadcast package shared by all clients in a round.
pub struct Broadcast<'a> {
    /// Serialized global adapters (identical bytes for every client).
    pub adapter_bytes: &'a [u8],
    /// Serialized reference adapters, present during the policy stage.
    pub reference_bytes: Option<&'a [u8]>,
    /// Base-class text embeddings in base-class order.
    pub text_embs: &'a [Vec<f64>],
    pub base_classes: &'a [usize],
    pub stage: Stage,
}

/// One client's local round: initialize from the broadcast adapters, run
/// the stage's local updates, and return serialized adapters, the upload
/// batch, and training stats.
pub fn client_round(
    client: &ClientState,
    base_image: &EncoderStack,
    broadcast: &Broadcast,
    cfg: &ExperimentConfig,
    train_rng: &mut impl Rng,
    upload_rng: &mut impl Rng,
) -> Result<ClientRoundOutput> {
    let mut stack = base_image.clone();
    stack.set_adapters(&wire::decode_adapter_set(broadcast.adapter_bytes)?)?;
    let mut adam = AdamState::new(cfg.lr, stack.num_slots());
    let ctx = ScoringContext {
        text_embs: broadcast.text_embs,
        candidates: broadcast.base_classes,
        tau: cfg.tau,
    };

    let (train_acc, mean_loss) = match broadcast.stage {
        Stage::Sft => {
            let mut acc = 0.0;
            let mut ce = 0.0;
            for _ in 0..cfg.sft_epochs {
                let stats = sft_epoch(
                    &mut stack,
                    &mut adam,
                    &client.data,
                    &ctx,
                    cfg.batch_size,
                    train_rng,
                )?;
                acc = stats.accuracy;
                ce = stats.mean_ce;
            }
            (acc, ce)
        }
        Stage::Rl => {
            let ref_bytes = broadcast.reference_bytes.ok_or_else(|| {
                Error::Config("policy stage requires broadcast reference adapters".into())
            })?;
            let reference =
                PolicySnapshot::from_adapters(base_image, &wire::decode_adapter_set(ref_bytes)?)?;
            let mut order: Vec<usize> = (0..client.data.len()).collect();
            order.shuffle(train_rng);
            let mut reward_sum = 0.0;
            let mut reward_n = 0usize;
            let mut loss_sum = 0.0;
            let mut batches = 0usize;
            let mut start = 0;
            while start < order.len() {
                let end = (start + cfg.batch_size).min(order.len());
                let batch: Vec<&Sample> =
                    order[start..end].iter().map(|&i| &client.data[i]).collect();
                let stats = rl_batch_update(
                    &mut stack, &mut adam, &batch, &reference, &ctx, &cfg.rl, train_rng,
                )?;
                reward_sum += stats.mean_reward * (batch.len() * cfg.rl.group_size) as f64;
                reward_n += batch.len() * cfg.rl.group_size;
                loss_sum += stats.mean_loss;
                batches += 1;
                start = end;
            }
            (
                if reward_n > 0 {
                    reward_sum / reward_n as f64
                } else {
                    0.0
                },
                if batches > 0 {
                    loss_sum / batches as f64
                } else {
                    0.0
                },
            )
        }
    };

    let embedding_bytes = if cfg.decoupled {
        let batch = select_upload_embeddings(&stack, &client.data, &cfg.upload, upload_rng)?;
        Some(wire::encode_embedding_batch(&batch))
    } else {
        None
    };

    Ok(ClientRoundOutput {
        adapter_bytes: wire::encode_adapter_set(&stack.adapters()),
        embedding_bytes,
        train_acc,
        mean_loss,
        size: client.size(),
    })
}

/// Aggregated outcome of one round, before evaluation.
pub struct RoundOutcome {
    pub train_acc_mean: f64,
    pub mean_loss: f64,
    pub transitioned: bool,
}

/// Run one communication round: broadcast, local updates (optionally in
/// parallel), weighted aggregation, stage-transition check, and the server
/// text update. A failing client aborts the round with its id.
pub fn run_round(
    server: &mut ServerState,
    clients: &[ClientState],
    base_image: &EncoderStack,
    bank: &ClassTextBank,
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    round: usize,
    pool: Option<&rayon::ThreadPool>,
) -> Result<RoundOutcome> {
    let stage = server.stage();
    let adapter_bytes = wire::encode_adapter_set(&server.global_adapters);
    let reference_bytes = if stage == Stage::Rl {
        let checkpoint = server
            .sft_checkpoint
            .as_ref()
            .expect("policy stage entered without a supervised checkpoint");
        let reference = build_reference(checkpoint, &server.global_adapters, cfg.ref_mode)?;
        Some(wire::encode_adapter_set(&reference))
    } else {
        None
    };
    let text_embs: Vec<Vec<f64>> = dataset
        .base_classes
        .iter()
        .map(|&c| server.text_cache[c].clone())
        .collect();
    let broadcast = Broadcast {
        adapter_bytes: &adapter_bytes,
        reference_bytes: reference_bytes.as_deref(),
        text_embs: &text_embs,
        base_classes: &dataset.base_classes,
        stage,
    };

    let run_client = |client: &ClientState| -> Result<ClientRoundOutput> {
        let mut train_rng = stream(cfg.seed, &[tag("client"), client.id as u64, round as u64]);
        let mut upload_rng = stream(cfg.seed, &[tag("upload"), client.id as u64, round as u64]);
        client_round(
            client,
            base_image,
            &broadcast,
            cfg,
            &mut train_rng,
            &mut upload_rng,
        )
        .map_err(|e| Error::ClientFailure {
            client: client.id,
            source: Box::new(e),
        })
    };
    let outputs: Result<Vec<ClientRoundOutput>> = match pool {
        Some(pool) => pool.install(|| clients.par_iter().map(run_client).collect()),
        None => clients.iter().map(run_client).collect(),
    };
    let outputs = outputs?;

    let deltas: Result<Vec<AdapterSet>> = outputs
        .iter()
        .map(|o| wire::decode_adapter_set(&o.adapter_bytes))
        .collect();
    let sizes: Vec<usize> = outputs.iter().map(|o| o.size).collect();
    server.global_adapters = aggregate_lora(&deltas?, &sizes)?;

    let train_acc_mean = outputs.iter().map(|o| o.train_acc).sum::<f64>() / outputs.len() as f64;
    let mean_loss = outputs.iter().map(|o| o.mean_loss).sum::<f64>() / outputs.len() as f64;

    let mut transitioned = false;
    if cfg.schedule == Schedule::SftRl
        && server.controller.stage() == Stage::Sft
        && server.controller.should_transition(train_acc_mean)
    {
        server.set_sft_checkpoint(server.global_adapters.clone());
        transitioned = true;
    }

    if cfg.decoupled {
        let dim = server.text_stack.out_dim();
        let mut all = wire::EmbeddingBatch::new(dim);
        for output in &outputs {
            let bytes = output
                .embedding_bytes
                .as_ref()
                .expect("decoupled round must carry embedding uploads");
            let batch = wire::decode_embedding_batch(bytes)?;
            wire::audit_embedding_batch(&batch, &dataset.base_classes, dim)?;
            for i in 0..batch.len() {
                all.push(batch.embedding(i), batch.labels[i])?;
            }
        }
        let mut rng = stream(cfg.seed, &[tag("server_text"), round as u64]);
        server_text_update(server, &all, &dataset.base_classes, bank, cfg, &mut rng)?;
    }

    Ok(RoundOutcome {
        train_acc_mean,
        mean_loss,
        transitioned,
    })
}

/// Evaluate the current global model on the test split.
fn evaluate_global(
    server: &ServerState,
    base_image: &EncoderStack,
    dataset: &Dataset,
    clients: &[ClientState],
    cfg: &ExperimentConfig,
    round: usize,
    stage: Stage,
    train_acc_mean: f64,
    mean_loss: f64,
) -> Result<RoundMetrics> {
    let mut stack = base_image.clone();
    stack.set_adapters(&server.global_adapters)?;
    let base_samples: Vec<&Sample> = dataset
        .test
        .iter()
        .filter(|s| dataset.base_classes.contains(&s.label))
        .collect();
    let novel_samples: Vec<&Sample> = dataset
        .test
        .iter()
        .filter(|s| dataset.novel_classes.contains(&s.label))
        .collect();
    let base_acc = accuracy(
        &stack,
        &base_samples,
        &dataset.base_classes,
        &server.text_cache,
        cfg.tau,
    )?;
    let novel_acc = if dataset.novel_classes.is_empty() {
        None
    } else {
        accuracy(
            &stack,
            &novel_samples,
            &dataset.novel_classes,
            &server.text_cache,
            cfg.tau,
        )?
    };
    let label_sets: Vec<Vec<usize>> = clients.iter().map(|c| c.label_set.clone()).collect();
    let local_acc = local_accuracy(
        &stack,
        &dataset.test,
        &label_sets,
        &server.text_cache,
        cfg.tau,
    )?;
    let domain_accs = if dataset.num_domains > 1 {
        per_domain_accuracy(
            &stack,
            &dataset.test,
            &dataset.base_classes,
            &server.text_cache,
            cfg.tau,
            dataset.num_domains,
        )?
    } else {
        Vec::new()
    };
    Ok(RoundMetrics {
        round,
        stage,
        train_acc_mean,
        mean_loss,
        local_acc,
        base_acc,
        novel_acc,
        hm: None,
        domain_accs,
    }
    .with_hm())
}

/// Everything a finished experiment produces.
pub struct ExperimentOutcome {
    /// Zero-shot metrics of the initial model (round 0).
    pub zero_shot: RoundMetrics,
    /// One row per communication round.
    pub metrics: Vec<RoundMetrics>,
    pub final_image_adapters: AdapterSet,
    pub final_text_adapters: AdapterSet,
    /// Round at which the supervised stage ended, if it did.
    pub transition_round: Option<usize>,
    pub client_sizes: Vec<usize>,
}

/// Generate the dataset and carve the base-class training pool into client
/// shards, applying the few-shot limit when configured. The experiment's
/// seed overrides the data spec's so one key controls the whole run.
pub fn build_clients(
    cfg: &ExperimentConfig,
) -> Result<(crate::data::Dataset, ClassTextBank, Vec<ClientState>)> {
    let mut data_spec = cfg.data.clone();
    data_spec.seed = cfg.seed;
    let (dataset, bank) = generate_synthetic(&data_spec)?;

    let base_indices = dataset.base_train_indices();
    let shards = partition(&dataset.train, &base_indices, &cfg.partition, cfg.seed)?;
    let clients: Vec<ClientState> = shards
        .iter()
        .enumerate()
        .map(|(k, shard)| {
            let indices = match cfg.partition.shots {
                Some(shots) => {
                    let mut rng = stream(cfg.seed, &[tag("few_shot"), k as u64]);
                    few_shot_subsample(shard, &dataset.train, shots, &mut rng)
                }
                None => shard.clone(),
            };
            let data: Vec<Sample> = indices.iter().map(|&i| dataset.train[i].clone()).collect();
            ClientState::new(k, data)
        })
        .collect();
    Ok((dataset, bank, clients))
}

/// Run the full experiment: generate data, partition it, initialize the
/// encoders, run `cfg.rounds` federated rounds, and evaluate after each.
/// Deterministic given `cfg.seed`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let (dataset, bank, clients) = build_clients(cfg)?;

    let enc = init_pretrained_like(cfg.seed, &cfg.dims, cfg.tau)?;
    let base_image = enc.image;
    let controller = StageController::new(cfg.eps_acc, cfg.t_r, cfg.fixed_m)?;
    let mut server = ServerState::new(
        enc.text,
        &bank,
        base_image.adapters(),
        controller,
        cfg.schedule,
    )?;

    let pool = if cfg.parallelism > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.parallelism)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let zero_shot = evaluate_global(
        &server,
        &base_image,
        &dataset,
        &clients,
        cfg,
        0,
        Stage::Sft,
        0.0,
        0.0,
    )?;

    let mut metrics = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let stage = server.stage();
        let outcome = run_round(
            &mut server,
            &clients,
            &base_image,
            &bank,
            &dataset,
            cfg,
            round,
            pool.as_ref(),
        )?;
        metrics.push(evaluate_global(
            &server,
            &base_image,
            &dataset,
            &clients,
            cfg,
            round,
            stage,
            outcome.train_acc_mean,
            outcome.mean_loss,
        )?);
    }

    Ok(ExperimentOutcome {
        zero_shot,
        metrics,
        final_image_adapters: server.global_adapters.clone(),
        final_text_adapters: server.text_stack.adapters(),
        transition_round: server.transition_round(),
        client_sizes: clients.iter().map(|c| c.size()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_gradient, max_relative_error, Matrix};

    fn small_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.num_classes = 8;
        cfg.data.samples_per_class = 20;
        cfg.data.test_per_class = 5;
        cfg.partition.num_clients = 2;
        cfg.rounds = 2;
        cfg.batch_size = 16;
        cfg
    }

    fn random_set(seed: u64, shapes: &[(usize, usize)]) -> AdapterSet {
        let mut rng = stream(seed, &[tag("fed_test")]);
        AdapterSet {
            matrices: shapes
                .iter()
                .map(|&(r, c)| {
                    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen::<f64>() - 0.5).collect())
                        .unwrap()
                })
                .collect(),
        }
    }

    #[test]
    fn single_client_aggregation_is_identity() {
        let d = random_set(1, &[(2, 4), (4, 2)]);
        let agg = aggregate_lora(std::slice::from_ref(&d), &[17]).unwrap();
        assert_eq!(agg, d);
    }

    #[test]
    fn equal_weight_aggregation_averages() {
        let mut two = random_set(2, &[(3, 3)]);
        let mut four = two.clone();
        two.scale(2.0);
        four.scale(4.0);
        let mut three = random_set(2, &[(3, 3)]);
        three.scale(3.0);
        let agg = aggregate_lora(&[two, four], &[10, 10]).unwrap();
        for (a, b) in agg.matrices[0].data().iter().zip(three.matrices[0].data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn weighted_aggregation_matches_scalar_oracle() {
        let x = random_set(3, &[(2, 3), (3, 2)]);
        let y = random_set(4, &[(2, 3), (3, 2)]);
        let agg = aggregate_lora(&[x.clone(), y.clone()], &[1, 3]).unwrap();
        for (mi, m) in agg.matrices.iter().enumerate() {
            for (i, v) in m.data().iter().enumerate() {
                let expect = 0.25 * x.matrices[mi].data()[i] + 0.75 * y.matrices[mi].data()[i];
                assert!((v - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn aggregation_is_convex_combination() {
        let mut rng = stream(5, &[tag("convex")]);
        for _ in 0..20 {
            let k = 2 + (rng.gen::<u64>() % 5) as usize;
            let deltas: Vec<AdapterSet> = (0..k)
                .map(|i| random_set(100 + i as u64, &[(3, 4)]))
                .collect();
            let sizes: Vec<usize> = (0..k)
                .map(|_| 1 + (rng.gen::<u64>() % 50) as usize)
                .collect();
            let agg = aggregate_lora(&deltas, &sizes).unwrap();
            for (i, v) in agg.matrices[0].data().iter().enumerate() {
                let lo = deltas
                    .iter()
                    .map(|d| d.matrices[0].data()[i])
                    .fold(f64::INFINITY, f64::min);
                let hi = deltas
                    .iter()
                    .map(|d| d.matrices[0].data()[i])
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn aggregation_rejects_mismatched_shapes() {
        let a = random_set(6, &[(2, 2)]);
        let b = random_set(7, &[(3, 3)]);
        assert!(aggregate_lora(&[a.clone(), b], &[1, 1]).is_err());
        assert!(aggregate_lora(&[a], &[0]).is_err());
        assert!(aggregate_lora(&[], &[]).is_err());
    }

    fn upload_fixture() -> (EncoderStack, Vec<Sample>) {
        let enc = init_pretrained_like(11, &ModelDims::default(), 0.05).unwrap();
        let mut rng = stream(11, &[tag("upload_fixture")]);
        let samples: Vec<Sample> = (0..30)
            .map(|i| Sample {
                features: (0..16).map(|_| rng.gen::<f64>() - 0.5).collect(),
                label: i % 3,
                domain: 0,
            })
            .collect();
        (enc.image, samples)
    }

    #[test]
    fn ratio_one_uploads_everything_in_order() {
        let (stack, samples) = upload_fixture();
        let policy = UploadPolicy::default();
        let batch =
            select_upload_embeddings(&stack, &samples, &policy, &mut stream(1, &[1])).unwrap();
        assert_eq!(batch.len(), 30);
        for (i, sample) in samples.iter().enumerate() {
            let z = encode_image(&stack, &sample.features, None).unwrap();
            assert_eq!(batch.embedding(i), &z[..]);
            assert_eq!(batch.labels[i], sample.label);
        }
    }

    #[test]
    fn ratio_subsample_takes_ceil() {
        let (stack, samples) = upload_fixture();
        let policy = UploadPolicy {
            ratio: 0.2,
            ..UploadPolicy::default()
        };
        let batch =
            select_upload_embeddings(&stack, &samples, &policy, &mut stream(2, &[1])).unwrap();
        assert_eq!(batch.len(), 6); // ceil(0.2 * 30)
        let policy = UploadPolicy {
            ratio: 0.21,
            ..UploadPolicy::default()
        };
        let batch =
            select_upload_embeddings(&stack, &samples, &policy, &mut stream(2, &[1])).unwrap();
        assert_eq!(batch.len(), 7); // ceil(6.3)
    }

    #[test]
    fn per_class_cap_is_exact() {
        let (stack, samples) = upload_fixture();
        let policy = UploadPolicy {
            per_class_cap: Some(4),
            ..UploadPolicy::default()
        };
        let batch =
            select_upload_embeddings(&stack, &samples, &policy, &mut stream(3, &[1])).unwrap();
        for c in 0..3 {
            let n = batch.labels.iter().filter(|&&l| l == c).count();
            assert_eq!(n, 4);
        }
    }

    #[test]
    fn singleton_groups_upload_raw_embeddings() {
        let (stack, samples) = upload_fixture();
        // 10 embeddings per class, 10 groups per class: singleton means.
        let policy = UploadPolicy {
            groups: Some(10),
            ..UploadPolicy::default()
        };
        let batch =
            select_upload_embeddings(&stack, &samples, &policy, &mut stream(4, &[1])).unwrap();
        assert_eq!(batch.len(), 30);
        // Each uploaded vector equals some raw embedding of the same class.
        for i in 0..batch.len() {
            let up = batch.embedding(i);
            let found = samples.iter().any(|s| {
                s.label == batch.labels[i] && {
                    let z = encode_image(&stack, &s.features, None).unwrap();
                    z.iter().zip(up).all(|(a, b)| a == b)
                }
            });
            assert!(found, "upload {i} does not match any raw embedding");
        }
    }

    #[test]
    fn single_group_uploads_class_centroids() {
        let (stack, samples) = upload_fixture();
        let policy = UploadPolicy {
            groups: Some(1),
            ..UploadPolicy::default()
        };
        let batch =
            select_upload_embeddings(&stack, &samples, &policy, &mut stream(5, &[1])).unwrap();
        assert_eq!(batch.len(), 3);
        for i in 0..3 {
            let c = batch.labels[i];
            let members: Vec<Vec<f64>> = samples
                .iter()
                .filter(|s| s.label == c)
                .map(|s| encode_image(&stack, &s.features, None).unwrap())
                .collect();
            for (j, v) in batch.embedding(i).iter().enumerate() {
                let mean: f64 = members.iter().map(|z| z[j]).sum::<f64>() / members.len() as f64;
                assert!((v - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upload_noise_perturbs_every_embedding() {
        let (stack, samples) = upload_fixture();
        let clean = select_upload_embeddings(
            &stack,
            &samples,
            &UploadPolicy::default(),
            &mut stream(6, &[1]),
        )
        .unwrap();
        let noisy = select_upload_embeddings(
            &stack,
            &samples,
            &UploadPolicy {
                noise_sigma: Some(0.05),
                ..UploadPolicy::default()
            },
            &mut stream(6, &[1]),
        )
        .unwrap();
        assert_eq!(clean.len(), noisy.len());
        for i in 0..clean.len() {
            assert!(clean
                .embedding(i)
                .iter()
                .zip(noisy.embedding(i))
                .any(|(a, b)| a != b));
        }
    }

    #[test]
    fn text_update_gradient_matches_finite_differences() {
        let dims = ModelDims {
            dim: 5,
            n_layers: 2,
            rank: 1,
            lora_start_layer: 1,
            init_scale: 0.05,
        };
        let enc = init_pretrained_like(13, &dims, 0.3).unwrap();
        let bank = ClassTextBank::generate(13, 3, 5);
        let base_classes = vec![0, 1, 2];
        let mut uploads = wire::EmbeddingBatch::new(5);
        let mut rng = stream(13, &[tag("text_fd")]);
        for c in 0..3 {
            for _ in 0..2 {
                let z: Vec<f64> = bank
                    .get(c)
                    .unwrap()
                    .iter()
                    .map(|p| p + 0.3 * (rng.gen::<f64>() - 0.5))
                    .collect();
                let n = l2_norm(&z);
                uploads
                    .push(&z.iter().map(|v| v / n).collect::<Vec<f64>>(), c)
                    .unwrap();
            }
        }
        let stack = enc.text.clone();
        let base = stack.adapters();
        let flat: Vec<f64> = base
            .matrices
            .iter()
            .flat_map(|m| m.data().iter().copied())
            .collect();
        let build = |s: &EncoderStack| -> (Tape, crate::numerics::tape::Var) {
            let mut tape = Tape::new(s.num_slots());
            let params = s.register_params(&mut tape, 0);
            let mut class_nodes = Vec::new();
            for &c in &base_classes {
                let dir = tape.constant(bank.get(c).unwrap());
                let h = s.forward_on_tape(&mut tape, &params, dir);
                class_nodes.push(tape.normalize(h));
            }
            let mut log_probs = Vec::new();
            for i in 0..uploads.len() {
                let z = tape.constant(uploads.embedding(i));
                let sims: Vec<_> = class_nodes.iter().map(|&t| tape.dot(z, t)).collect();
                let sims = tape.concat(sims);
                let p = tape.softmax_temp(sims, 0.3);
                let p_y = tape.index(p, uploads.labels[i]);
                log_probs.push(tape.ln(p_y));
            }
            let w = -1.0 / uploads.len() as f64;
            let loss = tape.weighted_sum(log_probs.into_iter().map(|v| (v, w)).collect());
            (tape, loss)
        };
        let eval = |theta: &[f64]| -> f64 {
            let mut s = stack.clone();
            let mut a = base.clone();
            let mut off = 0;
            for m in a.matrices.iter_mut() {
                let len = m.data().len();
                m.data_mut().copy_from_slice(&theta[off..off + len]);
                off += len;
            }
            s.set_adapters(&a).unwrap();
            let (tape, loss) = build(&s);
            tape.scalar(loss)
        };
        let fd = finite_diff_gradient(eval, &flat, 1e-5);
        let (tape, loss) = build(&stack);
        let grads = tape.backward(loss).unwrap();
        let analytic: Vec<f64> = grads.into_iter().flatten().collect();
        assert!(max_relative_error(&analytic, &fd, 1e-8) < 1e-4);
    }

    #[test]
    fn aligned_uploads_barely_move_the_text_encoder() {
        // Uploads that already sit exactly on the current text embeddings
        // of well-separated classes, with a small temperature: CE ~ 0 and
        // the update moves the adapters by < 1e-4 in Frobenius norm.
        // tau small enough that off-class probabilities vanish below the
        // optimizer's epsilon; otherwise Adam's scale normalization would
        // turn even ~1e-7 gradients into visible steps.
        let cfg = {
            let mut c = small_config();
            c.tau = 0.01;
            c
        };
        let enc = init_pretrained_like(17, &ModelDims::default(), cfg.tau).unwrap();
        let bank = ClassTextBank::generate(17, 4, 16);
        let base_classes = vec![0, 1, 2, 3];
        let controller = StageController::new(0.003, 2, None).unwrap();
        let mut server = ServerState::new(
            enc.text,
            &bank,
            enc.image.adapters(),
            controller,
            Schedule::SftRl,
        )
        .unwrap();
        let before = server.text_stack.adapters();
        let mut uploads = wire::EmbeddingBatch::new(16);
        for &c in &base_classes {
            for _ in 0..4 {
                uploads.push(&server.text_cache[c].clone(), c).unwrap();
            }
        }
        let updated = server_text_update(
            &mut server,
            &uploads,
            &base_classes,
            &bank,
            &cfg,
            &mut stream(1, &[2]),
        )
        .unwrap();
        assert!(updated);
        let mut diff = server.text_stack.adapters();
        for (d, b) in diff.matrices.iter_mut().zip(&before.matrices) {
            d.add_scaled(b, -1.0).unwrap();
        }
        assert!(
            diff.frobenius_norm() < 1e-4,
            "moved by {}",
            diff.frobenius_norm()
        );
    }

    #[test]
    fn empty_upload_set_is_a_no_op() {
        let cfg = small_config();
        let enc = init_pretrained_like(19, &ModelDims::default(), cfg.tau).unwrap();
        let bank = ClassTextBank::generate(19, 4, 16);
        let controller = StageController::new(0.003, 2, None).unwrap();
        let mut server = ServerState::new(
            enc.text,
            &bank,
            enc.image.adapters(),
            controller,
            Schedule::SftRl,
        )
        .unwrap();
        let before = server.text_stack.adapters();
        let version = server.text_version;
        let updated = server_text_update(
            &mut server,
            &wire::EmbeddingBatch::new(16),
            &[0, 1, 2, 3],
            &bank,
            &cfg,
            &mut stream(1, &[3]),
        )
        .unwrap();
        assert!(!updated);
        assert_eq!(server.text_stack.adapters(), before);
        assert_eq!(server.text_version, version);
    }

    #[test]
    fn single_client_round_adopts_that_clients_adapters() {
        let mut cfg = small_config();
        cfg.partition.num_clients = 1;
        cfg.rounds = 1;
        let mut data_spec = cfg.data.clone();
        data_spec.seed = cfg.seed;
        let (dataset, bank) = generate_synthetic(&data_spec).unwrap();
        let base_indices = dataset.base_train_indices();
        let shards = partition(&dataset.train, &base_indices, &cfg.partition, cfg.seed).unwrap();
        let clients: Vec<ClientState> = shards
            .iter()
            .enumerate()
            .map(|(k, shard)| {
                ClientState::new(k, shard.iter().map(|&i| dataset.train[i].clone()).collect())
            })
            .collect();
        let enc = init_pretrained_like(cfg.seed, &cfg.dims, cfg.tau).unwrap();
        let base_image = enc.image;
        let controller = StageController::new(cfg.eps_acc, cfg.t_r, cfg.fixed_m).unwrap();
        let mut server = ServerState::new(
            enc.text,
            &bank,
            base_image.adapters(),
            controller,
            cfg.schedule,
        )
        .unwrap();

        // Reproduce the client's own computation independently.
        let adapter_bytes = wire::encode_adapter_set(&server.global_adapters);
        let text_embs: Vec<Vec<f64>> = dataset
            .base_classes
            .iter()
            .map(|&c| server.text_cache[c].clone())
            .collect();
        let broadcast = Broadcast {
            adapter_bytes: &adapter_bytes,
            reference_bytes: None,
            text_embs: &text_embs,
            base_classes: &dataset.base_classes,
            stage: Stage::Sft,
        };
        let expected = client_round(
            &clients[0],
            &base_image,
            &broadcast,
            &cfg,
            &mut stream(cfg.seed, &[tag("client"), 0, 1]),
            &mut stream(cfg.seed, &[tag("upload"), 0, 1]),
        )
        .unwrap();

        run_round(
            &mut server,
            &clients,
            &base_image,
            &bank,
            &dataset,
            &cfg,
            1,
            None,
        )
        .unwrap();
        assert_eq!(
            server.global_adapters,
            wire::decode_adapter_set(&expected.adapter_bytes).unwrap()
        );
    }

    #[test]
    fn identical_shards_and_streams_produce_identical_adapters() {
        let cfg = small_config();
        let mut data_spec = cfg.data.clone();
        data_spec.seed = cfg.seed;
        let (dataset, bank) = generate_synthetic(&data_spec).unwrap();
        let shard: Vec<Sample> = dataset
            .base_train_indices()
            .iter()
            .map(|&i| dataset.train[i].clone())
            .collect();
        let clients = [
            ClientState::new(0, shard.clone()),
            ClientState::new(1, shard),
        ];
        let enc = init_pretrained_like(cfg.seed, &cfg.dims, cfg.tau).unwrap();
        let base_image = enc.image;
        let controller = StageController::new(cfg.eps_acc, cfg.t_r, cfg.fixed_m).unwrap();
        let server = ServerState::new(
            enc.text,
            &bank,
            base_image.adapters(),
            controller,
            cfg.schedule,
        )
        .unwrap();
        let adapter_bytes = wire::encode_adapter_set(&server.global_adapters);
        let text_embs: Vec<Vec<f64>> = dataset
            .base_classes
            .iter()
            .map(|&c| server.text_cache[c].clone())
            .collect();
        let broadcast = Broadcast {
            adapter_bytes: &adapter_bytes,
            reference_bytes: None,
            text_embs: &text_embs,
            base_classes: &dataset.base_classes,
            stage: Stage::Sft,
        };
        // Same shard, same stream: identical local results; aggregation of
        // identical adapter sets returns the same set.
        let outs: Vec<ClientRoundOutput> = clients
            .iter()
            .map(|c| {
                client_round(
                    c,
                    &base_image,
                    &broadcast,
                    &cfg,
                    &mut stream(99, &[tag("shared")]),
                    &mut stream(99, &[tag("shared_up")]),
                )
                .unwrap()
            })
            .collect();
        assert_eq!(outs[0].adapter_bytes, outs[1].adapter_bytes);
        let deltas: Vec<AdapterSet> = outs
            .iter()
            .map(|o| wire::decode_adapter_set(&o.adapter_bytes).unwrap())
            .collect();
        let sizes = vec![outs[0].size, outs[1].size];
        let agg = aggregate_lora(&deltas, &sizes).unwrap();
        for (a, b) in agg.matrices.iter().zip(&deltas[0].matrices) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_rounds_yields_zero_shot_only() {
        let mut cfg = small_config();
        cfg.rounds = 0;
        let out = run_experiment(&cfg).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.zero_shot.round, 0);
        assert!(out.zero_shot.base_acc.is_some());
        assert!(out.zero_shot.novel_acc.is_some());
    }

    #[test]
    fn experiment_is_deterministic() {
        let cfg = small_config();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.metrics.len(), b.metrics.len());
        for (x, y) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(x.base_acc, y.base_acc);
            assert_eq!(x.novel_acc, y.novel_acc);
            assert_eq!(x.local_acc, y.local_acc);
            assert_eq!(x.train_acc_mean, y.train_acc_mean);
        }
        assert_eq!(a.final_image_adapters, b.final_image_adapters);
        assert_eq!(a.final_text_adapters, b.final_text_adapters);
    }

    #[test]
    fn parallel_clients_match_serial_run() {
        let mut cfg = small_config();
        cfg.partition.num_clients = 3;
        let serial = run_experiment(&cfg).unwrap();
        cfg.parallelism = 4;
        let parallel = run_experiment(&cfg).unwrap();
        assert_eq!(serial.final_image_adapters, parallel.final_image_adapters);
        assert_eq!(serial.final_text_adapters, parallel.final_text_adapters);
        for (x, y) in serial.metrics.iter().zip(&parallel.metrics) {
            assert_eq!(x.base_acc, y.base_acc);
            assert_eq!(x.train_acc_mean, y.train_acc_mean);
        }
    }

    #[test]
    fn training_improves_base_accuracy_over_zero_shot() {
        let mut cfg = small_config();
        cfg.rounds = 4;
        cfg.data.noise_scale = 0.4;
        let out = run_experiment(&cfg).unwrap();
        let final_base = out.metrics.last().unwrap().base_acc.unwrap();
        let zero_base = out.zero_shot.base_acc.unwrap();
        assert!(
            final_base >= zero_base,
            "final base acc {final_base} below zero-shot {zero_base}"
        );
    }

    #[test]
    fn text_cache_version_advances_each_decoupled_round() {
        let cfg = small_config();
        let mut data_spec = cfg.data.clone();
        data_spec.seed = cfg.seed;
        let (dataset, bank) = generate_synthetic(&data_spec).unwrap();
        let base_indices = dataset.base_train_indices();
        let shards = partition(&dataset.train, &base_indices, &cfg.partition, cfg.seed).unwrap();
        let clients: Vec<ClientState> = shards
            .iter()
            .enumerate()
            .map(|(k, shard)| {
                ClientState::new(k, shard.iter().map(|&i| dataset.train[i].clone()).collect())
            })
            .collect();
        let enc = init_pretrained_like(cfg.seed, &cfg.dims, cfg.tau).unwrap();
        let base_image = enc.image;
        let controller = StageController::new(cfg.eps_acc, cfg.t_r, cfg.fixed_m).unwrap();
        let mut server = ServerState::new(
            enc.text,
            &bank,
            base_image.adapters(),
            controller,
            cfg.schedule,
        )
        .unwrap();
        assert_eq!(server.text_version, 0);
        run_round(
            &mut server,
            &clients,
            &base_image,
            &bank,
            &dataset,
            &cfg,
            1,
            None,
        )
        .unwrap();
        assert_eq!(server.text_version, 1);
        run_round(
            &mut server,
            &clients,
            &base_image,
            &bank,
            &dataset,
            &cfg,
            2,
            None,
        )
        .unwrap();
        assert_eq!(server.text_version, 2);
    }

    #[test]
    fn coupled_off_keeps_text_encoder_frozen() {
        let mut cfg = small_config();
        cfg.decoupled = false;
        cfg.schedule = Schedule::SftOnly;
        let out = run_experiment(&cfg).unwrap();
        // Text adapters never trained: still the zero-initialized B side.
        let enc = init_pretrained_like(cfg.seed, &cfg.dims, cfg.tau).unwrap();
        assert_eq!(out.final_text_adapters, enc.text.adapters());
    }

    #[test]
    fn fixed_m_schedule_transitions_on_time() {
        let mut cfg = small_config();
        cfg.rounds = 4;
        cfg.fixed_m = Some(2);
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.transition_round, Some(2));
        assert_eq!(out.metrics[0].stage, Stage::Sft);
        assert_eq!(out.metrics[1].stage, Stage::Sft);
        assert_eq!(out.metrics[2].stage, Stage::Rl);
        assert_eq!(out.metrics[3].stage, Stage::Rl);
    }

    #[test]
    fn rl_only_schedule_starts_in_policy_stage() {
        let mut cfg = small_config();
        cfg.rounds = 1;
        cfg.schedule = Schedule::RlOnly;
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.metrics[0].stage, Stage::Rl);
        assert_eq!(out.transition_round, Some(0));
    }

    #[test]
    fn config_validation_runs_before_work() {
        let mut cfg = small_config();
        cfg.tau = 0.0;
        assert!(matches!(
            run_experiment(&cfg),
            Err(Error::InvalidTemperature(_))
        ));
        let mut cfg = small_config();
        cfg.dims.dim = 8; // mismatched with data dim 16
        assert!(run_experiment(&cfg).is_err());
    }
}

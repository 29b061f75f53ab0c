//! Synthetic dataset generation and federated partition schemes.
//!
//! Samples are Gaussian clusters around unit class prototypes (the text-bank
//! vectors), optionally pushed through per-domain affine transforms to model
//! feature shift. Partitioning covers IID, Dirichlet label skew, disjoint
//! class assignment, and whole-domain assignment with optional within-domain
//! skew. Base/novel splits and few-shot caps follow the evaluation protocol:
//! novel classes never enter any client shard.

use crate::encoders::ClassTextBank;
use crate::error::{Error, Result};
use crate::numerics::{l2_norm, Matrix};
use crate::rng::{stream, tag};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

/// One labeled feature vector. `domain` is 0 in single-domain settings.
#[derive(Debug, Clone)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
    pub domain: usize,
}

/// Generation settings for the synthetic task.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub num_classes: usize,
    /// Fraction of classes treated as base (seen in training); the rest are
    /// novel. Base ids are the first ceil(fraction * num_classes).
    pub base_fraction: f64,
    pub samples_per_class: usize,
    /// Held-out samples per class for evaluation.
    pub test_per_class: usize,
    /// Std of the Gaussian scatter around each class prototype.
    pub noise_scale: f64,
    pub num_domains: usize,
    /// Weight on the random orthogonal component of each non-identity
    /// domain transform: M = (1-w) I + w Q.
    pub domain_mix: f64,
    /// Norm of each non-identity domain's additive shift.
    pub domain_shift_norm: f64,
    /// Feature dimension (must match the model input dimension).
    pub dim: usize,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            num_classes: 16,
            base_fraction: 0.5,
            samples_per_class: 100,
            test_per_class: 20,
            noise_scale: 0.4,
            num_domains: 1,
            domain_mix: 0.5,
            domain_shift_norm: 0.3,
            dim: 16,
            seed: 0,
        }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("data.num_classes must be at least 2".into()));
        }
        if !(self.base_fraction > 0.0 && self.base_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "data.base_fraction must be in (0, 1], got {}",
                self.base_fraction
            )));
        }
        if self.base_fraction * (self.num_classes as f64) < 1.0 {
            return Err(Error::Config(
                "data.base_fraction leaves no base class".into(),
            ));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config(
                "data.samples_per_class must be positive".into(),
            ));
        }
        if self.test_per_class == 0 {
            return Err(Error::Config("data.test_per_class must be positive".into()));
        }
        if self.noise_scale < 0.0 || !self.noise_scale.is_finite() {
            return Err(Error::Config(format!(
                "data.noise_scale must be finite and non-negative, got {}",
                self.noise_scale
            )));
        }
        if self.num_domains == 0 {
            return Err(Error::Config("data.num_domains must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.domain_mix) {
            return Err(Error::Config(format!(
                "data.domain_mix must be in [0, 1], got {}",
                self.domain_mix
            )));
        }
        if self.dim < 2 {
            return Err(Error::Config("data.dim must be at least 2".into()));
        }
        Ok(())
    }
}

/// An affine feature transform x -> M x + shift.
#[derive(Debug, Clone)]
pub struct DomainTransform {
    pub matrix: Matrix,
    pub shift: Vec<f64>,
}

impl DomainTransform {
    pub fn identity(dim: usize) -> DomainTransform {
        DomainTransform {
            matrix: Matrix::identity(dim),
            shift: vec![0.0; dim],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.matrix.matvec(x)?;
        for (yi, si) in y.iter_mut().zip(&self.shift) {
            *yi += si;
        }
        Ok(y)
    }
}

/// The generated task: train and held-out test sets plus the class split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub base_classes: Vec<usize>,
    pub novel_classes: Vec<usize>,
    pub num_domains: usize,
}

impl Dataset {
    /// Indices of training samples whose label is a base class.
    pub fn base_train_indices(&self) -> Vec<usize> {
        let last_base = *self.base_classes.last().expect("at least one base class");
        self.train
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label <= last_base)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Deterministic base/novel split: the first ceil(fraction * c_all) class
/// ids are base, the rest novel.
pub fn split_base_novel(c_all: usize, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let n_base = ((fraction * c_all as f64).ceil() as usize)
        .min(c_all)
        .max(1);
    ((0..n_base).collect(), (n_base..c_all).collect())
}

fn domain_transforms(spec: &DataSpec) -> Vec<DomainTransform> {
    (0..spec.num_domains)
        .map(|d| {
            if d == 0 {
                // Domain 0 is the identity so single-domain runs are
                // untransformed and multi-domain runs keep one clean domain.
                DomainTransform::identity(spec.dim)
            } else {
                let mut rng = stream(spec.seed, &[tag("domain"), d as u64]);
                let q = Matrix::random_orthogonal(&mut rng, spec.dim);
                let mut m = Matrix::identity(spec.dim);
                m.scale(1.0 - spec.domain_mix);
                m.add_scaled(&q, spec.domain_mix).expect("same shape");
                let normal = Normal::new(0.0, 1.0).expect("unit normal");
                let dir: Vec<f64> = (0..spec.dim).map(|_| normal.sample(&mut rng)).collect();
                let n = l2_norm(&dir);
                let shift = dir.iter().map(|v| v / n * spec.domain_shift_norm).collect();
                DomainTransform { matrix: m, shift }
            }
        })
        .collect()
}

fn draw_split(
    spec: &DataSpec,
    transforms: &[DomainTransform],
    per_class: usize,
    split_tag: &str,
    bank: &ClassTextBank,
) -> Result<Vec<Sample>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(per_class * spec.num_classes);
    for c in 0..spec.num_classes {
        let proto = bank.get(c)?;
        let mut rng = stream(spec.seed, &[tag(split_tag), c as u64]);
        for i in 0..per_class {
            let domain = i % spec.num_domains;
            let raw: Vec<f64> = proto
                .iter()
                .map(|p| p + spec.noise_scale * normal.sample(&mut rng))
                .collect();
            out.push(Sample {
                features: transforms[domain].apply(&raw)?,
                label: c,
                domain,
            });
        }
    }
    Ok(out)
}

/// Generate the full synthetic task. Class prototypes are the text bank's
/// unit vectors; each sample is prototype + N(0, s^2 I) pushed through its
/// domain transform. Deterministic per seed.
pub fn generate_synthetic(spec: &DataSpec) -> Result<(Dataset, ClassTextBank)> {
    spec.validate()?;
    let bank = ClassTextBank::generate(spec.seed, spec.num_classes, spec.dim);
    let transforms = domain_transforms(spec);
    let train = draw_split(
        spec,
        &transforms,
        spec.samples_per_class,
        "train_samples",
        &bank,
    )?;
    let test = draw_split(
        spec,
        &transforms,
        spec.test_per_class,
        "test_samples",
        &bank,
    )?;
    let (base_classes, novel_classes) = split_base_novel(spec.num_classes, spec.base_fraction);
    Ok((
        Dataset {
            train,
            test,
            base_classes,
            novel_classes,
            num_domains: spec.num_domains,
        },
        bank,
    ))
}

/// Within-domain sub-partitioning for the feature-shift scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Within {
    /// One client per domain, holding all of that domain's data.
    One,
    Iid,
    Dirichlet(f64),
}

/// Partition scheme over the base-class training samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    Iid,
    /// Per-class client proportions drawn from a symmetric Dirichlet.
    Dirichlet(f64),
    /// Each client holds a disjoint, contiguous block of base classes.
    NoniidDisjoint,
    /// Whole domains map to disjoint client groups.
    FeatureShift(Within),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub scheme: Scheme,
    pub num_clients: usize,
    /// Few-shot cap per present class per client (None = full data).
    pub shots: Option<usize>,
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec {
            scheme: Scheme::Dirichlet(0.5),
            num_clients: 5,
            shots: None,
        }
    }
}

impl PartitionSpec {
    pub fn validate(&self, num_domains: usize) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::Config(
                "partition.num_clients must be positive".into(),
            ));
        }
        match self.scheme {
            Scheme::Dirichlet(a) | Scheme::FeatureShift(Within::Dirichlet(a))
                if !(a > 0.0) || !a.is_finite() =>
            {
                return Err(Error::Config(format!(
                    "dirichlet alpha must be positive and finite, got {a}"
                )));
            }
            _ => {}
        }
        if let Scheme::FeatureShift(within) = self.scheme {
            if num_domains < 2 {
                return Err(Error::Config(
                    "feature_shift partitioning needs data.num_domains >= 2".into(),
                ));
            }
            if !self.num_clients.is_multiple_of(num_domains) {
                return Err(Error::Config(format!(
                    "feature_shift needs num_clients ({}) divisible by num_domains ({})",
                    self.num_clients, num_domains
                )));
            }
            if within == Within::One && self.num_clients != num_domains {
                return Err(Error::Config(
                    "feature_shift within=one needs exactly one client per domain".into(),
                ));
            }
        }
        if let Some(shots) = self.shots {
            if shots == 0 {
                return Err(Error::Config("partition.shots must be at least 1".into()));
            }
        }
        Ok(())
    }
}

/// Draw per-client proportions from a symmetric Dirichlet(alpha) via
/// normalized Gamma draws. A fully underflowed draw degenerates to a point
/// mass on one uniformly chosen client, the correct alpha -> 0 limit.
fn dirichlet_proportions(alpha: f64, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("valid gamma shape");
    let mut p: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = p.iter().sum();
    if !(total > 1e-300) || !total.is_finite() {
        let winner = rng.gen_range(0..k);
        p = vec![0.0; k];
        p[winner] = 1.0;
        return p;
    }
    for v in p.iter_mut() {
        *v /= total;
    }
    p
}

fn sample_categorical(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Group indices (into `samples`) by label, classes in sorted order.
fn by_class(indices: &[usize], samples: &[Sample]) -> Vec<(usize, Vec<usize>)> {
    let mut map = std::collections::BTreeMap::new();
    for &i in indices {
        map.entry(samples[i].label).or_insert_with(Vec::new).push(i);
    }
    map.into_iter().collect()
}

fn shards_iid(indices: &[usize], k: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(rng);
    let mut shards = vec![Vec::new(); k];
    for (pos, idx) in shuffled.into_iter().enumerate() {
        shards[pos % k].push(idx);
    }
    shards
}

fn shards_dirichlet(
    indices: &[usize],
    samples: &[Sample],
    alpha: f64,
    k: usize,
    rng: &mut impl Rng,
) -> Vec<Vec<usize>> {
    let mut shards = vec![Vec::new(); k];
    for (_, class_indices) in by_class(indices, samples) {
        let p = dirichlet_proportions(alpha, k, rng);
        for idx in class_indices {
            shards[sample_categorical(&p, rng)].push(idx);
        }
    }
    shards
}

/// Contiguous class blocks: client k gets floor(C/K) classes, the first
/// C mod K clients one extra, preserving sorted class order.
fn shards_disjoint(indices: &[usize], samples: &[Sample], k: usize) -> Vec<Vec<usize>> {
    let grouped = by_class(indices, samples);
    let c = grouped.len();
    let base = c / k;
    let extra = c % k;
    let mut shards = vec![Vec::new(); k];
    let mut next = 0usize;
    for (client, shard) in shards.iter_mut().enumerate() {
        let size = base + usize::from(client < extra);
        for (_, class_indices) in grouped.iter().skip(next).take(size) {
            shard.extend_from_slice(class_indices);
        }
        next += size;
    }
    shards
}

fn build_shards(
    samples: &[Sample],
    indices: &[usize],
    spec: &PartitionSpec,
    rng: &mut impl Rng,
) -> Vec<Vec<usize>> {
    let k = spec.num_clients;
    match spec.scheme {
        Scheme::Iid => shards_iid(indices, k, rng),
        Scheme::Dirichlet(alpha) => shards_dirichlet(indices, samples, alpha, k, rng),
        Scheme::NoniidDisjoint => shards_disjoint(indices, samples, k),
        Scheme::FeatureShift(within) => {
            let num_domains = samples.iter().map(|s| s.domain).max().map_or(1, |d| d + 1);
            let per_domain = k / num_domains;
            let mut shards = vec![Vec::new(); k];
            for d in 0..num_domains {
                let domain_indices: Vec<usize> = indices
                    .iter()
                    .copied()
                    .filter(|&i| samples[i].domain == d)
                    .collect();
                let client_base = d * per_domain;
                let sub = match within {
                    Within::One => vec![domain_indices],
                    Within::Iid => shards_iid(&domain_indices, per_domain, rng),
                    Within::Dirichlet(alpha) => {
                        shards_dirichlet(&domain_indices, samples, alpha, per_domain, rng)
                    }
                };
                for (offset, shard) in sub.into_iter().enumerate() {
                    shards[client_base + offset] = shard;
                }
            }
            shards
        }
    }
}

/// Partition base-class training samples into client shards (index lists
/// into `samples`, which must already exclude novel classes). Schemes that
/// can randomly produce an empty shard are retried with fresh sub-streams
/// up to 10 times before the configuration is rejected.
pub fn partition(
    samples: &[Sample],
    indices: &[usize],
    spec: &PartitionSpec,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    let num_domains = samples.iter().map(|s| s.domain).max().map_or(1, |d| d + 1);
    spec.validate(num_domains)?;
    const RETRIES: usize = 10;
    let mut first_empty = 0;
    for attempt in 0..RETRIES {
        let mut rng = stream(seed, &[tag("partition"), attempt as u64]);
        let shards = build_shards(samples, indices, spec, &mut rng);
        match shards.iter().position(|s| s.is_empty()) {
            None => return Ok(shards),
            Some(i) => first_empty = i,
        }
    }
    Err(Error::EmptyShard {
        client: first_empty,
        retries: RETRIES,
    })
}

/// Cap each present class at `shots` samples, selected uniformly without
/// replacement; smaller classes are kept whole.
pub fn few_shot_subsample(
    shard: &[usize],
    samples: &[Sample],
    shots: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let mut out = Vec::new();
    for (_, class_indices) in by_class(shard, samples) {
        if class_indices.len() <= shots {
            out.extend_from_slice(&class_indices);
        } else {
            let picked = rand::seq::index::sample(rng, class_indices.len(), shots);
            let mut chosen: Vec<usize> = picked.iter().map(|i| class_indices[i]).collect();
            chosen.sort_unstable();
            out.extend(chosen);
        }
    }
    out
}

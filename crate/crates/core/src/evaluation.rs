//! Metrics over the global model: local, base, and novel accuracy, their
//! harmonic mean, and per-domain breakdowns under feature shift.
//!
//! Every metric is a candidate-restricted argmax accuracy: a sample counts
//! as correct when the highest-probability class among the candidate set
//! equals its label, with exact ties broken toward the lowest class id.
//! Local accuracy restricts candidates to each client's own label set and
//! averages uniformly over clients; base and novel accuracy use the base
//! and novel class sets respectively, keeping novel classes fully isolated
//! from training-time candidates.

use crate::data::Sample;
use crate::encoders::{class_probabilities, encode_image, EncoderStack};
use crate::error::{Error, Result};

/// Fraction of `samples` whose argmax over the candidate classes equals the
/// label. `class_embs` is indexed by class id and must cover every
/// candidate. Empty sample sets have no defined accuracy and yield `None`.
pub fn accuracy(
    stack: &EncoderStack,
    samples: &[&Sample],
    candidates: &[usize],
    class_embs: &[Vec<f64>],
    tau: f64,
) -> Result<Option<f64>> {
    if candidates.is_empty() {
        return Err(Error::Config("accuracy: empty candidate set".into()));
    }
    for &c in candidates {
        if c >= class_embs.len() {
            return Err(Error::UnknownClass(c));
        }
    }
    if samples.is_empty() {
        return Ok(None);
    }
    let cand_embs: Vec<Vec<f64>> = candidates.iter().map(|&c| class_embs[c].clone()).collect();
    let mut correct = 0usize;
    for sample in samples {
        if !candidates.contains(&sample.label) {
            return Err(Error::UnknownClass(sample.label));
        }
        let z = encode_image(stack, &sample.features, None)?;
        let probs = class_probabilities(&z, &cand_embs, tau)?;
        let mut best_pos = 0;
        for (pos, &p) in probs.iter().enumerate().skip(1) {
            let better = p > probs[best_pos]
                || (p == probs[best_pos] && candidates[pos] < candidates[best_pos]);
            if better {
                best_pos = pos;
            }
        }
        if candidates[best_pos] == sample.label {
            correct += 1;
        }
    }
    Ok(Some(correct as f64 / samples.len() as f64))
}

/// Per-client accuracy on the client's own label set, averaged uniformly
/// over the clients that have any matching test samples.
pub fn local_accuracy(
    stack: &EncoderStack,
    test: &[Sample],
    client_label_sets: &[Vec<usize>],
    class_embs: &[Vec<f64>],
    tau: f64,
) -> Result<Option<f64>> {
    let mut accs = Vec::new();
    for labels in client_label_sets {
        if labels.is_empty() {
            continue;
        }
        let samples: Vec<&Sample> = test.iter().filter(|s| labels.contains(&s.label)).collect();
        if let Some(a) = accuracy(stack, &samples, labels, class_embs, tau)? {
            accs.push(a);
        }
    }
    if accs.is_empty() {
        Ok(None)
    } else {
        Ok(Some(accs.iter().sum::<f64>() / accs.len() as f64))
    }
}

/// Accuracy split by sample domain (candidates fixed), one entry per domain
/// id in `0..num_domains`. Domains without test samples yield `None`.
pub fn per_domain_accuracy(
    stack: &EncoderStack,
    test: &[Sample],
    candidates: &[usize],
    class_embs: &[Vec<f64>],
    tau: f64,
    num_domains: usize,
) -> Result<Vec<Option<f64>>> {
    let mut out = Vec::with_capacity(num_domains);
    for d in 0..num_domains {
        let samples: Vec<&Sample> = test
            .iter()
            .filter(|s| s.domain == d && candidates.contains(&s.label))
            .collect();
        out.push(accuracy(stack, &samples, candidates, class_embs, tau)?);
    }
    Ok(out)
}

/// Harmonic mean 2bn/(b+n) of base and novel accuracy; 0 when both are 0.
pub fn harmonic_mean(b: f64, n: f64) -> f64 {
    if b + n == 0.0 {
        0.0
    } else {
        2.0 * b * n / (b + n)
    }
}

/// One logged row of the experiment: training-side stats plus the global
/// evaluation metrics. Absent metrics (no qualifying samples) stay `None`.
#[derive(Debug, Clone)]
pub struct RoundMetrics {
    pub round: usize,
    pub stage: crate::local_training::Stage,
    pub train_acc_mean: f64,
    pub mean_loss: f64,
    pub local_acc: Option<f64>,
    pub base_acc: Option<f64>,
    pub novel_acc: Option<f64>,
    pub hm: Option<f64>,
    /// Per-domain base accuracy; empty for single-domain data.
    pub domain_accs: Vec<Option<f64>>,
}

impl RoundMetrics {
    /// Fill `hm` from base and novel accuracy by the defining equation.
    pub fn with_hm(mut self) -> RoundMetrics {
        self.hm = match (self.base_acc, self.novel_acc) {
            (Some(b), Some(n)) => Some(harmonic_mean(b, n)),
            _ => None,
        };
        self
    }
}

fn csv_cell(v: Option<f64>) -> String {
    v.map(|x| crate::config::fmt_sig(x, 6)).unwrap_or_default()
}

/// Render per-round metrics as CSV: one row per round with the shared
/// columns, plus one base-accuracy column per domain when the data has more
/// than one. Missing metrics become empty cells.
pub fn metrics_csv(rows: &[RoundMetrics], num_domains: usize) -> String {
    use std::fmt::Write as _;
    let mut s = String::from("round,stage,train_acc_mean,local_acc,base_acc,novel_acc,hm");
    if num_domains > 1 {
        for d in 0..num_domains {
            let _ = write!(s, ",domain{d}_acc");
        }
    }
    s.push('\n');
    for m in rows {
        let _ = write!(
            s,
            "{},{},{},{},{},{},{}",
            m.round,
            m.stage.name(),
            crate::config::fmt_sig(m.train_acc_mean, 6),
            csv_cell(m.local_acc),
            csv_cell(m.base_acc),
            csv_cell(m.novel_acc),
            csv_cell(m.hm),
        );
        if num_domains > 1 {
            for d in 0..num_domains {
                s.push(',');
                s.push_str(&csv_cell(m.domain_accs.get(d).copied().flatten()));
            }
        }
        s.push('\n');
    }
    s
}

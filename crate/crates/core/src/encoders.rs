//! Dual-encoder model: an image MLP and a text MLP with low-rank adapters on
//! their deeper layers, mapping into a shared unit-norm latent space.
//!
//! Classification follows the contrastive convention: cosine similarity
//! between the image embedding and per-class text embeddings, scaled by a
//! temperature and passed through softmax. Since all emitted embeddings are
//! unit norm, cosine similarity reduces to a dot product.

use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{l2_norm, softmax_with_temperature, Matrix};
use crate::rng::{stream, tag};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Minimum latent norm before normalization; below this the sample is
/// rejected as degenerate rather than divided by near-zero.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// A linear layer with a frozen base weight and a trainable low-rank delta:
/// y = (W0 + B*A) x.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    w0: Matrix,
    a: Matrix,
    b: Matrix,
}

impl LoraLinear {
    /// Wraps a frozen base weight with a rank-`r` adapter. `A` (r x d2) is
    /// Gaussian with std 1/sqrt(d2); `B` (d1 x r) starts at zero so the
    /// initial delta vanishes and the wrapped layer equals the base layer.
    pub fn new(w0: Matrix, rank: usize, rng: &mut impl Rng) -> Result<Self> {
        let (d1, d2) = (w0.rows(), w0.cols());
        if rank == 0 || rank > d1.min(d2) / 2 {
            return Err(Error::Config(format!(
                "lora rank {rank} out of range for a {d1}x{d2} layer (need 1..={})",
                d1.min(d2) / 2
            )));
        }
        let a = Matrix::gaussian(rng, rank, d2, 1.0 / (d2 as f64).sqrt());
        let b = Matrix::zeros(d1, rank);
        Ok(LoraLinear { w0, a, b })
    }

    pub fn base(&self) -> &Matrix {
        &self.w0
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn adapter_a(&self) -> &Matrix {
        &self.a
    }

    pub fn adapter_b(&self) -> &Matrix {
        &self.b
    }

    /// The materialized low-rank delta B*A (d1 x d2), for inspection.
    pub fn delta(&self) -> Matrix {
        let (d1, d2, r) = (self.w0.rows(), self.w0.cols(), self.rank());
        let mut out = Matrix::zeros(d1, d2);
        for i in 0..d1 {
            for j in 0..d2 {
                let mut s = 0.0;
                for k in 0..r {
                    s += self.b[(i, k)] * self.a[(k, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }
}

/// y = (W0 + B*A) x, computed as W0 x + B (A x) without materializing the
/// dense sum. W0 is never mutated.
pub fn lora_forward(layer: &LoraLinear, x: &[f64]) -> Result<Vec<f64>> {
    let mut y = layer.w0.matvec(x)?;
    let ax = layer.a.matvec(x)?;
    let bax = layer.b.matvec(&ax)?;
    for (yi, di) in y.iter_mut().zip(&bax) {
        *yi += di;
    }
    Ok(y)
}

/// One stack layer: a plain frozen linear map or an adapter-carrying one.
#[derive(Debug, Clone)]
pub enum Layer {
    Frozen(Matrix),
    Lora(LoraLinear),
}

impl Layer {
    fn in_dim(&self) -> usize {
        match self {
            Layer::Frozen(m) => m.cols(),
            Layer::Lora(l) => l.w0.cols(),
        }
    }

    fn out_dim(&self) -> usize {
        match self {
            Layer::Frozen(m) => m.rows(),
            Layer::Lora(l) => l.w0.rows(),
        }
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Layer::Frozen(m) => m.matvec(x),
            Layer::Lora(l) => lora_forward(l, x),
        }
    }
}

/// The trainable adapter matrices of one encoder stack, in stack order with
/// A before B per adapter layer. This is the unit that clients upload, the
/// server aggregates, and checkpoints store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub matrices: Vec<Matrix>,
}

impl AdapterSet {
    pub fn zeros_like(other: &AdapterSet) -> AdapterSet {
        AdapterSet {
            matrices: other
                .matrices
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }

    /// self += k * other, shape-checked.
    pub fn add_scaled(&mut self, other: &AdapterSet, k: f64) -> Result<()> {
        if self.matrices.len() != other.matrices.len() {
            return Err(Error::shape(
                "adapter add_scaled",
                format!("{} matrices", self.matrices.len()),
                format!("{} matrices", other.matrices.len()),
            ));
        }
        for (m, o) in self.matrices.iter_mut().zip(&other.matrices) {
            m.add_scaled(o, k)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for m in self.matrices.iter_mut() {
            m.scale(k);
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.matrices
            .iter()
            .map(|m| {
                let n = m.frobenius_norm();
                n * n
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Elementwise midpoint of two equally shaped sets.
    pub fn mix(a: &AdapterSet, b: &AdapterSet) -> Result<AdapterSet> {
        let mut out = a.clone();
        out.scale(0.5);
        out.add_scaled(b, 0.5)?;
        Ok(out)
    }
}

/// An MLP encoder: linear layers with tanh between them (not after the last),
/// producing a latent that callers normalize to the unit sphere.
#[derive(Debug, Clone)]
pub struct EncoderStack {
    layers: Vec<Layer>,
}

impl EncoderStack {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config(
                "encoder stack needs at least one layer".into(),
            ));
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::shape(
                    "encoder stack",
                    format!("layer input {}", w[0].out_dim()),
                    format!("layer input {}", w[1].in_dim()),
                ));
            }
        }
        Ok(EncoderStack { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Raw (pre-normalization) forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut h = self.layers[0].forward(x)?;
        for layer in &self.layers[1..] {
            for v in h.iter_mut() {
                *v = v.tanh();
            }
            h = layer.forward(&h)?;
        }
        Ok(h)
    }

    /// Number of trainable parameter slots (A and B per adapter layer).
    pub fn num_slots(&self) -> usize {
        2 * self
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::Lora(_)))
            .count()
    }

    /// Snapshot of the adapter matrices in slot order.
    pub fn adapters(&self) -> AdapterSet {
        let mut matrices = Vec::new();
        for layer in &self.layers {
            if let Layer::Lora(l) = layer {
                matrices.push(l.a.clone());
                matrices.push(l.b.clone());
            }
        }
        AdapterSet { matrices }
    }

    /// Overwrite the adapter matrices from a snapshot (shape-checked).
    pub fn set_adapters(&mut self, set: &AdapterSet) -> Result<()> {
        let mut it = set.matrices.iter();
        for layer in self.layers.iter_mut() {
            if let Layer::Lora(l) = layer {
                for target in [&mut l.a, &mut l.b] {
                    let src = it.next().ok_or_else(|| {
                        Error::shape(
                            "set_adapters",
                            "matrix per slot".to_string(),
                            "exhausted".to_string(),
                        )
                    })?;
                    if !target.same_shape(src) {
                        return Err(Error::shape(
                            "set_adapters",
                            target.shape_string(),
                            src.shape_string(),
                        ));
                    }
                    *target = src.clone();
                }
            }
        }
        if it.next().is_some() {
            return Err(Error::shape(
                "set_adapters",
                "matrix count matching stack",
                "extra matrices".to_string(),
            ));
        }
        Ok(())
    }

    /// Mutable views of the trainable buffers, in slot order, for the
    /// optimizer to update in place.
    pub fn slot_buffers_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in self.layers.iter_mut() {
            if let Layer::Lora(l) = layer {
                out.push(l.a.data_mut());
                out.push(l.b.data_mut());
            }
        }
        out
    }

    /// Register this stack's trainable parameters on a tape, in slot order
    /// starting at `slot_base`. Returns the parameter vars.
    pub fn register_params(&self, tape: &mut Tape, slot_base: usize) -> Vec<Var> {
        let mut vars = Vec::new();
        let mut slot = slot_base;
        for layer in &self.layers {
            if let Layer::Lora(l) = layer {
                vars.push(tape.param(slot, l.a.data()));
                vars.push(tape.param(slot + 1, l.b.data()));
                slot += 2;
            }
        }
        vars
    }

    /// Tape forward pass using previously registered parameter vars. The
    /// frozen base weights enter as constants and receive no gradient.
    pub fn forward_on_tape(&self, tape: &mut Tape, params: &[Var], x: Var) -> Var {
        let mut it = params.iter();
        let mut h = x;
        for (idx, layer) in self.layers.iter().enumerate() {
            if idx > 0 {
                h = tape.tanh(h);
            }
            h = match layer {
                Layer::Frozen(m) => {
                    let w = tape.constant(m.data());
                    tape.matvec(w, m.rows(), m.cols(), h)
                }
                Layer::Lora(l) => {
                    let a = *it.next().expect("params shorter than adapter slots");
                    let b = *it.next().expect("params shorter than adapter slots");
                    let w0 = tape.constant(l.w0.data());
                    let base = tape.matvec(w0, l.w0.rows(), l.w0.cols(), h);
                    let ax = tape.matvec(a, l.a.rows(), l.a.cols(), h);
                    let bax = tape.matvec(b, l.b.rows(), l.b.cols(), ax);
                    tape.add(base, bax)
                }
            };
        }
        h
    }
}

/// Fixed per-class raw description vectors standing in for tokenized class
/// names: unit-norm Gaussian directions, reproducible from (seed, class id).
#[derive(Debug, Clone)]
pub struct ClassTextBank {
    vectors: Vec<Vec<f64>>,
}

impl ClassTextBank {
    pub fn generate(seed: u64, num_classes: usize, dim: usize) -> ClassTextBank {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let vectors = (0..num_classes)
            .map(|c| {
                let mut rng = stream(seed, &[tag("text_bank"), c as u64]);
                loop {
                    let v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
                    let n = l2_norm(&v);
                    if n > 1e-9 {
                        return v.iter().map(|x| x / n).collect();
                    }
                }
            })
            .collect();
        ClassTextBank { vectors }
    }

    pub fn num_classes(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, |v| v.len())
    }

    pub fn get(&self, class_id: usize) -> Result<&[f64]> {
        self.vectors
            .get(class_id)
            .map(|v| v.as_slice())
            .ok_or(Error::UnknownClass(class_id))
    }
}

/// Normalize a latent to the unit sphere, rejecting degenerate norms.
pub fn normalize_latent(mut z: Vec<f64>) -> Result<Vec<f64>> {
    let n = l2_norm(&z);
    if !(n > DEGENERATE_NORM) {
        return Err(Error::DegenerateEmbedding { norm: n });
    }
    for v in z.iter_mut() {
        *v /= n;
    }
    Ok(z)
}

/// Image embedding: forward, optional additive latent noise, then
/// normalization. Passing a zero noise vector matches the no-noise call.
pub fn encode_image(enc: &EncoderStack, x: &[f64], noise: Option<&[f64]>) -> Result<Vec<f64>> {
    let mut z = enc.forward(x)?;
    if let Some(eps) = noise {
        if eps.len() != z.len() {
            return Err(Error::shape(
                "encode_image noise",
                format!("length {}", z.len()),
                format!("length {}", eps.len()),
            ));
        }
        for (zi, ei) in z.iter_mut().zip(eps) {
            *zi += ei;
        }
    }
    normalize_latent(z)
}

/// Text embedding of a class: its bank vector through the text stack,
/// normalized.
pub fn encode_text(enc: &EncoderStack, bank: &ClassTextBank, class_id: usize) -> Result<Vec<f64>> {
    let t = bank.get(class_id)?;
    normalize_latent(enc.forward(t)?)
}

/// Temperature-softmax over cosine similarities. All inputs must be unit
/// embeddings so the dot product is the cosine.
pub fn class_probabilities(z_v: &[f64], text_embs: &[Vec<f64>], tau: f64) -> Result<Vec<f64>> {
    let mut sims = Vec::with_capacity(text_embs.len());
    for t in text_embs {
        if t.len() != z_v.len() {
            return Err(Error::shape(
                "class_probabilities",
                format!("embedding dim {}", z_v.len()),
                format!("embedding dim {}", t.len()),
            ));
        }
        sims.push(crate::numerics::dot(z_v, t));
    }
    softmax_with_temperature(&sims, tau)
}

/// Model shape and initialization settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDims {
    /// Shared input/latent dimension (the near-identity init requires
    /// d_in = d_t = d_e).
    pub dim: usize,
    /// Layers per encoder stack.
    pub n_layers: usize,
    /// Adapter rank.
    pub rank: usize,
    /// First layer index carrying an adapter; earlier layers stay frozen.
    pub lora_start_layer: usize,
    /// Std of the Gaussian perturbation around identity in frozen weights.
    pub init_scale: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            dim: 16,
            n_layers: 2,
            rank: 4,
            lora_start_layer: 1,
            // Large enough that the image and text stacks disagree at init;
            // closing that cross-modal gap is what fine-tuning learns.
            init_scale: 0.2,
        }
    }
}

/// The full dual-encoder model with its classification temperature.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub image: EncoderStack,
    pub text: EncoderStack,
    pub tau: f64,
}

impl DualEncoder {
    pub fn embed_dim(&self) -> usize {
        self.image.out_dim()
    }
}

fn near_identity_stack(seed: u64, which: &str, dims: &ModelDims) -> Result<EncoderStack> {
    let mut layers = Vec::with_capacity(dims.n_layers);
    for idx in 0..dims.n_layers {
        let mut rng = stream(seed, &[tag("init"), tag(which), idx as u64]);
        let mut w = Matrix::gaussian(&mut rng, dims.dim, dims.dim, dims.init_scale);
        for i in 0..dims.dim {
            w[(i, i)] += 1.0;
        }
        if idx >= dims.lora_start_layer {
            let mut lora_rng = stream(seed, &[tag("init"), tag(which), tag("lora"), idx as u64]);
            layers.push(Layer::Lora(LoraLinear::new(w, dims.rank, &mut lora_rng)?));
        } else {
            layers.push(Layer::Frozen(w));
        }
    }
    EncoderStack::new(layers)
}

/// Build a dual encoder whose frozen weights are perturbations of the
/// identity, standing in for a pre-trained backbone: the two modalities are
/// roughly aligned (zero-shot beats chance by a wide margin) but disagree
/// enough that fine-tuning has real cross-modal misalignment to absorb.
/// All adapter deltas are zero at init, so the model initially equals its
/// frozen backbone.
pub fn init_pretrained_like(seed: u64, dims: &ModelDims, tau: f64) -> Result<DualEncoder> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::InvalidTemperature(tau));
    }
    if dims.lora_start_layer >= dims.n_layers {
        return Err(Error::Config(format!(
            "lora_start_layer {} out of range for {} layers",
            dims.lora_start_layer, dims.n_layers
        )));
    }
    Ok(DualEncoder {
        image: near_identity_stack(seed, "image", dims)?,
        text: near_identity_stack(seed, "text", dims)?,
        tau,
    })
}

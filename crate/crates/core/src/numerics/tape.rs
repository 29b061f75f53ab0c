//! Reverse-mode differentiation over a recorded op tape.
//!
//! The forward pass records primitive ops (matvec, elementwise maps,
//! normalize, temperature softmax, reductions) into a linear tape; the
//! backward pass replays it once in reverse creation order, which is a
//! reverse topological order because every operand precedes its consumers.
//!
//! Trainable parameters are registered once per `slot`; constants (frozen
//! weights, broadcast embeddings, sampled noise) enter as `constant` leaves
//! and receive no gradient.

use crate::error::{Error, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param,
    /// y = M x, with M stored row-major as a tape value of length rows*cols.
    MatVec {
        m: Var,
        x: Var,
        rows: usize,
        cols: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: f64,
    },
    Shift {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Normalize {
        x: Var,
    },
    SoftmaxTemp {
        x: Var,
        tau: f64,
    },
    Dot {
        a: Var,
        b: Var,
    },
    Index {
        x: Var,
        i: usize,
    },
    Ln {
        x: Var,
    },
    Exp {
        x: Var,
    },
    Recip {
        x: Var,
    },
    Abs {
        x: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Min {
        a: Var,
        b: Var,
    },
    Clip {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Sum {
        x: Var,
    },
    /// Scalar terms combined with constant weights.
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
    /// Concatenation of parts (used to build a sims vector from per-class scalars).
    Concat {
        parts: Vec<Var>,
    },
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Gradients per parameter slot, in registration shape.
pub type SlotGrads = Vec<Vec<f64>>;

/// A single-owner op tape. Build the loss with the op methods, then call
/// [`Tape::backward`].
pub struct Tape {
    nodes: Vec<Node>,
    slots: Vec<Option<Var>>,
}

impl Tape {
    pub fn new(n_slots: usize) -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            slots: vec![None; n_slots],
        }
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(
            self.nodes[v.0].value.len(),
            1,
            "scalar() on non-scalar node"
        );
        self.nodes[v.0].value[0]
    }

    pub fn len(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn constant(&mut self, value: &[f64]) -> Var {
        self.push(value.to_vec(), Op::Const)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.push(vec![value], Op::Const)
    }

    /// Register the trainable parameter for `slot` (once per tape).
    pub fn param(&mut self, slot: usize, value: &[f64]) -> Var {
        assert!(
            self.slots[slot].is_none(),
            "param slot {slot} registered twice"
        );
        let v = self.push(value.to_vec(), Op::Param);
        self.slots[slot] = Some(v);
        v
    }

    /// y = M x where `m` holds a row-major rows*cols matrix.
    pub fn matvec(&mut self, m: Var, rows: usize, cols: usize, x: Var) -> Var {
        assert_eq!(self.len(m), rows * cols, "matvec: matrix node length");
        assert_eq!(self.len(x), cols, "matvec: vector length != cols");
        let mut y = vec![0.0; rows];
        {
            let mv = &self.nodes[m.0].value;
            let xv = &self.nodes[x.0].value;
            for r in 0..rows {
                let row = &mv[r * cols..(r + 1) * cols];
                y[r] = row.iter().zip(xv.iter()).map(|(a, b)| a * b).sum();
            }
        }
        self.push(y, Op::MatVec { m, x, rows, cols })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.len(a), self.len(b), "add: length mismatch");
        let y: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, z)| x + z)
            .collect();
        self.push(y, Op::Add { a, b })
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let y: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v * k).collect();
        self.push(y, Op::Scale { x, k })
    }

    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        let y: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v + c).collect();
        self.push(y, Op::Shift { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v.tanh()).collect();
        self.push(y, Op::Tanh { x })
    }

    /// y = x / ||x||. The caller must reject degenerate latents beforehand.
    pub fn normalize(&mut self, x: Var) -> Var {
        let n = super::l2_norm(&self.nodes[x.0].value);
        let y: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v / n).collect();
        self.push(y, Op::Normalize { x })
    }

    pub fn softmax_temp(&mut self, x: Var, tau: f64) -> Var {
        assert!(tau > 0.0, "softmax_temp: tau must be positive");
        let xv = &self.nodes[x.0].value;
        let max = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut y: Vec<f64> = xv.iter().map(|s| ((s - max) / tau).exp()).collect();
        let z: f64 = y.iter().sum();
        for v in y.iter_mut() {
            *v /= z;
        }
        self.push(y, Op::SoftmaxTemp { x, tau })
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.len(a), self.len(b), "dot: length mismatch");
        let s = super::dot(&self.nodes[a.0].value, &self.nodes[b.0].value);
        self.push(vec![s], Op::Dot { a, b })
    }

    pub fn index(&mut self, x: Var, i: usize) -> Var {
        let s = self.nodes[x.0].value[i];
        self.push(vec![s], Op::Index { x, i })
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let y: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v.ln()).collect();
        self.push(y, Op::Ln { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v.exp()).collect();
        self.push(y, Op::Exp { x })
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let y: Vec<f64> = self.nodes[x.0].value.iter().map(|v| 1.0 / v).collect();
        self.push(y, Op::Recip { x })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let y: Vec<f64> = self.nodes[x.0].value.iter().map(|v| v.abs()).collect();
        self.push(y, Op::Abs { x })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.len(a), self.len(b), "mul: length mismatch");
        let y: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, z)| x * z)
            .collect();
        self.push(y, Op::Mul { a, b })
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.len(a), self.len(b), "min: length mismatch");
        let y: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, z)| x.min(*z))
            .collect();
        self.push(y, Op::Min { a, b })
    }

    pub fn clip(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let y: Vec<f64> = self.nodes[x.0]
            .value
            .iter()
            .map(|v| v.clamp(lo, hi))
            .collect();
        self.push(y, Op::Clip { x, lo, hi })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.iter().sum();
        self.push(vec![s], Op::Sum { x })
    }

    /// Weighted sum of scalar nodes with constant weights.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let mut s = 0.0;
        for (v, w) in &terms {
            debug_assert_eq!(self.len(*v), 1, "weighted_sum: non-scalar term");
            s += self.nodes[v.0].value[0] * w;
        }
        self.push(vec![s], Op::WeightedSum { terms })
    }

    pub fn concat(&mut self, parts: Vec<Var>) -> Var {
        let mut y = Vec::new();
        for p in &parts {
            y.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(y, Op::Concat { parts })
    }

    /// Reverse pass from a scalar loss. Returns one gradient buffer per
    /// parameter slot (zeros for slots never touched by the loss).
    ///
    /// Frozen inputs (constants) receive no gradient by construction.
    pub fn backward(&self, loss: Var) -> Result<SlotGrads> {
        if self.len(loss) != 1 {
            return Err(Error::shape(
                "backward",
                "scalar loss",
                format!("length {}", self.len(loss)),
            ));
        }
        let loss_value = self.nodes[loss.0].value[0];
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss (value {loss_value}); training step aborted"
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        // Helper: accumulate into a lazily allocated grad buffer.
        fn buf(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const | Op::Param => {
                    // Leaves: Param grads are collected below; restore the buffer.
                    grads[idx] = Some(g);
                }
                Op::MatVec { m, x, rows, cols } => {
                    let xv = self.nodes[x.0].value.clone();
                    let mv = &self.nodes[m.0].value;
                    let mut gm_update = vec![0.0; rows * cols];
                    let mut gx_update = vec![0.0; *cols];
                    for r in 0..*rows {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        for c in 0..*cols {
                            gm_update[r * cols + c] += gr * xv[c];
                            gx_update[c] += mv[r * cols + c] * gr;
                        }
                    }
                    let gm = buf(&mut grads, *m, rows * cols);
                    for (a, b) in gm.iter_mut().zip(&gm_update) {
                        *a += b;
                    }
                    let gx = buf(&mut grads, *x, *cols);
                    for (a, b) in gx.iter_mut().zip(&gx_update) {
                        *a += b;
                    }
                }
                Op::Add { a, b } => {
                    let ga = buf(&mut grads, *a, g.len());
                    for (t, s) in ga.iter_mut().zip(&g) {
                        *t += s;
                    }
                    let gb = buf(&mut grads, *b, g.len());
                    for (t, s) in gb.iter_mut().zip(&g) {
                        *t += s;
                    }
                }
                Op::Scale { x, k } => {
                    let gx = buf(&mut grads, *x, g.len());
                    for (t, s) in gx.iter_mut().zip(&g) {
                        *t += k * s;
                    }
                }
                Op::Shift { x } => {
                    let gx = buf(&mut grads, *x, g.len());
                    for (t, s) in gx.iter_mut().zip(&g) {
                        *t += s;
                    }
                }
                Op::Tanh { x } => {
                    let y = node.value.clone();
                    let gx = buf(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += (1.0 - y[i] * y[i]) * g[i];
                    }
                }
                Op::Normalize { x } => {
                    let xv = &self.nodes[x.0].value;
                    let n = super::l2_norm(xv);
                    let y = &node.value;
                    let gy_dot_y = super::dot(&g, y);
                    let gx = buf(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += (g[i] - gy_dot_y * y[i]) / n;
                    }
                }
                Op::SoftmaxTemp { x, tau } => {
                    let p = &node.value;
                    let s = super::dot(&g, p);
                    let gx = buf(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += p[i] * (g[i] - s) / tau;
                    }
                }
                Op::Dot { a, b } => {
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    let g0 = g[0];
                    let ga = buf(&mut grads, *a, av.len());
                    for (t, s) in ga.iter_mut().zip(&bv) {
                        *t += g0 * s;
                    }
                    let gb = buf(&mut grads, *b, bv.len());
                    for (t, s) in gb.iter_mut().zip(&av) {
                        *t += g0 * s;
                    }
                }
                Op::Index { x, i } => {
                    let len = self.len(*x);
                    let gx = buf(&mut grads, *x, len);
                    gx[*i] += g[0];
                }
                Op::Ln { x } => {
                    let xv = self.nodes[x.0].value.clone();
                    let gx = buf(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] / xv[i];
                    }
                }
                Op::Exp { x } => {
                    let y = node.value.clone();
                    let gx = buf(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i];
                    }
                }
                Op::Recip { x } => {
                    let y = node.value.clone();
                    let gx = buf(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += -g[i] * y[i] * y[i];
                    }
                }
                Op::Abs { x } => {
                    let xv = self.nodes[x.0].value.clone();
                    let gx = buf(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        let s = if xv[i] > 0.0 {
                            1.0
                        } else if xv[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        gx[i] += g[i] * s;
                    }
                }
                Op::Mul { a, b } => {
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    let ga = buf(&mut grads, *a, av.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                    let gb = buf(&mut grads, *b, bv.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
                Op::Min { a, b } => {
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    // Subgradient: route to the smaller operand, ties to `a`.
                    let ga = buf(&mut grads, *a, av.len());
                    for i in 0..g.len() {
                        if av[i] <= bv[i] {
                            ga[i] += g[i];
                        }
                    }
                    let gb = buf(&mut grads, *b, bv.len());
                    for i in 0..g.len() {
                        if av[i] > bv[i] {
                            gb[i] += g[i];
                        }
                    }
                }
                Op::Clip { x, lo, hi } => {
                    let xv = self.nodes[x.0].value.clone();
                    let gx = buf(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        if xv[i] >= *lo && xv[i] <= *hi {
                            gx[i] += g[i];
                        }
                    }
                }
                Op::Sum { x } => {
                    let len = self.len(*x);
                    let gx = buf(&mut grads, *x, len);
                    for t in gx.iter_mut() {
                        *t += g[0];
                    }
                }
                Op::WeightedSum { terms } => {
                    for (v, w) in terms.clone() {
                        let gv = buf(&mut grads, v, 1);
                        gv[0] += g[0] * w;
                    }
                }
                Op::Concat { parts } => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let len = self.len(p);
                        let gp = buf(&mut grads, p, len);
                        for i in 0..len {
                            gp[i] += g[offset + i];
                        }
                        offset += len;
                    }
                }
            }
        }

        // Collect per-slot gradients; untouched slots get zero buffers.
        let mut out = Vec::with_capacity(self.slots.len());
        for slot_var in &self.slots {
            match slot_var {
                Some(v) => {
                    let len = self.len(*v);
                    out.push(match grads[v.0].take() {
                        Some(g) => g,
                        None => vec![0.0; len],
                    });
                }
                None => out.push(Vec::new()),
            }
        }
        Ok(out)
    }
}

//! Dense linear algebra and gradient core for small MLPs with low-rank adapters.
//!
//! Everything is 64-bit row-major and CPU-only. The module provides the
//! [`Matrix`] value type, a reverse-mode [`tape::Tape`], the [`adam`]
//! optimizer, and a central finite-difference oracle used to verify analytic
//! gradients.

pub mod adam;
pub mod tape;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Dense row-major matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dims must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} elements", rows * cols),
                format!("{}", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Entries drawn i.i.d. from N(0, std^2).
    pub fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Matrix { rows, cols, data }
    }

    /// Random orthogonal matrix: modified Gram-Schmidt on a Gaussian draw.
    pub fn random_orthogonal<R: Rng>(rng: &mut R, n: usize) -> Self {
        loop {
            let g = Matrix::gaussian(rng, n, n, 1.0);
            // Orthonormalize columns.
            let mut cols: Vec<Vec<f64>> = (0..n)
                .map(|j| (0..n).map(|i| g.data[i * n + j]).collect())
                .collect();
            let mut ok = true;
            for j in 0..n {
                for k in 0..j {
                    let proj: f64 = (0..n).map(|i| cols[j][i] * cols[k][i]).sum();
                    for i in 0..n {
                        cols[j][i] -= proj * cols[k][i];
                    }
                }
                let norm: f64 = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < 1e-10 {
                    ok = false;
                    break;
                }
                for v in cols[j].iter_mut() {
                    *v /= norm;
                }
            }
            if !ok {
                continue; // degenerate draw; redo
            }
            let mut q = Matrix::zeros(n, n);
            for j in 0..n {
                for i in 0..n {
                    q.data[i * n + j] = cols[j][i];
                }
            }
            return q;
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    /// y = M x.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape(
                "matvec",
                format!("vector of length {}", self.cols),
                format!("{}", x.len()),
            ));
        }
        let mut y = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            y[r] = row.iter().zip(x).map(|(m, v)| m * v).sum();
        }
        Ok(y)
    }

    /// self += k * other.
    pub fn add_scaled(&mut self, other: &Matrix, k: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape(
                "add_scaled",
                self.shape_string(),
                other.shape_string(),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for v in self.data.iter_mut() {
            *v *= k;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Temperature-scaled softmax with max-subtraction.
///
/// `p_c = exp(sims_c / tau) / sum_j exp(sims_j / tau)`.
pub fn softmax_with_temperature(sims: &[f64], tau: f64) -> Result<Vec<f64>> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::InvalidTemperature(tau));
    }
    if sims.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = sims.iter().map(|s| ((s - max) / tau).exp()).collect();
    let z: f64 = p.iter().sum();
    for v in p.iter_mut() {
        *v /= z;
    }
    Ok(p)
}

/// L2 norm of a vector.
pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Dot product; lengths must already match.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient estimate by central differences: `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// `f` must be deterministic; this is the verification oracle the analytic
/// backward pass is checked against.
pub fn finite_diff_gradient<F>(mut f: F, params: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut theta = params.to_vec();
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = theta[i];
        theta[i] = orig + h;
        let plus = f(&theta);
        theta[i] = orig - h;
        let minus = f(&theta);
        theta[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Elementwise relative-error comparison used by gradient checks.
///
/// Entries where both magnitudes fall below `floor` are ignored.
pub fn max_relative_error(analytic: &[f64], reference: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    let mut worst = 0.0f64;
    for (a, r) in analytic.iter().zip(reference) {
        if a.abs() < floor && r.abs() < floor {
            continue;
        }
        let rel = (a - r).abs() / a.abs().max(r.abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}

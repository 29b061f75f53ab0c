//! Adam optimizer over flat parameter buffers, one moment pair per slot.

/// Adam state for a fixed set of parameter slots.
///
/// Moments are kept per slot and sized lazily on first use so callers can
/// register slots without knowing buffer lengths up front. A step whose
/// gradient contains a non-finite entry is skipped in full (no moment or
/// parameter update) and reported via the return value.
#[derive(Debug, Clone)]
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, n_slots: usize) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![Vec::new(); n_slots],
            v: vec![Vec::new(); n_slots],
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Apply one Adam step to all slots in place.
    ///
    /// Returns `false` (leaving every slot untouched) if any gradient entry
    /// is non-finite; callers count such skips as flagged steps.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) -> bool {
        assert_eq!(params.len(), grads.len(), "adam: slot count mismatch");
        assert_eq!(
            params.len(),
            self.m.len(),
            "adam: state sized for different slots"
        );
        for g in grads {
            if g.iter().any(|x| !x.is_finite()) {
                return false;
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if g.is_empty() {
                continue;
            }
            assert_eq!(p.len(), g.len(), "adam: param/grad length mismatch");
            if self.m[slot].is_empty() {
                self.m[slot] = vec![0.0; g.len()];
                self.v[slot] = vec![0.0; g.len()];
            }
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut adam = AdamState::new(1e-3, 1);
        let mut p = vec![1.0, -2.0, 3.0];
        let g = vec![vec![0.0, 0.0, 0.0]];
        let applied = adam.step(&mut [&mut p], &g);
        assert!(applied);
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_is_signed_unit_step_times_lr() {
        // With fresh moments, Adam's first update is -lr * g / (|g| + eps'),
        // i.e. approximately -lr * sign(g).
        let mut adam = AdamState::new(0.01, 1);
        let mut p = vec![0.0, 0.0];
        let g = vec![vec![5.0, -0.25]];
        assert!(adam.step(&mut [&mut p], &g));
        assert!((p[0] + 0.01).abs() < 1e-6, "got {}", p[0]);
        assert!((p[1] - 0.01).abs() < 1e-6, "got {}", p[1]);
    }

    #[test]
    fn non_finite_gradient_skips_whole_step() {
        let mut adam = AdamState::new(0.01, 2);
        let mut a = vec![1.0];
        let mut b = vec![2.0];
        let g = vec![vec![f64::NAN], vec![1.0]];
        let applied = adam.step(&mut [&mut a, &mut b], &g);
        assert!(!applied);
        assert_eq!(a, vec![1.0]);
        assert_eq!(b, vec![2.0]);
        // Step counter must not advance on a skipped step.
        let g2 = vec![vec![1.0], vec![1.0]];
        assert!(adam.step(&mut [&mut a, &mut b], &g2));
        assert!((a[0] - 0.99).abs() < 1e-6);
    }

    #[test]
    fn empty_slots_are_ignored() {
        let mut adam = AdamState::new(0.01, 2);
        let mut a = vec![1.0];
        let mut empty: Vec<f64> = Vec::new();
        let g = vec![vec![1.0], Vec::new()];
        assert!(adam.step(&mut [&mut a, &mut empty], &g));
        assert!(a[0] < 1.0);
    }
}

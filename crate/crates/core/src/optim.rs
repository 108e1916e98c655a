use serde::{Deserialize, Serialize};

/// Bias-corrected Adam state over a fixed list of parameter blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptState {
    pub fn new(lr: f64, block_sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn matches(&self, block_sizes: &[usize]) -> bool {
        self.first_moment.len() == block_sizes.len()
            && self
                .first_moment
                .iter()
                .zip(block_sizes)
                .all(|(m, &n)| m.len() == n)
    }

    /// One update over `params[i] -= lr · m̂ / (√v̂ + ε)`.
    pub fn apply(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.first_moment.len(), "block count mismatch");
        assert_eq!(grads.len(), params.len(), "block count mismatch");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (b, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[b];
            let v = &mut self.second_moment[b];
            assert_eq!(p.len(), g.len(), "block {b} shape mismatch");
            assert_eq!(m.len(), g.len(), "block {b} shape mismatch");
            for i in 0..g.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut st = OptState::new(1e-3, &[1]);
        let mut x = [0.5];
        st.apply(&mut [&mut x[..]], &[&[1.0]]);
        assert!((x[0] - (0.5 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut st = OptState::new(1e-3, &[3]);
        let mut x = [1.0, -2.0, 3.0];
        for _ in 0..100 {
            st.apply(&mut [&mut x[..]], &[&[0.0, 0.0, 0.0]]);
        }
        assert_eq!(x, [1.0, -2.0, 3.0]);
    }
}

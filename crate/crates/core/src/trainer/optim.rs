//! AdamW: Adam moments with weight decay applied directly to the parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        AdamW {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// One update: `p <- p (1 - lr wd)`, then `p <- p - lr m_hat / (sqrt(v_hat) + eps)`.
    pub fn update(&self, params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
        if params.len() != grads.len() || params.len() != state.m.len() || state.m.len() != state.v.len() {
            return Err(Error::Dimension(format!(
                "optimizer shapes disagree: params {}, grads {}, m {}, v {}",
                params.len(),
                grads.len(),
                state.m.len(),
                state.v.len()
            )));
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.learning_rate * self.weight_decay;
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
            *p *= decay;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let opt = AdamW::new(1e-3, 0.0);
        let mut p = vec![0.5, -2.0, 3.0];
        let mut s = AdamState::new(3);
        for _ in 0..5 {
            opt.update(&mut p, &[0.0; 3], &mut s).unwrap();
        }
        assert_eq!(p, vec![0.5, -2.0, 3.0]);
    }

    #[test]
    fn first_step_hand_computed() {
        // m_hat = g and v_hat = g^2 after bias correction, so the step is
        // -lr * g / (|g| + eps).
        let (lr, g, p0) = (0.1, 0.3, 1.0);
        let opt = AdamW::new(lr, 0.0);
        let mut p = vec![p0];
        let mut s = AdamState::new(1);
        opt.update(&mut p, &[g], &mut s).unwrap();
        let m = (1.0 - 0.9) * g;
        let v = (1.0 - 0.999) * g * g;
        let expected = p0 - lr * (m / (1.0 - 0.9)) / ((v / (1.0 - 0.999)).sqrt() + 1e-8);
        assert_eq!(p[0], expected);
        assert!((p[0] - (p0 - lr * g / (g + 1e-8))).abs() < 1e-15);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn pure_decay() {
        let opt = AdamW::new(0.01, 0.5);
        let mut p = vec![2.0, -4.0];
        let mut s = AdamState::new(2);
        opt.update(&mut p, &[0.0, 0.0], &mut s).unwrap();
        assert_eq!(p, vec![2.0 * (1.0 - 0.01 * 0.5), -4.0 * (1.0 - 0.01 * 0.5)]);
    }

    #[test]
    fn shape_mismatch() {
        let opt = AdamW::new(0.01, 0.0);
        let mut s = AdamState::new(2);
        assert!(opt.update(&mut [1.0, 2.0], &[0.0], &mut s).is_err());
    }
}

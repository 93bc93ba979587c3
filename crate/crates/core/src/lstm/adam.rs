use alloc::vec;
use alloc::vec::Vec;

use super::model::LstmGeoModel;
use super::network::Gradients;

/// Bias-corrected Adam moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], learning_rate: f64) {
        self.step += 1;
        let t = self.step as f64;
        let correction1 = 1.0 - libm::pow(self.beta1, t);
        let correction2 = 1.0 - libm::pow(self.beta2, t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p -= learning_rate * m_hat / (libm::sqrt(v_hat) + self.epsilon);
        }
    }
}

pub fn adam_step(model: &mut LstmGeoModel, state: &mut AdamState, grads: &Gradients, learning_rate: f64) {
    state.update(&mut model.params, &grads.0, learning_rate);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = AdamState::new(3);
        let mut p = [1.0, -2.0, 0.5];
        s.update(&mut p, &[0.0; 3], 0.1);
        assert_eq!(p, [1.0, -2.0, 0.5]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // m = 0.1 g, v = 0.001 g², m̂ = g, v̂ = g², step = -lr * g / (|g| + eps)
        let mut s = AdamState::new(2);
        let mut p = [0.0, 0.0];
        s.update(&mut p, &[0.5, -4.0], 0.01);
        assert!((p[0] - (-0.01 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((p[1] - (0.01 * 4.0 / (4.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn quadratic_descends_monotonically() {
        // f(x) = (x - 3)^2 from x = 0; lr 0.1
        let mut s = AdamState::new(1);
        let mut x = [0.0];
        let mut losses = vec![9.0];
        for _ in 0..2 {
            let g = 2.0 * (x[0] - 3.0);
            s.update(&mut x, &[g], 0.1);
            losses.push((x[0] - 3.0) * (x[0] - 3.0));
        }
        // scripted 1-D oracle: x1 = 0.09999999983333335, x2 = 0.19989729258521102
        assert!((x[0] - 0.199_897_292_585_211).abs() < 1e-12);
        assert!(losses.windows(2).all(|w| w[1] < w[0]));
    }
}

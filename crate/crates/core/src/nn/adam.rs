use serde::{Deserialize, Serialize};

use super::{Gradients, Network};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coefficient of the L2 penalty added to the gradient (`g + l2 * p`).
    pub l2_coeff: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2_coeff: 0.0,
        }
    }
}

/// Adam moments for one network.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub first_moment: Gradients,
    pub second_moment: Gradients,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl OptimizerState {
    pub fn new(net: &Network, config: AdamConfig) -> Self {
        Self {
            first_moment: Gradients::zeros_for(net),
            second_moment: Gradients::zeros_for(net),
            step_count: 0,
            config,
        }
    }

    /// One bias-corrected Adam update. A non-finite gradient leaves both the
    /// network and the moments untouched and is reported as a training fault.
    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::fault(format!(
                "non-finite gradient at optimizer step {}",
                self.step_count + 1
            )));
        }
        let AdamConfig {
            learning_rate: lr,
            beta1,
            beta2,
            eps,
            l2_coeff,
        } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);

        let layers = net.num_layers();
        for l in 0..layers {
            update(
                &mut net.weights[l],
                &grads.weights[l],
                &mut self.first_moment.weights[l],
                &mut self.second_moment.weights[l],
                (lr, beta1, beta2, eps, l2_coeff, c1, c2),
            );
            update(
                &mut net.biases[l],
                &grads.biases[l],
                &mut self.first_moment.biases[l],
                &mut self.second_moment.biases[l],
                (lr, beta1, beta2, eps, l2_coeff, c1, c2),
            );
        }
        Ok(())
    }
}

#[inline]
fn update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    (lr, beta1, beta2, eps, l2, c1, c2): (f64, f64, f64, f64, f64, f64, f64),
) {
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        let g = if l2 > 0.0 { g + l2 * *p } else { *g };
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Head;

    fn scalar(p: f64) -> Network {
        Network::from_parts(vec![1, 1], vec![vec![p]], vec![vec![0.0]], Head::Linear).unwrap()
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut net = scalar(1.25);
        let mut opt = OptimizerState::new(&net, AdamConfig::with_lr(0.1));
        let g = Gradients::zeros_for(&net);
        for _ in 0..10 {
            opt.step(&mut net, &g).unwrap();
        }
        assert_eq!(net.weights()[0][0], 1.25);
        assert_eq!(opt.step_count, 10);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut net = scalar(0.0);
        let mut opt = OptimizerState::new(&net, AdamConfig::with_lr(0.1));
        let mut g = Gradients::zeros_for(&net);
        g.weights[0][0] = 1.0;
        opt.step(&mut net, &g).unwrap();
        assert!((net.weights()[0][0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn quadratic_descent_makes_progress() {
        let mut net = scalar(0.0);
        let mut opt = OptimizerState::new(&net, AdamConfig::with_lr(3e-4));
        let mut best = f64::INFINITY;
        let mut g = Gradients::zeros_for(&net);
        for _ in 0..100 {
            let p = net.weights()[0][0];
            g.weights[0][0] = 2.0 * (p - 5.0);
            opt.step(&mut net, &g).unwrap();
            let gap = (net.weights()[0][0] - 5.0).abs();
            assert!(gap < best, "distance to optimum did not shrink");
            best = gap;
        }
    }

    #[test]
    fn l2_pulls_toward_zero() {
        let mut net = scalar(2.0);
        let cfg = AdamConfig {
            l2_coeff: 1e-2,
            ..AdamConfig::with_lr(0.01)
        };
        let mut opt = OptimizerState::new(&net, cfg);
        let g = Gradients::zeros_for(&net);
        opt.step(&mut net, &g).unwrap();
        assert!(net.weights()[0][0] < 2.0);
        assert_eq!(net.biases()[0][0], 0.0);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut net = scalar(1.0);
        let mut opt = OptimizerState::new(&net, AdamConfig::default());
        let mut g = Gradients::zeros_for(&net);
        g.weights[0][0] = f64::NAN;
        assert!(matches!(opt.step(&mut net, &g), Err(Error::TrainingFault(_))));
        assert_eq!(net.weights()[0][0], 1.0);
        assert_eq!(opt.step_count, 0);
    }
}

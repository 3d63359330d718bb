//! Outer-loop optimizers over flat parameter buffers.
//!
//! Attention spreads each example's gradient over only a few dictionary
//! entries, so most entries see small, sparse gradients. AdamW's per-element
//! step sizes handle that; SGD is provided for baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait Optimizer {
    /// Update `params` in place from `grads` (same layout).
    fn step(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>]) -> Result<()>;
    fn learning_rate(&self) -> f64;
    fn set_learning_rate(&mut self, lr: f64);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Per-buffer flag: apply decoupled weight decay.
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, sizes: &[usize], decay: Vec<bool>) -> Self {
        assert_eq!(sizes.len(), decay.len(), "one decay flag per buffer");
        AdamW {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            decay,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

fn check_layout(params: &[Vec<f64>], grads: &[Vec<f64>], state: &[Vec<f64>]) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::invalid("optimizer", "parameter/gradient buffer count mismatch"));
    }
    for (i, ((p, g), s)) in params.iter().zip(grads).zip(state).enumerate() {
        if p.len() != g.len() || p.len() != s.len() {
            return Err(Error::invalid("optimizer", format!("buffer {i} size mismatch")));
        }
        if let Some(j) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "gradient",
                context: format!("buffer {i}, element {j}"),
            });
        }
    }
    Ok(())
}

impl Optimizer for AdamW {
    fn step(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>]) -> Result<()> {
        check_layout(params, grads, &self.m)?;
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (b, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let wd = if self.decay[b] { weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[b], &mut self.v[b]);
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] - lr * (m_hat / (v_hat.sqrt() + eps)) - lr * wd * p[i];
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.config.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.config.lr = lr;
    }
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, sizes: &[usize]) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

impl Optimizer for Sgd {
    /// `v <- momentum * v + g; p <- p - lr * v`.
    fn step(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>]) -> Result<()> {
        check_layout(params, grads, &self.velocity)?;
        for ((p, g), vel) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for i in 0..p.len() {
                vel[i] = self.momentum * vel[i] + g[i];
                p[i] -= self.lr * vel[i];
            }
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn adamw(wd: f64, n: usize) -> AdamW {
        AdamW::new(AdamWConfig { weight_decay: wd, ..AdamWConfig::default() }, &[n], vec![true])
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut opt = adamw(0.0, 3);
        let mut p = vec![vec![0.5, -1.0, 2.0]];
        opt.step(&mut p, &[vec![0.0; 3]]).unwrap();
        assert_eq!(p[0], vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut opt = adamw(0.0, 1);
        let mut p = vec![vec![0.0]];
        opt.step(&mut p, &[vec![1.0]]).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        assert!((p[0][0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-18);
        assert!((p[0][0] + 9.999e-4).abs() < 1e-7);
    }

    #[test]
    fn three_step_trace_matches_hand_values() {
        // m, v and the bias corrections evaluated by hand for g = 1, -2, 0.5.
        let mut opt = adamw(0.0, 1);
        let mut p = vec![vec![1.0]];
        for (g, want) in [(1.0, 0.99900000001), (-2.0, 0.9993661035347208), (0.5, 0.9995027941967383)] {
            opt.step(&mut p, &[vec![g]]).unwrap();
            assert!((p[0][0] - want).abs() < 1e-12, "{} vs {want}", p[0][0]);
        }
        assert_eq!(opt.steps_taken(), 3);
    }

    #[test]
    fn decoupled_decay_shrinks_by_exact_amount() {
        let mut opt = adamw(0.1, 2);
        let mut p = vec![vec![2.0, -3.0]];
        opt.step(&mut p, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(p[0][0], 2.0 - 1e-3 * 0.1 * 2.0);
        assert_eq!(p[0][1], -3.0 - 1e-3 * 0.1 * -3.0);
    }

    #[test]
    fn exempt_buffers_are_not_decayed() {
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.5, ..AdamWConfig::default() }, &[1, 1], vec![true, false]);
        let mut p = vec![vec![1.0], vec![1.0]];
        opt.step(&mut p, &[vec![0.0], vec![0.0]]).unwrap();
        assert!(p[0][0] < 1.0);
        assert_eq!(p[1][0], 1.0);
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut opt = adamw(0.0, 1);
        let mut p = vec![vec![0.0]];
        assert!(matches!(opt.step(&mut p, &[vec![f64::NAN]]), Err(Error::NonFinite { .. })));
        let mut sgd = Sgd::new(0.1, 0.0, &[1]);
        assert!(sgd.step(&mut p, &[vec![f64::INFINITY]]).is_err());
    }

    #[test]
    fn sgd_steps() {
        let mut opt = Sgd::new(0.0, 0.0, &[1]);
        let mut p = vec![vec![1.0]];
        opt.step(&mut p, &[vec![2.0]]).unwrap();
        assert_eq!(p[0][0], 1.0);
        let mut opt = Sgd::new(0.1, 0.0, &[1]);
        opt.step(&mut p, &[vec![2.0]]).unwrap();
        assert!((p[0][0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        // v1 = 1, p1 = 1 - 0.1 = 0.9; v2 = 0.9 + 3 = 3.9, p2 = 0.9 - 0.39 = 0.51
        let mut opt = Sgd::new(0.1, 0.9, &[1]);
        let mut p = vec![vec![1.0]];
        opt.step(&mut p, &[vec![1.0]]).unwrap();
        assert!((p[0][0] - 0.9).abs() < 1e-15);
        opt.step(&mut p, &[vec![3.0]]).unwrap();
        assert!((p[0][0] - 0.51).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn updates_are_elementwise(
            p in prop::collection::vec(-3.0f64..3.0, 5),
            g in prop::collection::vec(-3.0f64..3.0, 5),
            perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle(),
        ) {
            let mut a = AdamW::new(AdamWConfig { weight_decay: 0.01, ..AdamWConfig::default() }, &[5], vec![true]);
            let mut b = a.clone();
            let mut pa = vec![p.clone()];
            let mut pb = vec![perm.iter().map(|&i| p[i]).collect::<Vec<_>>()];
            let gb: Vec<f64> = perm.iter().map(|&i| g[i]).collect();
            for _ in 0..3 {
                a.step(&mut pa, std::slice::from_ref(&g)).unwrap();
                b.step(&mut pb, std::slice::from_ref(&gb)).unwrap();
            }
            for (j, &i) in perm.iter().enumerate() {
                prop_assert_eq!(pb[0][j].to_bits(), pa[0][i].to_bits());
            }
        }
    }
}

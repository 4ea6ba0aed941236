//! Optimization: cosine-annealed learning rate, adaptive-moment updates
//! with optional rectified warmup, and an optional Lookahead wrapper
//! (slow weights synced toward fast weights every k steps).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// When off, falls back to plain bias-corrected adaptive moments.
    pub rectified_warmup_enabled: bool,
    pub lookahead_enabled: bool,
    /// Steps between slow-weight syncs.
    pub lookahead_k: u64,
    /// Slow-weight interpolation step in (0,1].
    pub lookahead_alpha: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Root seed for batch shuffling, dropout and divergence-free restarts.
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            base_lr: 1e-3,
            min_lr: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            rectified_warmup_enabled: true,
            lookahead_enabled: true,
            lookahead_k: 6,
            lookahead_alpha: 0.5,
            batch_size: 32,
            epochs: 30,
            seed: 1,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > self.min_lr && self.min_lr >= 0.0) {
            return Err(Error::config(format!(
                "need base_lr > min_lr >= 0, got {} and {}",
                self.base_lr, self.min_lr
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0,1)".to_string()));
        }
        if self.eps <= 0.0 {
            return Err(Error::config("eps must be positive".to_string()));
        }
        if self.lookahead_k == 0 {
            return Err(Error::config("lookahead_k must be at least 1".to_string()));
        }
        if !(self.lookahead_alpha > 0.0 && self.lookahead_alpha <= 1.0) {
            return Err(Error::config("lookahead_alpha must lie in (0,1]".to_string()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be positive".to_string()));
        }
        Ok(())
    }
}

/// Cosine annealing from `base_lr` (step 0) to `min_lr` (step = total).
/// Steps past the schedule clamp to `min_lr`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64, min_lr: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return min_lr;
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    min_lr + (base_lr - min_lr) * (1.0 + phase.cos()) / 2.0
}

/// Adaptive-moment optimizer with optional rectified warmup and Lookahead.
pub struct Optimizer {
    config: OptimizerConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    slow: Option<Vec<Vec<f64>>>,
    step_count: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &[Tensor]) -> Result<Self> {
        config.validate()?;
        let m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        let slow = config
            .lookahead_enabled
            .then(|| params.iter().map(|p| p.to_vec()).collect());
        Ok(Optimizer {
            config,
            m,
            v,
            slow,
            step_count: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update using the gradients currently stored on `params`.
    /// `params` must be the same tensors, in the same order, every call.
    pub fn step(&mut self, params: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::contract(format!(
                "optimizer built for {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        let t = self.step_count + 1;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(t as i32);
        let bias2 = 1.0 - c.beta2.powi(t as i32);

        // Rectification term: the variance of the adaptive denominator is
        // only tractable once rho_t exceeds 4; earlier steps fall back to
        // un-adapted momentum.
        let rho_inf = 2.0 / (1.0 - c.beta2) - 1.0;
        let beta2_t = c.beta2.powi(t as i32);
        let rho_t = rho_inf - 2.0 * t as f64 * beta2_t / (1.0 - beta2_t);
        let rectifier = if rho_t > 4.0 {
            Some(
                (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                    / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                    .sqrt(),
            )
        } else {
            None
        };

        for (idx, p) in params.iter().enumerate() {
            let g = p.grad_or_zeros();
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    step: t,
                    message: format!("non-finite gradient {bad} in parameter {idx}"),
                });
            }
            let mut values = p.to_vec();
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for i in 0..values.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let update = if c.rectified_warmup_enabled {
                    match rectifier {
                        Some(r) => lr * r * m_hat / ((v[i] / bias2).sqrt() + c.eps),
                        None => lr * m_hat,
                    }
                } else {
                    lr * m_hat / ((v[i] / bias2).sqrt() + c.eps)
                };
                values[i] -= update;
            }

            if let Some(slow) = &mut self.slow {
                if t % c.lookahead_k == 0 {
                    let s = &mut slow[idx];
                    for i in 0..values.len() {
                        s[i] += c.lookahead_alpha * (values[i] - s[i]);
                        values[i] = s[i];
                    }
                }
            }
            p.set_values(&values)?;
        }
        self.step_count = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain_config() -> OptimizerConfig {
        OptimizerConfig {
            rectified_warmup_enabled: false,
            lookahead_enabled: false,
            ..OptimizerConfig::default()
        }
    }

    fn set_grad(p: &Tensor, g: &[f64]) {
        p.zero_grad();
        p.accumulate_grad(g);
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 0.0), 1e-3);
        assert!((cosine_lr(100, 100, 1e-3, 1e-5) - 1e-5).abs() < 1e-20);
        assert!((cosine_lr(50, 100, 1e-3, 0.0) - 5e-4).abs() < 1e-18);
        // Past the schedule: clamp to min_lr.
        assert_eq!(cosine_lr(150, 100, 1e-3, 1e-5), 1e-5);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        for config in [plain_config(), OptimizerConfig::default()] {
            let p = Tensor::param(vec![1.0, -2.0], vec![2]).unwrap();
            let mut opt = Optimizer::new(config, &[p.clone()]).unwrap();
            for _ in 0..3 {
                set_grad(&p, &[0.0, 0.0]);
                opt.step(&[p.clone()], 1e-3).unwrap();
            }
            assert_eq!(p.to_vec(), vec![1.0, -2.0]);
        }
    }

    #[test]
    fn plain_adaptive_step_matches_hand_computation() {
        // theta=1, g=0.5, lr=1e-3, betas (0.9, 0.999), eps 1e-8:
        // m=0.05, v=0.00025, m_hat=0.5, v_hat=0.25,
        // theta' = 1 − 1e-3·0.5/(0.5+1e-8) = 0.99900000002 (20-digit oracle
        // 0.9990000000199999996); after a second identical step,
        // 0.9980000000399999992.
        let p = Tensor::param(vec![1.0], vec![1]).unwrap();
        let mut opt = Optimizer::new(plain_config(), &[p.clone()]).unwrap();
        set_grad(&p, &[0.5]);
        opt.step(&[p.clone()], 1e-3).unwrap();
        assert!((p.to_vec()[0] - 0.99900000002).abs() < 1e-12);
        set_grad(&p, &[0.5]);
        opt.step(&[p.clone()], 1e-3).unwrap();
        assert!((p.to_vec()[0] - 0.99800000004).abs() < 1e-12);
    }

    #[test]
    fn rectified_warmup_uses_momentum_only_at_first() {
        // With beta2=0.999, rho_t stays below 4 through step 4, so the first
        // step is theta − lr·m_hat = 1 − 1e-3·0.5 = 0.9995 exactly.
        let config = OptimizerConfig {
            lookahead_enabled: false,
            ..OptimizerConfig::default()
        };
        let p = Tensor::param(vec![1.0], vec![1]).unwrap();
        let mut opt = Optimizer::new(config, &[p.clone()]).unwrap();
        set_grad(&p, &[0.5]);
        opt.step(&[p.clone()], 1e-3).unwrap();
        assert!((p.to_vec()[0] - 0.9995).abs() < 1e-15);
    }

    #[test]
    fn rectifier_kicks_in_at_step_five() {
        // rho_5 ≈ 4.996 > 4: the fifth update must use the adaptive
        // denominator, giving a different trajectory from momentum-only.
        let config = OptimizerConfig {
            lookahead_enabled: false,
            ..OptimizerConfig::default()
        };
        let p = Tensor::param(vec![1.0], vec![1]).unwrap();
        let mut opt = Optimizer::new(config, &[p.clone()]).unwrap();
        let mut momentum_only = 1.0;
        let mut m = 0.0;
        for t in 1..=5 {
            set_grad(&p, &[0.5]);
            opt.step(&[p.clone()], 1e-3).unwrap();
            m = 0.9 * m + 0.1 * 0.5;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            momentum_only -= 1e-3 * m_hat;
            if t <= 4 {
                assert!((p.to_vec()[0] - momentum_only).abs() < 1e-15, "step {t}");
            } else {
                assert!((p.to_vec()[0] - momentum_only).abs() > 1e-7, "step {t}");
            }
        }
    }

    #[test]
    fn lookahead_k1_alpha1_is_identity_wrapper() {
        let base = OptimizerConfig {
            lookahead_enabled: false,
            ..OptimizerConfig::default()
        };
        let wrapped = OptimizerConfig {
            lookahead_enabled: true,
            lookahead_k: 1,
            lookahead_alpha: 1.0,
            ..OptimizerConfig::default()
        };
        let a = Tensor::param(vec![1.0, -0.5], vec![2]).unwrap();
        let b = Tensor::param(vec![1.0, -0.5], vec![2]).unwrap();
        let mut opt_a = Optimizer::new(base, &[a.clone()]).unwrap();
        let mut opt_b = Optimizer::new(wrapped, &[b.clone()]).unwrap();
        for s in 0..7 {
            let g = [0.3 + 0.1 * s as f64, -0.2];
            set_grad(&a, &g);
            set_grad(&b, &g);
            opt_a.step(&[a.clone()], 1e-3).unwrap();
            opt_b.step(&[b.clone()], 1e-3).unwrap();
            assert_eq!(a.to_vec(), b.to_vec(), "step {s}");
        }
    }

    #[test]
    fn lookahead_syncs_toward_slow_weights() {
        let config = OptimizerConfig {
            rectified_warmup_enabled: false,
            lookahead_enabled: true,
            lookahead_k: 2,
            lookahead_alpha: 0.5,
            ..OptimizerConfig::default()
        };
        let p = Tensor::param(vec![1.0], vec![1]).unwrap();
        let mut opt = Optimizer::new(config, &[p.clone()]).unwrap();

        // Replicate two fast steps by hand, then the sync.
        let mut fast = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2u32 {
            set_grad(&p, &[0.5]);
            opt.step(&[p.clone()], 1e-2).unwrap();
            m = 0.9 * m + 0.1 * 0.5;
            v = 0.999 * v + 0.001 * 0.25;
            let m_hat = m / (1.0 - 0.9f64.powi(t as i32));
            let v_hat = v / (1.0 - 0.999f64.powi(t as i32));
            fast -= 1e-2 * m_hat / (v_hat.sqrt() + 1e-8);
        }
        let expected = 1.0 + 0.5 * (fast - 1.0);
        assert!((p.to_vec()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_with_step_index() {
        let p = Tensor::param(vec![1.0], vec![1]).unwrap();
        let mut opt = Optimizer::new(plain_config(), &[p.clone()]).unwrap();
        set_grad(&p, &[f64::NAN]);
        match opt.step(&[p.clone()], 1e-3) {
            Err(Error::Diverged { step, .. }) => assert_eq!(step, 1),
            other => panic!("expected divergence error, got {other:?}"),
        }
    }
}

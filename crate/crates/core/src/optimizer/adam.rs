//! Bias-corrected Adam over the kernel parameters with one learning rate per parameter group.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Mode, MixtureModel};
use crate::optimizer::loss::ParamGradients;

/// Parameters per kernel in the flat layout `[mu_x, mu_y, b11, b21, b22, pi, m]`.
const PER_KERNEL: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub mu: f64,
    pub b: f64,
    pub pi: f64,
    pub m: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            mu: 1e-3,
            b: 1e-2,
            pi: 1e-3,
            m: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: LearningRates,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr: LearningRates::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, kernel_count: usize) -> Self {
        Self {
            config,
            first: vec![0.0; PER_KERNEL * kernel_count],
            second: vec![0.0; PER_KERNEL * kernel_count],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn kernel_count(&self) -> usize {
        self.first.len() / PER_KERNEL
    }

    /// Drops accumulators for kernels whose `keep` flag is false.
    pub fn retain(&mut self, keep: &[bool]) {
        let filter = |v: &mut Vec<f64>| {
            let kept: Vec<f64> = v
                .chunks_exact(PER_KERNEL)
                .zip(keep)
                .filter(|(_, k)| **k)
                .flat_map(|(c, _)| c.iter().copied())
                .collect();
            *v = kept;
        };
        filter(&mut self.first);
        filter(&mut self.second);
    }

    /// Appends copies of the accumulators of the first `n` kernels, matching a model whose
    /// first `n` kernels were duplicated onto its end.
    pub fn duplicate_first(&mut self, n: usize) {
        let n = n.min(self.kernel_count());
        for v in [&mut self.first, &mut self.second] {
            let copy: Vec<f64> = v[..n * PER_KERNEL].to_vec();
            v.extend(copy);
        }
    }

    /// Applies one update to `model` in place. In RBF mode π does not affect the regression and
    /// is left untouched.
    pub fn step(&mut self, model: &mut MixtureModel, grads: &ParamGradients) -> Result<()> {
        if grads.len() != model.len() || self.kernel_count() != model.len() {
            return Err(Error::invalid(format!(
                "shape mismatch: model {} kernels, gradients {}, optimizer state {}",
                model.len(),
                grads.len(),
                self.kernel_count()
            )));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let freeze_pi = model.mode == Mode::RbfSum;
        for (j, (k, g)) in model.kernels.iter_mut().zip(&grads.kernels).enumerate() {
            let mut params = [k.mu[0], k.mu[1], k.b[0], k.b[1], k.b[2], k.pi, k.m];
            let gs = [g.mu[0], g.mu[1], g.b[0], g.b[1], g.b[2], g.pi, g.m];
            let lrs = [
                c.lr.mu,
                c.lr.mu,
                c.lr.b,
                c.lr.b,
                c.lr.b,
                if freeze_pi { 0.0 } else { c.lr.pi },
                c.lr.m,
            ];
            for p in 0..PER_KERNEL {
                let i = j * PER_KERNEL + p;
                let m1 = c.beta1 * self.first[i] + (1.0 - c.beta1) * gs[p];
                let m2 = c.beta2 * self.second[i] + (1.0 - c.beta2) * gs[p] * gs[p];
                self.first[i] = m1;
                self.second[i] = m2;
                params[p] -= lrs[p] * (m1 / bias1) / ((m2 / bias2).sqrt() + c.eps);
            }
            k.mu = [params[0], params[1]];
            k.b = [params[2], params[3], params[4]];
            k.pi = params[5];
            k.m = params[6];
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(
    mut state: AdamState,
    mut model: MixtureModel,
    grads: &ParamGradients,
) -> Result<(MixtureModel, AdamState)> {
    state.step(&mut model, grads)?;
    Ok((model, state))
}

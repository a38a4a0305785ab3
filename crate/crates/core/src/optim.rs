//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.002,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("adam epsilon must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First/second moment accumulators for a list of parameter blocks.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, blocks: &[(String, Vec<usize>)]) -> Result<Self> {
        cfg.validate()?;
        let sizes = blocks.iter().map(|(_, s)| s.iter().product::<usize>());
        Ok(Adam {
            cfg,
            names: blocks.iter().map(|(n, _)| n.clone()).collect(),
            m: sizes.clone().map(|n| vec![0.0; n]).collect(),
            v: sizes.map(|n| vec![0.0; n]).collect(),
            t: 0,
        })
    }

    /// Convenience constructor naming blocks by position.
    pub fn for_tensors(cfg: AdamConfig, params: &[Tensor]) -> Result<Self> {
        let blocks: Vec<_> = params
            .iter()
            .enumerate()
            .map(|(i, p)| (format!("block{i}"), p.shape().to_vec()))
            .collect();
        Adam::new(cfg, &blocks)
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    fn check(&self, params: &[Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::usage(format!(
                "optimizer holds {} blocks, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != self.m[i].len() || g.numel() != self.m[i].len() {
                return Err(Error::usage(format!("block `{}` changed size", self.names[i])));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in block `{}`", self.names[i])));
            }
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[&Tensor]) -> Result<()> {
        self.check(params, grads)?;
        for (i, g) in grads.iter().enumerate() {
            if g.data().iter().any(|v| !(v * v).is_finite()) {
                return Err(Error::Numeric(format!("gradient in block `{}` overflows the second moment", self.names[i])));
            }
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (b, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[b], &mut self.v[b]);
            for (k, (x, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *x -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// `θ ← θ − lr·sign(g)` without touching the moment estimates.
    ///
    /// Used when a loss is evaluated at a point where a norm guard is active
    /// (e.g. all image directions are exactly zero at the first adaptation
    /// step). The gradient there is scaled by the inverse guard and would
    /// poison the second-moment estimate for thousands of steps.
    pub fn sign_step(&self, params: &mut [Tensor], grads: &[&Tensor]) -> Result<()> {
        self.check(params, grads)?;
        let lr = self.cfg.lr;
        for (p, g) in params.iter_mut().zip(grads) {
            for (x, &gk) in p.data_mut().iter_mut().zip(g.data()) {
                if gk != 0.0 {
                    *x -= lr * gk.signum();
                }
            }
        }
        Ok(())
    }
}

//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
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
            weight_decay: 1e-4,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("optimizer.{name}"), "out of range"))
            }
        };
        check("lr", self.lr > 0.0 && self.lr.is_finite())?;
        check("beta1", (0.0..1.0).contains(&self.beta1))?;
        check("beta2", (0.0..1.0).contains(&self.beta2))?;
        check("eps", self.eps > 0.0 && self.eps.is_finite())?;
        check("weight_decay", self.weight_decay >= 0.0 && self.weight_decay.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u32,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AdamW { cfg, m: Vec::new(), v: Vec::new(), t: 0 })
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    /// One update of every parameter from its gradient.
    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[Mat]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("AdamW::step", format!("{} gradients", params.len()), format!("{}", grads.len())));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Mat::zeros(g.rows(), g.cols())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].shape() != g.shape() {
                return Err(Error::shape("AdamW::step", format!("{:?}", p.shape()), format!("{:?}", g.shape())));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                *x -= c.lr * (update + c.weight_decay * *x);
            }
        }
        Ok(())
    }
}

//! AdamW with decoupled weight decay, global-norm clipping and polynomial
//! learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, ModelParams, ParamId, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    /// Exponent of the decay `lr · (1 − t/T)^power`.
    pub lr_power: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_power: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            clip_norm: 10.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && self.lr_power >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// Learning rate used at 0-based step `t` of `total`.
    pub fn lr_at(&self, t: usize, total: usize) -> f64 {
        let frac = 1.0 - t as f64 / total.max(1) as f64;
        self.lr * frac.max(0.0).powf(self.lr_power)
    }
}

#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: OptimConfig,
    m: ParamSet,
    v: ParamSet,
    pub step: u64,
}

impl OptimState {
    pub fn new(config: OptimConfig, params: &ModelParams) -> Self {
        Self {
            config,
            m: ParamSet::zeros(&params.config),
            v: ParamSet::zeros(&params.config),
            step: 0,
        }
    }

    /// Applies one update to the parameters selected by `update`; the others
    /// are left untouched bit for bit. Returns the pre-clip gradient norm over
    /// the selected parameters.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients, lr: f64, update: impl Fn(ParamId) -> bool) -> Result<f64> {
        if params.config != grads.config || params.config != self.m.config {
            return Err(Error::Shape("optimizer, parameters and gradients disagree".into()));
        }
        let norm = grads
            .iter()
            .filter(|(id, _)| update(*id))
            .map(|(_, g)| g.sq_norm())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let c = &self.config;
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for id in ParamId::ALL.into_iter().filter(|&id| update(id)) {
            let g = grads.get(id).data();
            let m = self.m.get_mut(id).data_mut();
            let v = self.v.get_mut(id).data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = clip * g[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let adam = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                p[i] -= lr * (adam + c.weight_decay * p[i]);
            }
        }
        Ok(norm)
    }
}

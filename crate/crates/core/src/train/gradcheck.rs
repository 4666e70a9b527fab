//! Central finite-difference verification of the full training gradient
//! (closed-set losses plus the outlier hinge) on a tiny model.

use serde::{Deserialize, Serialize};

use super::{scene_loss, Objective, OutlierTerm};
use crate::data::{generate_inlier_scene, paste_outlier, DataConfig, OutlierBank, Scene, OUTLIER};
use crate::error::Result;
use crate::losses::{LossWeights, MatchResult, Normalization, OutlierLossKind, PROB_EPS};
use crate::model::{backward, Gradients, ModelConfig, ModelParams, ParamId, ParamSet};
use crate::rng;
use crate::scoring::rba;
use rand::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub outlier_loss: OutlierLossKind,
    pub alpha: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            outlier_loss: OutlierLossKind::Hinge,
            alpha: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub passed: bool,
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates whose ±h perturbation crosses a ReLU, hinge or clamp kink.
    pub skipped: usize,
    pub step: f64,
    pub tolerance: f64,
}

/// Model with `H = W = 8`, `N = 4`, `K = 3`, pixel embedding 8, 4 input channels.
pub fn tiny_configs() -> (ModelConfig, DataConfig) {
    let model = ModelConfig {
        in_channels: 4,
        embed: 8,
        queries: 4,
        classes: 3,
        ffn_hidden: 8,
    };
    let data = DataConfig {
        height: 8,
        width: 8,
        in_channels: 4,
        classes: 3,
        max_shapes: 4,
        min_shape_size: 2,
        max_shape_size: 5,
        min_template_size: 2,
        max_template_size: 4,
        ..DataConfig::default()
    };
    (model, data)
}

/// Tiny parameters with non-zero biases so every tensor carries signal.
pub fn tiny_fixture(seed: u64) -> Result<(ModelParams, Scene)> {
    let (model, data) = tiny_configs();
    let mut params = ParamSet::init(&model, rng::derive_seed(seed, "gradcheck-init", 0))?;
    let mut r = rng::stream(seed, "gradcheck-bias", 0);
    for (id, t) in params.iter_mut() {
        if t.shape().len() == 1 || matches!(id, ParamId::Queries | ParamId::QueryPos) {
            t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.3..0.3));
        }
    }
    let scene = generate_inlier_scene(&data, rng::derive_seed(seed, "gradcheck-scene", 0))?;
    let bank = OutlierBank::new(&data, 4, rng::derive_seed(seed, "gradcheck-bank", 0))?;
    let scene = paste_outlier(&scene, &bank, 1.0, rng::derive_seed(seed, "gradcheck-paste", 0))?;
    Ok((params, scene))
}

struct Probe<'a> {
    scene: &'a Scene,
    obj: Objective,
    matching: MatchResult,
}

impl Probe<'_> {
    /// Loss value and the on/off state of every non-smooth point it passes.
    fn eval(&self, params: &ModelParams) -> Result<(f64, Vec<bool>)> {
        let s = scene_loss(params, self.scene, &self.obj, Some(&self.matching))?;
        let mut pattern = s.output.cache.relu_pattern();
        pattern.extend(s.output.p.data().iter().map(|&p| p > PROB_EPS));
        pattern.extend(s.output.m.data().iter().map(|&m| m > PROB_EPS && 1.0 - m > PROB_EPS));
        if let Some(o) = self.obj.outlier {
            let (k, hw) = (params.config.classes, s.output.l.cols());
            let l = s.output.l.data();
            for x in (0..hw).filter(|&x| self.scene.labels.codes[x] == OUTLIER) {
                let v: Vec<f64> = (0..k).map(|c| l[c * hw + x]).collect();
                pattern.push(rba(&v) < o.alpha);
            }
        }
        Ok((s.terms.total(), pattern))
    }
}

pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    gradcheck_with(cfg, |_| {})
}

/// Like [`gradcheck`], with `tamper` applied to the analytic gradient before
/// comparison.
pub fn gradcheck_with(cfg: &GradcheckConfig, tamper: impl Fn(&mut Gradients)) -> Result<GradcheckReport> {
    let (params, scene) = tiny_fixture(cfg.seed)?;
    let obj = Objective {
        weights: LossWeights::default(),
        outlier: Some(OutlierTerm {
            kind: cfg.outlier_loss,
            alpha: cfg.alpha,
            normalization: Normalization::Mean,
        }),
    };
    let base = scene_loss(&params, &scene, &obj, None)?;
    let mut grads = backward(&params, &base.output.cache, &base.output.p, &base.output.m, &base.upstream)?;
    tamper(&mut grads);
    let probe = Probe {
        scene: &scene,
        obj,
        matching: base.matching.clone(),
    };
    let (_, base_pattern) = probe.eval(&params)?;

    let h = cfg.step;
    let mut report = GradcheckReport {
        passed: false,
        max_rel_error: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
        checked: 0,
        skipped: 0,
        step: h,
        tolerance: cfg.tolerance,
    };
    for (id, t) in params.iter() {
        for i in 0..t.numel() {
            let mut plus = params.clone();
            plus.get_mut(id).data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(id).data_mut()[i] -= h;
            let (fp, pp) = probe.eval(&plus)?;
            let (fm, pm) = probe.eval(&minus)?;
            if pp != base_pattern || pm != base_pattern {
                report.skipped += 1;
                continue;
            }
            let fd = (fp - fm) / (2.0 * h);
            let an = grads.get(id).data()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst_parameter.is_empty() {
                report.max_rel_error = rel;
                report.worst_parameter = id.name().to_string();
                report.worst_index = i;
            }
        }
    }
    report.passed = report.checked > 0 && report.max_rel_error < cfg.tolerance;
    Ok(report)
}

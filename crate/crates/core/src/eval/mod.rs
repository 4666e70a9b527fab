//! Pixel ranking metrics, component metrics, closed-set IoU and the
//! query/logit analyses, plus the serialized metrics report.

mod analysis;
mod components;
mod pixel;
mod report;

pub use analysis::{
    cluster_logits, logit_mode_analysis, masking_ablation, planted_archetypes, same_partition, specialization_matrix,
    AblationMode, AblationRow, LogitCluster, LogitModeReport, MaskingAblation, SpecializationReport,
};
pub use components::{
    aggregate_components, label_components, scene_components, ComponentEvalConfig, ComponentReport, SceneComponents,
    ThresholdCounts,
};
pub use pixel::{auroc, average_precision, fpr_at_95tpr, tpr95_threshold, PixelEvalSet};
pub use report::{Metric, MetricsReport, Provenance};

use serde::Serialize;

use crate::data::{LabelMap, Scene};
use crate::error::{Error, Result};
use crate::model::{forward, ModelParams};
use crate::par;
use crate::scoring::{score_logits, ScoreFn, ScoreMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassIoU {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    /// `None` when the class is absent from both prediction and ground truth.
    pub iou: Option<f64>,
}

impl ClassIoU {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let denom = tp + fp + fn_;
        Self {
            tp,
            fp,
            fn_,
            iou: (denom > 0).then(|| tp as f64 / denom as f64),
        }
    }
}

/// Dataset-level confusion counts over inlier pixels (codes `< K`).
#[derive(Debug, Clone, PartialEq)]
pub struct Confusion {
    classes: usize,
    /// `counts[gt * K + pred]`.
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &[u8], gt: &LabelMap) -> Result<()> {
        if pred.len() != gt.codes.len() {
            return Err(Error::Shape(format!("{} predictions for {} pixels", pred.len(), gt.codes.len())));
        }
        let k = self.classes;
        for (&p, &g) in pred.iter().zip(&gt.codes) {
            let (p, g) = (usize::from(p), usize::from(g));
            if g >= k {
                continue;
            }
            if p >= k {
                return Err(Error::InvalidArgument(format!("predicted class {p} outside 0..{k}")));
            }
            self.counts[g * k + p] += 1;
        }
        Ok(())
    }

    pub fn per_class(&self) -> Vec<ClassIoU> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.counts[c * k + c];
                let fp = (0..k).filter(|&g| g != c).map(|g| self.counts[g * k + c]).sum();
                let fn_ = (0..k).filter(|&p| p != c).map(|p| self.counts[c * k + p]).sum();
                ClassIoU::from_counts(tp, fp, fn_)
            })
            .collect()
    }

    /// Mean over classes present in prediction or ground truth.
    pub fn miou(&self) -> Option<f64> {
        let defined: Vec<f64> = self.per_class().iter().filter_map(|c| c.iou).collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Per-class IoU and mean for one prediction.
pub fn miou(pred: &[u8], gt: &LabelMap, classes: usize) -> Result<(Vec<ClassIoU>, Option<f64>)> {
    let mut c = Confusion::new(classes);
    c.add(pred, gt)?;
    Ok((c.per_class(), c.miou()))
}

/// Argmax predictions of the full model for every scene.
pub fn predict_dataset(params: &ModelParams, scenes: &[Scene], threads: usize) -> Result<Vec<Vec<u8>>> {
    par::map(scenes, threads, |s| forward(params, &s.features).map(|o| o.predicted_labels()))
        .into_iter()
        .collect()
}

/// Dataset-level closed-set confusion of the full model.
pub fn closed_set_confusion(params: &ModelParams, scenes: &[Scene], threads: usize) -> Result<Confusion> {
    let mut c = Confusion::new(params.config.classes);
    for (p, s) in predict_dataset(params, scenes, threads)?.iter().zip(scenes) {
        c.add(p, &s.labels)?;
    }
    Ok(c)
}

/// Score maps for every scene under each requested function, from one
/// forward pass per scene.
pub fn score_dataset(params: &ModelParams, scenes: &[Scene], fns: &[ScoreFn], threads: usize) -> Result<Vec<Vec<ScoreMap>>> {
    let per_scene = par::map(scenes, threads, |s| -> Result<Vec<ScoreMap>> {
        let l = forward(params, &s.features)?.l;
        fns.iter().map(|&f| score_logits(&l, f)).collect()
    });
    let mut out: Vec<Vec<ScoreMap>> = vec![Vec::with_capacity(scenes.len()); fns.len()];
    for r in per_scene {
        for (slot, m) in out.iter_mut().zip(r?) {
            slot.push(m);
        }
    }
    Ok(out)
}

/// AP, AuROC and FPR@95 over the pooled non-void pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelMetrics {
    pub ap: Option<f64>,
    pub auroc: Option<f64>,
    pub fpr95: Option<f64>,
    pub tpr95_threshold: Option<f64>,
}

pub fn pixel_metrics(maps: &[ScoreMap], labels: &[&LabelMap]) -> Result<PixelMetrics> {
    if maps.len() != labels.len() {
        return Err(Error::Shape(format!("{} score maps for {} scenes", maps.len(), labels.len())));
    }
    let set = PixelEvalSet::from_scenes(maps.iter().zip(labels.iter().copied()))?;
    Ok(PixelMetrics {
        ap: average_precision(&set),
        auroc: auroc(&set),
        fpr95: fpr_at_95tpr(&set),
        tpr95_threshold: tpr95_threshold(&set),
    })
}

/// Component metrics after binarizing at the configured or pooled 95%-TPR
/// threshold. Void pixels are never predicted.
pub fn component_metrics(maps: &[ScoreMap], labels: &[&LabelMap], cfg: &ComponentEvalConfig, pooled_tpr95: Option<f64>) -> Result<ComponentReport> {
    cfg.validate()?;
    let t = cfg.binarize_at.or(pooled_tpr95);
    let mut per_scene = Vec::with_capacity(maps.len());
    for (m, l) in maps.iter().zip(labels) {
        let pred: Vec<bool> = m
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| !l.is_void(i) && t.is_some_and(|t| v >= t))
            .collect();
        per_scene.push(scene_components(&pred, l, cfg)?);
    }
    Ok(aggregate_components(&per_scene, cfg, t))
}

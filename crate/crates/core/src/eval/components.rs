//! Connected-component outlier metrics (SMIYC-style stand-ins).
//!
//! For a ground-truth outlier component `g`, `sIoU(g) = |g ∩ pred| /
//! |g ∪ A(g)|` where `A(g)` are the pixels of predicted components touching
//! `g`, minus pixels of other ground-truth components. For a predicted
//! component `p`, `PPV(p) = |p ∩ gt_outlier| / |p|`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, OUTLIER};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComponentEvalConfig {
    /// Ascending, inside `(0, 1)`.
    pub thresholds: Vec<f64>,
    /// Fixed score threshold; `None` uses the pooled 95%-TPR pixel threshold.
    pub binarize_at: Option<f64>,
    /// 4 or 8.
    pub connectivity: u8,
    /// Predicted components smaller than this are discarded.
    pub min_component_size: usize,
}

impl Default for ComponentEvalConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7, 0.75],
            binarize_at: None,
            connectivity: 8,
            min_component_size: 1,
        }
    }
}

impl ComponentEvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty()
            || self.thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0))
            || self.thresholds.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config("component thresholds must be ascending inside (0, 1)".into()));
        }
        if !matches!(self.connectivity, 4 | 8) {
            return Err(Error::Config(format!("connectivity must be 4 or 8, got {}", self.connectivity)));
        }
        if self.min_component_size == 0 {
            return Err(Error::Config("min_component_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Labels connected foreground regions `1..=count`; background is 0.
pub fn label_components(mask: &[bool], height: usize, width: usize, connectivity: u8) -> (Vec<u32>, usize) {
    let mut ids = vec![0u32; mask.len()];
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || ids[start] != 0 {
            continue;
        }
        count += 1;
        ids[start] = count;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (y, x) = ((p / width) as isize, (p % width) as isize);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if (dy == 0 && dx == 0) || (connectivity == 4 && dy != 0 && dx != 0) {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                        continue;
                    }
                    let q = ny as usize * width + nx as usize;
                    if mask[q] && ids[q] == 0 {
                        ids[q] = count;
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    (ids, count as usize)
}

/// Per-scene component statistics before thresholding.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneComponents {
    pub siou: Vec<f64>,
    pub ppv: Vec<f64>,
    /// For each predicted component, the ground-truth components it touches.
    touches: Vec<Vec<usize>>,
}

/// Analyses one binary prediction. Void pixels must already be false in `pred`.
pub fn scene_components(pred: &[bool], gt: &LabelMap, cfg: &ComponentEvalConfig) -> Result<SceneComponents> {
    let (h, w) = (gt.height, gt.width);
    if pred.len() != h * w {
        return Err(Error::Shape(format!("{} predictions for a {h}x{w} map", pred.len())));
    }
    let gt_mask: Vec<bool> = gt.codes.iter().map(|&c| c == OUTLIER).collect();
    let (gt_ids, n_gt) = label_components(&gt_mask, h, w, cfg.connectivity);
    let (mut pred_ids, n_raw) = label_components(pred, h, w, cfg.connectivity);

    // drop small predicted components and renumber densely
    let mut sizes = vec![0usize; n_raw + 1];
    pred_ids.iter().for_each(|&i| sizes[i as usize] += 1);
    let mut remap = vec![0u32; n_raw + 1];
    let mut n_pred = 0u32;
    for i in 1..=n_raw {
        if sizes[i] >= cfg.min_component_size {
            n_pred += 1;
            remap[i] = n_pred;
        }
    }
    pred_ids.iter_mut().for_each(|i| *i = remap[*i as usize]);
    let n_pred = n_pred as usize;

    let mut touches = vec![Vec::new(); n_pred];
    let mut pred_size = vec![0usize; n_pred];
    let mut pred_hits = vec![0usize; n_pred];
    for i in 0..pred_ids.len() {
        let p = pred_ids[i] as usize;
        if p == 0 {
            continue;
        }
        pred_size[p - 1] += 1;
        if gt_mask[i] {
            pred_hits[p - 1] += 1;
            let g = gt_ids[i] as usize - 1;
            if !touches[p - 1].contains(&g) {
                touches[p - 1].push(g);
            }
        }
    }

    let mut siou = Vec::with_capacity(n_gt);
    for g in 0..n_gt {
        let gid = (g + 1) as u32;
        let touching: Vec<bool> = touches.iter().map(|t| t.contains(&g)).collect();
        let (mut inter, mut union) = (0usize, 0usize);
        for i in 0..gt_ids.len() {
            let in_g = gt_ids[i] == gid;
            let p = pred_ids[i] as usize;
            let in_a = p > 0 && touching[p - 1] && (gt_ids[i] == 0 || in_g);
            if in_g && p > 0 {
                inter += 1;
            }
            if in_g || in_a {
                union += 1;
            }
        }
        siou.push(inter as f64 / union as f64);
    }
    let ppv = (0..n_pred).map(|p| pred_hits[p] as f64 / pred_size[p] as f64).collect();
    Ok(SceneComponents { siou, ppv, touches })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThresholdCounts {
    pub threshold: f64,
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentReport {
    pub siou_gt: Option<f64>,
    pub ppv: Option<f64>,
    pub mean_f1: Option<f64>,
    pub per_threshold: Vec<ThresholdCounts>,
    pub gt_components: usize,
    pub predicted_components: usize,
    /// Score threshold used to binarize.
    pub binarize_at: Option<f64>,
}

/// Pools per-scene statistics; counts are summed over scenes before F1.
pub fn aggregate_components(scenes: &[SceneComponents], cfg: &ComponentEvalConfig, binarize_at: Option<f64>) -> ComponentReport {
    let all_siou: Vec<f64> = scenes.iter().flat_map(|s| s.siou.iter().copied()).collect();
    let all_ppv: Vec<f64> = scenes.iter().flat_map(|s| s.ppv.iter().copied()).collect();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let per_threshold: Vec<ThresholdCounts> = cfg
        .thresholds
        .iter()
        .map(|&tau| {
            let (mut tp, mut fn_, mut fp) = (0, 0, 0);
            for s in scenes {
                let is_tp: Vec<bool> = s.siou.iter().map(|&v| v > tau).collect();
                tp += is_tp.iter().filter(|&&b| b).count();
                fn_ += is_tp.iter().filter(|&&b| !b).count();
                fp += s
                    .ppv
                    .iter()
                    .zip(&s.touches)
                    .filter(|(&ppv, t)| ppv <= tau && !t.iter().any(|&g| is_tp[g]))
                    .count();
            }
            let denom = 2 * tp + fn_ + fp;
            let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
            ThresholdCounts {
                threshold: tau,
                tp,
                fn_,
                fp,
                f1,
            }
        })
        .collect();
    let has_gt = !all_siou.is_empty();
    ComponentReport {
        siou_gt: mean(&all_siou),
        ppv: mean(&all_ppv),
        mean_f1: has_gt.then(|| per_threshold.iter().map(|t| t.f1).sum::<f64>() / per_threshold.len() as f64),
        per_threshold,
        gt_components: all_siou.len(),
        predicted_components: all_ppv.len(),
        binarize_at,
    }
}

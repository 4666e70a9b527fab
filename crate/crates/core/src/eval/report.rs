//! Serialized metrics report and CSV tables. Undefined metrics are written
//! as the string `"undefined"`, never as 0.

use std::fmt::Write as _;

use serde::{Serialize, Serializer};

use super::{ClassIoU, ComponentReport, PixelMetrics, ThresholdCounts};
use crate::error::Result;

pub const REPORT_SCHEMA: &str = "rbaseg-metrics/1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metric(pub Option<f64>);

impl Serialize for Metric {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            Some(v) => s.serialize_f64(v),
            None => s.serialize_str("undefined"),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{v}"),
            None => f.write_str("undefined"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub checkpoint_id: Option<String>,
    pub dataset_id: String,
    pub scoring_fn: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PixelSection {
    pub ap: Metric,
    pub auroc: Metric,
    pub fpr95: Metric,
    pub pixels: usize,
    pub outlier_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentSection {
    pub definition: &'static str,
    pub binarize_at: Metric,
    pub siou_gt: Metric,
    pub ppv: Metric,
    pub mean_f1: Metric,
    pub gt_components: usize,
    pub predicted_components: usize,
    pub per_threshold: Vec<ThresholdCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedSetSection {
    pub per_class_iou: Vec<Metric>,
    pub miou: Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub schema: &'static str,
    pub provenance: Provenance,
    pub scenes: usize,
    pub pixel: PixelSection,
    pub component: ComponentSection,
    pub closed_set: Option<ClosedSetSection>,
}

impl MetricsReport {
    pub fn new(
        provenance: Provenance,
        scenes: usize,
        counts: (usize, usize),
        pixel: &PixelMetrics,
        comp: &ComponentReport,
        closed: Option<(&[ClassIoU], Option<f64>)>,
    ) -> Self {
        Self {
            schema: REPORT_SCHEMA,
            provenance,
            scenes,
            pixel: PixelSection {
                ap: Metric(pixel.ap),
                auroc: Metric(pixel.auroc),
                fpr95: Metric(pixel.fpr95),
                pixels: counts.0,
                outlier_pixels: counts.1,
            },
            component: ComponentSection {
                definition: "SMIYC-style",
                binarize_at: Metric(comp.binarize_at),
                siou_gt: Metric(comp.siou_gt),
                ppv: Metric(comp.ppv),
                mean_f1: Metric(comp.mean_f1),
                gt_components: comp.gt_components,
                predicted_components: comp.predicted_components,
                per_threshold: comp.per_threshold.clone(),
            },
            closed_set: closed.map(|(per, mean)| ClosedSetSection {
                per_class_iou: per.iter().map(|c| Metric(c.iou)).collect(),
                miou: Metric(mean),
            }),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// `class,iou` rows; empty when no closed-set section is present.
    pub fn class_iou_csv(&self) -> String {
        let mut out = String::from("class,iou\n");
        if let Some(c) = &self.closed_set {
            for (k, v) in c.per_class_iou.iter().enumerate() {
                let _ = writeln!(out, "{k},{v}");
            }
            let _ = writeln!(out, "mean,{}", c.miou);
        }
        out
    }

    pub fn component_csv(&self) -> String {
        let mut out = String::from("threshold,tp,fn,fp,f1\n");
        for t in &self.component.per_threshold {
            let _ = writeln!(out, "{:.2},{},{},{},{}", t.threshold, t.tp, t.fn_, t.fp, t.f1);
        }
        out
    }
}

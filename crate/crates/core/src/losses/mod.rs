//! Set-prediction losses: matching cost, closed-set class/mask losses and
//! the outlier objectives applied to aggregated logits.

mod matching;
mod outlier;

pub use matching::{hungarian, MatchResult};
pub use outlier::{alt_outlier_loss, kl_to_uniform, rba_hinge_loss, Normalization, OutlierLossKind};

use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to probabilities inside logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
    /// Relative weight of the no-object term for unmatched queries.
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            bce: 5.0,
            dice: 5.0,
            no_object: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.class, self.bce, self.dice, self.no_object]
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// One binary mask per inlier class present in a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct GtMaskSet {
    pub classes: Vec<usize>,
    /// `G` masks over `HW` pixels.
    pub masks: Vec<Vec<bool>>,
    /// Pixels that take part in mask losses (not void, not outlier).
    pub valid: Vec<bool>,
    pub num_classes: usize,
}

impl GtMaskSet {
    /// Builds the per-class masks; void and outlier pixels belong to no mask
    /// and are excluded from the mask losses.
    pub fn from_labels(labels: &LabelMap, num_classes: usize) -> Self {
        let valid: Vec<bool> = labels.codes.iter().map(|&c| usize::from(c) < num_classes).collect();
        let mut classes = Vec::new();
        let mut masks = Vec::new();
        for k in 0..num_classes {
            let mask: Vec<bool> = labels.codes.iter().map(|&c| usize::from(c) == k).collect();
            if mask.iter().any(|&b| b) {
                classes.push(k);
                masks.push(mask);
            }
        }
        Self {
            classes,
            masks,
            valid,
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

fn ln_clamped(p: f64) -> f64 {
    p.max(PROB_EPS).ln()
}

/// d/dp of `ln(max(p, ε))`.
fn d_ln_clamped(p: f64) -> f64 {
    if p > PROB_EPS {
        1.0 / p
    } else {
        0.0
    }
}

/// Mean binary cross-entropy over valid pixels and its gradient.
pub fn mask_bce(m: &[f64], target: &[bool], valid: &[bool]) -> (f64, Vec<f64>) {
    let count = valid.iter().filter(|&&v| v).count().max(1) as f64;
    let mut grad = vec![0.0; m.len()];
    let mut total = 0.0;
    for i in 0..m.len() {
        if !valid[i] {
            continue;
        }
        if target[i] {
            total -= ln_clamped(m[i]);
            grad[i] = -d_ln_clamped(m[i]) / count;
        } else {
            total -= ln_clamped(1.0 - m[i]);
            grad[i] = d_ln_clamped(1.0 - m[i]) / count;
        }
    }
    (total / count, grad)
}

/// Soft dice loss `1 − 2Σ m·y / (Σ m + Σ y)` over valid pixels and its gradient.
pub fn mask_dice(m: &[f64], target: &[bool], valid: &[bool]) -> (f64, Vec<f64>) {
    let mut inter = 0.0;
    let mut denom = 0.0;
    for i in 0..m.len() {
        if valid[i] {
            let y = if target[i] { 1.0 } else { 0.0 };
            inter += m[i] * y;
            denom += m[i] + y;
        }
    }
    let mut grad = vec![0.0; m.len()];
    if denom <= 0.0 {
        return (0.0, grad);
    }
    for i in 0..m.len() {
        if valid[i] {
            let y = if target[i] { 1.0 } else { 0.0 };
            grad[i] = -2.0 * (y * denom - inter) / (denom * denom);
        }
    }
    (1.0 - 2.0 * inter / denom, grad)
}

/// `G × N` matching cost: `λ_cls·(−P[n, c_g]) + λ_bce·BCE + λ_dice·dice`.
pub fn pairwise_cost(p: &Tensor, m: &Tensor, gt: &GtMaskSet, w: &LossWeights) -> Result<Tensor> {
    let n = p.rows();
    if m.rows() != n {
        return Err(Error::Shape("P and M query counts differ".into()));
    }
    let mut cost = Tensor::zeros(&[gt.len(), n]);
    for (g, (&class, mask)) in gt.classes.iter().zip(&gt.masks).enumerate() {
        if class >= gt.num_classes || class + 1 >= p.cols() {
            return Err(Error::InvalidArgument(format!("class {class} outside the class head")));
        }
        for q in 0..n {
            let row = m.row(q);
            let (bce, _) = mask_bce(row, mask, &gt.valid);
            let (dice, _) = mask_dice(row, mask, &gt.valid);
            cost.set2(g, q, -w.class * p.get2(q, class) + w.bce * bce + w.dice * dice);
        }
    }
    Ok(cost)
}

/// Loss value broken down by term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ClosedSetTerms {
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
    pub no_object: f64,
}

impl ClosedSetTerms {
    pub fn total(&self) -> f64 {
        self.class + self.bce + self.dice + self.no_object
    }
}

#[derive(Debug, Clone)]
pub struct ClosedSetLoss {
    pub terms: ClosedSetTerms,
    /// `∂loss/∂P`, `N × (K+1)`.
    pub d_p: Tensor,
    /// `∂loss/∂M`, `N × HW`.
    pub d_m: Tensor,
}

impl ClosedSetLoss {
    pub fn value(&self) -> f64 {
        self.terms.total()
    }
}

/// Matched queries pay weighted CE + BCE + dice against their mask;
/// unmatched queries pay `w_noobj · λ_cls · CE(P[n], no-object)`.
pub fn closed_set_loss(p: &Tensor, m: &Tensor, gt: &GtMaskSet, matching: &MatchResult, w: &LossWeights) -> Result<ClosedSetLoss> {
    let (n, kp1) = (p.rows(), p.cols());
    let hw = m.cols();
    if m.rows() != n || gt.valid.len() != hw {
        return Err(Error::Shape("P, M and mask sizes disagree".into()));
    }
    let no_object = kp1 - 1;
    let mut terms = ClosedSetTerms::default();
    let mut d_p = Tensor::zeros(&[n, kp1]);
    let mut d_m = Tensor::zeros(&[n, hw]);
    for &(g, q) in &matching.assignment {
        if g >= gt.len() || q >= n {
            return Err(Error::InvalidArgument(format!("match ({g}, {q}) out of range")));
        }
        let class = gt.classes[g];
        let pc = p.get2(q, class);
        terms.class -= w.class * ln_clamped(pc);
        d_p.set2(q, class, -w.class * d_ln_clamped(pc));

        let (bce, g_bce) = mask_bce(m.row(q), &gt.masks[g], &gt.valid);
        let (dice, g_dice) = mask_dice(m.row(q), &gt.masks[g], &gt.valid);
        terms.bce += w.bce * bce;
        terms.dice += w.dice * dice;
        for ((o, a), b) in d_m.row_mut(q).iter_mut().zip(&g_bce).zip(&g_dice) {
            *o = w.bce * a + w.dice * b;
        }
    }
    for q in (0..n).filter(|&q| !matching.is_matched(q)) {
        let pn = p.get2(q, no_object);
        let scale = w.no_object * w.class;
        terms.no_object -= scale * ln_clamped(pn);
        d_p.set2(q, no_object, -scale * d_ln_clamped(pn));
    }
    Ok(ClosedSetLoss { terms, d_p, d_m })
}

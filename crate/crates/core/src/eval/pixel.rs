//! Threshold-free pixel ranking metrics. Outlier pixels are positives,
//! inlier pixels negatives, void pixels are dropped.

use std::cmp::Ordering;

use crate::data::{LabelMap, OUTLIER};
use crate::error::{Error, Result};
use crate::scoring::ScoreMap;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PixelEvalSet {
    pub scores: Vec<f64>,
    pub positive: Vec<bool>,
}

/// Count of positives and negatives inside one group of equal scores.
#[derive(Debug, Clone, Copy)]
struct TieGroup {
    score: f64,
    pos: usize,
    neg: usize,
}

impl PixelEvalSet {
    pub fn new(scores: Vec<f64>, positive: Vec<bool>) -> Result<Self> {
        if scores.len() != positive.len() {
            return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), positive.len())));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("evaluation scores".into()));
        }
        Ok(Self { scores, positive })
    }

    /// Appends every non-void pixel of one scene.
    pub fn push_scene(&mut self, map: &ScoreMap, labels: &LabelMap) -> Result<()> {
        if map.height != labels.height || map.width != labels.width {
            return Err(Error::Shape(format!(
                "score map {}x{} vs labels {}x{}",
                map.height, map.width, labels.height, labels.width
            )));
        }
        for (i, &s) in map.values.iter().enumerate() {
            if !labels.is_void(i) {
                self.scores.push(s);
                self.positive.push(labels.codes[i] == OUTLIER);
            }
        }
        Ok(())
    }

    pub fn from_scenes<'a>(pairs: impl IntoIterator<Item = (&'a ScoreMap, &'a LabelMap)>) -> Result<Self> {
        let mut set = Self::default();
        for (m, l) in pairs {
            set.push_scene(m, l)?;
        }
        Ok(set)
    }

    pub fn positives(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }

    pub fn negatives(&self) -> usize {
        self.positive.len() - self.positives()
    }

    /// Tie groups in descending score order.
    fn groups(&self) -> Vec<TieGroup> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].partial_cmp(&self.scores[a]).unwrap_or(Ordering::Equal));
        let mut out: Vec<TieGroup> = Vec::new();
        for i in idx {
            let s = self.scores[i];
            match out.last_mut() {
                Some(g) if g.score == s => {}
                _ => out.push(TieGroup { score: s, pos: 0, neg: 0 }),
            }
            let g = out.last_mut().expect("just pushed");
            if self.positive[i] {
                g.pos += 1;
            } else {
                g.neg += 1;
            }
        }
        out
    }
}

/// Step integral of precision over recall, one step per tie group.
/// `None` without positives.
pub fn average_precision(set: &PixelEvalSet) -> Option<f64> {
    let total = set.positives();
    if total == 0 {
        return None;
    }
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    for g in set.groups() {
        tp += g.pos;
        fp += g.neg;
        if g.pos > 0 {
            ap += g.pos as f64 / total as f64 * (tp as f64 / (tp + fp) as f64);
        }
    }
    Some(ap)
}

/// `P(s_pos > s_neg) + ½ P(s_pos = s_neg)`. `None` for one-class input.
pub fn auroc(set: &PixelEvalSet) -> Option<f64> {
    let (np, nn) = (set.positives(), set.negatives());
    if np == 0 || nn == 0 {
        return None;
    }
    // walk groups in descending order; each positive beats every negative below it
    let mut neg_above = 0usize;
    let mut twice = 0u128;
    for g in set.groups() {
        neg_above += g.neg;
        let below = nn - neg_above;
        // 2·(pos·below + ½·pos·neg_in_group), kept integral
        twice += 2 * g.pos as u128 * below as u128 + g.pos as u128 * g.neg as u128;
    }
    Some(twice as f64 / (2.0 * np as f64 * nn as f64))
}

/// Largest observed score `t` at which flagging `s ≥ t` reaches 95% TPR.
pub fn tpr95_threshold(set: &PixelEvalSet) -> Option<f64> {
    let np = set.positives();
    if np == 0 {
        return None;
    }
    let mut tp = 0usize;
    for g in set.groups() {
        tp += g.pos;
        if 100 * tp >= 95 * np {
            return Some(g.score);
        }
    }
    None
}

/// False-positive rate at [`tpr95_threshold`]. `None` for one-class input.
pub fn fpr_at_95tpr(set: &PixelEvalSet) -> Option<f64> {
    let (np, nn) = (set.positives(), set.negatives());
    if np == 0 || nn == 0 {
        return None;
    }
    let t = tpr95_threshold(set)?;
    let fp = set
        .scores
        .iter()
        .zip(&set.positive)
        .filter(|(&s, &p)| !p && s >= t)
        .count();
    Some(fp as f64 / nn as f64)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn set(scores: &[f64], labels: &[u8]) -> PixelEvalSet {
        PixelEvalSet::new(scores.to_vec(), labels.iter().map(|&l| l == 1).collect()).unwrap()
    }

    /// Sweeps every distinct threshold from the top and integrates precision
    /// over recall steps.
    pub(crate) fn ap_oracle(s: &PixelEvalSet) -> Option<f64> {
        let np = s.positives();
        if np == 0 {
            return None;
        }
        let mut thresholds = s.scores.clone();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let (mut ap, mut prev_recall) = (0.0, 0.0);
        for t in thresholds {
            let tp = (0..s.scores.len()).filter(|&i| s.scores[i] >= t && s.positive[i]).count();
            let flagged = (0..s.scores.len()).filter(|&i| s.scores[i] >= t).count();
            let recall = tp as f64 / np as f64;
            ap += (recall - prev_recall) * tp as f64 / flagged as f64;
            prev_recall = recall;
        }
        Some(ap)
    }

    pub(crate) fn auroc_oracle(s: &PixelEvalSet) -> Option<f64> {
        let pos: Vec<f64> = (0..s.scores.len()).filter(|&i| s.positive[i]).map(|i| s.scores[i]).collect();
        let neg: Vec<f64> = (0..s.scores.len()).filter(|&i| !s.positive[i]).map(|i| s.scores[i]).collect();
        if pos.is_empty() || neg.is_empty() {
            return None;
        }
        let mut acc = 0.0;
        for p in &pos {
            for n in &neg {
                acc += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        Some(acc / (pos.len() * neg.len()) as f64)
    }

    pub(crate) fn fpr95_oracle(s: &PixelEvalSet) -> Option<f64> {
        let np = s.positives();
        let nn = s.negatives();
        if np == 0 || nn == 0 {
            return None;
        }
        let mut thresholds = s.scores.clone();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        for t in thresholds {
            let tp = (0..s.scores.len()).filter(|&i| s.scores[i] >= t && s.positive[i]).count();
            if tp as f64 / np as f64 >= 0.95 {
                let fp = (0..s.scores.len()).filter(|&i| s.scores[i] >= t && !s.positive[i]).count();
                return Some(fp as f64 / nn as f64);
            }
        }
        unreachable!("the lowest threshold flags every positive")
    }

    /// Random array with `n ≤ 200`; half of the trials draw from a handful
    /// of values so that ties dominate.
    pub(crate) fn random_set(r: &mut impl Rng, tie_heavy: bool) -> PixelEvalSet {
        let n = r.random_range(2..=200);
        let scores = (0..n)
            .map(|_| if tie_heavy { f64::from(r.random_range(0..5u8)) * 0.25 } else { r.random_range(-3.0..3.0) })
            .collect();
        let rate = r.random_range(0.05..0.95);
        let positive = (0..n).map(|_| r.random_bool(rate)).collect();
        PixelEvalSet::new(scores, positive).unwrap()
    }

    #[test]
    fn examples() {
        let s = set(&[0.9, 0.8, 0.1], &[1, 0, 1]);
        assert!((average_precision(&s).unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-9);
        assert!((auroc(&s).unwrap() - 0.5).abs() < 1e-12);
        let sep = set(&[0.9, 0.8, 0.5, 0.4], &[1, 1, 0, 0]);
        assert_eq!(average_precision(&sep), Some(1.0));
        assert_eq!(fpr_at_95tpr(&sep), Some(0.0));
        let anti = set(&[0.1, 0.2, 0.5, 0.4], &[1, 1, 0, 0]);
        assert_eq!(auroc(&anti), Some(0.0));
        assert_eq!(fpr_at_95tpr(&anti), Some(1.0));
        let flat = set(&[0.3; 8], &[1, 0, 0, 1, 0, 1, 0, 0]);
        assert!((average_precision(&flat).unwrap() - 3.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn one_class_input_is_undefined() {
        let s = set(&[0.1, 0.2], &[0, 0]);
        assert_eq!(average_precision(&s), None);
        assert_eq!(auroc(&s), None);
        assert_eq!(fpr_at_95tpr(&s), None);
        let s = set(&[0.1, 0.2], &[1, 1]);
        assert_eq!(average_precision(&s), Some(1.0));
        assert_eq!(auroc(&s), None);
    }

    #[test]
    fn match_brute_force_oracles() {
        let mut r = rng::stream(1, "pixel-metric-oracle", 0);
        for trial in 0..1000 {
            let s = random_set(&mut r, trial % 2 == 1);
            let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
                (Some(a), Some(b)) => (a - b).abs() < 1e-9,
                (None, None) => true,
                _ => false,
            };
            assert!(close(average_precision(&s), ap_oracle(&s)), "AP trial {trial}");
            assert!(close(auroc(&s), auroc_oracle(&s)), "AuROC trial {trial}");
            assert!(close(fpr_at_95tpr(&s), fpr95_oracle(&s)), "FPR trial {trial}");
        }
    }

    proptest! {
        #[test]
        fn invariant_under_increasing_maps(seed in 0u64..500) {
            let mut r = rng::stream(seed, "rank-invariance", 0);
            let s = random_set(&mut r, seed % 3 == 0);
            let affine = PixelEvalSet::new(s.scores.iter().map(|v| 2.0 * v + 7.0).collect(), s.positive.clone()).unwrap();
            let cubic = PixelEvalSet::new(s.scores.iter().map(|v| v * v * v + v).collect(), s.positive.clone()).unwrap();
            for t in [&affine, &cubic] {
                for f in [average_precision, auroc, fpr_at_95tpr] {
                    match (f(&s), f(t)) {
                        (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                        (a, b) => prop_assert_eq!(a, b),
                    }
                }
            }
        }
    }
}

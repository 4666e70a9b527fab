//! Per-pixel outlier scores over aggregated class logits.
//!
//! Every function is oriented so that a higher score means "more anomalous".

mod format;

pub use format::{decode_score_map, encode_score_map, read_score_map, to_pgm16, write_pgm16, write_score_map, SMAP_MAGIC};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::error::{Error, Result};
use crate::model::{forward, ModelParams};
use crate::tensor::{logsumexp_slice, softmax_slice, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "{} scores for a {height}x{width} map",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("score map".into()));
        }
        Ok(Self { height, width, values })
    }

    pub fn mean_over(&self, mask: impl Fn(usize) -> bool) -> Option<f64> {
        let (sum, n) = self
            .values
            .iter()
            .enumerate()
            .filter(|(i, _)| mask(*i))
            .fold((0.0, 0usize), |(s, n), (_, v)| (s + v, n + 1));
        (n > 0).then(|| sum / n as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreFn {
    Rba,
    Msp,
    Entropy,
    MaxLogit,
    Energy,
}

impl ScoreFn {
    pub const ALL: [ScoreFn; 5] = [ScoreFn::Rba, ScoreFn::Msp, ScoreFn::Entropy, ScoreFn::MaxLogit, ScoreFn::Energy];

    pub fn name(self) -> &'static str {
        match self {
            ScoreFn::Rba => "rba",
            ScoreFn::Msp => "msp",
            ScoreFn::Entropy => "entropy",
            ScoreFn::MaxLogit => "maxlogit",
            ScoreFn::Energy => "energy",
        }
    }

    /// Score of a single pixel's `K` logits.
    pub fn pixel(self, logits: &[f64]) -> f64 {
        match self {
            ScoreFn::Rba => rba(logits),
            ScoreFn::Msp => 1.0 - softmax_slice(logits).into_iter().fold(f64::NEG_INFINITY, f64::max),
            ScoreFn::Entropy => softmax_slice(logits)
                .into_iter()
                .filter(|&p| p > 0.0)
                .map(|p| -p * p.ln())
                .sum(),
            ScoreFn::MaxLogit => -logits.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ScoreFn::Energy => -logsumexp_slice(logits),
        }
    }
}

impl fmt::Display for ScoreFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoreFn::ALL
            .into_iter()
            .find(|f| f.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scoring function `{s}`")))
    }
}

/// Rejected-by-all score of one pixel: `−Σ_k tanh(L_k)`, in `[−K, K]`.
pub fn rba(logits: &[f64]) -> f64 {
    -logits.iter().map(|v| v.tanh()).sum::<f64>()
}

/// Applies `f` to every pixel of a `K × H × W` logit map.
pub fn score_logits(l: &Tensor, f: ScoreFn) -> Result<ScoreMap> {
    let (k, h, w) = match l.shape() {
        [k, h, w] => (*k, *h, *w),
        s => return Err(Error::Shape(format!("logits must be K×H×W, got {s:?}"))),
    };
    let hw = h * w;
    let d = l.data();
    let mut buf = vec![0.0; k];
    let values = (0..hw)
        .map(|x| {
            for (c, b) in buf.iter_mut().enumerate() {
                *b = d[c * hw + x];
            }
            f.pixel(&buf)
        })
        .collect();
    ScoreMap::new(h, w, values)
}

pub fn score_rba(l: &Tensor) -> Result<ScoreMap> {
    score_logits(l, ScoreFn::Rba)
}

pub fn score_msp(l: &Tensor) -> Result<ScoreMap> {
    score_logits(l, ScoreFn::Msp)
}

pub fn score_entropy(l: &Tensor) -> Result<ScoreMap> {
    score_logits(l, ScoreFn::Entropy)
}

pub fn score_maxlogit(l: &Tensor) -> Result<ScoreMap> {
    score_logits(l, ScoreFn::MaxLogit)
}

pub fn score_energy(l: &Tensor) -> Result<ScoreMap> {
    score_logits(l, ScoreFn::Energy)
}

/// Forward pass followed by `f`. Void pixels are scored too; metrics
/// exclude them using the scene's label map.
pub fn score_scene(params: &ModelParams, scene: &Scene, f: ScoreFn) -> Result<ScoreMap> {
    if scene.channels() != params.config.in_channels {
        return Err(Error::ConfigMismatch(format!(
            "scene has {} channels, model expects {}",
            scene.channels(),
            params.config.in_channels
        )));
    }
    score_logits(&forward(params, &scene.features)?.l, f)
}

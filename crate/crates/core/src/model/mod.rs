//! Toy mask-classification network.
//!
//! Pixel encoder (pointwise affine + ReLU, 3×3 mean-pool context, pointwise
//! affine + ReLU) → one decoder layer (cross-attention from learnable object
//! queries to pixel features, query self-attention, FFN) → class head and
//! 3-layer mask MLP. Region class probabilities `P` and membership maps `M`
//! are combined into per-pixel class logits `L = Σ_n P[n, ..K] · M[n]`.

mod backward;
mod checkpoint;
mod forward;

pub use backward::{backward, Upstream};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_SCHEMA};
pub use forward::{aggregate_logits, forward, forward_masked, ForwardCache, MaskMode, ModelOutput};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Pixel/query embedding width `C_p`.
    pub embed: usize,
    /// Number of object queries `N`.
    pub queries: usize,
    /// Number of inlier classes `K`; the class head has `K + 1` outputs,
    /// the last being the no-object slot.
    pub classes: usize,
    pub ffn_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 8,
            embed: 16,
            queries: 8,
            classes: 4,
            ffn_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.in_channels, self.embed, self.queries, self.classes, self.ffn_hidden].contains(&0) {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        if self.queries < self.classes {
            log::warn!(
                "{} queries for {} classes: some classes cannot own a query",
                self.queries,
                self.classes
            );
        }
        Ok(())
    }
}

/// Canonical parameter registry. Order here is the checkpoint order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    EncW1,
    EncB1,
    EncW2,
    EncB2,
    Queries,
    QueryPos,
    SelfAttnW,
    FfnW1,
    FfnB1,
    FfnW2,
    FfnB2,
    MaskW1,
    MaskB1,
    MaskW2,
    MaskB2,
    MaskW3,
    MaskB3,
    ClsW,
    ClsB,
}

impl ParamId {
    pub const ALL: [ParamId; 19] = [
        ParamId::EncW1,
        ParamId::EncB1,
        ParamId::EncW2,
        ParamId::EncB2,
        ParamId::Queries,
        ParamId::QueryPos,
        ParamId::SelfAttnW,
        ParamId::FfnW1,
        ParamId::FfnB1,
        ParamId::FfnW2,
        ParamId::FfnB2,
        ParamId::MaskW1,
        ParamId::MaskB1,
        ParamId::MaskW2,
        ParamId::MaskB2,
        ParamId::MaskW3,
        ParamId::MaskB3,
        ParamId::ClsW,
        ParamId::ClsB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::EncW1 => "encoder.w1",
            ParamId::EncB1 => "encoder.b1",
            ParamId::EncW2 => "encoder.w2",
            ParamId::EncB2 => "encoder.b2",
            ParamId::Queries => "decoder.queries",
            ParamId::QueryPos => "decoder.query_pos",
            ParamId::SelfAttnW => "decoder.self_attn_w",
            ParamId::FfnW1 => "decoder.ffn_w1",
            ParamId::FfnB1 => "decoder.ffn_b1",
            ParamId::FfnW2 => "decoder.ffn_w2",
            ParamId::FfnB2 => "decoder.ffn_b2",
            ParamId::MaskW1 => "mask_mlp.w1",
            ParamId::MaskB1 => "mask_mlp.b1",
            ParamId::MaskW2 => "mask_mlp.w2",
            ParamId::MaskB2 => "mask_mlp.b2",
            ParamId::MaskW3 => "mask_mlp.w3",
            ParamId::MaskB3 => "mask_mlp.b3",
            ParamId::ClsW => "class_head.w",
            ParamId::ClsB => "class_head.b",
        }
    }

    pub fn from_name(name: &str) -> Option<ParamId> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }

    /// Whether outlier fine-tuning updates this parameter (mask MLP and class head).
    pub fn is_tuned(self) -> bool {
        matches!(
            self,
            ParamId::MaskW1
                | ParamId::MaskB1
                | ParamId::MaskW2
                | ParamId::MaskB2
                | ParamId::MaskW3
                | ParamId::MaskB3
                | ParamId::ClsW
                | ParamId::ClsB
        )
    }

    fn index(self) -> usize {
        self as usize
    }

    pub fn shape(self, cfg: &ModelConfig) -> Vec<usize> {
        let (c, e, n, k, f) = (cfg.in_channels, cfg.embed, cfg.queries, cfg.classes, cfg.ffn_hidden);
        match self {
            ParamId::EncW1 => vec![c, e],
            ParamId::EncW2 => vec![2 * e, e],
            ParamId::Queries | ParamId::QueryPos => vec![n, e],
            ParamId::SelfAttnW | ParamId::MaskW1 | ParamId::MaskW2 | ParamId::MaskW3 => vec![e, e],
            ParamId::FfnW1 => vec![e, f],
            ParamId::FfnB1 => vec![f],
            ParamId::FfnW2 => vec![f, e],
            ParamId::ClsW => vec![e, k + 1],
            ParamId::ClsB => vec![k + 1],
            ParamId::EncB1
            | ParamId::EncB2
            | ParamId::FfnB2
            | ParamId::MaskB1
            | ParamId::MaskB2
            | ParamId::MaskB3 => vec![e],
        }
    }

    fn fan_in(self, cfg: &ModelConfig) -> Option<usize> {
        match self {
            ParamId::EncW1
            | ParamId::EncW2
            | ParamId::SelfAttnW
            | ParamId::FfnW1
            | ParamId::FfnW2
            | ParamId::MaskW1
            | ParamId::MaskW2
            | ParamId::MaskW3
            | ParamId::ClsW => Some(self.shape(cfg)[0]),
            _ => None,
        }
    }
}

/// A full set of named tensors matching a [`ModelConfig`]. Used both for
/// parameters and for their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub config: ModelConfig,
    tensors: Vec<Tensor>,
}

pub type ModelParams = ParamSet;
pub type Gradients = ParamSet;

impl ParamSet {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self {
            config: cfg.clone(),
            tensors: ParamId::ALL.iter().map(|p| Tensor::zeros(&p.shape(cfg))).collect(),
        }
    }

    /// Scaled-normal initialization: weights `N(0, 1/fan_in)`, queries and
    /// positional embeddings `N(0, 0.02²)`, biases zero.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut out = Self::zeros(cfg);
        for (i, id) in ParamId::ALL.into_iter().enumerate() {
            let std = match (id, id.fan_in(cfg)) {
                (_, Some(fan_in)) => (1.0 / fan_in as f64).sqrt(),
                (ParamId::Queries | ParamId::QueryPos, _) => 0.02,
                _ => continue,
            };
            let dist = Normal::new(0.0, std).expect("positive std");
            let mut r = rng::stream(seed, "param-init", i as u64);
            out.tensors[i].data_mut().iter_mut().for_each(|v| *v = dist.sample(&mut r));
        }
        Ok(out)
    }

    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<(ParamId, Tensor)>) -> Result<Self> {
        let mut out = Self::zeros(cfg);
        let mut seen = vec![false; ParamId::ALL.len()];
        for (id, t) in tensors {
            if t.shape() != id.shape(cfg).as_slice() {
                return Err(Error::ConfigMismatch(format!(
                    "`{}` has shape {:?}, config implies {:?}",
                    id.name(),
                    t.shape(),
                    id.shape(cfg)
                )));
            }
            seen[id.index()] = true;
            out.tensors[id.index()] = t;
        }
        if let Some(missing) = ParamId::ALL.iter().find(|p| !seen[p.index()]) {
            return Err(Error::Format(format!("missing parameter `{}`", missing.name())));
        }
        Ok(out)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.index()]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        ParamId::ALL.into_iter().zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor)> {
        ParamId::ALL.into_iter().zip(self.tensors.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn tuned_count(&self) -> usize {
        self.iter().filter(|(id, _)| id.is_tuned()).map(|(_, t)| t.numel()).sum()
    }

    pub fn tuned_fraction(&self) -> f64 {
        self.tuned_count() as f64 / self.param_count() as f64
    }

    pub fn add_assign(&mut self, other: &ParamSet) -> Result<()> {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().for_each(|t| t.scale(s));
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::sq_norm).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|&v| v == 0.0))
    }

    /// Cheap identity of the current values, used to detect stale caches.
    pub(crate) fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for t in &self.tensors {
            for v in t.data() {
                h = (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01B3);
            }
        }
        h
    }

    /// SHA-256 over the little-endian bytes of the selected parameters, in
    /// registry order.
    pub fn digest(&self, filter: impl Fn(ParamId) -> bool) -> String {
        let mut hasher = Sha256::new();
        for (id, t) in self.iter().filter(|(id, _)| filter(*id)) {
            hasher.update(id.name().as_bytes());
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

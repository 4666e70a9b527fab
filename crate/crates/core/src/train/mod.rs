//! Deterministic training drivers: closed-set training over all parameters
//! and outlier fine-tuning restricted to the mask MLP and class head.

mod gradcheck;
mod optim;

pub use gradcheck::{gradcheck, gradcheck_with, tiny_configs, tiny_fixture, GradcheckConfig, GradcheckReport};
pub use optim::{OptimConfig, OptimState};

use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{paste_outlier, OutlierBank, Scene};
use crate::error::{Error, Result};
use crate::losses::{
    alt_outlier_loss, closed_set_loss, hungarian, pairwise_cost, GtMaskSet, LossWeights, MatchResult, Normalization,
    OutlierLossKind,
};
use crate::model::{backward, forward, Gradients, ModelConfig, ModelOutput, ModelParams, ParamId, ParamSet, Upstream};
use crate::{par, rng};

/// Which parameters an update touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    ClosedSet,
    Finetune,
}

impl Phase {
    pub fn updates(self, id: ParamId) -> bool {
        match self {
            Phase::ClosedSet => true,
            Phase::Finetune => id.is_tuned(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::ClosedSet => "closed_set",
            Phase::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosedSetConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub loss: LossWeights,
}

impl Default for ClosedSetConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch_size: 8,
            optim: OptimConfig {
                lr: 1e-3,
                ..OptimConfig::default()
            },
            loss: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    /// Hinge margin on the outlier score.
    pub alpha: f64,
    /// Probability of pasting an outlier object into a batch scene.
    pub p_out: f64,
    pub outlier_loss: OutlierLossKind,
    pub normalization: Normalization,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            batch_size: 8,
            optim: OptimConfig {
                lr: 1e-2,
                ..OptimConfig::default()
            },
            loss: LossWeights::default(),
            alpha: 5.0,
            p_out: 0.1,
            outlier_loss: OutlierLossKind::Hinge,
            normalization: Normalization::Mean,
        }
    }
}

fn check_schedule(iterations: usize, batch_size: usize, optim: &OptimConfig, loss: &LossWeights) -> Result<()> {
    if iterations == 0 || batch_size == 0 {
        return Err(Error::Config("iterations and batch_size must be positive".into()));
    }
    optim.validate()?;
    loss.validate()
}

impl ClosedSetConfig {
    pub fn validate(&self) -> Result<()> {
        check_schedule(self.iterations, self.batch_size, &self.optim, &self.loss)
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        check_schedule(self.iterations, self.batch_size, &self.optim, &self.loss)?;
        if !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.p_out) {
            return Err(Error::Config(format!("p_out must be in [0, 1], got {}", self.p_out)));
        }
        Ok(())
    }

    pub fn outlier_term(&self) -> OutlierTerm {
        OutlierTerm {
            kind: self.outlier_loss,
            alpha: self.alpha,
            normalization: self.normalization,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutlierTerm {
    pub kind: OutlierLossKind,
    pub alpha: f64,
    pub normalization: Normalization,
}

/// Per-scene objective: closed-set losses plus an optional outlier term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    pub outlier: Option<OutlierTerm>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
    pub no_object: f64,
    pub outlier: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.class + self.bce + self.dice + self.no_object + self.outlier
    }

    fn add_scaled(&mut self, o: &LossTerms, s: f64) {
        self.class += s * o.class;
        self.bce += s * o.bce;
        self.dice += s * o.dice;
        self.no_object += s * o.no_object;
        self.outlier += s * o.outlier;
    }
}

/// Everything produced by evaluating the objective on one scene.
pub struct SceneLoss {
    pub terms: LossTerms,
    pub matching: MatchResult,
    pub output: ModelOutput,
    pub upstream: Upstream,
}

/// Forward pass, matching (unless `fixed` is given), losses and the
/// upstream gradients of the total with respect to `P`, `M` and `L`.
pub fn scene_loss(params: &ModelParams, scene: &Scene, obj: &Objective, fixed: Option<&MatchResult>) -> Result<SceneLoss> {
    let classes = params.config.classes;
    scene.labels.validate(classes)?;
    let output = forward(params, &scene.features)?;
    let gt = GtMaskSet::from_labels(&scene.labels, classes);
    let matching = match fixed {
        Some(m) => m.clone(),
        None => hungarian(&pairwise_cost(&output.p, &output.m, &gt, &obj.weights)?)?,
    };
    let closed = closed_set_loss(&output.p, &output.m, &gt, &matching, &obj.weights)?;
    let mut terms = LossTerms {
        class: closed.terms.class,
        bce: closed.terms.bce,
        dice: closed.terms.dice,
        no_object: closed.terms.no_object,
        outlier: 0.0,
    };
    let d_l = match obj.outlier {
        Some(o) => {
            let (v, d) = alt_outlier_loss(o.kind, &output.l, &scene.labels, o.alpha, o.normalization)?;
            terms.outlier = v;
            Some(d)
        }
        None => None,
    };
    Ok(SceneLoss {
        terms,
        matching,
        upstream: Upstream {
            d_p: Some(closed.d_p),
            d_m: Some(closed.d_m),
            d_l,
        },
        output,
    })
}

/// Loss terms and parameter gradients for one scene.
pub fn scene_gradients(params: &ModelParams, scene: &Scene, obj: &Objective) -> Result<(LossTerms, Gradients)> {
    let s = scene_loss(params, scene, obj, None)?;
    let g = backward(params, &s.output.cache, &s.output.p, &s.output.m, &s.upstream)?;
    Ok((s.terms, g))
}

/// Mean terms and mean gradients over a batch, reduced in batch order.
pub fn batch_gradients(params: &ModelParams, batch: &[Scene], obj: &Objective, threads: usize) -> Result<(LossTerms, Gradients)> {
    let per_scene = par::map(batch, threads, |s| scene_gradients(params, s, obj));
    let inv = 1.0 / batch.len() as f64;
    let mut terms = LossTerms::default();
    let mut grads = ParamSet::zeros(&params.config);
    for r in per_scene {
        let (t, g) = r?;
        terms.add_scaled(&t, inv);
        grads.add_assign(&g)?;
    }
    grads.scale(inv);
    Ok((terms, grads))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRecord {
    pub phase: &'static str,
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
    pub no_object: f64,
    pub outlier: f64,
    pub grad_norm: f64,
}

/// Serializes the log as newline-delimited JSON.
pub fn log_to_ndjson(log: &[LogRecord]) -> Result<String> {
    let mut out = String::new();
    for r in log {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<LogRecord>,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub params: ModelParams,
    pub log: Vec<LogRecord>,
    pub frozen_digest: String,
    pub tuned_fraction: f64,
}

fn sample_batch(dataset: &[Scene], batch: usize, seed: u64, iteration: usize) -> Vec<usize> {
    let mut r = rng::stream(seed, "batch", iteration as u64);
    (0..batch).map(|_| r.random_range(0..dataset.len())).collect()
}

fn diverged(iteration: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(stage) => Error::Diverged {
            iteration,
            reason: format!("non-finite value in {stage}"),
        },
        other => other,
    }
}

struct Loop<'a> {
    phase: Phase,
    iterations: usize,
    optim: OptimConfig,
    objective: Objective,
    threads: usize,
    make_batch: Box<dyn Fn(usize) -> Result<Vec<Scene>> + 'a>,
}

impl Loop<'_> {
    fn run(&self, mut params: ModelParams) -> Result<(ModelParams, Vec<LogRecord>)> {
        let mut state = OptimState::new(self.optim.clone(), &params);
        let mut log = Vec::with_capacity(self.iterations);
        for it in 0..self.iterations {
            let batch = (self.make_batch)(it)?;
            let (terms, grads) =
                batch_gradients(&params, &batch, &self.objective, self.threads).map_err(|e| diverged(it, e))?;
            let loss = terms.total();
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    iteration: it,
                    reason: format!("loss is {loss}"),
                });
            }
            let lr = self.optim.lr_at(it, self.iterations);
            let phase = self.phase;
            let grad_norm = state
                .step(&mut params, &grads, lr, |id| phase.updates(id))
                .map_err(|e| diverged(it, e))?;
            if it % 100 == 0 {
                debug!("{} iteration {it}: loss {loss:.5}", phase.name());
            }
            log.push(LogRecord {
                phase: phase.name(),
                iteration: it,
                lr,
                loss,
                class: terms.class,
                bce: terms.bce,
                dice: terms.dice,
                no_object: terms.no_object,
                outlier: terms.outlier,
                grad_norm,
            });
        }
        Ok((params, log))
    }
}

/// Trains every parameter from a seeded initialization on inlier scenes.
pub fn train_closed_set(model: &ModelConfig, cfg: &ClosedSetConfig, dataset: &[Scene], seed: u64, threads: usize) -> Result<TrainOutcome> {
    cfg.validate()?;
    let init = ParamSet::init(model, rng::derive_seed(seed, "init", 0))?;
    train_closed_set_from(init, cfg, dataset, seed, threads)
}

/// Closed-set training starting from given parameters.
pub fn train_closed_set_from(init: ModelParams, cfg: &ClosedSetConfig, dataset: &[Scene], seed: u64, threads: usize) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    let lp = Loop {
        phase: Phase::ClosedSet,
        iterations: cfg.iterations,
        optim: cfg.optim.clone(),
        objective: Objective {
            weights: cfg.loss,
            outlier: None,
        },
        threads,
        make_batch: Box::new(|it| {
            Ok(sample_batch(dataset, cfg.batch_size, seed, it)
                .into_iter()
                .map(|i| dataset[i].clone())
                .collect())
        }),
    };
    let (params, log) = lp.run(init)?;
    Ok(TrainOutcome { params, log })
}

/// Fine-tunes the tuned subset on scenes with pasted outliers and checks
/// that every frozen parameter is byte-identical afterwards.
pub fn finetune_outlier(
    source: &ModelParams,
    cfg: &FinetuneConfig,
    dataset: &[Scene],
    bank: &OutlierBank,
    seed: u64,
    threads: usize,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("fine-tuning dataset is empty".into()));
    }
    let frozen = |id: ParamId| !id.is_tuned();
    let before = source.digest(frozen);
    let lp = Loop {
        phase: Phase::Finetune,
        iterations: cfg.iterations,
        optim: cfg.optim.clone(),
        objective: Objective {
            weights: cfg.loss,
            outlier: Some(cfg.outlier_term()),
        },
        threads,
        make_batch: Box::new(|it| {
            sample_batch(dataset, cfg.batch_size, seed, it)
                .into_iter()
                .enumerate()
                .map(|(b, i)| {
                    let paste_seed = rng::derive_seed(seed, "finetune-paste", (it * cfg.batch_size + b) as u64);
                    paste_outlier(&dataset[i], bank, cfg.p_out, paste_seed)
                })
                .collect()
        }),
    };
    let (params, log) = lp.run(source.clone())?;
    let after = params.digest(frozen);
    if after != before {
        let changed = ParamId::ALL
            .into_iter()
            .find(|&id| frozen(id) && params.get(id) != source.get(id))
            .map_or("unknown", ParamId::name);
        return Err(Error::FrozenModified(changed.to_string()));
    }
    Ok(FinetuneOutcome {
        tuned_fraction: params.tuned_fraction(),
        params,
        log,
        frozen_digest: after,
    })
}

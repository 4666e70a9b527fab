//! Probes of what the trained queries and logits encode: per-query class
//! specialization, single-query masking ablations and k-means over logit
//! vectors.

use serde::Serialize;

use super::ClassIoU;
use crate::data::{Scene, OUTLIER};
use crate::error::{Error, Result};
use crate::model::{forward, forward_masked, MaskMode, ModelParams};
use crate::tensor::{kmeans, Tensor};
use crate::{par, rng};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpecializationReport {
    pub threshold: f64,
    /// `counts[n][k]`: scenes in which query `n` gave class `k` probability
    /// above the threshold.
    pub counts: Vec<Vec<u64>>,
    /// Query with the most events per class.
    pub dominant_query: Vec<Option<usize>>,
    /// Share of a class's events held by its dominant query.
    pub dominance: Vec<Option<f64>>,
    /// Class each query fires for most often.
    pub query_class: Vec<Option<usize>>,
}

pub fn specialization_matrix(params: &ModelParams, scenes: &[Scene], threshold: f64, threads: usize) -> Result<SpecializationReport> {
    let (n, k) = (params.config.queries, params.config.classes);
    let outputs = par::map(scenes, threads, |s| forward(params, &s.features).map(|o| o.p));
    let mut counts = vec![vec![0u64; k]; n];
    for p in outputs {
        let p = p?;
        for (q, row) in counts.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                if p.get2(q, c) > threshold {
                    *v += 1;
                }
            }
        }
    }
    let mut dominant_query = Vec::with_capacity(k);
    let mut dominance = Vec::with_capacity(k);
    for c in 0..k {
        let total: u64 = counts.iter().map(|r| r[c]).sum();
        if total == 0 {
            dominant_query.push(None);
            dominance.push(None);
            continue;
        }
        // first maximum wins ties
        let best = (0..n).fold(0, |b, q| if counts[q][c] > counts[b][c] { q } else { b });
        dominant_query.push(Some(best));
        dominance.push(Some(counts[best][c] as f64 / total as f64));
    }
    let query_class = counts
        .iter()
        .map(|row| {
            let best = (0..k).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            (row[best] > 0).then_some(best)
        })
        .collect();
    Ok(SpecializationReport {
        threshold,
        counts,
        dominant_query,
        dominance,
        query_class,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AblationMode {
    None,
    Hard,
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    /// Per-class IoU; `None` for a class without a specialized query or
    /// without pixels in the set.
    pub iou: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskingAblation {
    pub query_for_class: Vec<Option<usize>>,
    pub rows: Vec<AblationRow>,
}

impl MaskingAblation {
    pub fn row(&self, mode: AblationMode) -> &AblationRow {
        self.rows.iter().find(|r| r.mode == mode).expect("all modes present")
    }
}

/// Per-class IoU of the full model (`NONE`) against the same class predicted
/// by its specialized query alone, with the other queries removed before the
/// decoder (`HARD`) or only after it (`SOFT`). A masked pixel belongs to
/// class `k` when `P'[k] · M'(x) > 0.5`. Only inlier pixels are scored.
pub fn masking_ablation(params: &ModelParams, scenes: &[Scene], query_for_class: &[Option<usize>], threads: usize) -> Result<MaskingAblation> {
    let k = params.config.classes;
    if query_for_class.len() != k {
        return Err(Error::Shape(format!("{} class-query entries for {k} classes", query_for_class.len())));
    }
    let per_scene = par::map(scenes, threads, |s| -> Result<[Vec<[u64; 3]>; 3]> {
        let valid: Vec<bool> = s.labels.codes.iter().map(|&c| usize::from(c) < k).collect();
        let mut stats: [Vec<[u64; 3]>; 3] = [vec![[0; 3]; k], vec![[0; 3]; k], vec![[0; 3]; k]];
        let full = forward(params, &s.features)?.predicted_labels();
        for c in 0..k {
            tally(&mut stats[0][c], &valid, &s.labels.codes, c, |x| usize::from(full[x]) == c);
            let Some(q) = query_for_class[c] else { continue };
            for (slot, mode) in [(1, MaskMode::Hard), (2, MaskMode::Soft)] {
                let out = forward_masked(params, &s.features, q, mode)?;
                let pk = out.p.get2(0, c);
                let m = out.m.data();
                tally(&mut stats[slot][c], &valid, &s.labels.codes, c, |x| pk * m[x] > 0.5);
            }
        }
        Ok(stats)
    });
    let mut totals: [Vec<[u64; 3]>; 3] = [vec![[0; 3]; k], vec![[0; 3]; k], vec![[0; 3]; k]];
    for r in per_scene {
        let r = r?;
        for (t, s) in totals.iter_mut().zip(r.iter()) {
            for (a, b) in t.iter_mut().zip(s) {
                for i in 0..3 {
                    a[i] += b[i];
                }
            }
        }
    }
    let rows = [AblationMode::None, AblationMode::Hard, AblationMode::Soft]
        .into_iter()
        .zip(totals.iter())
        .map(|(mode, t)| AblationRow {
            mode,
            iou: (0..k)
                .map(|c| {
                    if mode != AblationMode::None && query_for_class[c].is_none() {
                        return None;
                    }
                    ClassIoU::from_counts(t[c][0], t[c][1], t[c][2]).iou
                })
                .collect(),
        })
        .collect();
    Ok(MaskingAblation {
        query_for_class: query_for_class.to_vec(),
        rows,
    })
}

/// Adds `[tp, fp, fn]` for class `c` over valid pixels.
fn tally(acc: &mut [u64; 3], valid: &[bool], gt: &[u8], c: usize, pred: impl Fn(usize) -> bool) {
    for x in (0..valid.len()).filter(|&x| valid[x]) {
        match (pred(x), usize::from(gt[x]) == c) {
            (true, true) => acc[0] += 1,
            (true, false) => acc[1] += 1,
            (false, true) => acc[2] += 1,
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogitCluster {
    pub size: usize,
    /// Centroid of the `K`-dimensional logit vectors.
    pub centroid: Vec<f64>,
    pub mean_max_logit: f64,
    /// Share of all ground-truth outlier pixels assigned to this cluster.
    pub outlier_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogitModeReport {
    pub clusters: Vec<LogitCluster>,
    pub assignments: Vec<usize>,
    pub outlier_pixels: usize,
    /// Index of the cluster with the lowest mean max-logit.
    pub lowest_max_logit_cluster: usize,
}

/// Clusters `points` (one `K`-vector per row) and profiles each cluster.
pub fn cluster_logits(points: &Tensor, is_outlier: &[bool], k_clusters: usize, seed: u64) -> Result<LogitModeReport> {
    if points.rows() < k_clusters {
        return Err(Error::InvalidArgument(format!(
            "{} pixels cannot form {k_clusters} clusters",
            points.rows()
        )));
    }
    if is_outlier.len() != points.rows() {
        return Err(Error::Shape("outlier flags do not match the pixel count".into()));
    }
    let res = kmeans(points, k_clusters, seed, 300)?;
    let total_out = is_outlier.iter().filter(|&&b| b).count();
    let mut clusters: Vec<LogitCluster> = (0..k_clusters)
        .map(|c| LogitCluster {
            size: 0,
            centroid: res.centroids.row(c).to_vec(),
            mean_max_logit: 0.0,
            outlier_share: 0.0,
        })
        .collect();
    for (i, &c) in res.assignments.iter().enumerate() {
        let cl = &mut clusters[c];
        cl.size += 1;
        cl.mean_max_logit += points.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if is_outlier[i] {
            cl.outlier_share += 1.0;
        }
    }
    for cl in &mut clusters {
        if cl.size > 0 {
            cl.mean_max_logit /= cl.size as f64;
        }
        cl.outlier_share = if total_out > 0 { cl.outlier_share / total_out as f64 } else { 0.0 };
    }
    let lowest = (0..k_clusters)
        .filter(|&c| clusters[c].size > 0)
        .fold(None, |b: Option<usize>, c| match b {
            Some(b) if clusters[b].mean_max_logit <= clusters[c].mean_max_logit => Some(b),
            _ => Some(c),
        })
        .expect("at least one non-empty cluster");
    Ok(LogitModeReport {
        clusters,
        assignments: res.assignments,
        outlier_pixels: total_out,
        lowest_max_logit_cluster: lowest,
    })
}

/// Gathers the logit vector of every non-void pixel and clusters them.
pub fn logit_mode_analysis(params: &ModelParams, scenes: &[Scene], k_clusters: usize, seed: u64, threads: usize) -> Result<LogitModeReport> {
    let k = params.config.classes;
    let outputs = par::map(scenes, threads, |s| forward(params, &s.features).map(|o| o.l));
    let mut data = Vec::new();
    let mut flags = Vec::new();
    for (s, l) in scenes.iter().zip(outputs) {
        let l = l?;
        let hw = l.cols();
        for x in (0..hw).filter(|&x| !s.labels.is_void(x)) {
            data.extend((0..k).map(|c| l.data()[c * hw + x]));
            flags.push(s.labels.codes[x] == OUTLIER);
        }
    }
    if flags.len() < k_clusters {
        return Err(Error::InvalidArgument(format!(
            "{} pixels cannot form {k_clusters} clusters",
            flags.len()
        )));
    }
    let points = Tensor::new(&[flags.len(), k], data)?;
    cluster_logits(&points, &flags, k_clusters, seed)
}

/// Four planted logit archetypes over `K = 4` classes: confident inlier
/// (one high logit), outlier (all low), boundary (two moderate) and
/// ambiguous (several weak). Returns the points and their planted labels.
pub fn planted_archetypes(per_cluster: usize, jitter: f64, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    use rand::Rng;
    let prototypes = [
        [0.95, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0],
        [0.5, 0.5, 0.0, 0.0],
        [0.3, 0.3, 0.3, 0.3],
    ];
    let mut r = rng::stream(seed, "planted-logits", 0);
    let mut data = Vec::with_capacity(4 * per_cluster * 4);
    let mut labels = Vec::with_capacity(4 * per_cluster);
    for _ in 0..per_cluster {
        for (c, proto) in prototypes.iter().enumerate() {
            data.extend(proto.iter().map(|v| v + r.random_range(-jitter..=jitter)));
            labels.push(c);
        }
    }
    Ok((Tensor::new(&[labels.len(), 4], data)?, labels))
}

/// True when the two labelings define the same partition.
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    use std::collections::HashMap;
    if a.len() != b.len() {
        return false;
    }
    let (mut ab, mut ba) = (HashMap::new(), HashMap::new());
    a.iter()
        .zip(b)
        .all(|(x, y)| *ab.entry(*x).or_insert(*y) == *y && *ba.entry(*y).or_insert(*x) == *x)
}

//! Experiment orchestration behind the `rbaseg` binary.
//!
//! Every command reads its inputs from files, writes its outputs under the
//! configured output directory and drops `resolved_config.toml` beside them.
//! Inputs are never modified. Given identical inputs every artifact is
//! byte-identical, whatever the thread count.

mod config;

pub use config::{EvalConfig, ExperimentConfig, SplitConfig};

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_dataset, paste_outlier, read_scene, write_scene, OutlierBank, Scene};
use crate::error::{Error, Result};
use crate::eval::{
    closed_set_confusion, component_metrics, logit_mode_analysis, masking_ablation, pixel_metrics, score_dataset,
    specialization_matrix,
    AblationMode, LogitCluster, MetricsReport, Provenance,
};
use crate::model::{encode_checkpoint, load_checkpoint, ModelParams};
use crate::rng::derive_seed;
use crate::scoring::{read_score_map, write_pgm16, write_score_map, ScoreFn, ScoreMap};
use crate::train::{finetune_outlier, gradcheck, log_to_ndjson, train_closed_set, GradcheckReport};
use config::hex;

pub const SCENE_EXT: &str = "mseg";
pub const SCORE_EXT: &str = "smap";

/// Canonical artifact locations under one output directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn split(&self, name: &str) -> PathBuf {
        self.data().join(name)
    }

    pub fn source_checkpoint(&self) -> PathBuf {
        self.root.join("source.ckpt.json")
    }

    pub fn finetuned_checkpoint(&self) -> PathBuf {
        self.root.join("finetuned.ckpt.json")
    }

    pub fn scores(&self, f: ScoreFn) -> PathBuf {
        self.root.join("scores").join(f.name())
    }

    pub fn eval(&self, f: &str) -> PathBuf {
        self.root.join("eval").join(f)
    }

    pub fn analysis(&self) -> PathBuf {
        self.root.join("analysis")
    }
}

/// Training scenes, clean held-out scenes, and the same held-out scenes with
/// objects pasted from a bank that training never sees.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Scene>,
    pub test_clean: Vec<Scene>,
    pub test: Vec<Scene>,
}

pub fn build_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let train = generate_dataset(&cfg.data, cfg.seed, "train", cfg.splits.train_scenes)?;
    let test_clean = generate_dataset(&cfg.data, cfg.seed, "test", cfg.splits.test_scenes)?;
    let bank = OutlierBank::new(&cfg.data, cfg.splits.test_bank_size, derive_seed(cfg.seed, "test-bank", 0))?;
    let test = test_clean
        .iter()
        .enumerate()
        .map(|(i, s)| paste_outlier(s, &bank, cfg.splits.test_p_out, derive_seed(cfg.seed, "test-paste", i as u64)))
        .collect::<Result<_>>()?;
    Ok(Splits { train, test_clean, test })
}

/// The outlier pool sampled during fine-tuning.
pub fn training_bank(cfg: &ExperimentConfig) -> Result<OutlierBank> {
    OutlierBank::new(&cfg.data, cfg.data.bank_size, derive_seed(cfg.seed, "bank", 0))
}

fn scene_name(i: usize) -> String {
    format!("scene_{i:05}")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn short_digest(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))[..16].to_string()
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::MissingInput(format!("{}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for e in entries {
        let p = e?.path();
        if p.extension().is_some_and(|x| x == ext) {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::MissingInput(format!("no .{ext} files in {}", dir.display())));
    }
    Ok(files)
}

/// Scenes of a dataset directory in file-name order.
pub fn read_dataset(dir: &Path) -> Result<Vec<Scene>> {
    sorted_files(dir, SCENE_EXT)?.iter().map(|p| read_scene(p)).collect()
}

/// Digest over file names and contents of a dataset directory.
pub fn dataset_id(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for p in sorted_files(dir, SCENE_EXT)? {
        h.update(p.file_name().expect("listed file").as_encoded_bytes());
        h.update(fs::read(&p)?);
    }
    Ok(hex(&h.finalize())[..16].to_string())
}

pub fn checkpoint_id(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
    Ok(short_digest(&bytes))
}

fn write_dataset(dir: &Path, scenes: &[Scene]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in scenes.iter().enumerate() {
        write_scene(s, &dir.join(format!("{}.{SCENE_EXT}", scene_name(i))))?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    pub scenes: usize,
    pub dataset_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DataManifest {
    pub config_hash: String,
    pub seed: u64,
    pub splits: Vec<SplitEntry>,
}

/// Writes `train/`, `test_clean/` and `test/` plus `manifest.json`.
pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<DataManifest> {
    let paths = RunPaths::new(&cfg.output);
    let s = build_splits(cfg)?;
    let mut entries = Vec::new();
    for (name, scenes) in [("train", &s.train), ("test_clean", &s.test_clean), ("test", &s.test)] {
        let dir = paths.split(name);
        write_dataset(&dir, scenes)?;
        entries.push(SplitEntry {
            name: name.to_string(),
            scenes: scenes.len(),
            dataset_id: dataset_id(&dir)?,
        });
    }
    let manifest = DataManifest {
        config_hash: cfg.hash()?,
        seed: cfg.seed,
        splits: entries,
    };
    write_json(&paths.data().join("manifest.json"), &manifest)?;
    cfg.write_beside(&paths.data())?;
    info!("wrote {} train / {} test scenes to {}", s.train.len(), s.test.len(), paths.data().display());
    Ok(manifest)
}

fn save_params(params: &ModelParams, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_checkpoint(params)?)?;
    Ok(())
}

/// Closed-set training; writes the checkpoint and an NDJSON loss log.
pub fn cmd_train(cfg: &ExperimentConfig, data: Option<&Path>, threads: usize) -> Result<PathBuf> {
    let paths = RunPaths::new(&cfg.output);
    let dir = data.map_or_else(|| paths.split("train"), Path::to_path_buf);
    let scenes = read_dataset(&dir)?;
    let out = train_closed_set(&cfg.model, &cfg.train, &scenes, cfg.seed, threads)?;
    let ckpt = paths.source_checkpoint();
    save_params(&out.params, &ckpt)?;
    fs::write(paths.root.join("train_log.ndjson"), log_to_ndjson(&out.log)?)?;
    cfg.write_beside(&paths.root)?;
    info!("closed-set checkpoint {}", ckpt.display());
    Ok(ckpt)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub source_checkpoint: String,
    pub tuned_fraction: f64,
    pub frozen_digest: String,
}

/// Outlier fine-tuning of the tuned subset from a closed-set checkpoint.
pub fn cmd_finetune(cfg: &ExperimentConfig, checkpoint: Option<&Path>, data: Option<&Path>, threads: usize) -> Result<PathBuf> {
    let paths = RunPaths::new(&cfg.output);
    let src_path = checkpoint.map_or_else(|| paths.source_checkpoint(), Path::to_path_buf);
    let source = load_checkpoint(&src_path, Some(&cfg.model))?;
    let scenes = read_dataset(&data.map_or_else(|| paths.split("train"), Path::to_path_buf))?;
    let out = finetune_outlier(&source, &cfg.finetune, &scenes, &training_bank(cfg)?, cfg.seed, threads)?;
    let ckpt = paths.finetuned_checkpoint();
    save_params(&out.params, &ckpt)?;
    fs::write(paths.root.join("finetune_log.ndjson"), log_to_ndjson(&out.log)?)?;
    write_json(
        &paths.root.join("finetune_summary.json"),
        &FinetuneSummary {
            source_checkpoint: checkpoint_id(&src_path)?,
            tuned_fraction: out.tuned_fraction,
            frozen_digest: out.frozen_digest,
        },
    )?;
    cfg.write_beside(&paths.root)?;
    info!("fine-tuned {:.2}% of parameters", 100.0 * out.tuned_fraction);
    Ok(ckpt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreManifest {
    pub checkpoint_id: String,
    pub dataset_id: String,
    pub scoring_fn: String,
    pub config_hash: String,
    pub files: Vec<String>,
}

/// Scores every scene of a dataset under each function. Returns the score
/// directories in function order.
pub fn cmd_score(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
    fns: &[ScoreFn],
    pgm: bool,
    threads: usize,
) -> Result<Vec<PathBuf>> {
    let paths = RunPaths::new(&cfg.output);
    let ckpt = checkpoint.map_or_else(|| paths.finetuned_checkpoint(), Path::to_path_buf);
    let params = load_checkpoint(&ckpt, Some(&cfg.model))?;
    let data_dir = data.map_or_else(|| paths.split("test"), Path::to_path_buf);
    let scenes = read_dataset(&data_dir)?;
    let fns = if fns.is_empty() { &cfg.eval.score_fns[..] } else { fns };
    let maps = score_dataset(&params, &scenes, fns, threads)?;
    let (ckpt_id, data_id, hash) = (checkpoint_id(&ckpt)?, dataset_id(&data_dir)?, cfg.hash()?);
    let mut dirs = Vec::new();
    for (&f, per_scene) in fns.iter().zip(&maps) {
        let dir = paths.scores(f);
        fs::create_dir_all(&dir)?;
        let mut files = Vec::new();
        for (i, m) in per_scene.iter().enumerate() {
            let name = scene_name(i);
            write_score_map(m, &dir.join(format!("{name}.{SCORE_EXT}")))?;
            if pgm {
                write_pgm16(m, &dir.join(format!("{name}.pgm")))?;
            }
            files.push(format!("{name}.{SCORE_EXT}"));
        }
        write_json(
            &dir.join("manifest.json"),
            &ScoreManifest {
                checkpoint_id: ckpt_id.clone(),
                dataset_id: data_id.clone(),
                scoring_fn: f.name().to_string(),
                config_hash: hash.clone(),
                files,
            },
        )?;
        cfg.write_beside(&dir)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Pixel and component metrics of stored score maps, plus closed-set IoU when
/// a checkpoint is given. Undefined metrics are reported, not fatal.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    scores: &Path,
    data: Option<&Path>,
    checkpoint: Option<&Path>,
    threads: usize,
) -> Result<(PathBuf, MetricsReport)> {
    let paths = RunPaths::new(&cfg.output);
    let manifest: ScoreManifest = read_json(&scores.join("manifest.json"))?;
    let data_dir = data.map_or_else(|| paths.split("test"), Path::to_path_buf);
    let scenes = read_dataset(&data_dir)?;
    let data_id = dataset_id(&data_dir)?;
    if data_id != manifest.dataset_id {
        return Err(Error::ConfigMismatch(format!(
            "scores were computed on dataset {} but {} is {data_id}",
            manifest.dataset_id,
            data_dir.display()
        )));
    }
    if manifest.files.len() != scenes.len() {
        return Err(Error::ConfigMismatch(format!(
            "{} score maps for {} scenes",
            manifest.files.len(),
            scenes.len()
        )));
    }
    let maps: Vec<ScoreMap> = manifest.files.iter().map(|f| read_score_map(&scores.join(f))).collect::<Result<_>>()?;
    let labels: Vec<_> = scenes.iter().map(|s| &s.labels).collect();
    let pixel = pixel_metrics(&maps, &labels)?;
    let comp = component_metrics(&maps, &labels, &cfg.eval.components, pixel.tpr95_threshold)?;
    let counted = labels.iter().flat_map(|l| l.codes.iter()).filter(|&&c| c != crate::data::VOID);
    let (pixels, outliers) = counted.fold((0, 0), |(n, o), &c| (n + 1, o + usize::from(c == crate::data::OUTLIER)));
    let closed = match checkpoint {
        Some(p) => {
            let params = load_checkpoint(p, Some(&cfg.model))?;
            let conf = closed_set_confusion(&params, &scenes, threads)?;
            Some((conf.per_class(), conf.miou()))
        }
        None => None,
    };
    let report = MetricsReport::new(
        Provenance {
            checkpoint_id: Some(manifest.checkpoint_id.clone()),
            dataset_id: data_id,
            scoring_fn: manifest.scoring_fn.clone(),
            config_hash: cfg.hash()?,
        },
        scenes.len(),
        (pixels, outliers),
        &pixel,
        &comp,
        closed.as_ref().map(|(per, m)| (per.as_slice(), *m)),
    );
    let dir = paths.eval(&manifest.scoring_fn);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("report.json"), report.to_json()?)?;
    fs::write(dir.join("class_iou.csv"), report.class_iou_csv())?;
    fs::write(dir.join("components.csv"), report.component_csv())?;
    cfg.write_beside(&dir)?;
    Ok((dir, report))
}

#[derive(Debug, Serialize)]
struct LogitModeSummary<'a> {
    k_clusters: usize,
    outlier_pixels: usize,
    lowest_max_logit_cluster: usize,
    clusters: &'a [LogitCluster],
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

/// Query specialization counts, the masking ablation and the logit-mode
/// clustering. Specialization and ablation use `inliers`; clustering uses
/// `outliers`.
pub fn cmd_analyze(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    inliers: Option<&Path>,
    outliers: Option<&Path>,
    threads: usize,
) -> Result<PathBuf> {
    use std::fmt::Write as _;

    let paths = RunPaths::new(&cfg.output);
    let ckpt = checkpoint.map_or_else(|| paths.finetuned_checkpoint(), Path::to_path_buf);
    let params = load_checkpoint(&ckpt, Some(&cfg.model))?;
    let clean = read_dataset(&inliers.map_or_else(|| paths.split("test_clean"), Path::to_path_buf))?;
    let pasted = read_dataset(&outliers.map_or_else(|| paths.split("test"), Path::to_path_buf))?;
    let k = params.config.classes;

    let special = specialization_matrix(&params, &clean, cfg.eval.conf_threshold, threads)?;
    let mut csv = String::from("query");
    for c in 0..k {
        let _ = write!(csv, ",class_{c}");
    }
    csv.push('\n');
    for (n, row) in special.counts.iter().enumerate() {
        let _ = write!(csv, "{n}");
        for v in row {
            let _ = write!(csv, ",{v}");
        }
        csv.push('\n');
    }

    let abl = masking_ablation(&params, &clean, &special.dominant_query, threads)?;
    let mut table = String::from("class,query,dominance,none,hard,soft\n");
    for c in 0..k {
        let q = special.dominant_query[c].map_or_else(|| "none".to_string(), |q| q.to_string());
        let iou = |m| abl.row(m).iou[c];
        let _ = writeln!(
            table,
            "{c},{q},{},{},{},{}",
            opt(special.dominance[c]),
            opt(iou(AblationMode::None)),
            opt(iou(AblationMode::Hard)),
            opt(iou(AblationMode::Soft))
        );
    }

    let modes = logit_mode_analysis(&params, &pasted, cfg.eval.k_clusters, derive_seed(cfg.seed, "logit-modes", 0), threads)?;
    let dir = paths.analysis();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("specialization.csv"), csv)?;
    fs::write(dir.join("ablation.csv"), table)?;
    write_json(
        &dir.join("logit_modes.json"),
        &LogitModeSummary {
            k_clusters: cfg.eval.k_clusters,
            outlier_pixels: modes.outlier_pixels,
            lowest_max_logit_cluster: modes.lowest_max_logit_cluster,
            clusters: &modes.clusters,
        },
    )?;
    cfg.write_beside(&dir)?;
    Ok(dir)
}

/// Finite-difference check of the analytic gradient on the tiny model.
pub fn cmd_gradcheck(cfg: &ExperimentConfig) -> Result<GradcheckReport> {
    let report = gradcheck(&cfg.gradcheck)?;
    fs::create_dir_all(&cfg.output)?;
    write_json(&cfg.output.join("gradcheck.json"), &report)?;
    Ok(report)
}

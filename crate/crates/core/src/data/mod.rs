//! Synthetic segmentation scenes.
//!
//! A scene is a `C_in × H × W` feature volume plus a label map. Inlier
//! classes are painted as rectangles and ellipses over a class-0 background;
//! each class contributes a fixed unit-norm feature signature plus Gaussian
//! noise. Outlier objects reuse the same shape vocabulary with signatures
//! that are kept away from every inlier signature.

mod format;

pub use format::{decode_scene, encode_scene, read_scene, write_scene, MSEG_MAGIC, MSEG_VERSION};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const OUTLIER: u8 = 254;
pub const VOID: u8 = 255;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    /// Number of inlier classes `K`; class 0 is the background.
    pub classes: usize,
    pub noise: f64,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_shape_size: usize,
    pub max_shape_size: usize,
    /// Width of the void frame around every scene.
    pub border: usize,
    pub min_signature_angle_deg: f64,
    /// Seed of the per-dataset class signatures.
    pub signature_seed: u64,
    /// Size of the fixed outlier template pool.
    pub bank_size: usize,
    pub min_template_size: usize,
    pub max_template_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            in_channels: 8,
            classes: 4,
            noise: 0.1,
            min_shapes: 3,
            max_shapes: 5,
            min_shape_size: 4,
            max_shape_size: 8,
            border: 1,
            min_signature_angle_deg: 30.0,
            signature_seed: 0,
            // fixed pool of 300 outlier objects, drawn once before fine-tuning
            bank_size: 300,
            min_template_size: 3,
            max_template_size: 6,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height < 8 || self.width < 8 {
            return bad(format!("scene must be at least 8x8, got {}x{}", self.height, self.width));
        }
        if self.in_channels < 2 {
            return bad("in_channels must be >= 2".into());
        }
        if self.classes == 0 || self.classes > usize::from(OUTLIER) {
            return bad(format!("classes must be in 1..=254, got {}", self.classes));
        }
        if self.classes > self.in_channels {
            return bad(format!(
                "{} classes exceed the signature capacity of {} channels",
                self.classes, self.in_channels
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and >= 0".into());
        }
        if self.min_shapes > self.max_shapes
            || self.min_shape_size == 0
            || self.min_shape_size > self.max_shape_size
            || self.min_template_size == 0
            || self.min_template_size > self.max_template_size
        {
            return bad("shape count/size ranges must be non-empty".into());
        }
        let interior_h = self.height.saturating_sub(2 * self.border);
        let interior_w = self.width.saturating_sub(2 * self.border);
        if self.max_shape_size > self.height.min(self.width) || self.max_template_size > interior_h.min(interior_w) {
            return bad("shapes do not fit inside the frame".into());
        }
        if !(0.0..90.0).contains(&self.min_signature_angle_deg) {
            return bad("min_signature_angle_deg must be in [0, 90)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub codes: Vec<u8>,
}

impl LabelMap {
    pub fn filled(height: usize, width: usize, code: u8) -> Self {
        Self {
            height,
            width,
            codes: vec![code; height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn has_outliers(&self) -> bool {
        self.codes.contains(&OUTLIER)
    }

    pub fn is_void(&self, i: usize) -> bool {
        self.codes[i] == VOID
    }

    pub fn is_outlier(&self, i: usize) -> bool {
        self.codes[i] == OUTLIER
    }

    /// Checks that every code is an inlier class below `classes`, 254 or 255.
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.codes.len() != self.height * self.width {
            return Err(Error::Shape("label map length".into()));
        }
        match self
            .codes
            .iter()
            .find(|&&c| usize::from(c) >= classes && c != OUTLIER && c != VOID)
        {
            Some(c) => Err(Error::Format(format!("label code {c} outside 0..{classes}"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `C_in × H × W`, channel-major; values are exactly representable as `f32`.
    pub features: Tensor,
    pub labels: LabelMap,
    pub classes: usize,
    /// Generation seed; `None` when the scene was loaded from a file.
    pub seed: Option<u64>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn width(&self) -> usize {
        self.labels.width
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn pixels(&self) -> usize {
        self.labels.len()
    }

    /// Same features, labels and class count, ignoring the seed.
    pub fn same_content(&self, other: &Scene) -> bool {
        self.features == other.features && self.labels == other.labels && self.classes == other.classes
    }
}

fn random_unit(rng: &mut rng::Stream, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const MAX_SIGNATURE_ATTEMPTS: usize = 100_000;

/// Draws a unit vector whose angle to every vector in `avoid` is at least `min_angle_deg`.
fn separated_unit(rng: &mut rng::Stream, dim: usize, avoid: &[Vec<f64>], min_angle_deg: f64) -> Result<Vec<f64>> {
    let max_cos = min_angle_deg.to_radians().cos();
    for _ in 0..MAX_SIGNATURE_ATTEMPTS {
        let v = random_unit(rng, dim);
        if avoid.iter().all(|a| dot(a, &v) <= max_cos) {
            return Ok(v);
        }
    }
    Err(Error::Config(format!(
        "could not place a signature {min_angle_deg} degrees away from {} others in {dim} channels",
        avoid.len()
    )))
}

/// Inlier class signatures, one unit vector per class.
pub fn class_signatures(cfg: &DataConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.signature_seed, "class-signatures", 0);
    let mut sigs: Vec<Vec<f64>> = Vec::with_capacity(cfg.classes);
    for _ in 0..cfg.classes {
        let s = separated_unit(&mut rng, cfg.in_channels, &sigs, cfg.min_signature_angle_deg)?;
        sigs.push(s);
    }
    Ok(sigs)
}

fn angle_deg(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Smallest pairwise angle between two signature sets (or within one set when `b` is `None`).
pub fn min_angle_deg(a: &[Vec<f64>], b: Option<&[Vec<f64>]>) -> f64 {
    let mut best = f64::INFINITY;
    for (i, x) in a.iter().enumerate() {
        match b {
            Some(b) => b.iter().for_each(|y| best = best.min(angle_deg(x, y))),
            None => a[i + 1..].iter().for_each(|y| best = best.min(angle_deg(x, y))),
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Rect,
    Ellipse,
}

fn stencil(kind: ShapeKind, h: usize, w: usize) -> Vec<bool> {
    match kind {
        ShapeKind::Rect => vec![true; h * w],
        ShapeKind::Ellipse => {
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            let (ry, rx) = (h as f64 / 2.0, w as f64 / 2.0);
            (0..h * w)
                .map(|i| {
                    let dy = (i / w) as f64 - cy;
                    let dx = (i % w) as f64 - cx;
                    (dy / ry).powi(2) + (dx / rx).powi(2) <= 1.0
                })
                .collect()
        }
    }
}

fn random_shape(rng: &mut rng::Stream, min: usize, max: usize) -> (usize, usize, Vec<bool>) {
    let h = rng.random_range(min..=max);
    let w = rng.random_range(min..=max);
    let kind = if rng.random::<bool>() { ShapeKind::Rect } else { ShapeKind::Ellipse };
    (h, w, stencil(kind, h, w))
}

fn noisy_feature(sig: &[f64], noise: f64, rng: &mut rng::Stream, out: &mut [f64]) {
    for (o, s) in out.iter_mut().zip(sig) {
        let n: f64 = StandardNormal.sample(rng);
        // stored as f32 on disk; keep the in-memory value exactly representable
        *o = f64::from((s + noise * n) as f32);
    }
}

fn write_pixel(features: &mut Tensor, pixel: usize, values: &[f64]) {
    let hw = features.shape()[1] * features.shape()[2];
    let data = features.data_mut();
    for (c, v) in values.iter().enumerate() {
        data[c * hw + pixel] = *v;
    }
}

/// Generates an inlier-only scene. A pure function of `(cfg, seed)`.
pub fn generate_inlier_scene(cfg: &DataConfig, seed: u64) -> Result<Scene> {
    let sigs = class_signatures(cfg)?;
    generate_with_signatures(cfg, &sigs, seed)
}

/// As [`generate_inlier_scene`], reusing precomputed class signatures.
pub fn generate_with_signatures(cfg: &DataConfig, sigs: &[Vec<f64>], seed: u64) -> Result<Scene> {
    cfg.validate()?;
    if sigs.len() != cfg.classes {
        return Err(Error::InvalidArgument("signature count differs from class count".into()));
    }
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = rng::stream(seed, "inlier-scene", 0);
    let mut labels = LabelMap::filled(h, w, 0);

    let shape_count = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let fg = cfg.classes - 1;
    let mut order: Vec<usize> = (1..cfg.classes).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    for s in 0..shape_count {
        if fg == 0 {
            break;
        }
        // cycle through a shuffled class order so small scenes still cover every class
        let class = order[s % fg] as u8;
        let (sh, sw, st) = random_shape(&mut rng, cfg.min_shape_size, cfg.max_shape_size);
        let y0 = rng.random_range(0..=h - sh);
        let x0 = rng.random_range(0..=w - sw);
        for (i, _) in st.iter().enumerate().filter(|(_, &on)| on) {
            labels.codes[(y0 + i / sw) * w + x0 + i % sw] = class;
        }
    }

    let mut features = Tensor::zeros(&[cfg.in_channels, h, w]);
    let mut buf = vec![0.0; cfg.in_channels];
    for p in 0..h * w {
        noisy_feature(&sigs[usize::from(labels.codes[p])], cfg.noise, &mut rng, &mut buf);
        write_pixel(&mut features, p, &buf);
    }
    for y in 0..h {
        for x in 0..w {
            if y < cfg.border || x < cfg.border || y + cfg.border >= h || x + cfg.border >= w {
                labels.codes[y * w + x] = VOID;
            }
        }
    }
    Ok(Scene {
        features,
        labels,
        classes: cfg.classes,
        seed: Some(seed),
    })
}

/// Generates `count` inlier scenes; scene `i` uses seed `derive_seed(master, tag, i)`.
pub fn generate_dataset(cfg: &DataConfig, master_seed: u64, tag: &str, count: usize) -> Result<Vec<Scene>> {
    let sigs = class_signatures(cfg)?;
    (0..count)
        .map(|i| generate_with_signatures(cfg, &sigs, rng::derive_seed(master_seed, tag, i as u64)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutlierTemplate {
    pub height: usize,
    pub width: usize,
    pub stencil: Vec<bool>,
    pub signature: Vec<f64>,
}

/// Fixed pool of outlier objects; its size never changes after creation.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierBank {
    templates: Vec<OutlierTemplate>,
    noise: f64,
    border: usize,
}

impl OutlierBank {
    pub fn new(cfg: &DataConfig, size: usize, seed: u64) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidArgument("outlier bank must not be empty".into()));
        }
        let inlier = class_signatures(cfg)?;
        let templates = (0..size)
            .map(|i| {
                let mut rng = rng::stream(seed, "outlier-template", i as u64);
                let (h, w, stencil) = random_shape(&mut rng, cfg.min_template_size, cfg.max_template_size);
                let signature = separated_unit(&mut rng, cfg.in_channels, &inlier, cfg.min_signature_angle_deg)?;
                Ok(OutlierTemplate {
                    height: h,
                    width: w,
                    stencil,
                    signature,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            templates,
            noise: cfg.noise,
            border: cfg.border,
        })
    }

    pub fn from_templates(templates: Vec<OutlierTemplate>, noise: f64, border: usize) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::InvalidArgument("outlier bank must not be empty".into()));
        }
        Ok(Self { templates, noise, border })
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn templates(&self) -> &[OutlierTemplate] {
        &self.templates
    }
}

/// With probability `p_out` pastes one uniformly chosen template at a uniform
/// position inside the non-void interior; otherwise returns the scene unchanged.
pub fn paste_outlier(scene: &Scene, bank: &OutlierBank, p_out: f64, seed: u64) -> Result<Scene> {
    if bank.is_empty() {
        return Err(Error::InvalidArgument("outlier bank must not be empty".into()));
    }
    if !(0.0..=1.0).contains(&p_out) {
        return Err(Error::InvalidArgument(format!("p_out must be in [0, 1], got {p_out}")));
    }
    let mut rng = rng::stream(seed, "paste", 0);
    let mut out = scene.clone();
    if rng.random::<f64>() >= p_out {
        return Ok(out);
    }
    let t = &bank.templates[rng.random_range(0..bank.len())];
    let (h, w, b) = (scene.height(), scene.width(), bank.border);
    if t.height + 2 * b > h || t.width + 2 * b > w {
        return Err(Error::InvalidArgument(format!(
            "template {}x{} does not fit a {h}x{w} frame",
            t.height, t.width
        )));
    }
    if t.signature.len() != scene.channels() {
        return Err(Error::Shape("template signature width differs from scene channels".into()));
    }
    let y0 = rng.random_range(b..=h - b - t.height);
    let x0 = rng.random_range(b..=w - b - t.width);
    let mut buf = vec![0.0; scene.channels()];
    for (i, _) in t.stencil.iter().enumerate().filter(|(_, &on)| on) {
        let p = (y0 + i / t.width) * w + x0 + i % t.width;
        noisy_feature(&t.signature, bank.noise, &mut rng, &mut buf);
        write_pixel(&mut out.features, p, &buf);
        out.labels.codes[p] = OUTLIER;
    }
    Ok(out)
}

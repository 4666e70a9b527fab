use super::{ModelParams, ParamId};
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, sigmoid_scalar, softmax, Tensor};

/// Which queries survive when a single specialized query is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Other queries removed before the decoder layer.
    Hard,
    /// Full decoder interaction; other queries dropped afterwards.
    Soft,
}

/// Every intermediate the reverse pass needs. Matrices are pixel-major
/// (`HW × channels`) for pixel quantities and query-major for query ones.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(super) fingerprint: u64,
    pub(super) height: usize,
    pub(super) width: usize,
    /// Query indices fed to the decoder.
    pub(super) decoder_rows: Vec<usize>,
    /// Decoder output rows fed to the heads.
    pub(super) head_rows: Vec<usize>,
    pub(super) x: Tensor,
    pub(super) h1: Tensor,
    pub(super) z: Tensor,
    pub(super) f: Tensor,
    pub(super) qk: Tensor,
    pub(super) attn: Tensor,
    pub(super) q1: Tensor,
    pub(super) self_attn: Tensor,
    pub(super) mixed: Tensor,
    pub(super) q2: Tensor,
    pub(super) hf: Tensor,
    pub(super) qr: Tensor,
    pub(super) g1: Tensor,
    pub(super) g2: Tensor,
    pub(super) qp: Tensor,
}

impl ForwardCache {
    /// Which ReLU units are active, over every rectified layer. Two passes
    /// with equal patterns lie on the same linear piece of the network.
    pub fn relu_pattern(&self) -> Vec<bool> {
        [&self.h1, &self.f, &self.hf, &self.g1, &self.g2]
            .iter()
            .flat_map(|t| t.data().iter().map(|&v| v > 0.0))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `N × (K+1)` region class probabilities, last column = no-object.
    pub p: Tensor,
    /// `N × H × W` memberships.
    pub m: Tensor,
    /// `K × H × W` aggregated class logits.
    pub l: Tensor,
    pub cache: ForwardCache,
}

impl ModelOutput {
    pub fn height(&self) -> usize {
        self.cache.height
    }

    pub fn width(&self) -> usize {
        self.cache.width
    }

    pub fn queries(&self) -> usize {
        self.p.rows()
    }

    /// Per-pixel argmax over the `K` logits.
    pub fn predicted_labels(&self) -> Vec<u8> {
        let k = self.l.shape()[0];
        let hw = self.l.cols();
        let d = self.l.data();
        (0..hw)
            .map(|x| {
                let mut best = 0;
                for c in 1..k {
                    if d[c * hw + x] > d[best * hw + x] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }
}

/// `L[k, x] = Σ_n P[n, k] · M[n, x]` over the first `K` columns of `P`.
pub fn aggregate_logits(p: &Tensor, m: &Tensor, classes: usize) -> Result<Tensor> {
    let n = p.rows();
    if m.rows() != n || p.cols() < classes {
        return Err(Error::Shape(format!(
            "P {:?} and M {:?} for {classes} classes",
            p.shape(),
            m.shape()
        )));
    }
    let hw = m.cols();
    let mut l = vec![0.0; classes * hw];
    for q in 0..n {
        let mrow = m.row(q);
        for k in 0..classes {
            let w = p.get2(q, k);
            let lrow = &mut l[k * hw..(k + 1) * hw];
            for (o, mv) in lrow.iter_mut().zip(mrow) {
                *o += w * mv;
            }
        }
    }
    Tensor::new(&[classes, hw], l)
}

/// 3×3 box mean over in-frame neighbours for a pixel-major `HW × C` matrix.
pub(super) fn mean_pool3(x: &Tensor, h: usize, w: usize) -> Tensor {
    let c = x.cols();
    let mut out = Tensor::zeros(&[h * w, c]);
    for y in 0..h {
        for xx in 0..w {
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let (x0, x1) = (xx.saturating_sub(1), (xx + 1).min(w - 1));
            let count = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
            let orow = out.row_mut(y * w + xx);
            for ny in y0..=y1 {
                for nx in x0..=x1 {
                    for (o, v) in orow.iter_mut().zip(x.row(ny * w + nx)) {
                        *o += v;
                    }
                }
            }
            orow.iter_mut().for_each(|o| *o /= count);
        }
    }
    out
}

/// Adjoint of [`mean_pool3`].
pub(super) fn mean_pool3_adjoint(g: &Tensor, h: usize, w: usize) -> Tensor {
    let c = g.cols();
    let mut out = Tensor::zeros(&[h * w, c]);
    for y in 0..h {
        for xx in 0..w {
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let (x0, x1) = (xx.saturating_sub(1), (xx + 1).min(w - 1));
            let count = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
            let grow = g.row(y * w + xx).to_vec();
            for ny in y0..=y1 {
                for nx in x0..=x1 {
                    for (o, v) in out.row_mut(ny * w + nx).iter_mut().zip(&grow) {
                        *o += v / count;
                    }
                }
            }
        }
    }
    out
}

fn affine(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let mut y = matmul(x, w)?;
    if let Some(b) = b {
        y.add_row_vector(b)?;
    }
    Ok(y)
}

fn relu_inplace(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let c = t.cols();
    let data = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
    Tensor::new(&[rows.len(), c], data).expect("row selection keeps shape")
}

fn finite(t: Tensor, stage: &str) -> Result<Tensor> {
    t.ensure_finite(stage)?;
    Ok(t)
}

fn forward_impl(
    params: &ModelParams,
    features: &Tensor,
    decoder_rows: Vec<usize>,
    head_rows: Option<Vec<usize>>,
) -> Result<ModelOutput> {
    let cfg = &params.config;
    let (c_in, h, w) = match features.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::Shape(format!("features must be C×H×W, got {s:?}"))),
    };
    if c_in != cfg.in_channels {
        return Err(Error::Shape(format!(
            "scene has {c_in} channels, model expects {}",
            cfg.in_channels
        )));
    }
    let hw = h * w;
    let e = cfg.embed;
    let scale = 1.0 / (e as f64).sqrt();
    let x = features.clone().reshape(&[c_in, hw])?.transpose()?;

    // pixel encoder
    let mut h1 = affine(&x, params.get(ParamId::EncW1), Some(params.get(ParamId::EncB1)))?;
    relu_inplace(&mut h1);
    let ctx = mean_pool3(&h1, h, w);
    let mut zdata = Vec::with_capacity(hw * 2 * e);
    for i in 0..hw {
        zdata.extend_from_slice(h1.row(i));
        zdata.extend_from_slice(ctx.row(i));
    }
    let z = Tensor::new(&[hw, 2 * e], zdata)?;
    let mut f = affine(&z, params.get(ParamId::EncW2), Some(params.get(ParamId::EncB2)))?;
    relu_inplace(&mut f);
    let f = finite(f, "pixel_encoder")?;

    // decoder: cross-attention over pixels
    let q = select_rows(params.get(ParamId::Queries), &decoder_rows);
    let pos = select_rows(params.get(ParamId::QueryPos), &decoder_rows);
    let mut qk = q.clone();
    qk.add_assign(&pos)?;
    let mut logits = matmul_nt(&qk, &f)?;
    logits.scale(scale);
    let attn = softmax(&logits, 1)?;
    let mut q1 = matmul(&attn, &f)?;
    q1.add_assign(&q)?;
    let q1 = finite(q1, "cross_attention")?;

    // query self-attention
    let mut sl = matmul_nt(&q1, &q1)?;
    sl.scale(scale);
    let self_attn = softmax(&sl, 1)?;
    let mixed = matmul(&self_attn, &q1)?;
    let mut q2 = matmul(&mixed, params.get(ParamId::SelfAttnW))?;
    q2.add_assign(&q1)?;
    let q2 = finite(q2, "self_attention")?;

    // FFN with residual
    let mut hf = affine(&q2, params.get(ParamId::FfnW1), Some(params.get(ParamId::FfnB1)))?;
    relu_inplace(&mut hf);
    let mut qr = affine(&hf, params.get(ParamId::FfnW2), Some(params.get(ParamId::FfnB2)))?;
    qr.add_assign(&q2)?;
    let qr_all = finite(qr, "ffn")?;

    let head_rows = head_rows.unwrap_or_else(|| (0..decoder_rows.len()).collect());
    let qr = select_rows(&qr_all, &head_rows);

    // class head
    let cls_logits = affine(&qr, params.get(ParamId::ClsW), Some(params.get(ParamId::ClsB)))?;
    let p = finite(softmax(&cls_logits, 1)?, "class_head")?;

    // mask MLP and memberships
    let mut g1 = affine(&qr, params.get(ParamId::MaskW1), Some(params.get(ParamId::MaskB1)))?;
    relu_inplace(&mut g1);
    let mut g2 = affine(&g1, params.get(ParamId::MaskW2), Some(params.get(ParamId::MaskB2)))?;
    relu_inplace(&mut g2);
    let qp = affine(&g2, params.get(ParamId::MaskW3), Some(params.get(ParamId::MaskB3)))?;
    let qp = finite(qp, "mask_mlp")?;
    let m = matmul_nt(&qp, &f)?.map(sigmoid_scalar);
    let m = finite(m, "membership")?;

    let l = aggregate_logits(&p, &m, cfg.classes)?;
    let n_out = head_rows.len();
    Ok(ModelOutput {
        p,
        m: m.reshape(&[n_out, h, w])?,
        l: l.reshape(&[cfg.classes, h, w])?,
        cache: ForwardCache {
            fingerprint: params.fingerprint(),
            height: h,
            width: w,
            decoder_rows,
            head_rows,
            x,
            h1,
            z,
            f,
            qk,
            attn,
            q1,
            self_attn,
            mixed,
            q2,
            hf,
            qr: qr_all,
            g1,
            g2,
            qp,
        },
    })
}

/// Full forward pass over a `C_in × H × W` feature volume.
pub fn forward(params: &ModelParams, features: &Tensor) -> Result<ModelOutput> {
    forward_impl(params, features, (0..params.config.queries).collect(), None)
}

/// Forward pass keeping only `keep_query`; the output has a single query row.
pub fn forward_masked(params: &ModelParams, features: &Tensor, keep_query: usize, mode: MaskMode) -> Result<ModelOutput> {
    let n = params.config.queries;
    if keep_query >= n {
        return Err(Error::InvalidArgument(format!(
            "query index {keep_query} out of range for {n} queries"
        )));
    }
    match mode {
        MaskMode::Hard => forward_impl(params, features, vec![keep_query], None),
        MaskMode::Soft => forward_impl(params, features, (0..n).collect(), Some(vec![keep_query])),
    }
}

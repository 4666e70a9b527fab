//! Hand-derived reverse pass through the fixed forward graph.

use super::forward::{mean_pool3_adjoint, ForwardCache};
use super::{Gradients, ModelParams, ParamId};
use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// Gradients of a scalar loss with respect to the model outputs. Missing
/// entries are treated as zero.
#[derive(Debug, Clone, Default)]
pub struct Upstream {
    /// `∂loss/∂P`, `N × (K+1)`.
    pub d_p: Option<Tensor>,
    /// `∂loss/∂M`, `N × HW`.
    pub d_m: Option<Tensor>,
    /// `∂loss/∂L`, `K × HW`.
    pub d_l: Option<Tensor>,
}

fn relu_mask(grad: &mut Tensor, activated: &Tensor) {
    for (g, &a) in grad.data_mut().iter_mut().zip(activated.data()) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Row-wise softmax backward: `dz = s ⊙ (ds − Σ ds ⊙ s)`.
fn softmax_rows_backward(s: &Tensor, ds: &Tensor) -> Tensor {
    let mut dz = Tensor::zeros(s.shape());
    for r in 0..s.rows() {
        let (srow, drow) = (s.row(r), ds.row(r));
        let dot: f64 = srow.iter().zip(drow).map(|(a, b)| a * b).sum();
        for ((o, &sv), &dv) in dz.row_mut(r).iter_mut().zip(srow).zip(drow) {
            *o = sv * (dv - dot);
        }
    }
    dz
}

fn check_shape(t: &Tensor, rows: usize, cols: usize, what: &str) -> Result<()> {
    if t.rows() != rows || t.cols() != cols {
        return Err(Error::Shape(format!(
            "{what} has shape {:?}, expected {rows}x{cols}",
            t.shape()
        )));
    }
    Ok(())
}

fn scatter_rows(dst: &mut Tensor, rows: &[usize], src: &Tensor) {
    for (i, &r) in rows.iter().enumerate() {
        for (d, s) in dst.row_mut(r).iter_mut().zip(src.row(i)) {
            *d += s;
        }
    }
}

/// Accumulates `∂loss/∂θ` for every registered parameter.
///
/// `p` and `m` must be the outputs paired with `cache`.
pub fn backward(params: &ModelParams, cache: &ForwardCache, p: &Tensor, m: &Tensor, up: &Upstream) -> Result<Gradients> {
    if cache.fingerprint != params.fingerprint() {
        return Err(Error::InvalidArgument(
            "stale forward cache: parameters changed since the forward pass".into(),
        ));
    }
    let cfg = &params.config;
    let (n, k, e) = (cache.head_rows.len(), cfg.classes, cfg.embed);
    let hw = cache.height * cache.width;
    let scale = 1.0 / (e as f64).sqrt();
    check_shape(p, n, k + 1, "P")?;
    check_shape(m, n, hw, "M")?;

    let mut d_p = match &up.d_p {
        Some(d) => {
            check_shape(d, n, k + 1, "dP")?;
            d.clone()
        }
        None => Tensor::zeros(&[n, k + 1]),
    };
    let mut d_m = match &up.d_m {
        Some(d) => {
            check_shape(d, n, hw, "dM")?;
            d.clone().reshape(&[n, hw])?
        }
        None => Tensor::zeros(&[n, hw]),
    };
    let m2 = m.clone().reshape(&[n, hw])?;
    if let Some(d_l) = &up.d_l {
        check_shape(d_l, k, hw, "dL")?;
        let d_l = d_l.clone().reshape(&[k, hw])?;
        // L[k,x] = Σ_n P[n,k] M[n,x]
        let dp_l = matmul_nt(&m2, &d_l)?;
        for q in 0..n {
            for c in 0..k {
                let v = d_p.get2(q, c) + dp_l.get2(q, c);
                d_p.set2(q, c, v);
            }
        }
        let p_k = Tensor::new(&[n, k], (0..n).flat_map(|q| p.row(q)[..k].to_vec()).collect())?;
        d_m.add_assign(&matmul(&p_k, &d_l)?)?;
    }

    let mut grads = Gradients::zeros(cfg);

    // memberships: M = σ(Qp Fᵀ)
    let d_mz = d_m.zip_map(&m2, |g, s| g * s * (1.0 - s))?;
    let d_qp = matmul(&d_mz, &cache.f)?;
    let mut d_f = matmul_tn(&d_mz, &cache.qp)?;

    // mask MLP
    *grads.get_mut(ParamId::MaskW3) = matmul_tn(&cache.g2, &d_qp)?;
    *grads.get_mut(ParamId::MaskB3) = d_qp.sum_rows()?;
    let mut d_g2 = matmul_nt(&d_qp, params.get(ParamId::MaskW3))?;
    relu_mask(&mut d_g2, &cache.g2);
    *grads.get_mut(ParamId::MaskW2) = matmul_tn(&cache.g1, &d_g2)?;
    *grads.get_mut(ParamId::MaskB2) = d_g2.sum_rows()?;
    let mut d_g1 = matmul_nt(&d_g2, params.get(ParamId::MaskW2))?;
    relu_mask(&mut d_g1, &cache.g1);
    let qr_heads = {
        let data = cache.head_rows.iter().flat_map(|&r| cache.qr.row(r).to_vec()).collect();
        Tensor::new(&[n, e], data)?
    };
    *grads.get_mut(ParamId::MaskW1) = matmul_tn(&qr_heads, &d_g1)?;
    *grads.get_mut(ParamId::MaskB1) = d_g1.sum_rows()?;
    let mut d_qr_heads = matmul_nt(&d_g1, params.get(ParamId::MaskW1))?;

    // class head
    let d_cls = softmax_rows_backward(p, &d_p);
    *grads.get_mut(ParamId::ClsW) = matmul_tn(&qr_heads, &d_cls)?;
    *grads.get_mut(ParamId::ClsB) = d_cls.sum_rows()?;
    d_qr_heads.add_assign(&matmul_nt(&d_cls, params.get(ParamId::ClsW))?)?;

    let n_dec = cache.decoder_rows.len();
    let mut d_qr = Tensor::zeros(&[n_dec, e]);
    scatter_rows(&mut d_qr, &cache.head_rows, &d_qr_heads);

    // FFN: Qr = Q2 + relu(Q2 W1 + b1) W2 + b2
    *grads.get_mut(ParamId::FfnW2) = matmul_tn(&cache.hf, &d_qr)?;
    *grads.get_mut(ParamId::FfnB2) = d_qr.sum_rows()?;
    let mut d_hf = matmul_nt(&d_qr, params.get(ParamId::FfnW2))?;
    relu_mask(&mut d_hf, &cache.hf);
    *grads.get_mut(ParamId::FfnW1) = matmul_tn(&cache.q2, &d_hf)?;
    *grads.get_mut(ParamId::FfnB1) = d_hf.sum_rows()?;
    let mut d_q2 = d_qr;
    d_q2.add_assign(&matmul_nt(&d_hf, params.get(ParamId::FfnW1))?)?;

    // self-attention: Q2 = Q1 + (B Q1) W_sa, B = softmax(Q1 Q1ᵀ / √e)
    *grads.get_mut(ParamId::SelfAttnW) = matmul_tn(&cache.mixed, &d_q2)?;
    let d_mixed = matmul_nt(&d_q2, params.get(ParamId::SelfAttnW))?;
    let d_b = matmul_nt(&d_mixed, &cache.q1)?;
    let mut d_q1 = d_q2;
    d_q1.add_assign(&matmul_tn(&cache.self_attn, &d_mixed)?)?;
    let mut d_sl = softmax_rows_backward(&cache.self_attn, &d_b);
    d_sl.scale(scale);
    let d_sl_sym = d_sl.zip_map(&d_sl.transpose()?, |a, b| a + b)?;
    d_q1.add_assign(&matmul(&d_sl_sym, &cache.q1)?)?;

    // cross-attention: Q1 = Q + A F, A = softmax((Q + pos) Fᵀ / √e)
    let d_attn = matmul_nt(&d_q1, &cache.f)?;
    d_f.add_assign(&matmul_tn(&cache.attn, &d_q1)?)?;
    let mut d_logits = softmax_rows_backward(&cache.attn, &d_attn);
    d_logits.scale(scale);
    let d_qk = matmul(&d_logits, &cache.f)?;
    d_f.add_assign(&matmul_tn(&d_logits, &cache.qk)?)?;
    let mut d_q = d_q1;
    d_q.add_assign(&d_qk)?;
    scatter_rows(grads.get_mut(ParamId::Queries), &cache.decoder_rows, &d_q);
    scatter_rows(grads.get_mut(ParamId::QueryPos), &cache.decoder_rows, &d_qk);

    // pixel encoder: F = relu([H1, pool(H1)] W2 + b2), H1 = relu(X W1 + b1)
    relu_mask(&mut d_f, &cache.f);
    *grads.get_mut(ParamId::EncW2) = matmul_tn(&cache.z, &d_f)?;
    *grads.get_mut(ParamId::EncB2) = d_f.sum_rows()?;
    let d_z = matmul_nt(&d_f, params.get(ParamId::EncW2))?;
    let mut d_h1 = Tensor::zeros(&[hw, e]);
    let mut d_ctx = Tensor::zeros(&[hw, e]);
    for i in 0..hw {
        let row = d_z.row(i);
        d_h1.row_mut(i).copy_from_slice(&row[..e]);
        d_ctx.row_mut(i).copy_from_slice(&row[e..]);
    }
    d_h1.add_assign(&mean_pool3_adjoint(&d_ctx, cache.height, cache.width))?;
    relu_mask(&mut d_h1, &cache.h1);
    *grads.get_mut(ParamId::EncW1) = matmul_tn(&cache.x, &d_h1)?;
    *grads.get_mut(ParamId::EncB1) = d_h1.sum_rows()?;

    for (id, g) in grads.iter() {
        g.ensure_finite(id.name())?;
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_inlier_scene, DataConfig};
    use crate::model::{forward, forward_masked, MaskMode, ModelConfig, ParamSet};
    use crate::rng;
    use rand::Rng;

    fn tiny() -> (ModelConfig, DataConfig) {
        let m = ModelConfig {
            in_channels: 4,
            embed: 6,
            queries: 3,
            classes: 2,
            ffn_hidden: 5,
        };
        let d = DataConfig {
            height: 8,
            width: 8,
            in_channels: 4,
            classes: 2,
            max_shape_size: 5,
            max_template_size: 4,
            ..DataConfig::default()
        };
        (m, d)
    }

    /// Fixed random linear functional of the outputs: Σ a⊙P + Σ b⊙M + Σ c⊙L.
    struct Probe {
        a: Tensor,
        b: Tensor,
        c: Tensor,
    }

    impl Probe {
        fn new(n: usize, k: usize, hw: usize, seed: u64) -> Self {
            let mut r = rng::stream(seed, "probe", 0);
            let mut t = |rows, cols| {
                Tensor::new(&[rows, cols], (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
            };
            Self {
                a: t(n, k + 1),
                b: t(n, hw),
                c: t(k, hw),
            }
        }

        fn value(&self, params: &ParamSet, f: &Tensor, masked: Option<(usize, MaskMode)>) -> f64 {
            let out = match masked {
                Some((q, mode)) => forward_masked(params, f, q, mode).unwrap(),
                None => forward(params, f).unwrap(),
            };
            let dot = |x: &Tensor, y: &Tensor| x.data().iter().zip(y.data()).map(|(a, b)| a * b).sum::<f64>();
            dot(&self.a, &out.p) + dot(&self.b, &out.m) + dot(&self.c, &out.l)
        }

        fn upstream(&self) -> Upstream {
            Upstream {
                d_p: Some(self.a.clone()),
                d_m: Some(self.b.clone()),
                d_l: Some(self.c.clone()),
            }
        }
    }

    fn check_against_fd(masked: Option<(usize, MaskMode)>) {
        let (mcfg, dcfg) = tiny();
        let params = ParamSet::init(&mcfg, 17).unwrap();
        let f = generate_inlier_scene(&dcfg, 5).unwrap().features;
        let n_out = if masked.is_some() { 1 } else { mcfg.queries };
        let probe = Probe::new(n_out, mcfg.classes, 64, 9);
        let out = match masked {
            Some((q, mode)) => forward_masked(&params, &f, q, mode).unwrap(),
            None => forward(&params, &f).unwrap(),
        };
        let grads = backward(&params, &out.cache, &out.p, &out.m, &probe.upstream()).unwrap();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for (id, t) in params.iter() {
            for i in 0..t.numel() {
                let mut plus = params.clone();
                plus.get_mut(id).data_mut()[i] += h;
                let mut minus = params.clone();
                minus.get_mut(id).data_mut()[i] -= h;
                let fd = (probe.value(&plus, &f, masked) - probe.value(&minus, &f, masked)) / (2.0 * h);
                let an = grads.get(id).data()[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max(rel);
                assert!(rel < 1e-4, "{} [{i}]: analytic {an} vs fd {fd}", id.name());
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_against_fd(None);
    }

    #[test]
    fn masked_gradients_match_finite_differences() {
        check_against_fd(Some((1, MaskMode::Hard)));
        check_against_fd(Some((2, MaskMode::Soft)));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (mcfg, dcfg) = tiny();
        let params = ParamSet::init(&mcfg, 1).unwrap();
        let f = generate_inlier_scene(&dcfg, 2).unwrap().features;
        let out = forward(&params, &f).unwrap();
        let g = backward(&params, &out.cache, &out.p, &out.m, &Upstream::default()).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let (mcfg, dcfg) = tiny();
        let mut params = ParamSet::init(&mcfg, 1).unwrap();
        let f = generate_inlier_scene(&dcfg, 2).unwrap().features;
        let out = forward(&params, &f).unwrap();
        params.get_mut(ParamId::ClsB).data_mut()[0] += 1.0;
        assert!(backward(&params, &out.cache, &out.p, &out.m, &Upstream::default()).is_err());
    }
}

//! Outlier objectives on the aggregated logit map `L` (`K × H × W`).
//!
//! Each loss returns its value together with `∂loss/∂L`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::PROB_EPS;
use crate::data::{LabelMap, OUTLIER};
use crate::error::{Error, Result};
use crate::scoring::rba;
use crate::tensor::{logsumexp_slice, sigmoid_scalar, softmax_slice, Tensor};

/// How per-pixel terms are reduced over a pixel set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Divide by the number of pixels in the set.
    #[default]
    Mean,
    /// Plain sum.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutlierLossKind {
    Hinge,
    Mse,
    L1,
    Bce,
    Kl,
}

impl OutlierLossKind {
    pub const ALL: [OutlierLossKind; 5] = [
        OutlierLossKind::Hinge,
        OutlierLossKind::Mse,
        OutlierLossKind::L1,
        OutlierLossKind::Bce,
        OutlierLossKind::Kl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OutlierLossKind::Hinge => "hinge",
            OutlierLossKind::Mse => "mse",
            OutlierLossKind::L1 => "l1",
            OutlierLossKind::Bce => "bce",
            OutlierLossKind::Kl => "kl",
        }
    }
}

impl fmt::Display for OutlierLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OutlierLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OutlierLossKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown outlier loss `{s}`")))
    }
}

fn dims(l: &Tensor, labels: &LabelMap) -> Result<(usize, usize)> {
    match l.shape() {
        [k, h, w] if *h == labels.height && *w == labels.width => Ok((*k, h * w)),
        s => Err(Error::Shape(format!(
            "logits {s:?} do not cover a {}x{} label map",
            labels.height, labels.width
        ))),
    }
}

fn pixel_logits(l: &[f64], k: usize, hw: usize, x: usize, buf: &mut [f64]) {
    for (c, b) in buf.iter_mut().enumerate().take(k) {
        *b = l[c * hw + x];
    }
}

/// `∂RbA/∂L_k = −(1 − tanh²(L_k))`, accumulated with weight `g`.
fn push_rba_grad(d: &mut [f64], logits: &[f64], hw: usize, x: usize, g: f64) {
    for (c, &v) in logits.iter().enumerate() {
        let t = v.tanh();
        d[c * hw + x] -= g * (1.0 - t * t);
    }
}

fn scale_for(n: usize, norm: Normalization) -> f64 {
    match norm {
        Normalization::Mean if n > 0 => 1.0 / n as f64,
        Normalization::Mean => 0.0,
        Normalization::Sum => 1.0,
    }
}

/// `Σ_{x∈Ω_out} max(0, α − RbA(x))²`; zero with zero gradient when no pixel
/// carries the outlier code.
pub fn rba_hinge_loss(l: &Tensor, labels: &LabelMap, alpha: f64, norm: Normalization) -> Result<(f64, Tensor)> {
    alt_outlier_loss(OutlierLossKind::Hinge, l, labels, alpha, norm)
}

/// Dispatches over the hinge and the four alternative objectives.
///
/// `Hinge`, `Mse` and `L1` act on outlier pixels only. `Bce` treats RbA as the
/// logit of "outlier" on every non-void pixel. `Kl` averages a pull towards
/// the uniform distribution on outliers and a one-hot target on inliers.
pub fn alt_outlier_loss(kind: OutlierLossKind, l: &Tensor, labels: &LabelMap, alpha: f64, norm: Normalization) -> Result<(f64, Tensor)> {
    let (k, hw) = dims(l, labels)?;
    if !alpha.is_finite() {
        return Err(Error::InvalidArgument("alpha must be finite".into()));
    }
    let ld = l.data();
    let mut grad = vec![0.0; k * hw];
    let mut buf = vec![0.0; k];
    let outliers: Vec<usize> = (0..hw).filter(|&x| labels.codes[x] == OUTLIER).collect();
    let inliers: Vec<usize> = (0..hw).filter(|&x| usize::from(labels.codes[x]) < k).collect();

    let value = match kind {
        OutlierLossKind::Hinge | OutlierLossKind::Mse | OutlierLossKind::L1 => {
            let s = scale_for(outliers.len(), norm);
            let mut total = 0.0;
            for &x in &outliers {
                pixel_logits(ld, k, hw, x, &mut buf);
                let r = rba(&buf);
                let (v, dr) = match kind {
                    OutlierLossKind::Hinge => {
                        let gap = (alpha - r).max(0.0);
                        (gap * gap, -2.0 * gap)
                    }
                    OutlierLossKind::Mse => ((r - alpha).powi(2), 2.0 * (r - alpha)),
                    _ => {
                        let dr = if r > alpha {
                            1.0
                        } else if r < alpha {
                            -1.0
                        } else {
                            0.0
                        };
                        ((r - alpha).abs(), dr)
                    }
                };
                total += v;
                push_rba_grad(&mut grad, &buf, hw, x, s * dr);
            }
            s * total
        }
        OutlierLossKind::Bce => {
            let pixels: Vec<usize> = (0..hw).filter(|&x| !labels.is_void(x)).collect();
            let s = scale_for(pixels.len(), norm);
            let mut total = 0.0;
            for &x in &pixels {
                pixel_logits(ld, k, hw, x, &mut buf);
                let r = rba(&buf);
                let y = if labels.codes[x] == OUTLIER { 1.0 } else { 0.0 };
                // softplus(r) − y·r, stable for large |r|
                total += r.max(0.0) + (-r.abs()).exp().ln_1p() - y * r;
                push_rba_grad(&mut grad, &buf, hw, x, s * (sigmoid_scalar(r) - y));
            }
            s * total
        }
        OutlierLossKind::Kl => {
            let (s_out, s_in) = (0.5 * scale_for(outliers.len(), norm), 0.5 * scale_for(inliers.len(), norm));
            let mut out_total = 0.0;
            for &x in &outliers {
                pixel_logits(ld, k, hw, x, &mut buf);
                let p = softmax_slice(&buf);
                let lse = logsumexp_slice(&buf);
                let logp: Vec<f64> = buf.iter().map(|z| z - lse).collect();
                let neg_h: f64 = p.iter().zip(&logp).map(|(a, b)| a * b).sum();
                out_total += neg_h + (k as f64).ln();
                for c in 0..k {
                    grad[c * hw + x] += s_out * p[c] * (logp[c] - neg_h);
                }
            }
            let mut in_total = 0.0;
            let ln_eps = PROB_EPS.ln();
            for &x in &inliers {
                pixel_logits(ld, k, hw, x, &mut buf);
                let y = usize::from(labels.codes[x]);
                let logp_y = buf[y] - logsumexp_slice(&buf);
                in_total -= logp_y.max(ln_eps);
                if logp_y > ln_eps {
                    let p = softmax_slice(&buf);
                    for c in 0..k {
                        let delta = if c == y { 1.0 } else { 0.0 };
                        grad[c * hw + x] -= s_in * (delta - p[c]);
                    }
                }
            }
            s_out * out_total + s_in * in_total
        }
    };
    let grad = Tensor::new(l.shape(), grad)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("{kind} loss")));
    }
    Ok((value, grad))
}

/// `D_KL(p ‖ U_K) = Σ p ln p + ln K`.
pub fn kl_to_uniform(p: &[f64]) -> f64 {
    p.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>() + (p.len() as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn labels(codes: Vec<u8>, w: usize) -> LabelMap {
        LabelMap {
            height: codes.len() / w,
            width: w,
            codes,
        }
    }

    #[test]
    fn hinge_examples() {
        let lab = labels(vec![OUTLIER, 0], 2);
        let zeros = Tensor::zeros(&[4, 1, 2]);
        let (v, _) = rba_hinge_loss(&zeros, &lab, 5.0, Normalization::Sum).unwrap();
        assert_abs_diff_eq!(v, 25.0, epsilon = 1e-12);

        // RbA = α exactly: zero contribution and zero gradient
        let (v, g) = rba_hinge_loss(&zeros, &lab, 0.0, Normalization::Mean).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.data().iter().all(|&d| d == 0.0));

        let clean = labels(vec![0, 1], 2);
        let (v, g) = rba_hinge_loss(&Tensor::filled(&[4, 1, 2], 0.3), &clean, 5.0, Normalization::Mean).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn normalization_divides_by_outlier_count() {
        let lab = labels(vec![OUTLIER, OUTLIER, 0, 255], 4);
        let l = Tensor::zeros(&[3, 1, 4]);
        let (sum, _) = rba_hinge_loss(&l, &lab, 2.0, Normalization::Sum).unwrap();
        let (mean, _) = rba_hinge_loss(&l, &lab, 2.0, Normalization::Mean).unwrap();
        assert_abs_diff_eq!(sum, 8.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mean, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn mse_at_target_and_uniform_kl_vanish() {
        let lab = labels(vec![OUTLIER; 3], 3);
        // one logit of 0 per class gives RbA 0
        let l = Tensor::zeros(&[4, 1, 3]);
        assert_eq!(alt_outlier_loss(OutlierLossKind::Mse, &l, &lab, 0.0, Normalization::Mean).unwrap().0, 0.0);
        let (kl, _) = alt_outlier_loss(OutlierLossKind::Kl, &Tensor::filled(&[4, 1, 3], 0.7), &lab, 5.0, Normalization::Mean).unwrap();
        assert_abs_diff_eq!(kl, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn parse_kinds() {
        for k in OutlierLossKind::ALL {
            assert_eq!(k.name().parse::<OutlierLossKind>().unwrap(), k);
        }
        assert!("focal".parse::<OutlierLossKind>().is_err());
    }

    fn fd_check(kind: OutlierLossKind, norm: Normalization, seed: u64) {
        let mut r = rng::stream(seed, "outlier-loss-fd", kind as u64);
        let (k, h, w) = (3, 3, 4);
        let codes: Vec<u8> = (0..h * w)
            .map(|_| match r.random_range(0..6) {
                0 | 1 => OUTLIER,
                2 => 255,
                c => (c - 3) as u8,
            })
            .collect();
        let lab = labels(codes, w);
        let l = Tensor::new(&[k, h, w], (0..k * h * w).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        let alpha = 1.3;
        let (_, g) = alt_outlier_loss(kind, &l, &lab, alpha, norm).unwrap();
        let f = |t: &Tensor| alt_outlier_loss(kind, t, &lab, alpha, norm).unwrap().0;
        let hstep = 1e-6;
        for i in 0..l.numel() {
            let mut plus = l.clone();
            plus.data_mut()[i] += hstep;
            let mut minus = l.clone();
            minus.data_mut()[i] -= hstep;
            let fd = (f(&plus) - f(&minus)) / (2.0 * hstep);
            let an = g.data()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel < 1e-4, "{kind} {norm:?} seed {seed} idx {i}: analytic {an}, fd {fd}");
        }
    }

    #[test]
    fn all_outlier_losses_match_finite_differences() {
        for kind in OutlierLossKind::ALL {
            for norm in [Normalization::Mean, Normalization::Sum] {
                for seed in 0..5 {
                    fd_check(kind, norm, seed);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn kl_equals_log_k_minus_entropy(z in proptest::collection::vec(-6.0f64..6.0, 2..9)) {
            let p = softmax_slice(&z);
            let entropy: f64 = -p.iter().map(|q| q * q.ln()).sum::<f64>();
            prop_assert!((kl_to_uniform(&p) - ((p.len() as f64).ln() - entropy)).abs() < 1e-9);
        }

        #[test]
        fn hinge_zero_iff_rba_reaches_alpha(v in proptest::collection::vec(-3.0f64..3.0, 8), alpha in -4.0f64..4.0) {
            let lab = labels(vec![OUTLIER, 0], 2);
            let l = Tensor::new(&[4, 1, 2], v).unwrap();
            let (loss, _) = rba_hinge_loss(&l, &lab, alpha, Normalization::Mean).unwrap();
            let r = rba(&[l.data()[0], l.data()[2], l.data()[4], l.data()[6]]);
            prop_assert_eq!(loss == 0.0, r >= alpha);
        }

        #[test]
        fn hinge_non_increasing_in_rba(v in proptest::collection::vec(-3.0f64..3.0, 4), d in 0.0f64..2.0) {
            let lab = labels(vec![OUTLIER], 1);
            let l = Tensor::new(&[4, 1, 1], v.clone()).unwrap();
            // lowering a logit raises RbA
            let lowered = Tensor::new(&[4, 1, 1], vec![v[0] - d, v[1], v[2], v[3]]).unwrap();
            let a = rba_hinge_loss(&l, &lab, 5.0, Normalization::Sum).unwrap().0;
            let b = rba_hinge_loss(&lowered, &lab, 5.0, Normalization::Sum).unwrap().0;
            prop_assert!(b <= a);
        }
    }
}

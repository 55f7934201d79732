use mtlab_autograd::Tensor;

use super::anchors::{AnchorLabel, AnchorSet, DetTargets};
use super::DetHeadConfig;
use crate::error::{invalid, Result};

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Focal term and its derivative for one logit. `alpha = None` disables the
/// class-balance weight.
fn focal_term(x: f64, positive: bool, alpha: Option<f64>, gamma: f64) -> (f64, f64) {
    let x = x.clamp(-60.0, 60.0);
    let p = sigmoid(x);
    if positive {
        let w = alpha.unwrap_or(1.0);
        let log_p = -softplus(-x);
        let m = (1.0 - p).powf(gamma);
        (-w * m * log_p, w * m * (gamma * p * log_p - (1.0 - p)))
    } else {
        let w = alpha.map_or(1.0, |a| 1.0 - a);
        let log_q = -softplus(x);
        let m = p.powf(gamma);
        (-w * m * log_q, w * m * (p - gamma * (1.0 - p) * log_q))
    }
}

/// Unnormalized focal sum and gradient over anchor-major logits `[anchor][class]`.
fn focal_sum(
    logits: &[f64],
    labels: &[AnchorLabel],
    num_classes: usize,
    alpha: Option<f64>,
    gamma: f64,
    grad: &mut [f64],
) -> Result<f64> {
    if logits.len() != labels.len() * num_classes {
        return Err(invalid(format!(
            "{} logits for {} anchors x {num_classes} classes",
            logits.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (i, label) in labels.iter().enumerate() {
        let target = match label {
            AnchorLabel::Ignore => continue,
            AnchorLabel::Positive(c) => Some(*c),
            AnchorLabel::Negative => None,
        };
        for k in 0..num_classes {
            let j = i * num_classes + k;
            if logits[j].is_nan() {
                return Err(invalid("NaN logit in focal loss"));
            }
            let (v, g) = focal_term(logits[j], target == Some(k), alpha, gamma);
            total += v;
            grad[j] += g;
        }
    }
    Ok(total)
}

/// Sigmoid focal loss over `[anchor][class]` logits, normalized by the
/// number of positive anchors (at least one). Returns the loss and its
/// gradient with respect to `logits`.
pub fn focal_loss(
    logits: &[f64],
    labels: &[AnchorLabel],
    num_classes: usize,
    alpha: Option<f64>,
    gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; logits.len()];
    let sum = focal_sum(logits, labels, num_classes, alpha, gamma, &mut grad)?;
    let norm = labels.iter().filter(|l| matches!(l, AnchorLabel::Positive(_))).count().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= norm);
    Ok((sum / norm, grad))
}

/// Balanced L1 with the transition at `|x| = 1`. `b` follows from matching
/// slopes there (`alpha * ln(b + 1) = gamma`) and `c` from matching values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BalancedL1 {
    pub alpha: f64,
    pub gamma: f64,
    pub b: f64,
    pub c: f64,
}

impl BalancedL1 {
    pub fn new(alpha: f64, gamma: f64) -> Self {
        let b = (gamma / alpha).exp() - 1.0;
        Self {
            alpha,
            gamma,
            b,
            c: gamma / b - alpha,
        }
    }
}

/// Value and derivative of balanced L1 at `x`.
pub fn balanced_l1(x: f64, p: &BalancedL1) -> (f64, f64) {
    let a = x.abs();
    let sign = if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    };
    if a < 1.0 {
        let t = p.b * a + 1.0;
        (p.alpha / p.b * t * t.ln() - p.alpha * a, sign * p.alpha * t.ln())
    } else {
        (p.gamma * a + p.c, sign * p.gamma)
    }
}

/// Mean over rows of the summed per-coordinate balanced L1, with the
/// gradient with respect to `pred`.
pub fn balanced_l1_loss(pred: &[[f64; 4]], target: &[[f64; 4]], p: &BalancedL1) -> Result<(f64, Vec<[f64; 4]>)> {
    if pred.len() != target.len() {
        return Err(invalid("balanced L1 operands differ in length"));
    }
    let norm = pred.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = vec![[0.0; 4]; pred.len()];
    for (i, (pr, t)) in pred.iter().zip(target).enumerate() {
        for j in 0..4 {
            let (v, g) = balanced_l1(pr[j] - t[j], p);
            total += v;
            grad[i][j] = g / norm;
        }
    }
    Ok((total / norm, grad))
}

/// Batch detection loss with gradients for every level's raw outputs.
#[derive(Clone, Debug)]
pub struct DetLoss {
    pub cls: f64,
    pub loc: f64,
    pub num_positive: usize,
    /// `cls_weight * cls + loc_weight * loc`.
    pub total: f64,
    pub grad_logits: Vec<Tensor>,
    pub grad_deltas: Vec<Tensor>,
}

/// Focal plus balanced L1 over a batch, both normalized by the total number
/// of positive anchors in the batch. `logits[l]` is `[n, A*K, h, w]` and
/// `deltas[l]` is `[n, A*4, h, w]`; `targets[b]` covers image `b`.
pub fn det_loss(
    config: &DetHeadConfig,
    anchors: &AnchorSet,
    logits: &[&Tensor],
    deltas: &[&Tensor],
    targets: &[DetTargets],
) -> Result<DetLoss> {
    let k = config.num_classes;
    let a = anchors.per_location;
    let n = targets.len();
    let bl1 = config.balanced_l1();
    let num_pos: usize = targets.iter().map(DetTargets::num_positive).sum();
    let norm = num_pos.max(1) as f64;
    let mut cls = 0.0;
    let mut loc = 0.0;
    let mut grad_logits = Vec::with_capacity(logits.len());
    let mut grad_deltas = Vec::with_capacity(deltas.len());
    for (l, sh) in anchors.shapes.iter().enumerate() {
        let (lt, dt) = (logits[l], deltas[l]);
        let hw = sh.h * sh.w;
        if lt.shape() != [n, a * k, sh.h, sh.w] || dt.shape() != [n, a * 4, sh.h, sh.w] {
            return Err(invalid(format!(
                "level {l} outputs {:?}/{:?} do not match {n} images of {}x{} with {a} anchors",
                lt.shape(),
                dt.shape(),
                sh.h,
                sh.w
            )));
        }
        let mut gl = Tensor::zeros(lt.shape());
        let mut gd = Tensor::zeros(dt.shape());
        let off = anchors.offsets[l];
        let count = hw * a;
        for (b, tgt) in targets.iter().enumerate() {
            let labels = &tgt.labels[off..off + count];
            // Gather to anchor-major order, score, and scatter the gradient back.
            let mut flat = vec![0.0; count * k];
            for pos in 0..hw {
                for ai in 0..a {
                    for c in 0..k {
                        flat[(pos * a + ai) * k + c] = lt.data()[((b * a * k) + ai * k + c) * hw + pos];
                    }
                }
            }
            let mut g = vec![0.0; flat.len()];
            cls += focal_sum(&flat, labels, k, Some(config.focal_alpha), config.focal_gamma, &mut g)?;
            for pos in 0..hw {
                for ai in 0..a {
                    for c in 0..k {
                        gl.data_mut()[((b * a * k) + ai * k + c) * hw + pos] =
                            config.cls_weight * g[(pos * a + ai) * k + c] / norm;
                    }
                }
            }
            for (idx, label) in labels.iter().enumerate() {
                if !matches!(label, AnchorLabel::Positive(_)) {
                    continue;
                }
                let (pos, ai) = (idx / a, idx % a);
                let t = tgt.deltas[off + idx];
                for j in 0..4 {
                    let di = ((b * a * 4) + ai * 4 + j) * hw + pos;
                    let (v, gv) = balanced_l1(dt.data()[di] - t[j], &bl1);
                    loc += v;
                    gd.data_mut()[di] = config.loc_weight * gv / norm;
                }
            }
        }
        grad_logits.push(gl);
        grad_deltas.push(gd);
    }
    let (cls, loc) = (cls / norm, loc / norm);
    if !cls.is_finite() || !loc.is_finite() {
        return Err(invalid("non-finite detection loss"));
    }
    Ok(DetLoss {
        cls,
        loc,
        num_positive: num_pos,
        total: config.cls_weight * cls + config.loc_weight * loc,
        grad_logits,
        grad_deltas,
    })
}

//! Segmentation losses on logits, built from differentiable graph ops.

use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

pub const SMOOTH: f64 = 1e-6;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_WEIGHT: f64 = 20.0;

/// Mean binary cross-entropy on logits: `softplus(x) - x t`.
pub fn bce<T: Real>(g: &mut Graph<T>, logits: Var, target: Var) -> Result<Var, TensorError> {
    let sp = g.softplus(logits);
    let xt = g.mul(logits, target)?;
    let l = g.sub(sp, xt)?;
    Ok(g.mean(l))
}

/// Sigmoid focal loss (alpha 0.25, gamma 2), mean over elements.
pub fn focal<T: Real>(g: &mut Graph<T>, logits: Var, target: Var) -> Result<Var, TensorError> {
    let sp = g.softplus(logits);
    let xt = g.mul(logits, target)?;
    let ce = g.sub(sp, xt)?;
    let p = g.sigmoid(logits);
    // 1 - p_t = p + t - 2 p t
    let pt2 = g.mul(p, target)?;
    let pt2 = g.scale(pt2, T::from_f64c(2.0));
    let a = g.add(p, target)?;
    let one_minus_pt = g.sub(a, pt2)?;
    let modulator = g.square(one_minus_pt);
    // alpha_t = (1 - alpha) + (2 alpha - 1) t
    let at = g.scale(target, T::from_f64c(2.0 * FOCAL_ALPHA - 1.0));
    let at = g.add_scalar(at, T::from_f64c(1.0 - FOCAL_ALPHA));
    let w = g.mul(modulator, at)?;
    let l = g.mul(w, ce)?;
    Ok(g.mean(l))
}

/// `1 - (2 Σpt + ε) / (Σp + Σt + ε)`
pub fn dice<T: Real>(g: &mut Graph<T>, logits: Var, target: Var) -> Result<Var, TensorError> {
    let p = g.sigmoid(logits);
    let pt = g.mul(p, target)?;
    let inter = g.sum(pt);
    let num = g.scale(inter, T::from_f64c(2.0));
    let num = g.add_scalar(num, T::from_f64c(SMOOTH));
    let sp = g.sum(p);
    let st = g.sum(target);
    let den = g.add(sp, st)?;
    let den = g.add_scalar(den, T::from_f64c(SMOOTH));
    let r = g.div(num, den)?;
    Ok(g.one_minus(r))
}

/// Soft Jaccard loss `1 - (Σpt + ε) / (Σp + Σt - Σpt + ε)`.
pub fn iou<T: Real>(g: &mut Graph<T>, logits: Var, target: Var) -> Result<Var, TensorError> {
    let p = g.sigmoid(logits);
    let pt = g.mul(p, target)?;
    let inter = g.sum(pt);
    let sp = g.sum(p);
    let st = g.sum(target);
    let union = g.add(sp, st)?;
    let union = g.sub(union, inter)?;
    let den = g.add_scalar(union, T::from_f64c(SMOOTH));
    let num = g.add_scalar(inter, T::from_f64c(SMOOTH));
    let r = g.div(num, den)?;
    Ok(g.one_minus(r))
}

/// Hard IoU between `logits > 0` and a binary target.
pub fn hard_iou<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> f64 {
    let half = T::from_f64c(0.5);
    let (mut inter, mut union) = (0usize, 0usize);
    for (&l, &t) in logits.data().iter().zip(target.data()) {
        let p = l > T::zero();
        let q = t > half;
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Per-decode instance terms: `20·focal + dice + (iou_pred - iou)²`.
pub fn instance_loss<T: Real>(g: &mut Graph<T>, logits: Var, iou_pred: Var, target: Var) -> Result<Var, TensorError> {
    let f = focal(g, logits, target)?;
    let f = g.scale(f, T::from_f64c(FOCAL_WEIGHT));
    let d = dice(g, logits, target)?;
    let actual = hard_iou(g.value(logits), g.value(target));
    let actual = g.scalar(T::from_f64c(actual));
    let ip = g.reshape(iou_pred, &[])?;
    let diff = g.sub(ip, actual)?;
    let mse = g.square(diff);
    let s = g.add(f, d)?;
    g.add(s, mse)
}

/// Per-slice semantic terms: `bce + dice + iou`.
pub fn semantic_loss<T: Real>(g: &mut Graph<T>, logits: Var, target: Var) -> Result<Var, TensorError> {
    let b = bce(g, logits, target)?;
    let d = dice(g, logits, target)?;
    let j = iou(g, logits, target)?;
    let s = g.add(b, d)?;
    g.add(s, j)
}

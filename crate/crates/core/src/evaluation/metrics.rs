use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::volume::Mask;

use super::components::{connected_components, Connectivity};
use super::EvalError;

pub fn dsc(pred: &Mask, gt: &Mask) -> Result<f64, EvalError> {
    if pred.extents != gt.extents {
        return Err(EvalError::ExtentMismatch);
    }
    let p = pred.count();
    let g = gt.count();
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * pred.intersection_count(gt) as f64 / (p + g) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRow {
    pub gt_id: u32,
    /// Best-overlapping predicted component, if any overlap exists.
    pub pred_id: Option<u32>,
    pub iou: f64,
    /// Against the union of all matching predicted components.
    pub dsc: Option<f64>,
    pub detected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionMatch {
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub rows: Vec<MatchRow>,
    /// For each GT lesion (index = id - 1), the predicted ids it matches.
    pub matches: Vec<Vec<u32>>,
}

pub fn lesion_f1(pred: &Mask, gt: &Mask, iou_threshold: f64, conn: Connectivity) -> Result<LesionMatch, EvalError> {
    if pred.extents != gt.extents {
        return Err(EvalError::ExtentMismatch);
    }
    let gl = connected_components(gt, conn);
    let pl = connected_components(pred, conn);
    let gs = gl.sizes();
    let ps = pl.sizes();
    let mut overlap: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    for (&g, &p) in gl.data.iter().zip(&pl.data) {
        if g != 0 && p != 0 {
            *overlap.entry((g, p)).or_default() += 1;
        }
    }
    let iou = |g: u32, p: u32, n: usize| n as f64 / (gs[g as usize] + ps[p as usize] - n) as f64;

    let mut matches = vec![Vec::new(); gl.count as usize];
    let mut pred_matched = vec![false; pl.count as usize + 1];
    let mut best: Vec<Option<(u32, f64)>> = vec![None; gl.count as usize];
    for (&(g, p), &n) in &overlap {
        let v = iou(g, p, n);
        let b = &mut best[g as usize - 1];
        if b.is_none_or(|(_, bv)| v > bv) {
            *b = Some((p, v));
        }
        if v >= iou_threshold {
            matches[g as usize - 1].push(p);
            pred_matched[p as usize] = true;
        }
    }
    let tp = matches.iter().filter(|m| !m.is_empty()).count();
    let fn_ = gl.count as usize - tp;
    let fp = (1..=pl.count as usize).filter(|&p| !pred_matched[p]).count();
    let denom = 2 * tp + fp + fn_;
    let f1 = if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 };

    let rows = (1..=gl.count)
        .map(|g| {
            let m = &matches[g as usize - 1];
            let dsc = (!m.is_empty()).then(|| {
                let inter: usize = m.iter().map(|&p| overlap[&(g, p)]).sum();
                let psum: usize = m.iter().map(|&p| ps[p as usize]).sum();
                2.0 * inter as f64 / (gs[g as usize] + psum) as f64
            });
            let (pred_id, v) = match best[g as usize - 1] {
                Some((p, v)) => (Some(p), v),
                None => (None, 0.0),
            };
            MatchRow {
                gt_id: g,
                pred_id,
                iou: v,
                dsc,
                detected: !m.is_empty(),
            }
        })
        .collect();
    Ok(LesionMatch {
        f1,
        tp,
        fp,
        fn_,
        rows,
        matches,
    })
}

/// Mean DSC over detected lesions; `None` when nothing was detected.
pub fn lesionwise_dsc(m: &LesionMatch) -> Option<f64> {
    let v: Vec<f64> = m.rows.iter().filter_map(|r| r.dsc).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

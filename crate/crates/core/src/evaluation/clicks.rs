use crate::click::{Click, ClickLabel};
use crate::volume::{Mask, Spacing};

use super::components::{centroid, connected_components, nearest_voxel, Connectivity};
use super::EvalError;

/// Click at the rounded centroid of `region`, projected into it when the
/// rounded voxel falls outside.
fn click_in(region: &Mask, spacing: Spacing, label: ClickLabel) -> Option<Click> {
    let c = centroid(region)?;
    let e = region.extents;
    let r = [c[0].round() as usize, c[1].round() as usize, c[2].round() as usize];
    let (x, y, z) = if r[0] < e.w && r[1] < e.h && r[2] < e.d && region.get(r[0], r[1], r[2]) {
        (r[0], r[1], r[2])
    } else {
        nearest_voxel(region, c, spacing)?
    };
    Some(Click { x, y, slice: z, label })
}

pub fn simulate_initial_click(gt_lesion: &Mask, spacing: Spacing) -> Result<Click, EvalError> {
    click_in(gt_lesion, spacing, ClickLabel::Foreground).ok_or(EvalError::EmptyLesion)
}

/// Returns `None` once `pred == gt`.
///
/// False-negative and false-positive voxels are labelled separately so every
/// error component carries a single click label.
pub fn simulate_correction_click(
    pred: &Mask,
    gt: &Mask,
    spacing: Spacing,
    conn: Connectivity,
) -> Result<Option<Click>, EvalError> {
    if pred.extents != gt.extents {
        return Err(EvalError::ExtentMismatch);
    }
    let fn_mask = gt.minus(pred);
    let fp_mask = pred.minus(gt);
    let mut best: Option<(usize, usize, Mask, ClickLabel)> = None;
    for (m, label) in [(fn_mask, ClickLabel::Foreground), (fp_mask, ClickLabel::Background)] {
        let labels = connected_components(&m, conn);
        let sizes = labels.sizes();
        let mut first = vec![usize::MAX; sizes.len()];
        for (i, &l) in labels.data.iter().enumerate() {
            if l != 0 && first[l as usize] == usize::MAX {
                first[l as usize] = i;
            }
        }
        for l in 1..sizes.len() {
            let better = match &best {
                None => true,
                Some((n, f, _, _)) => sizes[l] > *n || (sizes[l] == *n && first[l] < *f),
            };
            if better {
                best = Some((sizes[l], first[l], labels.mask_of(l as u32), label));
            }
        }
    }
    Ok(best.and_then(|(_, _, region, label)| click_in(&region, spacing, label)))
}

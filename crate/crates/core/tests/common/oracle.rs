//! Brute-force references for components and metrics.

use std::collections::{BTreeMap, HashSet};

use mois_core::evaluation::Connectivity;
use mois_core::volume::{Extents, Mask};

fn adjacent(conn: Connectivity, dx: i64, dy: i64, dz: i64) -> bool {
    let m = dx.abs() + dy.abs() + dz.abs();
    if m == 0 {
        return false;
    }
    match conn {
        Connectivity::C4 => dz == 0 && m == 1,
        Connectivity::C8 => dz == 0,
        Connectivity::C6 => m == 1,
        Connectivity::C18 => m <= 2,
        Connectivity::C26 => true,
    }
}

/// Min-label relaxation to a fixed point, relabelled in scan order.
pub fn flood_labels(mask: &Mask, conn: Connectivity) -> Vec<u32> {
    let e = mask.extents;
    let n = e.len();
    let mut lab: Vec<usize> = (0..n).collect();
    loop {
        let mut changed = false;
        for i in 0..n {
            if mask.data[i] == 0 {
                continue;
            }
            let (x, y, z) = e.coords(i);
            for dz in -1..=1i64 {
                for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        if !adjacent(conn, dx, dy, dz) {
                            continue;
                        }
                        let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                        if !e.contains(nx, ny, nz) {
                            continue;
                        }
                        let j = e.index(nx as usize, ny as usize, nz as usize);
                        if mask.data[j] != 0 && lab[j] < lab[i] {
                            lab[i] = lab[j];
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut rename = BTreeMap::new();
    let mut out = vec![0u32; n];
    for i in 0..n {
        if mask.data[i] != 0 {
            let next = rename.len() as u32 + 1;
            out[i] = *rename.entry(lab[i]).or_insert(next);
        }
    }
    out
}

pub fn components(mask: &Mask, conn: Connectivity) -> Vec<HashSet<usize>> {
    let lab = flood_labels(mask, conn);
    let k = lab.iter().copied().max().unwrap_or(0) as usize;
    let mut sets = vec![HashSet::new(); k];
    for (i, &l) in lab.iter().enumerate() {
        if l != 0 {
            sets[l as usize - 1].insert(i);
        }
    }
    sets
}

fn voxel_set(m: &Mask) -> HashSet<usize> {
    (0..m.data.len()).filter(|&i| m.data[i] != 0).collect()
}

pub fn dsc(pred: &Mask, gt: &Mask) -> f64 {
    let p = voxel_set(pred);
    let g = voxel_set(gt);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    2.0 * p.intersection(&g).count() as f64 / (p.len() + g.len()) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub lesionwise: Option<f64>,
}

/// A GT lesion is detected when some predicted component reaches the IoU
/// threshold; its DSC is taken against the union of all such components.
pub fn lesion_metrics(pred: &Mask, gt: &Mask, thr: f64, conn: Connectivity) -> Reference {
    let gc = components(gt, conn);
    let pc = components(pred, conn);
    let iou = |a: &HashSet<usize>, b: &HashSet<usize>| a.intersection(b).count() as f64 / a.union(b).count() as f64;
    let mut pred_used = vec![false; pc.len()];
    let mut tp = 0;
    let mut dscs = Vec::new();
    for g in &gc {
        let hits: Vec<usize> = (0..pc.len()).filter(|&j| !g.is_disjoint(&pc[j]) && iou(g, &pc[j]) >= thr).collect();
        if hits.is_empty() {
            continue;
        }
        tp += 1;
        let mut u = HashSet::new();
        for &j in &hits {
            pred_used[j] = true;
            u.extend(pc[j].iter().copied());
        }
        dscs.push(2.0 * g.intersection(&u).count() as f64 / (g.len() + u.len()) as f64);
    }
    let fn_ = gc.len() - tp;
    let fp = pred_used.iter().filter(|&&u| !u).count();
    let f1 = if tp + fp + fn_ == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    let lesionwise = (!dscs.is_empty()).then(|| dscs.iter().sum::<f64>() / dscs.len() as f64);
    Reference {
        f1,
        tp,
        fp,
        fn_,
        lesionwise,
    }
}

/// Random blobby mask: thresholded sum of a few random boxes plus salt.
pub fn random_mask<R: rand::Rng>(e: Extents, rng: &mut R) -> Mask {
    let mut m = Mask::empty(e);
    let boxes = rng.random_range(0..6);
    for _ in 0..boxes {
        let x0 = rng.random_range(0..e.w);
        let y0 = rng.random_range(0..e.h);
        let z0 = rng.random_range(0..e.d);
        let (bw, bh, bd) = (
            rng.random_range(1..=e.w.div_ceil(3).max(1)),
            rng.random_range(1..=e.h.div_ceil(3).max(1)),
            rng.random_range(1..=e.d.div_ceil(3).max(1)),
        );
        for z in z0..(z0 + bd).min(e.d) {
            for y in y0..(y0 + bh).min(e.h) {
                for x in x0..(x0 + bw).min(e.w) {
                    m.set(x, y, z, true);
                }
            }
        }
    }
    let salt = rng.random_range(0.0..0.05);
    for v in m.data.iter_mut() {
        if rng.random_bool(salt) {
            *v ^= 1;
        }
    }
    m
}

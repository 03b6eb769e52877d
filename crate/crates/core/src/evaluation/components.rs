//! Connected components and binary morphology.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::volume::{Labels, Mask, Spacing};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Connectivity {
    /// In-plane edge neighbours.
    #[serde(rename = "4")]
    C4,
    /// In-plane edge and corner neighbours.
    #[serde(rename = "8")]
    C8,
    #[serde(rename = "6")]
    C6,
    #[serde(rename = "18")]
    C18,
    #[serde(rename = "26")]
    C26,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Option<Self> {
        Some(match n {
            4 => Self::C4,
            8 => Self::C8,
            6 => Self::C6,
            18 => Self::C18,
            26 => Self::C26,
            _ => return None,
        })
    }

    pub fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let nz = (dx != 0) as u32 + (dy != 0) as u32 + (dz != 0) as u32;
                    let keep = match self {
                        Self::C4 => dz == 0 && nz == 1,
                        Self::C8 => dz == 0 && nz >= 1,
                        Self::C6 => nz == 1,
                        Self::C18 => nz == 1 || nz == 2,
                        Self::C26 => nz >= 1,
                    };
                    if keep {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

impl Default for Connectivity {
    fn default() -> Self {
        Self::C26
    }
}

/// Labels components 1..N in order of their first voxel in scan order.
pub fn connected_components(mask: &Mask, conn: Connectivity) -> Labels {
    let e = mask.extents;
    let offsets = conn.offsets();
    let mut labels = vec![0u32; e.len()];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..e.len() {
        if mask.data[start] == 0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y, z) = e.coords(i);
            for o in &offsets {
                let (nx, ny, nz) = (x as i64 + o[0], y as i64 + o[1], z as i64 + o[2]);
                if !e.contains(nx, ny, nz) {
                    continue;
                }
                let j = e.index(nx as usize, ny as usize, nz as usize);
                if mask.data[j] != 0 && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            }
        }
    }
    Labels {
        extents: e,
        data: labels,
        count: next,
    }
}

/// Labels sorted by voxel count (descending, ties by lower label), truncated.
pub fn select_largest(labels: &Labels, limit: usize) -> Vec<u32> {
    let sizes = labels.sizes();
    let mut ids: Vec<u32> = (1..=labels.count).collect();
    ids.sort_by(|&a, &b| sizes[b as usize].cmp(&sizes[a as usize]).then(a.cmp(&b)));
    ids.truncate(limit);
    ids
}

/// Drops components whose physical volume is below `v_thresh_mm3`.
pub fn remove_small_components(mask: &Mask, v_thresh_mm3: f64, spacing: Spacing, conn: Connectivity) -> Mask {
    let labels = connected_components(mask, conn);
    let sizes = labels.sizes();
    let vv = spacing.voxel_volume();
    let keep: Vec<bool> = sizes
        .iter()
        .enumerate()
        .map(|(l, &n)| l != 0 && n as f64 * vv >= v_thresh_mm3)
        .collect();
    Mask {
        extents: mask.extents,
        data: labels.data.iter().map(|&l| keep[l as usize] as u8).collect(),
    }
}

/// Fills, slice by slice, background regions that do not reach the slice border.
pub fn fill_holes(mask: &Mask) -> Mask {
    let e = mask.extents;
    let mut out = mask.clone();
    let (h, w) = (e.h, e.w);
    for z in 0..e.d {
        let plane = mask.slice(z);
        let mut outside = vec![false; h * w];
        let mut queue = VecDeque::new();
        for y in 0..h {
            for x in 0..w {
                let border = x == 0 || y == 0 || x + 1 == w || y + 1 == h;
                if border && plane[y * w + x] == 0 && !outside[y * w + x] {
                    outside[y * w + x] = true;
                    queue.push_back((x, y));
                }
            }
        }
        // background uses 4-connectivity (dual of 8-connected foreground)
        while let Some((x, y)) = queue.pop_front() {
            let n = [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)];
            for (nx, ny) in n {
                if nx < w && ny < h && plane[ny * w + nx] == 0 && !outside[ny * w + nx] {
                    outside[ny * w + nx] = true;
                    queue.push_back((nx, ny));
                }
            }
        }
        for (v, &o) in out.slice_mut(z).iter_mut().zip(&outside) {
            if !o {
                *v = 1;
            }
        }
    }
    out
}

/// Continuous centroid in voxel units.
pub fn centroid(mask: &Mask) -> Option<[f64; 3]> {
    let mut s = [0.0f64; 3];
    let mut n = 0usize;
    for (x, y, z) in mask.voxels() {
        s[0] += x as f64;
        s[1] += y as f64;
        s[2] += z as f64;
        n += 1;
    }
    (n > 0).then(|| [s[0] / n as f64, s[1] / n as f64, s[2] / n as f64])
}

/// Voxel of `mask` nearest to `p` (voxel units) under spacing-weighted
/// Euclidean distance; ties go to the earlier voxel in scan order.
pub fn nearest_voxel(mask: &Mask, p: [f64; 3], spacing: Spacing) -> Option<(usize, usize, usize)> {
    let mut best: Option<((usize, usize, usize), f64)> = None;
    for (x, y, z) in mask.voxels() {
        let dx = (x as f64 - p[0]) * spacing.col();
        let dy = (y as f64 - p[1]) * spacing.row();
        let dz = (z as f64 - p[2]) * spacing.slice();
        let d = dx * dx + dy * dy + dz * dz;
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some(((x, y, z), d));
        }
    }
    best.map(|(v, _)| v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Extents;

    fn mask2d(rows: &[&str]) -> Mask {
        let h = rows.len();
        let w = rows[0].len();
        Mask::from_fn(Extents::new(h, w, 1), |x, y, _| rows[y].as_bytes()[x] == b'#')
    }

    #[test]
    fn diagonal_voxels_split_under_face_connectivity() {
        let m = mask2d(&["#.", ".#"]);
        assert_eq!(connected_components(&m, Connectivity::C6).count, 2);
        assert_eq!(connected_components(&m, Connectivity::C26).count, 1);
        assert_eq!(connected_components(&m, Connectivity::C4).count, 2);
        assert_eq!(connected_components(&m, Connectivity::C8).count, 1);
    }

    #[test]
    fn empty_and_full_masks() {
        let e = Extents::new(4, 3, 2);
        assert_eq!(connected_components(&Mask::empty(e), Connectivity::C26).count, 0);
        assert_eq!(connected_components(&Mask::full(e), Connectivity::C6).count, 1);
    }

    #[test]
    fn labels_follow_scan_order() {
        let m = mask2d(&["..#", "#..", "..."]);
        let l = connected_components(&m, Connectivity::C4);
        assert_eq!(l.data[2], 1);
        assert_eq!(l.data[3], 2);
    }

    #[test]
    fn offsets_have_expected_counts() {
        assert_eq!(Connectivity::C4.offsets().len(), 4);
        assert_eq!(Connectivity::C8.offsets().len(), 8);
        assert_eq!(Connectivity::C6.offsets().len(), 6);
        assert_eq!(Connectivity::C18.offsets().len(), 18);
        assert_eq!(Connectivity::C26.offsets().len(), 26);
    }

    #[test]
    fn select_largest_orders_by_size_then_label() {
        // sizes [5, 9, 9, 2]
        let data: Vec<u32> = std::iter::repeat_n(1, 5)
            .chain(std::iter::repeat_n(2, 9))
            .chain(std::iter::repeat_n(3, 9))
            .chain(std::iter::repeat_n(4, 2))
            .collect();
        let l = Labels {
            extents: Extents::new(1, data.len(), 1),
            data,
            count: 4,
        };
        assert_eq!(select_largest(&l, 2), vec![2, 3]);
        assert_eq!(select_largest(&l, 10), vec![2, 3, 1, 4]);
        let empty = Labels {
            extents: Extents::new(1, 1, 1),
            data: vec![0],
            count: 0,
        };
        assert!(select_largest(&empty, 3).is_empty());
    }

    #[test]
    fn small_component_threshold_is_physical() {
        let e = Extents::new(40, 40, 1);
        let line = |n: usize| Mask::from_fn(e, |x, y, _| y * 40 + x < n);
        let s = Spacing::iso(1.0);
        assert!(remove_small_components(&line(999), 1000.0, s, Connectivity::C26).is_empty());
        assert_eq!(remove_small_components(&line(1000), 1000.0, s, Connectivity::C26).count(), 1000);
        // 1000 / (0.62 * 0.62 * 7.8) = 333.5 voxels
        let aniso = Spacing([0.62, 0.62, 7.8]);
        assert!(remove_small_components(&line(333), 1000.0, aniso, Connectivity::C26).is_empty());
        assert_eq!(remove_small_components(&line(334), 1000.0, aniso, Connectivity::C26).count(), 334);
        assert!(remove_small_components(&Mask::empty(e), 1000.0, s, Connectivity::C26).is_empty());
    }

    #[test]
    fn hole_filling_cases() {
        let ring = mask2d(&[".....", ".###.", ".#.#.", ".###.", "....."]);
        let disk = mask2d(&[".....", ".###.", ".###.", ".###.", "....."]);
        assert_eq!(fill_holes(&ring), disk);
        assert_eq!(fill_holes(&disk), disk);
        let c_shape = mask2d(&[".....", ".###.", ".#...", ".###.", "....."]);
        assert_eq!(fill_holes(&c_shape), c_shape);
    }

    #[test]
    fn nearest_voxel_prefers_scan_order_on_ties() {
        let m = mask2d(&["#.#"]);
        assert_eq!(nearest_voxel(&m, [1.0, 0.0, 0.0], Spacing::iso(1.0)), Some((0, 0, 0)));
    }
}

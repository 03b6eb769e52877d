//! Scan and mask grids.
//!
//! Voxels are stored slice-major: index `(z * h + y) * w + x`, where `x` runs
//! along the width, `y` along the height and `z` over slices.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Extents {
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl Extents {
    pub fn new(h: usize, w: usize, d: usize) -> Self {
        Self { h, w, d }
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.d
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.w;
        let y = (i / self.w) % self.h;
        let z = i / (self.w * self.h);
        (x, y, z)
    }

    pub fn contains(&self, x: i64, y: i64, z: i64) -> bool {
        x >= 0 && y >= 0 && z >= 0 && (x as usize) < self.w && (y as usize) < self.h && (z as usize) < self.d
    }
}

/// Physical voxel size in millimetres along (height, width, slice).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing(pub [f64; 3]);

impl Spacing {
    pub fn iso(v: f64) -> Self {
        Self([v, v, v])
    }

    pub fn row(&self) -> f64 {
        self.0[0]
    }

    pub fn col(&self) -> f64 {
        self.0[1]
    }

    pub fn slice(&self) -> f64 {
        self.0[2]
    }

    pub fn voxel_volume(&self) -> f64 {
        self.0.iter().product()
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|v| v.is_finite() && *v > 0.0)
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Self::iso(1.0)
    }
}

/// Intensity scan `H × W × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub extents: Extents,
    pub spacing: Spacing,
    pub origin: Option<[f64; 3]>,
    pub metadata: BTreeMap<String, String>,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(extents: Extents, spacing: Spacing, data: Vec<f32>) -> Self {
        assert_eq!(extents.len(), data.len(), "volume payload length");
        Self {
            extents,
            spacing,
            origin: None,
            metadata: BTreeMap::new(),
            data,
        }
    }

    pub fn zeros(extents: Extents, spacing: Spacing) -> Self {
        Self::new(extents, spacing, vec![0.0; extents.len()])
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.extents.index(x, y, z)]
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.extents.slice_len();
        &self.data[z * n..(z + 1) * n]
    }
}

/// Binary grid; every value is 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    pub extents: Extents,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn empty(extents: Extents) -> Self {
        Self {
            extents,
            data: vec![0; extents.len()],
        }
    }

    pub fn full(extents: Extents) -> Self {
        Self {
            extents,
            data: vec![1; extents.len()],
        }
    }

    pub fn from_fn(extents: Extents, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut m = Self::empty(extents);
        for i in 0..extents.len() {
            let (x, y, z) = extents.coords(i);
            m.data[i] = f(x, y, z) as u8;
        }
        m
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.extents.index(x, y, z)] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: bool) {
        let i = self.extents.index(x, y, z);
        self.data[i] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn slice(&self, z: usize) -> &[u8] {
        let n = self.extents.slice_len();
        &self.data[z * n..(z + 1) * n]
    }

    pub fn slice_mut(&mut self, z: usize) -> &mut [u8] {
        let n = self.extents.slice_len();
        &mut self.data[z * n..(z + 1) * n]
    }

    pub fn union_with(&mut self, other: &Mask) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    pub fn union(&self, other: &Mask) -> Mask {
        let mut m = self.clone();
        m.union_with(other);
        m
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.data.iter().zip(&other.data).filter(|(&a, &b)| a != 0 && b != 0).count()
    }

    pub fn xor(&self, other: &Mask) -> Mask {
        Mask {
            extents: self.extents,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a ^ b).collect(),
        }
    }

    /// `self \ other`
    pub fn minus(&self, other: &Mask) -> Mask {
        Mask {
            extents: self.extents,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a & (1 - b)).collect(),
        }
    }

    pub fn contains_mask(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| a >= b)
    }

    pub fn voxels(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| self.extents.coords(i))
    }
}

/// Integer label grid (0 = background).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    pub extents: Extents,
    pub data: Vec<u32>,
    pub count: u32,
}

impl Labels {
    pub fn mask_of(&self, label: u32) -> Mask {
        Mask {
            extents: self.extents,
            data: self.data.iter().map(|&l| (l == label) as u8).collect(),
        }
    }

    /// Voxel counts indexed by label (index 0 = background).
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0usize; self.count as usize + 1];
        for &l in &self.data {
            s[l as usize] += 1;
        }
        s
    }

    pub fn foreground(&self) -> Mask {
        Mask {
            extents: self.extents,
            data: self.data.iter().map(|&l| (l != 0) as u8).collect(),
        }
    }
}

//! Training windows cut from phantoms.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::io::{normalize_percentile, resize_plane, resize_plane_nearest};

use super::augment::{Affine, AugmentConfig};
use super::phantom::{LesionClass, Phantom};

/// Phantom resampled to the model's square input.
#[derive(Debug, Clone)]
pub struct PreparedPhantom {
    pub side: usize,
    pub slices: Vec<Vec<f32>>,
    /// Instance labels per slice (0 = background).
    pub labels: Vec<Vec<u32>>,
    pub classes: Vec<LesionClass>,
}

impl PreparedPhantom {
    pub fn new(p: &Phantom, side: usize) -> Self {
        let e = p.volume.extents;
        let norm = normalize_percentile(&p.volume, 0.5, 99.5);
        let mut slices = Vec::with_capacity(e.d);
        let mut labels = Vec::with_capacity(e.d);
        for z in 0..e.d {
            slices.push(resize_plane(norm.slice(z), e.h, e.w, side, side));
            let n = e.slice_len();
            let lab = &p.instances.data[z * n..(z + 1) * n];
            labels.push(resize_plane_nearest(lab, e.h, e.w, side, side));
        }
        Self {
            side,
            slices,
            labels,
            classes: p.classes.clone(),
        }
    }

    pub fn depth(&self) -> usize {
        self.slices.len()
    }
}

/// `D_train` consecutive slices with instance targets for the prompted lesions.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub side: usize,
    pub slices: Vec<Vec<f32>>,
    /// `[lesion][slice]` binary planes.
    pub prompted: Vec<Vec<Vec<u8>>>,
    /// Class-A union per slice.
    pub semantic: Vec<Vec<u8>>,
}

#[derive(Debug, Clone)]
pub struct SampleConfig {
    pub window: usize,
    pub max_prompted: usize,
    pub p_no_prompt: f64,
    /// Minimum in-window area (pixels) for a lesion to be promptable.
    pub min_area: usize,
}

pub fn make_sample<R: Rng + ?Sized>(
    p: &PreparedPhantom,
    cfg: &SampleConfig,
    aug: &AugmentConfig,
    rng: &mut R,
) -> TrainingSample {
    let side = p.side;
    let window = cfg.window.min(p.depth()).max(1);
    let start = rng.random_range(0..=p.depth() - window);
    let affine = Affine::random(aug, side, rng);
    let slices: Vec<Vec<f32>> = (start..start + window)
        .map(|z| {
            let fill = p.slices[z][0];
            affine.warp_bilinear(&p.slices[z], side, fill)
        })
        .collect();
    let labels: Vec<Vec<u32>> = (start..start + window)
        .map(|z| affine.warp_nearest(&p.labels[z], side))
        .collect();
    let is_a = |l: u32| l != 0 && p.classes[l as usize - 1] == LesionClass::A;
    let semantic: Vec<Vec<u8>> = labels.iter().map(|pl| pl.iter().map(|&l| is_a(l) as u8).collect()).collect();

    let mut area = vec![0usize; p.classes.len() + 1];
    for pl in &labels {
        for &l in pl {
            area[l as usize] += 1;
        }
    }
    let mut visible: Vec<u32> = (1..=p.classes.len() as u32)
        .filter(|&l| is_a(l) && area[l as usize] >= cfg.min_area)
        .collect();
    visible.shuffle(rng);
    let count = if visible.is_empty() || rng.random_bool(cfg.p_no_prompt.clamp(0.0, 1.0)) {
        0
    } else {
        rng.random_range(1..=visible.len().min(cfg.max_prompted.max(1)))
    };
    let prompted = visible[..count]
        .iter()
        .map(|&id| labels.iter().map(|pl| pl.iter().map(|&l| (l == id) as u8).collect()).collect())
        .collect();
    TrainingSample {
        side,
        slices,
        prompted,
        semantic,
    }
}

//! Random in-plane affine augmentation shared by every slice of a window.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub rotation_deg: f64,
    pub shear_deg: f64,
    pub hflip: bool,
    /// Smallest crop side as a fraction of the slice side.
    pub min_crop: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            rotation_deg: 10.0,
            shear_deg: 5.0,
            hflip: true,
            min_crop: 0.8,
        }
    }
}

/// Maps output pixel centres to source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub m: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Affine {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0], [0.0, 1.0]],
            t: [0.0, 0.0],
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0][0] * x + self.m[0][1] * y + self.t[0],
            self.m[1][0] * x + self.m[1][1] * y + self.t[1],
        )
    }

    /// Rotation, shear, flip and crop-then-resize about the slice centre.
    pub fn random<R: Rng + ?Sized>(cfg: &AugmentConfig, side: usize, rng: &mut R) -> Self {
        if !cfg.enabled {
            return Self::identity();
        }
        let sym = |rng: &mut R, a: f64| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
        let rot = sym(rng, cfg.rotation_deg).to_radians();
        let shear = sym(rng, cfg.shear_deg).to_radians().tan();
        let flip = if cfg.hflip && rng.random_bool(0.5) { -1.0 } else { 1.0 };
        let crop = if cfg.min_crop < 1.0 {
            rng.random_range(cfg.min_crop..=1.0)
        } else {
            1.0
        };
        let c = (side as f64 - 1.0) / 2.0;
        let slack = (1.0 - crop) * side as f64 / 2.0;
        let off = [sym(rng, slack), sym(rng, slack)];
        let (cs, sn) = (rot.cos(), rot.sin());
        // source = crop * R * Sh * F * (out - c) + c + off
        let r = [[cs, -sn], [sn, cs]];
        let sh = [[1.0, shear], [0.0, 1.0]];
        let f = [[flip, 0.0], [0.0, 1.0]];
        let mul = |a: [[f64; 2]; 2], b: [[f64; 2]; 2]| {
            let mut o = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    o[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
                }
            }
            o
        };
        let mut m = mul(mul(r, sh), f);
        for row in &mut m {
            for v in row.iter_mut() {
                *v *= crop;
            }
        }
        let t = [
            c + off[0] - (m[0][0] * c + m[0][1] * c),
            c + off[1] - (m[1][0] * c + m[1][1] * c),
        ];
        Self { m, t }
    }

    /// Bilinear warp of a `side × side` plane; outside samples take `fill`.
    pub fn warp_bilinear(&self, plane: &[f32], side: usize, fill: f32) -> Vec<f32> {
        let mut out = vec![fill; side * side];
        let at = |x: i64, y: i64| -> f32 {
            if x < 0 || y < 0 || x >= side as i64 || y >= side as i64 {
                fill
            } else {
                plane[y as usize * side + x as usize]
            }
        };
        for y in 0..side {
            for x in 0..side {
                let (sx, sy) = self.apply(x as f64, y as f64);
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = ((sx - x0) as f32, (sy - y0) as f32);
                let (x0, y0) = (x0 as i64, y0 as i64);
                out[y * side + x] = at(x0, y0) * (1.0 - fx) * (1.0 - fy)
                    + at(x0 + 1, y0) * fx * (1.0 - fy)
                    + at(x0, y0 + 1) * (1.0 - fx) * fy
                    + at(x0 + 1, y0 + 1) * fx * fy;
            }
        }
        out
    }

    /// Nearest-neighbour warp for label planes; outside samples are 0.
    pub fn warp_nearest<V: Copy + Default>(&self, plane: &[V], side: usize) -> Vec<V> {
        let mut out = vec![V::default(); side * side];
        for y in 0..side {
            for x in 0..side {
                let (sx, sy) = self.apply(x as f64, y as f64);
                let (xi, yi) = (sx.round(), sy.round());
                if xi >= 0.0 && yi >= 0.0 && (xi as usize) < side && (yi as usize) < side {
                    out[y * side + x] = plane[yi as usize * side + xi as usize];
                }
            }
        }
        out
    }
}

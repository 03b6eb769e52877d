//! Synthetic scans: bright textured target lesions among mid-intensity distractors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::volume::{Extents, Labels, Mask, Spacing, Volume};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LesionClass {
    /// Segmentation target.
    A,
    /// Distractor.
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassSpec {
    pub count: [usize; 2],
    /// In-plane semi-axis range in voxels.
    pub radius: [f64; 2],
    /// Through-plane semi-axis range in slices.
    pub depth_radius: [f64; 2],
    pub intensity: f64,
    /// Amplitude of the in-lesion texture.
    pub texture: f64,
}

impl Default for ClassSpec {
    fn default() -> Self {
        Self {
            count: [4, 7],
            radius: [4.0, 8.0],
            depth_radius: [1.2, 2.5],
            intensity: 0.85,
            texture: 0.08,
        }
    }
}

impl ClassSpec {
    /// Darker, untextured distractor lesions.
    pub fn distractor() -> Self {
        Self {
            count: [2, 4],
            intensity: 0.55,
            texture: 0.0,
            ..Self::default()
        }
    }
}

/// Fields missing from a `class_b` table fall back to the distractor defaults.
fn distractor_spec<'de, D: serde::Deserializer<'de>>(d: D) -> Result<ClassSpec, D::Error> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Partial {
        count: Option<[usize; 2]>,
        radius: Option<[f64; 2]>,
        depth_radius: Option<[f64; 2]>,
        intensity: Option<f64>,
        texture: Option<f64>,
    }
    let p = Partial::deserialize(d)?;
    let b = ClassSpec::distractor();
    Ok(ClassSpec {
        count: p.count.unwrap_or(b.count),
        radius: p.radius.unwrap_or(b.radius),
        depth_radius: p.depth_radius.unwrap_or(b.depth_radius),
        intensity: p.intensity.unwrap_or(b.intensity),
        texture: p.texture.unwrap_or(b.texture),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    pub class_a: ClassSpec,
    #[serde(deserialize_with = "distractor_spec")]
    pub class_b: ClassSpec,
    pub background: f64,
    pub noise: f64,
    /// Minimum voxel gap between lesions.
    pub gap: usize,
    pub max_retries: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            extents: [96, 96, 8],
            spacing: [2.0, 2.0, 5.0],
            class_a: ClassSpec::default(),
            class_b: ClassSpec::distractor(),
            background: 0.25,
            noise: 0.03,
            gap: 2,
            max_retries: 500,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.extents.iter().any(|&v| v == 0) {
            return bad("phantom extents must be positive");
        }
        if self.spacing.iter().any(|&v| !(v > 0.0)) {
            return bad("phantom spacing must be positive");
        }
        for c in [&self.class_a, &self.class_b] {
            if c.count[0] > c.count[1] || c.radius[0] > c.radius[1] || c.depth_radius[0] > c.depth_radius[1] {
                return bad("class ranges must be ordered");
            }
            if c.radius[0] <= 0.0 || c.depth_radius[0] <= 0.0 {
                return bad("radii must be positive");
            }
        }
        if self.class_a.intensity == self.class_b.intensity && self.class_a.texture == self.class_b.texture {
            return bad("classes must differ in appearance");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: Volume,
    /// Every lesion, labelled `1..=classes.len()`.
    pub instances: Labels,
    pub classes: Vec<LesionClass>,
}

impl Phantom {
    /// Union of lesions of one class.
    pub fn class_mask(&self, class: LesionClass) -> Mask {
        Mask {
            extents: self.instances.extents,
            data: self
                .instances
                .data
                .iter()
                .map(|&l| (l != 0 && self.classes[l as usize - 1] == class) as u8)
                .collect(),
        }
    }

    /// Segmentation ground truth (class A).
    pub fn target(&self) -> Mask {
        self.class_mask(LesionClass::A)
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

pub fn generate_phantom(cfg: &PhantomConfig, seed: u64) -> Result<Phantom, TrainError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [h, w, d] = cfg.extents;
    let e = Extents::new(h, w, d);
    let mut labels = vec![0u32; e.len()];
    // dilated occupancy used for the gap check
    let mut blocked = vec![false; e.len()];
    let mut classes = Vec::new();
    let mut textures: Vec<(f64, f64, f64, f64)> = Vec::new();

    let plan: Vec<LesionClass> = {
        let na = rng.random_range(cfg.class_a.count[0]..=cfg.class_a.count[1]);
        let nb = rng.random_range(cfg.class_b.count[0]..=cfg.class_b.count[1]);
        std::iter::repeat_n(LesionClass::A, na)
            .chain(std::iter::repeat_n(LesionClass::B, nb))
            .collect()
    };
    for class in plan {
        let spec = match class {
            LesionClass::A => &cfg.class_a,
            LesionClass::B => &cfg.class_b,
        };
        let mut placed = false;
        for _ in 0..cfg.max_retries {
            let rx = uniform(&mut rng, spec.radius);
            let ry = uniform(&mut rng, spec.radius);
            let rz = uniform(&mut rng, spec.depth_radius);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let reach = rx.max(ry);
            let lo = |r: f64| r.ceil();
            let hi = |n: usize, r: f64| n as f64 - 1.0 - r.ceil();
            if hi(w, reach) < lo(reach) || hi(h, reach) < lo(reach) {
                continue;
            }
            let cx = rng.random_range(lo(reach)..=hi(w, reach));
            let cy = rng.random_range(lo(reach)..=hi(h, reach));
            let (zlo, zhi) = ((rz - 1.0).max(0.0), (d as f64 - rz).max(0.0));
            let cz = if zhi > zlo {
                rng.random_range(zlo..zhi)
            } else {
                (d as f64 - 1.0) / 2.0
            };
            let (ct, st) = (theta.cos(), theta.sin());
            let inside = |x: usize, y: usize, z: usize| {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let u = (dx * ct + dy * st) / rx;
                let v = (-dx * st + dy * ct) / ry;
                let t = (z as f64 - cz) / rz;
                u * u + v * v + t * t <= 1.0
            };
            let voxels: Vec<usize> = (0..e.len())
                .filter(|&i| {
                    let (x, y, z) = e.coords(i);
                    inside(x, y, z)
                })
                .collect();
            if voxels.is_empty() || voxels.iter().any(|&i| blocked[i]) {
                continue;
            }
            classes.push(class);
            let id = classes.len() as u32;
            let g = cfg.gap as i64;
            for &i in &voxels {
                labels[i] = id;
                let (x, y, z) = e.coords(i);
                for dz in -g..=g {
                    for dy in -g..=g {
                        for dx in -g..=g {
                            let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                            if e.contains(nx, ny, nz) {
                                blocked[e.index(nx as usize, ny as usize, nz as usize)] = true;
                            }
                        }
                    }
                }
            }
            textures.push((
                rng.random_range(0.6..1.2),
                rng.random_range(0.6..1.2),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            ));
            placed = true;
            break;
        }
        if !placed {
            return Err(TrainError::Infeasible(format!(
                "could not place a class {class:?} lesion after {} attempts",
                cfg.max_retries
            )));
        }
    }

    // smooth background: low-frequency field plus white noise
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite noise");
    let f = [
        rng.random_range(0.5..2.0),
        rng.random_range(0.5..2.0),
        rng.random_range(0.0..std::f64::consts::TAU),
    ];
    let mut data = vec![0f32; e.len()];
    for (i, v) in data.iter_mut().enumerate() {
        let (x, y, z) = e.coords(i);
        let (u, t) = (x as f64 / w as f64, y as f64 / h as f64);
        let mut val = cfg.background
            + 0.05 * (std::f64::consts::TAU * f[0] * u + f[2]).sin()
            + 0.04 * (std::f64::consts::TAU * f[1] * t).cos()
            + 0.01 * z as f64 / d.max(1) as f64;
        let l = labels[i];
        if l != 0 {
            let spec = match classes[l as usize - 1] {
                LesionClass::A => &cfg.class_a,
                LesionClass::B => &cfg.class_b,
            };
            let (fx, fy, px, py) = textures[l as usize - 1];
            val = spec.intensity + spec.texture * ((fx * x as f64 + px).sin() * (fy * y as f64 + py).cos());
        }
        *v = (val + noise.sample(&mut rng)) as f32;
    }
    let mut volume = Volume::new(e, Spacing(cfg.spacing), data);
    volume.metadata.insert("phantom_seed".into(), seed.to_string());
    let count = classes.len() as u32;
    Ok(Phantom {
        volume,
        instances: Labels {
            extents: e,
            data: labels,
            count,
        },
        classes,
    })
}

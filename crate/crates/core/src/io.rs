//! Native volume/mask files and the preprocessing chain.
//!
//! A scan `foo` is stored as `foo.raw` (little-endian payload, slice-major)
//! next to `foo.json` (shape, spacing, dtype, format version).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::tensor::kernels;
use crate::volume::{Extents, Mask, Spacing, Volume};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: payload is {actual} bytes, sidecar implies {expected}")]
    PayloadSize { path: PathBuf, expected: usize, actual: usize },
    #[error("{path}: mask value {value} at voxel {index} is not 0 or 1")]
    NonBinaryMask { path: PathBuf, value: u8, index: usize },
    #[error("{path}: {reason}")]
    Sidecar { path: PathBuf, reason: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleType {
    F32,
    U8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub version: u32,
    pub dtype: SampleType,
    /// `[h, w, d]`
    pub shape: [usize; 3],
    /// Millimetres along `[h, w, d]`.
    pub spacing: [f64; 3],
    pub order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<[f64; 3]>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

/// `foo`, `foo.raw` and `foo.json` all name the same stored scan.
pub fn base_path(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("raw") | Some("json") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn with_suffix(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn write_pair(base: &Path, sidecar: &Sidecar, payload: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = base.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(with_suffix(base, "raw"), payload)?;
    let json = serde_json::to_vec_pretty(sidecar).map_err(|e| IoError::Sidecar {
        path: with_suffix(base, "json"),
        reason: e.to_string(),
    })?;
    fs::write(with_suffix(base, "json"), json)?;
    Ok(())
}

fn read_pair(path: &Path, want: SampleType) -> Result<(Sidecar, Vec<u8>, PathBuf), IoError> {
    let base = base_path(path);
    let json_path = with_suffix(&base, "json");
    let raw_path = with_suffix(&base, "raw");
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(&json_path)?).map_err(|e| IoError::Sidecar {
        path: json_path.clone(),
        reason: e.to_string(),
    })?;
    if sidecar.version != FORMAT_VERSION {
        return Err(IoError::Sidecar {
            path: json_path,
            reason: format!("unsupported version {}", sidecar.version),
        });
    }
    if sidecar.dtype != want {
        return Err(IoError::Sidecar {
            path: json_path,
            reason: format!("expected dtype {want:?}, found {:?}", sidecar.dtype),
        });
    }
    if !Spacing(sidecar.spacing).is_valid() || sidecar.shape.iter().any(|&s| s == 0) {
        return Err(IoError::Sidecar {
            path: json_path,
            reason: "shape and spacing must be positive".into(),
        });
    }
    let payload = fs::read(&raw_path)?;
    let elem = match want {
        SampleType::F32 => 4,
        SampleType::U8 => 1,
    };
    let expected = sidecar.shape.iter().product::<usize>() * elem;
    if payload.len() != expected {
        return Err(IoError::PayloadSize {
            path: raw_path,
            expected,
            actual: payload.len(),
        });
    }
    Ok((sidecar, payload, raw_path))
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<(), IoError> {
    let sidecar = Sidecar {
        version: FORMAT_VERSION,
        dtype: SampleType::F32,
        shape: [v.extents.h, v.extents.w, v.extents.d],
        spacing: v.spacing.0,
        order: "DHW".into(),
        origin: v.origin,
        metadata: v.metadata.clone(),
    };
    let payload: Vec<u8> = v.data.iter().flat_map(|x| x.to_le_bytes()).collect();
    write_pair(&base_path(path), &sidecar, &payload)
}

pub fn load_volume(path: &Path) -> Result<Volume, IoError> {
    let (sc, payload, _) = read_pair(path, SampleType::F32)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Volume {
        extents: Extents::new(sc.shape[0], sc.shape[1], sc.shape[2]),
        spacing: Spacing(sc.spacing),
        origin: sc.origin,
        metadata: sc.metadata,
        data,
    })
}

pub fn save_mask(m: &Mask, spacing: Spacing, path: &Path) -> Result<(), IoError> {
    let sidecar = Sidecar {
        version: FORMAT_VERSION,
        dtype: SampleType::U8,
        shape: [m.extents.h, m.extents.w, m.extents.d],
        spacing: spacing.0,
        order: "DHW".into(),
        origin: None,
        metadata: BTreeMap::new(),
    };
    write_pair(&base_path(path), &sidecar, &m.data)
}

pub fn load_mask(path: &Path) -> Result<(Mask, Spacing), IoError> {
    let (sc, payload, raw_path) = read_pair(path, SampleType::U8)?;
    if let Some((index, &value)) = payload.iter().enumerate().find(|(_, &v)| v > 1) {
        return Err(IoError::NonBinaryMask {
            path: raw_path,
            value,
            index,
        });
    }
    Ok((
        Mask {
            extents: Extents::new(sc.shape[0], sc.shape[1], sc.shape[2]),
            data: payload,
        },
        Spacing(sc.spacing),
    ))
}

/// Decodes a volume from an in-memory sidecar + payload (service uploads).
pub fn volume_from_parts(sidecar: &Sidecar, payload: &[u8]) -> Result<Volume, IoError> {
    let expected = sidecar.shape.iter().product::<usize>() * 4;
    if sidecar.dtype != SampleType::F32 {
        return Err(IoError::Invalid("volume payload must be f32".into()));
    }
    if payload.len() != expected {
        return Err(IoError::PayloadSize {
            path: PathBuf::from("<upload>"),
            expected,
            actual: payload.len(),
        });
    }
    if !Spacing(sidecar.spacing).is_valid() || sidecar.shape.iter().any(|&s| s == 0) {
        return Err(IoError::Invalid("shape and spacing must be positive".into()));
    }
    Ok(Volume {
        extents: Extents::new(sidecar.shape[0], sidecar.shape[1], sidecar.shape[2]),
        spacing: Spacing(sidecar.spacing),
        origin: sidecar.origin,
        metadata: sidecar.metadata.clone(),
        data: payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    })
}

// ── preprocessing ────────────────────────────────────────────────────

fn resampled_extent(n: usize, from: f64, to: f64) -> usize {
    (n as f64 * from / to).round() as usize
}

/// Source coordinate of output index `o` (voxel centres aligned).
fn source_coord(o: usize, from: f64, to: f64, n: usize) -> f64 {
    ((o as f64 + 0.5) * to / from - 0.5).clamp(0.0, (n - 1) as f64)
}

fn resampled_extents(e: Extents, from: Spacing, to: Spacing) -> Result<Extents, IoError> {
    if !to.is_valid() {
        return Err(IoError::Invalid(format!("target spacing {:?} must be positive", to.0)));
    }
    let out = Extents::new(
        resampled_extent(e.h, from.row(), to.row()),
        resampled_extent(e.w, from.col(), to.col()),
        resampled_extent(e.d, from.slice(), to.slice()),
    );
    if out.h == 0 || out.w == 0 || out.d == 0 {
        return Err(IoError::Invalid(format!("resampling to {:?} gives degenerate extents {out:?}", to.0)));
    }
    Ok(out)
}

/// Trilinear resampling to a new voxel spacing.
pub fn resample_spacing(v: &Volume, target: Spacing) -> Result<Volume, IoError> {
    let e = v.extents;
    let out = resampled_extents(e, v.spacing, target)?;
    let taps = |n_out: usize, from: f64, to: f64, n: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let p = source_coord(o, from, to, n);
                let i0 = p.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, p - i0 as f64)
            })
            .collect()
    };
    let ty = taps(out.h, v.spacing.row(), target.row(), e.h);
    let tx = taps(out.w, v.spacing.col(), target.col(), e.w);
    let tz = taps(out.d, v.spacing.slice(), target.slice(), e.d);
    let mut data = vec![0f32; out.len()];
    for (z, &(z0, z1, fz)) in tz.iter().enumerate() {
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let s = |xx, yy, zz| v.get(xx, yy, zz) as f64;
                let c00 = s(x0, y0, z0) * (1.0 - fx) + s(x1, y0, z0) * fx;
                let c10 = s(x0, y1, z0) * (1.0 - fx) + s(x1, y1, z0) * fx;
                let c01 = s(x0, y0, z1) * (1.0 - fx) + s(x1, y0, z1) * fx;
                let c11 = s(x0, y1, z1) * (1.0 - fx) + s(x1, y1, z1) * fx;
                let c0 = c00 * (1.0 - fy) + c10 * fy;
                let c1 = c01 * (1.0 - fy) + c11 * fy;
                data[out.index(x, y, z)] = (c0 * (1.0 - fz) + c1 * fz) as f32;
            }
        }
    }
    Ok(Volume {
        extents: out,
        spacing: target,
        origin: v.origin,
        metadata: v.metadata.clone(),
        data,
    })
}

/// Nearest-neighbour resampling of a mask.
pub fn resample_mask(m: &Mask, spacing: Spacing, target: Spacing) -> Result<Mask, IoError> {
    let e = m.extents;
    let out = resampled_extents(e, spacing, target)?;
    let near = |o, from, to, n| source_coord(o, from, to, n).round() as usize;
    Ok(Mask::from_fn(out, |x, y, z| {
        m.get(
            near(x, spacing.col(), target.col(), e.w),
            near(y, spacing.row(), target.row(), e.h),
            near(z, spacing.slice(), target.slice(), e.d),
        )
    }))
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(sorted: &[f32], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let f = pos - lo as f64;
    sorted[lo] as f64 * (1.0 - f) + sorted[hi] as f64 * f
}

/// Clips to the `[p_low, p_high]` percentiles and rescales to `[0, 1]`.
pub fn normalize_percentile(v: &Volume, p_low: f64, p_high: f64) -> Volume {
    let mut sorted = v.data.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let lo = percentile(&sorted, p_low);
    let hi = percentile(&sorted, p_high);
    let data = if hi <= lo {
        vec![0.0; v.data.len()]
    } else {
        v.data
            .iter()
            .map(|&x| ((x as f64).clamp(lo, hi) - lo) / (hi - lo))
            .map(|x| x as f32)
            .collect()
    };
    Volume { data, ..v.clone() }
}

/// Splits into slices and bilinearly resizes each to `size × size`.
pub fn extract_and_resize(v: &Volume, size: usize) -> Vec<Vec<f32>> {
    let e = v.extents;
    (0..e.d)
        .map(|z| resize_plane(v.slice(z), e.h, e.w, size, size))
        .collect()
}

pub fn resize_plane(plane: &[f32], h: usize, w: usize, ho: usize, wo: usize) -> Vec<f32> {
    if h == ho && w == wo {
        return plane.to_vec();
    }
    kernels::bilinear(plane, 1, h, w, ho, wo)
}

/// Nearest-neighbour plane resize for masks and label maps.
pub fn resize_plane_nearest<V: Copy + Default>(plane: &[V], h: usize, w: usize, ho: usize, wo: usize) -> Vec<V> {
    let mut out = vec![V::default(); ho * wo];
    for y in 0..ho {
        let sy = (((y as f64 + 0.5) * h as f64 / ho as f64) as usize).min(h - 1);
        for x in 0..wo {
            let sx = (((x as f64 + 0.5) * w as f64 / wo as f64) as usize).min(w - 1);
            out[y * wo + x] = plane[sy * w + sx];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vol(e: Extents, f: impl Fn(usize, usize, usize) -> f32) -> Volume {
        let mut v = Volume::zeros(e, Spacing([0.62, 0.62, 7.8]));
        for i in 0..e.len() {
            let (x, y, z) = e.coords(i);
            v.data[i] = f(x, y, z);
        }
        v
    }

    #[test]
    fn save_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut v = vol(Extents::new(5, 4, 3), |_, _, _| 0.0);
        for x in v.data.iter_mut() {
            *x = rng.random::<f32>() * 1e3 - 17.0;
        }
        v.metadata.insert("series".into(), "t2w".into());
        let p = dir.path().join("scan");
        save_volume(&v, &p).unwrap();
        let back = load_volume(&dir.path().join("scan.json")).unwrap();
        assert_eq!(v, back);
        assert!(v.data.iter().zip(&back.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn truncated_payload_reports_both_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let v = vol(Extents::new(4, 4, 2), |x, _, _| x as f32);
        let p = dir.path().join("scan");
        save_volume(&v, &p).unwrap();
        let raw = dir.path().join("scan.raw");
        let bytes = fs::read(&raw).unwrap();
        fs::write(&raw, &bytes[..bytes.len() - 6]).unwrap();
        match load_volume(&p) {
            Err(IoError::PayloadSize { expected, actual, .. }) => {
                assert_eq!(expected, 128);
                assert_eq!(actual, 122);
            }
            other => panic!("unexpected {other:?}"),
        }
        let msg = load_volume(&p).unwrap_err().to_string();
        assert!(msg.contains("128") && msg.contains("122"), "{msg}");
    }

    #[test]
    fn non_binary_mask_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let e = Extents::new(2, 2, 1);
        let mut m = Mask::empty(e);
        m.data[1] = 1;
        let p = dir.path().join("gt");
        save_mask(&m, Spacing::iso(1.0), &p).unwrap();
        assert_eq!(load_mask(&p).unwrap().0, m);
        fs::write(dir.path().join("gt.raw"), [0u8, 1, 2, 0]).unwrap();
        assert!(matches!(load_mask(&p), Err(IoError::NonBinaryMask { value: 2, index: 2, .. })));
    }

    #[test]
    fn resample_identity_and_halving() {
        let e = Extents::new(6, 5, 4);
        let v = vol(e, |x, y, z| (x * 3 + y * 7 + z * 11) as f32);
        let same = resample_spacing(&v, v.spacing).unwrap();
        assert_eq!(same.extents, e);
        assert_eq!(same.data, v.data);
        let half = resample_spacing(&v, Spacing([0.31, 0.31, 7.8])).unwrap();
        assert_eq!(half.extents, Extents::new(12, 10, 4));
    }

    #[test]
    fn resample_constant_stays_constant_and_rejects_degenerate() {
        let v = vol(Extents::new(7, 9, 3), |_, _, _| 4.25);
        let r = resample_spacing(&v, Spacing([1.0, 0.4, 3.0])).unwrap();
        assert!(r.data.iter().all(|&x| (x - 4.25).abs() < 1e-6));
        assert!(resample_spacing(&v, Spacing([1000.0, 1.0, 1.0])).is_err());
        assert!(resample_spacing(&v, Spacing([0.0, 1.0, 1.0])).is_err());
    }

    #[test]
    fn mask_resampling_stays_binary() {
        let e = Extents::new(8, 8, 3);
        let m = Mask::from_fn(e, |x, y, _| x > 2 && y < 5);
        let r = resample_mask(&m, Spacing([1.0, 1.0, 2.0]), Spacing([0.7, 1.3, 1.0])).unwrap();
        assert!(r.data.iter().all(|&v| v <= 1));
        assert!(r.count() > 0);
    }

    #[test]
    fn percentile_normalization() {
        let e = Extents::new(1, 1001, 1);
        let v = vol(e, |x, _, _| x as f32);
        let n = normalize_percentile(&v, 0.5, 99.5);
        // values 0..=1000: q(0.5) = 5, q(99.5) = 995
        let mut sorted = v.data.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        assert!((percentile(&sorted, 0.5) - 5.0).abs() < 1e-9);
        assert!((percentile(&sorted, 99.5) - 995.0).abs() < 1e-9);
        for (x, y) in v.data.iter().zip(&n.data) {
            let expect = ((*x as f64).clamp(5.0, 995.0) - 5.0) / 990.0;
            assert!((*y as f64 - expect).abs() < 1e-6);
        }
        assert!(n.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let c = normalize_percentile(&vol(e, |_, _, _| 3.0), 0.5, 99.5);
        assert!(c.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn extract_and_resize_slices() {
        let e = Extents::new(4, 4, 8);
        let checker = vol(e, |x, y, _| ((x + y) % 2) as f32);
        let s = extract_and_resize(&checker, 4);
        assert_eq!(s.len(), 8);
        assert_eq!(s[3], checker.slice(3).to_vec());
        let down = extract_and_resize(&checker, 2);
        for plane in down {
            assert!(plane.iter().all(|&v| (v - 0.5).abs() < 1e-6));
        }
    }
}

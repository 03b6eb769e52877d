//! Python bindings: volumes, models, interactive sessions, metrics and RLE.
//!
//! Masks cross the boundary as flat `bytes` of 0/1 in slice-major order
//! (`x` fastest, then `y`, then slice), with the shape passed as `(h, w, d)`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::sync::Arc;

use mois_core::click::Click;
use mois_core::evaluation::{self, run_lesionwise_eval, Connectivity, EvalConfig};
use mois_core::inference::{Merge, PostprocConfig, PreparedVolume, Session as CoreSession, SessionEvaluator};
use mois_core::model::{Model as CoreModel, ModelConfig};
use mois_core::rle::RleWire;
use mois_core::snapshot::{read_snapshot, write_snapshot};
use mois_core::training::{self, LesionClass, PhantomConfig, TrainConfig, TrainOutput};
use mois_core::volume::{Extents, Mask, Spacing, Volume as CoreVolume};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

create_exception!(mois, MoisError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    MoisError::new_err(e.to_string())
}

fn extents(shape: (usize, usize, usize)) -> Extents {
    Extents::new(shape.0, shape.1, shape.2)
}

fn mask_from(data: &[u8], shape: (usize, usize, usize)) -> PyResult<Mask> {
    let e = extents(shape);
    if data.len() != e.len() {
        return Err(PyValueError::new_err(format!("mask has {} bytes, shape implies {}", data.len(), e.len())));
    }
    if let Some(v) = data.iter().find(|&&v| v > 1) {
        return Err(PyValueError::new_err(format!("mask value {v} is not 0 or 1")));
    }
    Ok(Mask {
        extents: e,
        data: data.to_vec(),
    })
}

fn bytes<'py>(py: Python<'py>, m: &Mask) -> Bound<'py, PyBytes> {
    PyBytes::new(py, &m.data)
}

fn merge_from(name: &str) -> PyResult<Merge> {
    match name {
        "union" => Ok(Merge::Union),
        "semantic_only" => Ok(Merge::SemanticOnly),
        "instance_only" => Ok(Merge::InstanceOnly),
        _ => Err(PyValueError::new_err(format!("unknown merge {name:?}"))),
    }
}

#[pyclass(module = "mois", from_py_object)]
#[derive(Clone)]
pub struct Volume {
    inner: Arc<CoreVolume>,
}

#[pymethods]
impl Volume {
    #[new]
    #[pyo3(signature = (data, shape, spacing = (1.0, 1.0, 1.0)))]
    fn new(data: Vec<f32>, shape: (usize, usize, usize), spacing: (f64, f64, f64)) -> PyResult<Self> {
        let e = extents(shape);
        if data.len() != e.len() || e.is_empty() {
            return Err(PyValueError::new_err(format!("{} values do not fill shape {shape:?}", data.len())));
        }
        let sp = Spacing([spacing.0, spacing.1, spacing.2]);
        if !sp.is_valid() {
            return Err(PyValueError::new_err("spacing must be positive"));
        }
        Ok(Self {
            inner: Arc::new(CoreVolume::new(e, sp, data)),
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let v = mois_core::io::load_volume(path.as_ref()).map_err(err)?;
        Ok(Self { inner: Arc::new(v) })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        mois_core::io::save_volume(&self.inner, path.as_ref()).map_err(err)
    }

    /// `(h, w, d)`
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let e = self.inner.extents;
        (e.h, e.w, e.d)
    }

    #[getter]
    fn spacing(&self) -> (f64, f64, f64) {
        let s = self.inner.spacing.0;
        (s[0], s[1], s[2])
    }

    fn data(&self) -> Vec<f32> {
        self.inner.data.clone()
    }
}

#[pyclass(module = "mois")]
pub struct Model {
    inner: Arc<CoreModel>,
}

#[pymethods]
impl Model {
    /// Fresh weights; `config` is a TOML table of model fields, `compact` selects the small preset.
    #[new]
    #[pyo3(signature = (seed = 0, config = None, compact = false))]
    fn new(seed: u64, config: Option<&str>, compact: bool) -> PyResult<Self> {
        let cfg = match config {
            Some(t) => toml::from_str::<ModelConfig>(t).map_err(err)?,
            None if compact => ModelConfig::compact(),
            None => ModelConfig::default(),
        };
        Ok(Self {
            inner: Arc::new(CoreModel::new(cfg, seed).map_err(err)?),
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let f = File::open(path).map_err(err)?;
        let m = CoreModel::load(&mut BufReader::new(f)).map_err(err)?;
        Ok(Self { inner: Arc::new(m) })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let f = File::create(path).map_err(err)?;
        self.inner.save(&mut BufWriter::new(f)).map_err(err)
    }

    /// Model config as JSON.
    #[getter]
    fn config(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.config).map_err(err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params.iter().map(|(_, _, t)| t.len()).sum()
    }
}

#[pyclass(module = "mois")]
pub struct Session {
    inner: CoreSession,
}

#[pymethods]
impl Session {
    #[new]
    fn new(py: Python<'_>, model: &Model, volume: &Volume) -> PyResult<Self> {
        let (m, v) = (Arc::clone(&model.inner), Arc::clone(&volume.inner));
        let inner = py.detach(|| CoreSession::new(m, v)).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn revision(&self) -> u64 {
        self.inner.revision()
    }

    #[getter]
    fn num_lesions(&self) -> usize {
        self.inner.lesions().len()
    }

    fn add_lesion(&mut self) -> usize {
        self.inner.add_lesion()
    }

    /// Returns `(slice_mask_bytes, revision)`; the slice mask is `h * w` bytes.
    #[pyo3(signature = (lesion, x, y, slice, positive = true))]
    fn click<'py>(&mut self, py: Python<'py>, lesion: usize, x: usize, y: usize, slice: usize, positive: bool) -> PyResult<(Bound<'py, PyBytes>, u64)> {
        let c = if positive {
            Click::positive(x, y, slice)
        } else {
            Click::negative(x, y, slice)
        };
        let r = self.inner.apply_click(lesion, c).map_err(err)?;
        Ok((PyBytes::new(py, &r.mask), r.revision))
    }

    fn propagate<'py>(&mut self, py: Python<'py>, lesion: usize) -> PyResult<Bound<'py, PyBytes>> {
        let mv = self.inner.propagate_memory(lesion).map_err(err)?;
        Ok(bytes(py, &mv.mask))
    }

    fn propagate_exemplars<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let mv = self.inner.propagate_exemplars().map_err(err)?;
        Ok(bytes(py, &mv.mask))
    }

    /// `kind` is `instance`, `semantic` or `final`.
    #[pyo3(signature = (kind = "final"))]
    fn mask<'py>(&self, py: Python<'py>, kind: &str) -> PyResult<Bound<'py, PyBytes>> {
        let m = match kind {
            "instance" => self.inner.instance_union(),
            "semantic" => self.inner.raw_final(Merge::SemanticOnly),
            "final" => self.inner.final_mask(&PostprocConfig::default()).mask,
            _ => return Err(PyValueError::new_err(format!("unknown mask kind {kind:?}"))),
        };
        Ok(bytes(py, &m))
    }

    /// One dict per bank entry: lesion, slice, prompted, recency_rank.
    fn exemplars<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let bank = &self.inner.exemplars;
        bank.entries()
            .iter()
            .map(|e| {
                let d = PyDict::new(py);
                d.set_item("lesion", e.lesion)?;
                d.set_item("slice", e.slice)?;
                d.set_item("prompted", e.prompted)?;
                d.set_item("recency_rank", bank.recency_rank(e))?;
                Ok(d)
            })
            .collect()
    }

    fn save_snapshot(&self, path: &str) -> PyResult<()> {
        let f = File::create(path).map_err(err)?;
        write_snapshot(&self.inner, &mut BufWriter::new(f)).map_err(err)
    }

    #[staticmethod]
    fn load_snapshot(py: Python<'_>, model: &Model, volume: &Volume, path: &str) -> PyResult<Self> {
        let (m, v) = (Arc::clone(&model.inner), Arc::clone(&volume.inner));
        let prepared = Arc::new(py.detach(|| PreparedVolume::new(&m, v)).map_err(err)?);
        let f = File::open(path).map_err(err)?;
        let inner = read_snapshot(m, prepared, &mut BufReader::new(f)).map_err(err)?;
        Ok(Self { inner })
    }
}

/// Returns `(volume, class_a_mask_bytes, class_b_mask_bytes)`.
#[pyfunction]
#[pyo3(signature = (seed, config = None))]
fn generate_phantom<'py>(py: Python<'py>, seed: u64, config: Option<&str>) -> PyResult<(Volume, Bound<'py, PyBytes>, Bound<'py, PyBytes>)> {
    let cfg: PhantomConfig = match config {
        Some(t) => toml::from_str(t).map_err(err)?,
        None => PhantomConfig::default(),
    };
    let p = training::generate_phantom(&cfg, seed).map_err(err)?;
    let (a, b) = (p.target(), p.class_mask(LesionClass::B));
    Ok((Volume { inner: Arc::new(p.volume) }, bytes(py, &a), bytes(py, &b)))
}

#[pyfunction]
fn dsc(pred: &[u8], gt: &[u8], shape: (usize, usize, usize)) -> PyResult<f64> {
    evaluation::dsc(&mask_from(pred, shape)?, &mask_from(gt, shape)?).map_err(err)
}

/// Lesion detection match as JSON (`f1`, `tp`, `fp`, `fn`, ...).
#[pyfunction]
#[pyo3(signature = (pred, gt, shape, iou_threshold = 0.1, connectivity = 26))]
fn lesion_f1(pred: &[u8], gt: &[u8], shape: (usize, usize, usize), iou_threshold: f64, connectivity: u32) -> PyResult<String> {
    let conn = Connectivity::from_count(connectivity).ok_or_else(|| PyValueError::new_err("connectivity must be 4, 8, 6, 18 or 26"))?;
    let m = evaluation::lesion_f1(&mask_from(pred, shape)?, &mask_from(gt, shape)?, iou_threshold, conn).map_err(err)?;
    serde_json::to_string(&m).map_err(err)
}

/// Canonical RLE envelope (JSON) of a mask.
#[pyfunction]
#[pyo3(signature = (mask, shape, revision = 0))]
fn rle_encode(mask: &[u8], shape: (usize, usize, usize), revision: u64) -> PyResult<String> {
    serde_json::to_string(&RleWire::from_mask(&mask_from(mask, shape)?, revision)).map_err(err)
}

#[pyfunction]
fn rle_decode<'py>(py: Python<'py>, envelope: &str) -> PyResult<Bound<'py, PyBytes>> {
    let w: RleWire = serde_json::from_str(envelope).map_err(err)?;
    Ok(bytes(py, &w.to_mask().map_err(err)?))
}

/// Lesion-wise interactive evaluation; returns the metrics report as JSON.
#[pyfunction]
#[pyo3(signature = (model, volume, gt, l_chosen = 3, c_chosen = 1, merge = "union"))]
fn evaluate(py: Python<'_>, model: &Model, volume: &Volume, gt: &[u8], l_chosen: usize, c_chosen: usize, merge: &str) -> PyResult<String> {
    let e = volume.inner.extents;
    let gt = mask_from(gt, (e.h, e.w, e.d))?;
    let merge = merge_from(merge)?;
    let cfg = EvalConfig {
        l_chosen,
        c_chosen,
        ..EvalConfig::default()
    };
    let (m, v) = (Arc::clone(&model.inner), Arc::clone(&volume.inner));
    let run = py
        .detach(|| -> Result<_, String> {
            let prepared = Arc::new(PreparedVolume::new(&m, Arc::clone(&v)).map_err(|e| e.to_string())?);
            run_lesionwise_eval(
                |_| Ok(SessionEvaluator::new(CoreSession::with_prepared(Arc::clone(&m), Arc::clone(&prepared)), merge)),
                &v,
                &gt,
                &cfg,
            )
            .map_err(|e| e.to_string())
        })
        .map_err(err)?;
    serde_json::to_string(&run.report).map_err(err)
}

/// Trains from a TOML config; returns `(model, epoch_log_json)`.
#[pyfunction]
#[pyo3(signature = (config = None, out_dir = None))]
fn train(py: Python<'_>, config: Option<&str>, out_dir: Option<&str>) -> PyResult<(Model, String)> {
    let cfg = match config {
        Some(t) => TrainConfig::from_toml(t).map_err(err)?,
        None => TrainConfig::default(),
    };
    let out = out_dir.map(|d| TrainOutput { dir: d.into() });
    let outcome = py.detach(|| training::train(&cfg, out.as_ref(), |_| {})).map_err(err)?;
    let log = serde_json::to_string(&outcome.log).map_err(err)?;
    Ok((
        Model {
            inner: Arc::new(outcome.model),
        },
        log,
    ))
}

#[pymodule]
fn mois(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MoisError", m.py().get_type::<MoisError>())?;
    m.add_class::<Volume>()?;
    m.add_class::<Model>()?;
    m.add_class::<Session>()?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(dsc, m)?)?;
    m.add_function(wrap_pyfunction!(lesion_f1, m)?)?;
    m.add_function(wrap_pyfunction!(rle_encode, m)?)?;
    m.add_function(wrap_pyfunction!(rle_decode, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}

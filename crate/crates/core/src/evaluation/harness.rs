use serde::{Deserialize, Serialize};

use crate::click::Click;
use crate::volume::{Mask, Volume};

use super::clicks::{simulate_correction_click, simulate_initial_click};
use super::components::{connected_components, remove_small_components, select_largest, Connectivity};
use super::metrics::{dsc, lesion_f1, lesionwise_dsc, MatchRow};
use super::EvalError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub l_chosen: usize,
    pub c_chosen: usize,
    pub v_thresh_mm3: f64,
    pub iou_threshold: f64,
    pub connectivity: Connectivity,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            l_chosen: 20,
            c_chosen: 3,
            v_thresh_mm3: 1000.0,
            iou_threshold: 0.1,
            connectivity: Connectivity::C26,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.l_chosen == 0 || self.c_chosen == 0 {
            return Err(EvalError::Config("l_chosen and c_chosen must be positive".into()));
        }
        if !(self.v_thresh_mm3 >= 0.0) {
            return Err(EvalError::Config("v_thresh_mm3 must be non-negative".into()));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(EvalError::Config("iou_threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// A model driven by simulated clicks.
pub trait InteractiveModel {
    /// Re-predicts lesion `lesion` given all of its clicks so far; returns the
    /// lesion's volume-level instance mask.
    fn refine(&mut self, lesion: usize, clicks: &[Click]) -> Result<Mask, EvalError>;

    /// Extra mask merged into the prediction after all lesions were refined.
    fn finalize(&mut self) -> Result<Option<Mask>, EvalError> {
        Ok(None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickRecord {
    pub lesion: usize,
    pub iteration: usize,
    pub click: Click,
    /// Whether the click hit `pred XOR gt` of its lesion at the time it was issued.
    pub in_error: bool,
    /// Lesion DSC after the model answered this click.
    pub lesion_dsc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scan_dsc: f64,
    pub lesion_f1: f64,
    pub lesionwise_dsc: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub lesions: Vec<MatchRow>,
    pub clicks: Vec<ClickRecord>,
    pub config: EvalConfig,
    pub seed: Option<u64>,
}

impl MetricsReport {
    pub fn csv_header() -> &'static str {
        "scan_dsc,lesion_f1,lesionwise_dsc,tp,fp,fn,clicks"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.scan_dsc,
            self.lesion_f1,
            self.lesionwise_dsc.map(|v| v.to_string()).unwrap_or_default(),
            self.tp,
            self.fp,
            self.fn_,
            self.clicks.len()
        )
    }
}

pub struct EvalRun {
    pub report: MetricsReport,
    /// Postprocessed prediction the metrics were computed on.
    pub prediction: Mask,
    /// Postprocessed ground truth.
    pub reference: Mask,
    /// Instance masks of the selected lesions, in selection order.
    pub chosen: Vec<Mask>,
}

pub fn run_lesionwise_eval<M, F>(factory: F, volume: &Volume, gt: &Mask, cfg: &EvalConfig) -> Result<EvalRun, EvalError>
where
    M: InteractiveModel,
    F: FnOnce(&Volume) -> Result<M, EvalError>,
{
    cfg.validate()?;
    if volume.extents != gt.extents {
        return Err(EvalError::ExtentMismatch);
    }
    let spacing = volume.spacing;
    let mut model = factory(volume)?;
    let labels = connected_components(gt, cfg.connectivity);
    let chosen_ids = select_largest(&labels, cfg.l_chosen);
    let mut pred = Mask::empty(gt.extents);
    let mut records = Vec::new();
    let mut chosen = Vec::new();

    for (lesion, &id) in chosen_ids.iter().enumerate() {
        let target = labels.mask_of(id);
        let mut current = Mask::empty(gt.extents);
        let mut clicks: Vec<Click> = Vec::new();
        for iteration in 0..cfg.c_chosen {
            let click = if iteration == 0 {
                simulate_initial_click(&target, spacing)?
            } else {
                match simulate_correction_click(&current, &target, spacing, cfg.connectivity)? {
                    Some(c) => c,
                    None => break,
                }
            };
            let in_error = current.get(click.x, click.y, click.slice) != target.get(click.x, click.y, click.slice);
            clicks.push(click);
            current = model.refine(lesion, &clicks)?;
            if current.extents != gt.extents {
                return Err(EvalError::ExtentMismatch);
            }
            records.push(ClickRecord {
                lesion,
                iteration,
                click,
                in_error,
                lesion_dsc: dsc(&current, &target)?,
            });
        }
        pred.union_with(&current);
        chosen.push(target);
    }
    if let Some(extra) = model.finalize()? {
        if extra.extents != gt.extents {
            return Err(EvalError::ExtentMismatch);
        }
        pred.union_with(&extra);
    }

    let prediction = remove_small_components(&pred, cfg.v_thresh_mm3, spacing, cfg.connectivity);
    let reference = remove_small_components(gt, cfg.v_thresh_mm3, spacing, cfg.connectivity);
    let m = lesion_f1(&prediction, &reference, cfg.iou_threshold, cfg.connectivity)?;
    let report = MetricsReport {
        scan_dsc: dsc(&prediction, &reference)?,
        lesion_f1: m.f1,
        lesionwise_dsc: lesionwise_dsc(&m),
        tp: m.tp,
        fp: m.fp,
        fn_: m.fn_,
        lesions: m.rows,
        clicks: records,
        config: cfg.clone(),
        seed: None,
    };
    Ok(EvalRun {
        report,
        prediction,
        reference,
        chosen,
    })
}

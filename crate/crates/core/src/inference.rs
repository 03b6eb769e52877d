//! Interactive session state and the two-stage inference pipeline.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::banks::{ExemplarBank, InsertOutcome, MemoryBank, MemoryEntry};
use crate::click::Click;
use crate::evaluation::{fill_holes, remove_small_components, Connectivity, EvalError, InteractiveModel};
use crate::io::{extract_and_resize, normalize_percentile, resize_plane};
use crate::model::{ExemplarItem, MemoryItem, Model, ModelError, PointPrompt};
use crate::tensor::{Graph, Tensor, Var};
use crate::volume::{Mask, Volume};

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error("click ({x}, {y}, {slice}) outside volume {h}x{w}x{d}")]
    OutOfBounds {
        x: usize,
        y: usize,
        slice: usize,
        h: usize,
        w: usize,
        d: usize,
    },
    #[error("unknown lesion {0}")]
    UnknownLesion(usize),
    #[error("lesion {0} has no prompted slice")]
    NotPrompted(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<crate::tensor::TensorError> for InferenceError {
    fn from(e: crate::tensor::TensorError) -> Self {
        Self::Model(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Instance,
    Semantic,
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Prompted,
    Propagated,
    Exemplar,
    Merged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    pub mask: Mask,
    pub kind: MaskKind,
    pub provenance: Provenance,
    pub revision: u64,
}

/// How the final mask is assembled from the two stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Merge {
    /// Instance masks united with the exemplar-stage mask.
    Union,
    /// Exemplar-stage mask only.
    SemanticOnly,
    /// Instance masks only; the exemplar stage is not run.
    InstanceOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocConfig {
    pub v_thresh_mm3: f64,
    pub fill_holes: bool,
    pub connectivity: Connectivity,
    pub merge: Merge,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self {
            v_thresh_mm3: 1000.0,
            fill_holes: true,
            connectivity: Connectivity::C26,
            merge: Merge::Union,
        }
    }
}

pub fn postprocess(mask: &Mask, volume: &Volume, cfg: &PostprocConfig) -> Mask {
    let m = remove_small_components(mask, cfg.v_thresh_mm3, volume.spacing, cfg.connectivity);
    if cfg.fill_holes {
        fill_holes(&m)
    } else {
        m
    }
}

/// Memory bank payload.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryFeature {
    pub feature: Tensor,
    pub pointer: Tensor,
}

/// Exemplar payload: visual embedding, position encoding and object pointer.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarFeature {
    pub z: Tensor,
    pub pos: Tensor,
    pub pointer: Tensor,
}

#[derive(Debug, Clone)]
pub struct LesionState {
    pub clicks: Vec<Click>,
    pub memory: MemoryBank<MemoryFeature>,
    pub mask: Mask,
    pub revision: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceResult {
    pub lesion: usize,
    pub slice: usize,
    /// `H × W` binary plane.
    pub mask: Vec<u8>,
    /// Set when a positive click produced an empty mask.
    pub empty_after_positive: bool,
    pub revision: u64,
}

struct SliceEmbedding {
    tokens: Tensor,
    fine: Tensor,
}

/// Model-side view of a volume: normalized, resized slices and their embeddings.
pub struct PreparedVolume {
    pub volume: Arc<Volume>,
    slices: Vec<Tensor>,
    embeddings: Vec<SliceEmbedding>,
}

impl PreparedVolume {
    pub fn new(model: &Model, volume: Arc<Volume>) -> Result<Self, InferenceError> {
        let s = model.config.image_size;
        let norm = normalize_percentile(&volume, 0.5, 99.5);
        let slices: Vec<Tensor> = extract_and_resize(&norm, s)
            .into_iter()
            .map(|p| Tensor::new(vec![1, s, s], p))
            .collect::<Result<_, _>>()?;
        let mut embeddings = Vec::with_capacity(slices.len());
        for sl in &slices {
            let mut g = Graph::inference();
            let x = g.constant(sl.clone());
            let e = model.encode_image(&mut g, x)?;
            embeddings.push(SliceEmbedding {
                tokens: g.value(e.tokens).clone(),
                fine: g.value(e.fine).clone(),
            });
        }
        Ok(Self {
            volume,
            slices,
            embeddings,
        })
    }

    pub fn depth(&self) -> usize {
        self.slices.len()
    }
}

/// One user's interactive state over one volume.
pub struct Session {
    model: Arc<Model>,
    prepared: Arc<PreparedVolume>,
    lesions: Vec<LesionState>,
    pub exemplars: ExemplarBank<ExemplarFeature>,
    semantic: Option<MaskVolume>,
    revision: u64,
}

struct Decoded {
    logits: Tensor,
    feature: Tensor,
    pointer: Tensor,
}

impl Session {
    pub fn new(model: Arc<Model>, volume: Arc<Volume>) -> Result<Self, InferenceError> {
        let prepared = Arc::new(PreparedVolume::new(&model, volume)?);
        Ok(Self::with_prepared(model, prepared))
    }

    /// Shares embeddings computed once per volume.
    pub fn with_prepared(model: Arc<Model>, prepared: Arc<PreparedVolume>) -> Self {
        let k = model.config.exemplar_capacity;
        Self {
            model,
            prepared,
            lesions: Vec::new(),
            exemplars: ExemplarBank::new(k),
            semantic: None,
            revision: 0,
        }
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn volume(&self) -> &Volume {
        &self.prepared.volume
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn lesions(&self) -> &[LesionState] {
        &self.lesions
    }

    pub fn lesion(&self, id: usize) -> Result<&LesionState, InferenceError> {
        self.lesions.get(id).ok_or(InferenceError::UnknownLesion(id))
    }

    fn bump(&mut self) -> u64 {
        self.revision += 1;
        self.revision
    }

    pub fn add_lesion(&mut self) -> usize {
        let e = self.prepared.volume.extents;
        self.lesions.push(LesionState {
            clicks: Vec::new(),
            memory: MemoryBank::new(self.model.config.memory_capacity),
            mask: Mask::empty(e),
            revision: 0,
        });
        let rev = self.bump();
        self.lesions.last_mut().expect("just pushed").revision = rev;
        self.lesions.len() - 1
    }

    fn to_model_xy(&self, x: usize, y: usize) -> (f64, f64) {
        let e = self.prepared.volume.extents;
        let s = self.model.config.image_size as f64;
        (
            (x as f64 + 0.5) * s / e.w as f64 - 0.5,
            (y as f64 + 0.5) * s / e.h as f64 - 0.5,
        )
    }

    /// Binarizes model-resolution logits at the volume's in-plane extent.
    fn to_plane(&self, logits: &Tensor) -> Vec<u8> {
        let e = self.prepared.volume.extents;
        let s = self.model.config.image_size;
        let up = if e.h == s && e.w == s {
            logits.data().to_vec()
        } else {
            resize_plane(logits.data(), s, s, e.h, e.w)
        };
        up.iter().map(|&v| (v > 0.0) as u8).collect()
    }

    fn decode(
        &self,
        slice: usize,
        condition: impl FnOnce(&mut Graph, Var) -> Result<Var, ModelError>,
        prompts: &[PointPrompt],
    ) -> Result<Decoded, InferenceError> {
        let m = &*self.model;
        let emb = &self.prepared.embeddings[slice];
        let mut g = Graph::inference();
        let tokens = g.constant(emb.tokens.clone());
        let fine = g.constant(emb.fine.clone());
        let x = condition(&mut g, tokens)?;
        let pr = m.encode_prompts(&mut g, prompts)?;
        let out = m.decode(&mut g, x, fine, pr)?;
        let mut logits = g.value(out.logits).clone();
        if g.value(out.object).item() < 0.0 {
            // object judged absent
            logits = logits.map(|_| -1.0);
        }
        let lv = g.constant(logits.clone());
        let feature = m.encode_memory(&mut g, lv, tokens)?;
        let pointer = m.pointer(&mut g, out.token)?;
        Ok(Decoded {
            logits,
            feature: g.value(feature).clone(),
            pointer: g.value(pointer).clone(),
        })
    }

    fn memory_items(g: &mut Graph, memory: &MemoryBank<MemoryFeature>, slice: usize) -> Vec<MemoryItem> {
        memory
            .entries()
            .filter(|e| e.slice != slice)
            .map(|e| MemoryItem {
                feature: g.constant(e.payload.feature.clone()),
                pointer: g.constant(e.payload.pointer.clone()),
                distance: e.slice.abs_diff(slice),
            })
            .collect()
    }

    fn exemplar_payload(&self, d: &Decoded) -> Option<ExemplarFeature> {
        self.model.exemplar_position(&d.logits).map(|pos| ExemplarFeature {
            z: d.feature.clone(),
            pos,
            pointer: d.pointer.clone(),
        })
    }

    pub fn apply_click(&mut self, lesion: usize, click: Click) -> Result<SliceResult, InferenceError> {
        let e = self.prepared.volume.extents;
        if click.x >= e.w || click.y >= e.h || click.slice >= e.d {
            return Err(InferenceError::OutOfBounds {
                x: click.x,
                y: click.y,
                slice: click.slice,
                h: e.h,
                w: e.w,
                d: e.d,
            });
        }
        if lesion >= self.lesions.len() {
            return Err(InferenceError::UnknownLesion(lesion));
        }
        let d = click.slice;
        self.lesions[lesion].clicks.push(click);
        let prompts: Vec<PointPrompt> = self.lesions[lesion]
            .clicks
            .iter()
            .filter(|c| c.slice == d)
            .map(|c| {
                let (x, y) = self.to_model_xy(c.x, c.y);
                PointPrompt {
                    x,
                    y,
                    positive: c.is_positive(),
                }
            })
            .collect();
        let model = Arc::clone(&self.model);
        let memory = &self.lesions[lesion].memory;
        let dec = self.decode(
            d,
            |g, x| {
                let items = Self::memory_items(g, memory, d);
                if items.is_empty() {
                    model.no_memory(g, x)
                } else {
                    model.memory_attend(g, x, &items)
                }
            },
            &prompts,
        )?;
        let plane = self.to_plane(&dec.logits);
        let empty = plane.iter().all(|&v| v == 0);
        let ex = self.exemplar_payload(&dec);
        let st = &mut self.lesions[lesion];
        st.mask.slice_mut(d).copy_from_slice(&plane);
        st.memory.push(MemoryEntry {
            slice: d,
            prompted: true,
            payload: MemoryFeature {
                feature: dec.feature,
                pointer: dec.pointer,
            },
        });
        if let Some(p) = ex {
            self.exemplars.insert(lesion, d, true, p);
        }
        let rev = self.bump();
        self.lesions[lesion].revision = rev;
        Ok(SliceResult {
            lesion,
            slice: d,
            mask: plane,
            empty_after_positive: empty && click.is_positive(),
            revision: rev,
        })
    }

    /// Stage 1: sweeps the lesion's memory over every unprompted slice.
    pub fn propagate_memory(&mut self, lesion: usize) -> Result<MaskVolume, InferenceError> {
        let st = self.lesions.get(lesion).ok_or(InferenceError::UnknownLesion(lesion))?;
        let prompted = st.memory.pinned_slices();
        let start = *prompted.iter().min().ok_or(InferenceError::NotPrompted(lesion))?;
        let depth = self.prepared.depth();
        let ascending: Vec<usize> = (start + 1..depth).collect();
        let descending: Vec<usize> = (0..start).rev().collect();
        for sweep in [ascending, descending] {
            self.lesions[lesion].memory.reset_recent();
            for d in sweep {
                if prompted.contains(&d) {
                    continue;
                }
                let model = Arc::clone(&self.model);
                let memory = &self.lesions[lesion].memory;
                let dec = self.decode(
                    d,
                    |g, x| {
                        let items = Self::memory_items(g, memory, d);
                        model.memory_attend(g, x, &items)
                    },
                    &[],
                )?;
                let plane = self.to_plane(&dec.logits);
                let ex = self.exemplar_payload(&dec);
                let st = &mut self.lesions[lesion];
                st.mask.slice_mut(d).copy_from_slice(&plane);
                st.memory.push(MemoryEntry {
                    slice: d,
                    prompted: false,
                    payload: MemoryFeature {
                        feature: dec.feature,
                        pointer: dec.pointer,
                    },
                });
                match ex {
                    Some(p) => {
                        let _: InsertOutcome = self.exemplars.insert(lesion, d, false, p);
                    }
                    None => {
                        self.exemplars.remove_unprompted(lesion, d);
                    }
                }
            }
        }
        let rev = self.bump();
        let st = &mut self.lesions[lesion];
        st.revision = rev;
        Ok(MaskVolume {
            mask: st.mask.clone(),
            kind: MaskKind::Instance,
            provenance: Provenance::Propagated,
            revision: rev,
        })
    }

    /// Stage 2 for one slice; reads the exemplar bank only.
    pub fn semantic_slice(&self, d: usize) -> Result<Vec<u8>, InferenceError> {
        let k = self.model.config.exemplar_capacity;
        let context = self.exemplars.select_context(d, k);
        let model = Arc::clone(&self.model);
        let dec = self.decode(
            d,
            |g, x| {
                let items: Vec<ExemplarItem> = context
                    .iter()
                    .map(|e| ExemplarItem {
                        z: g.constant(e.payload.z.clone()),
                        pos: g.constant(e.payload.pos.clone()),
                        pointer: g.constant(e.payload.pointer.clone()),
                        offset: e.slice as i64 - d as i64,
                    })
                    .collect();
                model.exemplar_attend(g, x, &items)
            },
            &[],
        )?;
        Ok(self.to_plane(&dec.logits))
    }

    /// Stage 2 over every slice. Banks and click history are left untouched.
    /// Re-running without intervening mutations returns the cached result unchanged.
    pub fn propagate_exemplars(&mut self) -> Result<MaskVolume, InferenceError> {
        if let Some(s) = self.semantic.as_ref().filter(|s| s.revision == self.revision) {
            return Ok(s.clone());
        }
        let e = self.prepared.volume.extents;
        let mut mask = Mask::empty(e);
        for d in 0..e.d {
            let plane = self.semantic_slice(d)?;
            mask.slice_mut(d).copy_from_slice(&plane);
        }
        let rev = self.bump();
        let mv = MaskVolume {
            mask,
            kind: MaskKind::Semantic,
            provenance: Provenance::Exemplar,
            revision: rev,
        };
        self.semantic = Some(mv.clone());
        Ok(mv)
    }

    pub fn semantic(&self) -> Option<&MaskVolume> {
        self.semantic.as_ref()
    }

    /// Union of every lesion's instance mask.
    pub fn instance_union(&self) -> Mask {
        let mut m = Mask::empty(self.prepared.volume.extents);
        for l in &self.lesions {
            m.union_with(&l.mask);
        }
        m
    }

    /// Merged prediction before postprocessing.
    pub fn raw_final(&self, merge: Merge) -> Mask {
        let e = self.prepared.volume.extents;
        let semantic = || self.semantic.as_ref().map(|s| s.mask.clone()).unwrap_or_else(|| Mask::empty(e));
        match merge {
            Merge::Union => self.instance_union().union(&semantic()),
            Merge::SemanticOnly => semantic(),
            Merge::InstanceOnly => self.instance_union(),
        }
    }

    pub fn final_mask(&self, cfg: &PostprocConfig) -> MaskVolume {
        MaskVolume {
            mask: postprocess(&self.raw_final(cfg.merge), &self.prepared.volume, cfg),
            kind: MaskKind::Final,
            provenance: Provenance::Merged,
            revision: self.revision,
        }
    }

    /// Rebuilds state from persisted parts.
    pub fn restore(
        model: Arc<Model>,
        prepared: Arc<PreparedVolume>,
        lesions: Vec<LesionState>,
        exemplars: ExemplarBank<ExemplarFeature>,
        semantic: Option<MaskVolume>,
        revision: u64,
    ) -> Self {
        Self {
            model,
            prepared,
            lesions,
            exemplars,
            semantic,
            revision,
        }
    }

    pub fn prepared(&self) -> &Arc<PreparedVolume> {
        &self.prepared
    }
}

/// Runs both stages for click groups (one group per lesion).
pub fn full_inference(
    model: Arc<Model>,
    volume: Arc<Volume>,
    clicks: &[Vec<Click>],
    postproc: &PostprocConfig,
) -> Result<MaskVolume, InferenceError> {
    let mut s = Session::new(model, volume)?;
    for group in clicks {
        if group.is_empty() {
            continue;
        }
        let id = s.add_lesion();
        for &c in group {
            s.apply_click(id, c)?;
        }
        s.propagate_memory(id)?;
    }
    if postproc.merge != Merge::InstanceOnly {
        s.propagate_exemplars()?;
    }
    Ok(s.final_mask(postproc))
}

/// Adapter that drives a session from the lesion-wise evaluation harness.
pub struct SessionEvaluator {
    pub session: Session,
    pub merge: Merge,
}

impl SessionEvaluator {
    pub fn new(session: Session, merge: Merge) -> Self {
        Self { session, merge }
    }
}

impl InteractiveModel for SessionEvaluator {
    fn refine(&mut self, lesion: usize, clicks: &[Click]) -> Result<Mask, EvalError> {
        let err = |e: InferenceError| EvalError::Model(e.to_string());
        while self.session.lesions.len() <= lesion {
            self.session.add_lesion();
        }
        let click = *clicks.last().ok_or_else(|| EvalError::Model("no click".into()))?;
        self.session.apply_click(lesion, click).map_err(err)?;
        Ok(self.session.propagate_memory(lesion).map_err(err)?.mask)
    }

    fn finalize(&mut self) -> Result<Option<Mask>, EvalError> {
        match self.merge {
            Merge::InstanceOnly => Ok(None),
            Merge::Union | Merge::SemanticOnly => {
                let s = self.session.propagate_exemplars().map_err(|e| EvalError::Model(e.to_string()))?;
                Ok(Some(s.mask))
            }
        }
    }
}

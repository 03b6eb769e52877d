//! Forward pass of one training sample and its composite loss.

use rand::Rng;

use crate::banks::{ExemplarBank, MemoryBank, MemoryEntry};
use crate::click::Click;
use crate::evaluation::{simulate_correction_click, simulate_initial_click, Connectivity};
use crate::model::{Embedding, ExemplarItem, MemoryItem, Model, PointPrompt};
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::volume::{Extents, Mask, Spacing};

use super::data::TrainingSample;
use super::loss::{bce, instance_loss, semantic_loss};
use super::TrainError;

#[derive(Debug, Clone, Copy)]
pub struct StepOptions {
    /// Build exemplars from ground-truth masks instead of predictions.
    pub teacher_forcing: bool,
    /// Correction clicks drawn uniformly from `0..=max_corrections`.
    pub max_corrections: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub instance: Var,
    pub object: Var,
    pub semantic: Var,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub instance: f64,
    pub object: f64,
    pub semantic: f64,
}

impl LossVars {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> LossValues {
        let v = |x: Var| g.value(x).item().to_f64c();
        LossValues {
            total: v(self.total),
            instance: v(self.instance),
            object: v(self.object),
            semantic: v(self.semantic),
        }
    }
}

struct TrainExemplar {
    z: Var,
    pos: Tensor<f64>,
    pointer: Var,
}

fn plane_mask(side: usize, plane: &[u8]) -> Mask {
    Mask {
        extents: Extents::new(side, side, 1),
        data: plane.to_vec(),
    }
}

fn to_prompt(c: &Click) -> PointPrompt {
    PointPrompt {
        x: c.x as f64,
        y: c.y as f64,
        positive: c.is_positive(),
    }
}

fn mean_or_zero<T: Real>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var, TrainError> {
    if terms.is_empty() {
        return Ok(g.scalar(T::zero()));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, T::from_f64c(1.0 / terms.len() as f64)))
}

fn centroid_pos<T: Real>(model: &Model<T>, plane: &[u8]) -> Option<Tensor<f64>> {
    let t = Tensor::<T>::from_fn(&[plane.len()], |i| if plane[i] != 0 { T::one() } else { -T::one() });
    model.exemplar_position(&t).map(|p| p.cast())
}

/// Runs prompted decoding, memory propagation and exemplar-conditioned
/// semantic decoding over one sample, returning the composite loss.
pub fn sample_loss<T: Real, R: Rng + ?Sized>(
    model: &Model<T>,
    g: &mut Graph<T>,
    sample: &TrainingSample,
    opts: StepOptions,
    rng: &mut R,
) -> Result<LossVars, TrainError> {
    let s = sample.side;
    if s != model.config.image_size {
        return Err(TrainError::Config(format!(
            "sample side {s} does not match model input {}",
            model.config.image_size
        )));
    }
    let n = sample.slices.len();
    let embs: Vec<Embedding> = sample
        .slices
        .iter()
        .map(|pl| {
            let t = Tensor::<T>::from_fn(&[1, s, s], |i| T::from_f64c(pl[i] as f64));
            let x = g.constant(t);
            model.encode_image(g, x)
        })
        .collect::<Result<_, _>>()?;
    let target = |g: &mut Graph<T>, plane: &[u8]| -> Result<Var, TrainError> {
        let t = Tensor::<T>::from_fn(&[s, s], |i| T::from_f64c(plane[i] as f64));
        Ok(g.constant(t))
    };
    let presence = |g: &mut Graph<T>, yes: bool| -> Result<Var, TrainError> {
        Ok(g.constant(Tensor::from_f64(&[1, 1], &[yes as u8 as f64])?))
    };

    let mut inst_terms = Vec::new();
    let mut obj_terms = Vec::new();
    let mut sem_terms = Vec::new();
    let mut bank: ExemplarBank<TrainExemplar> = ExemplarBank::new(model.config.exemplar_capacity);

    for (lesion, masks) in sample.prompted.iter().enumerate() {
        let areas: Vec<usize> = masks.iter().map(|m| m.iter().filter(|&&v| v != 0).count()).collect();
        let p = (0..n).max_by_key(|&i| (areas[i], std::cmp::Reverse(i))).unwrap_or(0);
        let gt = plane_mask(s, &masks[p]);
        let mut clicks = vec![simulate_initial_click(&gt, Spacing::iso(1.0))?];
        let corrections = rng.random_range(0..=opts.max_corrections);
        for _ in 0..corrections {
            // correction clicks come from detached predictions
            let mut ig = Graph::<T>::inference();
            let tok = ig.constant(g.value(embs[p].tokens).clone());
            let fine = ig.constant(g.value(embs[p].fine).clone());
            let x = model.no_memory(&mut ig, tok)?;
            let prompts: Vec<PointPrompt> = clicks.iter().map(to_prompt).collect();
            let pr = model.encode_prompts(&mut ig, &prompts)?;
            let out = model.decode(&mut ig, x, fine, pr)?;
            let pred = Mask {
                extents: gt.extents,
                data: ig.value(out.logits).data().iter().map(|&v| (v > T::zero()) as u8).collect(),
            };
            match simulate_correction_click(&pred, &gt, Spacing::iso(1.0), Connectivity::C8)? {
                Some(c) => clicks.push(c),
                None => break,
            }
        }

        let mut memory: MemoryBank<(Var, Var)> = MemoryBank::new(model.config.memory_capacity);
        let prompts: Vec<PointPrompt> = clicks.iter().map(to_prompt).collect();
        let x = model.no_memory(g, embs[p].tokens)?;
        let pr = model.encode_prompts(g, &prompts)?;
        let out = model.decode(g, x, embs[p].fine, pr)?;
        let t = target(g, &masks[p])?;
        inst_terms.push(instance_loss(g, out.logits, out.iou, t)?);
        let yes = presence(g, true)?;
        obj_terms.push(bce(g, out.object, yes)?);
        let feat = model.encode_memory(g, out.logits, embs[p].tokens)?;
        let ptr = model.pointer(g, out.token)?;
        memory.push(MemoryEntry {
            slice: p,
            prompted: true,
            payload: (feat, ptr),
        });
        add_exemplar(model, g, &mut bank, opts, lesion, p, true, &masks[p], &embs[p], out.logits, feat, ptr)?;

        let ascending: Vec<usize> = (p + 1..n).collect();
        let descending: Vec<usize> = (0..p).rev().collect();
        for sweep in [ascending, descending] {
            memory.reset_recent();
            for d in sweep {
                let items: Vec<MemoryItem> = memory
                    .entries()
                    .map(|e| MemoryItem {
                        feature: e.payload.0,
                        pointer: e.payload.1,
                        distance: e.slice.abs_diff(d),
                    })
                    .collect();
                let x = model.memory_attend(g, embs[d].tokens, &items)?;
                let out = model.decode(g, x, embs[d].fine, None)?;
                let visible = areas[d] > 0;
                if visible {
                    let t = target(g, &masks[d])?;
                    inst_terms.push(instance_loss(g, out.logits, out.iou, t)?);
                }
                let pv = presence(g, visible)?;
                obj_terms.push(bce(g, out.object, pv)?);
                let feat = model.encode_memory(g, out.logits, embs[d].tokens)?;
                let ptr = model.pointer(g, out.token)?;
                memory.push(MemoryEntry {
                    slice: d,
                    prompted: false,
                    payload: (feat, ptr),
                });
                add_exemplar(model, g, &mut bank, opts, lesion, d, false, &masks[d], &embs[d], out.logits, feat, ptr)?;
            }
        }
    }

    let k = model.config.exemplar_capacity;
    for i in 0..n {
        let items: Vec<ExemplarItem> = bank
            .select_context(i, k)
            .iter()
            .map(|e| ExemplarItem {
                z: e.payload.z,
                pos: g.constant(e.payload.pos.cast()),
                pointer: e.payload.pointer,
                offset: e.slice as i64 - i as i64,
            })
            .collect();
        let x = model.exemplar_attend(g, embs[i].tokens, &items)?;
        let out = model.decode(g, x, embs[i].fine, None)?;
        let t = target(g, &sample.semantic[i])?;
        sem_terms.push(semantic_loss(g, out.logits, t)?);
        let any = sample.semantic[i].iter().any(|&v| v != 0);
        let pv = presence(g, any)?;
        obj_terms.push(bce(g, out.object, pv)?);
    }

    let instance = mean_or_zero(g, &inst_terms)?;
    let object = mean_or_zero(g, &obj_terms)?;
    let semantic = mean_or_zero(g, &sem_terms)?;
    let total = g.add(instance, object)?;
    let total = g.add(total, semantic)?;
    Ok(LossVars {
        total,
        instance,
        object,
        semantic,
    })
}

#[allow(clippy::too_many_arguments)]
fn add_exemplar<T: Real>(
    model: &Model<T>,
    g: &mut Graph<T>,
    bank: &mut ExemplarBank<TrainExemplar>,
    opts: StepOptions,
    lesion: usize,
    slice: usize,
    prompted: bool,
    gt: &[u8],
    emb: &Embedding,
    logits: Var,
    feat: Var,
    ptr: Var,
) -> Result<(), TrainError> {
    let s = model.config.image_size;
    let (z, pos) = if opts.teacher_forcing {
        let Some(pos) = centroid_pos(model, gt) else {
            return Ok(());
        };
        let forced = Tensor::<T>::from_fn(&[s, s], |i| T::from_f64c(if gt[i] != 0 { 10.0 } else { -10.0 }));
        let forced = g.constant(forced);
        (model.encode_memory(g, forced, emb.tokens)?, pos)
    } else {
        let Some(pos) = model.exemplar_position(g.value(logits)) else {
            return Ok(());
        };
        (feat, pos.cast())
    };
    bank.insert(lesion, slice, prompted, TrainExemplar { z, pos, pointer: ptr });
    Ok(())
}

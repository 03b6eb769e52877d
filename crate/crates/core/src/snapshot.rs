//! Single-file session archive: click history, bank states and cached masks.
//!
//! Stored in the tensor container format. The JSON manifest holds clicks,
//! bank bookkeeping and RLE masks; bank payloads are the named tensors.

use std::io::{Read, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::banks::{Exemplar, ExemplarBank, MemoryBank, MemoryEntry};
use crate::click::Click;
use crate::inference::{ExemplarFeature, LesionState, MaskKind, MaskVolume, MemoryFeature, PreparedVolume, Provenance, Session};
use crate::model::Model;
use crate::rle::{RleError, RleWire};
use crate::tensor::checkpoint::{read_checkpoint, write_checkpoint};
use crate::tensor::{ParamStore, Tensor, TensorError};
use crate::volume::Extents;

pub const SNAPSHOT_VERSION: u32 = 1;
const KIND: &str = "mois-session";

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error(transparent)]
    Container(#[from] TensorError),
    #[error("malformed snapshot manifest: {0}")]
    Manifest(String),
    #[error("unsupported snapshot version {0}")]
    Version(u32),
    #[error("snapshot extents {snapshot:?} do not match volume {volume:?}")]
    Extents { snapshot: Extents, volume: Extents },
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error(transparent)]
    Rle(#[from] RleError),
}

#[derive(Serialize, Deserialize)]
struct SlotMeta {
    slice: usize,
    prompted: bool,
}

#[derive(Serialize, Deserialize)]
struct MemoryMeta {
    capacity: usize,
    pinned: Vec<SlotMeta>,
    recent: Vec<SlotMeta>,
}

#[derive(Serialize, Deserialize)]
struct LesionMeta {
    clicks: Vec<Click>,
    revision: u64,
    mask: RleWire,
    memory: MemoryMeta,
}

#[derive(Serialize, Deserialize)]
struct ExemplarMeta {
    lesion: usize,
    slice: usize,
    prompted: bool,
    counter: u64,
}

#[derive(Serialize, Deserialize)]
struct BankMeta {
    capacity: usize,
    next_counter: u64,
    entries: Vec<ExemplarMeta>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    version: u32,
    revision: u64,
    extents: Extents,
    lesions: Vec<LesionMeta>,
    exemplars: BankMeta,
    semantic: Option<RleWire>,
}

fn take(store: &ParamStore, name: &str) -> Result<Tensor, SnapshotError> {
    store
        .id(name)
        .map(|id| store.get(id).clone())
        .ok_or_else(|| SnapshotError::MissingTensor(name.to_string()))
}

fn memory_name(lesion: usize, part: &str, i: usize, field: &str) -> String {
    format!("lesion.{lesion}.{part}.{i}.{field}")
}

fn exemplar_name(i: usize, field: &str) -> String {
    format!("exemplar.{i}.{field}")
}

pub fn write_snapshot<W: Write>(session: &Session, w: &mut W) -> Result<(), SnapshotError> {
    let mut store = ParamStore::<f32>::new();
    let mut lesions = Vec::new();
    for (l, st) in session.lesions().iter().enumerate() {
        let mut slots = |part: &str, entries: &[MemoryEntry<MemoryFeature>]| -> Vec<SlotMeta> {
            entries
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    store.insert(memory_name(l, part, i, "feature"), e.payload.feature.clone());
                    store.insert(memory_name(l, part, i, "pointer"), e.payload.pointer.clone());
                    SlotMeta {
                        slice: e.slice,
                        prompted: e.prompted,
                    }
                })
                .collect()
        };
        let pinned = slots("pinned", st.memory.pinned());
        let recent = slots("recent", st.memory.recent());
        lesions.push(LesionMeta {
            clicks: st.clicks.clone(),
            revision: st.revision,
            mask: RleWire::from_mask(&st.mask, st.revision),
            memory: MemoryMeta {
                capacity: st.memory.capacity(),
                pinned,
                recent,
            },
        });
    }
    let bank = &session.exemplars;
    let entries = bank
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| {
            store.insert(exemplar_name(i, "z"), e.payload.z.clone());
            store.insert(exemplar_name(i, "pos"), e.payload.pos.clone());
            store.insert(exemplar_name(i, "pointer"), e.payload.pointer.clone());
            ExemplarMeta {
                lesion: e.lesion,
                slice: e.slice,
                prompted: e.prompted,
                counter: e.counter,
            }
        })
        .collect();
    let manifest = Manifest {
        kind: KIND.into(),
        version: SNAPSHOT_VERSION,
        revision: session.revision(),
        extents: session.volume().extents,
        lesions,
        exemplars: BankMeta {
            capacity: bank.capacity(),
            next_counter: bank.next_counter(),
            entries,
        },
        semantic: session.semantic().map(|s| RleWire::from_mask(&s.mask, s.revision)),
    };
    let json = serde_json::to_value(&manifest).map_err(|e| SnapshotError::Manifest(e.to_string()))?;
    write_checkpoint(w, &json, &store)?;
    Ok(())
}

pub fn read_snapshot<R: Read>(model: Arc<Model>, prepared: Arc<PreparedVolume>, r: &mut R) -> Result<Session, SnapshotError> {
    let (json, store) = read_checkpoint::<f32, _>(r)?;
    let m: Manifest = serde_json::from_value(json).map_err(|e| SnapshotError::Manifest(e.to_string()))?;
    if m.kind != KIND {
        return Err(SnapshotError::Manifest(format!("unexpected kind {:?}", m.kind)));
    }
    if m.version != SNAPSHOT_VERSION {
        return Err(SnapshotError::Version(m.version));
    }
    let volume = prepared.volume.extents;
    if m.extents != volume {
        return Err(SnapshotError::Extents {
            snapshot: m.extents,
            volume,
        });
    }
    let mut lesions = Vec::with_capacity(m.lesions.len());
    for (l, meta) in m.lesions.into_iter().enumerate() {
        let slots = |part: &str, metas: &[SlotMeta]| -> Result<Vec<MemoryEntry<MemoryFeature>>, SnapshotError> {
            metas
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    Ok(MemoryEntry {
                        slice: s.slice,
                        prompted: s.prompted,
                        payload: MemoryFeature {
                            feature: take(&store, &memory_name(l, part, i, "feature"))?,
                            pointer: take(&store, &memory_name(l, part, i, "pointer"))?,
                        },
                    })
                })
                .collect()
        };
        let pinned = slots("pinned", &meta.memory.pinned)?;
        let recent = slots("recent", &meta.memory.recent)?;
        let mask = meta.mask.to_mask()?;
        if mask.extents != volume {
            return Err(SnapshotError::Extents {
                snapshot: mask.extents,
                volume,
            });
        }
        lesions.push(LesionState {
            clicks: meta.clicks,
            memory: MemoryBank::from_parts(meta.memory.capacity, pinned, recent),
            mask,
            revision: meta.revision,
        });
    }
    let entries = m
        .exemplars
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            Ok(Exemplar {
                lesion: e.lesion,
                slice: e.slice,
                prompted: e.prompted,
                counter: e.counter,
                payload: ExemplarFeature {
                    z: take(&store, &exemplar_name(i, "z"))?,
                    pos: take(&store, &exemplar_name(i, "pos"))?,
                    pointer: take(&store, &exemplar_name(i, "pointer"))?,
                },
            })
        })
        .collect::<Result<Vec<_>, SnapshotError>>()?;
    if m.exemplars.capacity == 0 {
        return Err(SnapshotError::Manifest("exemplar capacity must be positive".into()));
    }
    let exemplars = ExemplarBank::from_parts(m.exemplars.capacity, entries, m.exemplars.next_counter);
    let semantic = m
        .semantic
        .map(|w| {
            Ok::<_, SnapshotError>(MaskVolume {
                mask: w.to_mask()?,
                kind: MaskKind::Semantic,
                provenance: Provenance::Exemplar,
                revision: w.revision,
            })
        })
        .transpose()?;
    Ok(Session::restore(model, prepared, lesions, exemplars, semantic, m.revision))
}

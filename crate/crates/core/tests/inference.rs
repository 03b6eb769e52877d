mod common;

use std::sync::Arc;

use common::gradsuite::tiny_config;
use common::models::{always_on, object_absent};
use mois_core::banks::InsertOutcome;
use mois_core::click::Click;
use mois_core::inference::{full_inference, postprocess, InferenceError, MaskKind, Merge, PostprocConfig, Provenance, Session};
use mois_core::model::Model;
use mois_core::snapshot::{read_snapshot, write_snapshot, SnapshotError};
use mois_core::volume::{Extents, Mask, Spacing, Volume};

fn volume(h: usize, w: usize, d: usize) -> Arc<Volume> {
    let e = Extents::new(h, w, d);
    let data = (0..e.len())
        .map(|i| {
            let (x, y, z) = e.coords(i);
            if (3..8).contains(&x) && (4..9).contains(&y) && z > 0 {
                0.9
            } else {
                0.1 + 0.01 * ((x * 7 + y * 3) % 5) as f32
            }
        })
        .collect();
    Arc::new(Volume::new(e, Spacing([1.0, 1.0, 3.0]), data))
}

fn session(model: Model, v: Arc<Volume>) -> Session {
    Session::new(Arc::new(model), v).unwrap()
}

#[test]
fn click_errors() {
    let mut s = session(always_on(), volume(16, 16, 4));
    assert!(matches!(s.apply_click(0, Click::positive(1, 1, 0)), Err(InferenceError::UnknownLesion(0))));
    let l = s.add_lesion();
    for c in [Click::positive(16, 0, 0), Click::positive(0, 16, 0), Click::positive(0, 0, 4)] {
        assert!(matches!(s.apply_click(l, c), Err(InferenceError::OutOfBounds { .. })));
    }
    assert!(matches!(s.propagate_memory(l), Err(InferenceError::NotPrompted(_))));
    assert!(matches!(s.propagate_memory(7), Err(InferenceError::UnknownLesion(7))));
    assert_eq!(s.revision(), 1, "failed operations leave the revision alone");
}

#[test]
fn revisions_increase_with_every_mutation() {
    let mut s = session(always_on(), volume(16, 16, 4));
    let l = s.add_lesion();
    assert_eq!(s.revision(), 1);
    let r = s.apply_click(l, Click::positive(5, 5, 2)).unwrap();
    assert_eq!((r.revision, s.revision()), (2, 2));
    assert_eq!(s.lesion(l).unwrap().revision, 2);
    let mv = s.propagate_memory(l).unwrap();
    assert_eq!((mv.revision, mv.kind, mv.provenance), (3, MaskKind::Instance, Provenance::Propagated));
    let sem = s.propagate_exemplars().unwrap();
    assert_eq!((sem.revision, sem.kind), (4, MaskKind::Semantic));
    assert_eq!(s.propagate_exemplars().unwrap(), sem, "unchanged state reuses the semantic result");
    assert_eq!(s.revision(), 4);
    s.apply_click(l, Click::negative(0, 0, 0)).unwrap();
    assert_eq!(s.propagate_exemplars().unwrap().revision, 6);
}

#[test]
fn prompted_click_fills_banks_and_propagation_covers_volume() {
    let mut s = session(always_on(), volume(16, 16, 4));
    let l = s.add_lesion();
    let r = s.apply_click(l, Click::positive(5, 5, 1)).unwrap();
    assert!(r.mask.iter().all(|&v| v == 1));
    assert!(!r.empty_after_positive);
    let e = s.exemplars.find(l, 1).unwrap().clone();
    assert!(e.prompted);
    assert_eq!(s.lesion(l).unwrap().memory.pinned_slices(), vec![1]);

    let mv = s.propagate_memory(l).unwrap();
    assert_eq!(mv.mask.count(), 16 * 16 * 4);
    assert_eq!(s.exemplars.len(), 4);
    assert_eq!(s.exemplars.entries().iter().filter(|e| e.prompted).count(), 1);
    assert!(s.exemplars.find(l, 1).unwrap().prompted, "propagation keeps the prompted exemplar");
    assert_eq!(s.exemplars.insert(l, 1, false, e.payload.clone()), InsertOutcome::Discarded);
}

#[test]
fn absent_object_gives_empty_masks_and_no_exemplars() {
    let mut s = session(object_absent(), volume(16, 16, 4));
    let l = s.add_lesion();
    let r = s.apply_click(l, Click::positive(5, 5, 1)).unwrap();
    assert!(r.mask.iter().all(|&v| v == 0));
    assert!(r.empty_after_positive);
    assert!(s.exemplars.is_empty());
    assert!(s.propagate_memory(l).unwrap().mask.is_empty());
    assert!(s.propagate_exemplars().unwrap().mask.is_empty());
    let r = s.apply_click(l, Click::negative(5, 5, 1)).unwrap();
    assert!(!r.empty_after_positive, "only positive clicks flag an empty result");
}

#[test]
fn masks_follow_volume_extents_when_resizing() {
    let mut s = session(always_on(), volume(20, 12, 3));
    let l = s.add_lesion();
    let r = s.apply_click(l, Click::positive(11, 19, 2)).unwrap();
    assert_eq!(r.mask.len(), 20 * 12);
    let mv = s.propagate_memory(l).unwrap();
    assert_eq!(mv.mask.extents, Extents::new(20, 12, 3));
}

#[test]
fn merge_modes() {
    let mut s = session(always_on(), volume(16, 16, 4));
    let l = s.add_lesion();
    s.apply_click(l, Click::positive(5, 5, 0)).unwrap();
    let inst = s.instance_union();
    assert_eq!(inst.count(), 256);
    assert_eq!(s.raw_final(Merge::InstanceOnly), inst);
    assert!(s.raw_final(Merge::SemanticOnly).is_empty(), "no semantic pass yet");
    s.propagate_exemplars().unwrap();
    assert_eq!(s.raw_final(Merge::SemanticOnly).count(), 16 * 16 * 4);
    assert_eq!(s.raw_final(Merge::Union), s.raw_final(Merge::SemanticOnly).union(&inst));
}

#[test]
fn postprocessing_drops_small_components_and_fills_holes() {
    let v = volume(16, 16, 4);
    let e = v.extents;
    let mut m = Mask::from_fn(e, |x, y, z| (2..9).contains(&x) && (2..9).contains(&y) && z < 3);
    m.set(5, 5, 1, false);
    m.set(14, 14, 0, true);
    let cfg = PostprocConfig {
        v_thresh_mm3: 10.0,
        ..PostprocConfig::default()
    };
    let out = postprocess(&m, &v, &cfg);
    assert!(!out.get(14, 14, 0), "3 mm³ speck removed");
    assert!(out.get(5, 5, 1), "enclosed hole filled");
    assert_eq!(out.count(), 7 * 7 * 3);
}

#[test]
fn sessions_are_deterministic() {
    let run = || {
        let mut s = session(Model::new(tiny_config(), 3).unwrap(), volume(16, 16, 4));
        let l = s.add_lesion();
        s.apply_click(l, Click::positive(5, 6, 2)).unwrap();
        s.apply_click(l, Click::negative(1, 1, 2)).unwrap();
        s.propagate_memory(l).unwrap();
        s.propagate_exemplars().unwrap();
        s.final_mask(&PostprocConfig::default())
    };
    assert_eq!(run(), run());
}

#[test]
fn full_inference_runs_both_stages() {
    let v = volume(16, 16, 4);
    let model = Arc::new(always_on());
    let cfg = PostprocConfig {
        v_thresh_mm3: 0.0,
        ..PostprocConfig::default()
    };
    let out = full_inference(Arc::clone(&model), Arc::clone(&v), &[vec![Click::positive(5, 5, 1)]], &cfg).unwrap();
    assert_eq!(out.kind, MaskKind::Final);
    assert_eq!(out.mask.count(), 16 * 16 * 4);
    let none = full_inference(model, v, &[], &cfg).unwrap();
    assert_eq!(none.kind, MaskKind::Final);
}

fn busy_session(model: Arc<Model>, v: Arc<Volume>) -> Session {
    let mut s = Session::new(model, v).unwrap();
    let a = s.add_lesion();
    let b = s.add_lesion();
    s.apply_click(a, Click::positive(5, 6, 1)).unwrap();
    s.apply_click(a, Click::negative(12, 12, 1)).unwrap();
    s.apply_click(b, Click::positive(2, 2, 3)).unwrap();
    s.propagate_memory(a).unwrap();
    s.propagate_exemplars().unwrap();
    s
}

#[test]
fn snapshot_round_trip_preserves_state_and_future_outputs() {
    let model = Arc::new(Model::new(tiny_config(), 12).unwrap());
    let mut s = busy_session(Arc::clone(&model), volume(16, 16, 4));
    let mut buf = Vec::new();
    write_snapshot(&s, &mut buf).unwrap();
    let mut r = read_snapshot(Arc::clone(&model), Arc::clone(s.prepared()), &mut buf.as_slice()).unwrap();
    assert_eq!(r.revision(), s.revision());
    assert_eq!(r.lesions().len(), 2);
    for (a, b) in s.lesions().iter().zip(r.lesions()) {
        assert_eq!(a.clicks, b.clicks);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.memory, b.memory);
    }
    assert_eq!(r.exemplars, s.exemplars);
    assert_eq!(r.semantic(), s.semantic());

    let next = Click::positive(9, 9, 0);
    assert_eq!(s.apply_click(1, next).unwrap(), r.apply_click(1, next).unwrap());
    assert_eq!(s.propagate_memory(1).unwrap(), r.propagate_memory(1).unwrap());
    assert_eq!(s.propagate_exemplars().unwrap(), r.propagate_exemplars().unwrap());
}

#[test]
fn snapshot_rejects_mismatch_and_corruption() {
    let model = Arc::new(always_on());
    let s = busy_session(Arc::clone(&model), volume(16, 16, 4));
    let mut buf = Vec::new();
    write_snapshot(&s, &mut buf).unwrap();

    let other = Session::new(Arc::clone(&model), volume(16, 16, 5)).unwrap();
    let err = read_snapshot(Arc::clone(&model), Arc::clone(other.prepared()), &mut buf.as_slice());
    assert!(matches!(err, Err(SnapshotError::Extents { .. })));

    let mut short = buf.clone();
    short.truncate(buf.len() - 9);
    assert!(read_snapshot(Arc::clone(&model), Arc::clone(s.prepared()), &mut short.as_slice()).is_err());

    let mut model_bytes = Vec::new();
    model.save(&mut model_bytes).unwrap();
    let err = read_snapshot(Arc::clone(&model), Arc::clone(s.prepared()), &mut model_bytes.as_slice());
    assert!(matches!(err, Err(SnapshotError::Manifest(_))), "a model checkpoint is not a session");
}

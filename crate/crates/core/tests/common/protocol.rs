//! Phantom train/evaluate protocol shared by the directional checks.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;
use std::sync::Arc;

use mois_core::evaluation::{connected_components, lesion_f1, run_lesionwise_eval, Connectivity, EvalConfig};
use mois_core::inference::{Merge, PreparedVolume, Session, SessionEvaluator};
use mois_core::model::{Model, ModelConfig};
use mois_core::training::{generate_phantom, median, train, LesionClass, Phantom, TrainConfig};
use mois_core::volume::Mask;

pub const TEST_SEEDS: std::ops::Range<u64> = 9000..9010;

pub fn phantom_config() -> mois_core::training::PhantomConfig {
    let mut p = mois_core::training::PhantomConfig::default();
    p.extents = [64, 64, 8];
    p.class_a.count = [5, 7];
    p
}

pub fn train_config(shared_attention: bool) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model = ModelConfig {
        shared_attention,
        ..ModelConfig::compact()
    };
    cfg.phantom = phantom_config();
    cfg.optimizer.lr = 1e-3;
    cfg.epochs = 12;
    cfg.samples_per_epoch = 80;
    cfg.train_volumes = 40;
    cfg.val_volumes = 3;
    cfg.seed = 7;
    cfg
}

fn cache_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance-cache");
    std::fs::create_dir_all(&dir).expect("cache dir");
    dir
}

/// Trains under `cfg`, reusing a checkpoint cached by config hash unless
/// `MOIS_RETRAIN` is set.
pub fn trained(cfg: &TrainConfig) -> Model {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut h = DefaultHasher::new();
    json.hash(&mut h);
    let path = cache_dir().join(format!("model-{:016x}.ckpt", h.finish()));
    if std::env::var_os("MOIS_RETRAIN").is_none() {
        if let Ok(f) = std::fs::File::open(&path) {
            if let Ok(m) = Model::load(&mut std::io::BufReader::new(f)) {
                return m;
            }
        }
    }
    let out = train(cfg, None, |e| {
        eprintln!(
            "  epoch {} loss {:.4} val {:?} ({:.1}s)",
            e.epoch, e.loss_total, e.val_scan_dsc, e.seconds
        )
    })
    .expect("training succeeds");
    let tmp = path.with_extension("tmp");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp).expect("create cache"));
    out.model.save(&mut f).expect("save");
    drop(f);
    std::fs::rename(tmp, &path).expect("rename");
    out.model
}

pub fn test_phantoms() -> Vec<Phantom> {
    TEST_SEEDS.map(|s| generate_phantom(&phantom_config(), s).expect("feasible")).collect()
}

#[derive(Debug, Clone)]
pub struct PhantomScore {
    pub scan_dsc: f64,
    pub unprompted_f1: f64,
    pub distractor_voxels: usize,
    pub predicted_voxels: usize,
}

/// Drops every predicted component touching one of the prompted lesions.
fn unprompted_parts(pred: &Mask, reference: &Mask, chosen: &[Mask]) -> (Mask, Mask) {
    let mut prompted = Mask::empty(reference.extents);
    for c in chosen {
        prompted.union_with(c);
    }
    let labels = connected_components(pred, Connectivity::C26);
    let mut touching = vec![false; labels.count as usize + 1];
    for (i, &l) in labels.data.iter().enumerate() {
        if l != 0 && prompted.data[i] != 0 {
            touching[l as usize] = true;
        }
    }
    let p = Mask {
        extents: pred.extents,
        data: labels.data.iter().map(|&l| (l != 0 && !touching[l as usize]) as u8).collect(),
    };
    (p, reference.minus(&prompted))
}

pub struct Prepared {
    pub phantom: Phantom,
    pub prepared: Arc<PreparedVolume>,
}

pub fn prepare(model: &Arc<Model>, phantoms: &[Phantom]) -> Vec<Prepared> {
    phantoms
        .iter()
        .map(|p| Prepared {
            phantom: p.clone(),
            prepared: Arc::new(PreparedVolume::new(model, Arc::new(p.volume.clone())).expect("prepare")),
        })
        .collect()
}

pub fn evaluate(model: &Arc<Model>, set: &[Prepared], lesions: usize, clicks: usize, merge: Merge) -> Vec<PhantomScore> {
    let cfg = EvalConfig {
        l_chosen: lesions,
        c_chosen: clicks,
        ..EvalConfig::default()
    };
    set.iter()
        .map(|p| {
            let m = Arc::clone(model);
            let prepared = Arc::clone(&p.prepared);
            let run = run_lesionwise_eval(
                |_| Ok(SessionEvaluator::new(Session::with_prepared(m, prepared), merge)),
                &p.phantom.volume,
                &p.phantom.target(),
                &cfg,
            )
            .expect("evaluation runs");
            let (pu, ru) = unprompted_parts(&run.prediction, &run.reference, &run.chosen);
            let f1 = lesion_f1(&pu, &ru, cfg.iou_threshold, cfg.connectivity).expect("same extents").f1;
            let b = p.phantom.class_mask(LesionClass::B);
            PhantomScore {
                scan_dsc: run.report.scan_dsc,
                unprompted_f1: f1,
                distractor_voxels: run.prediction.intersection_count(&b),
                predicted_voxels: run.prediction.count(),
            }
        })
        .collect()
}

pub fn median_of(scores: &[PhantomScore], f: impl Fn(&PhantomScore) -> f64) -> f64 {
    let mut v: Vec<f64> = scores.iter().map(f).collect();
    median(&mut v)
}

pub fn distractor_share(scores: &[PhantomScore]) -> f64 {
    let d: usize = scores.iter().map(|s| s.distractor_voxels).sum();
    let p: usize = scores.iter().map(|s| s.predicted_voxels).sum();
    if p == 0 {
        0.0
    } else {
        d as f64 / p as f64
    }
}

//! Phantom data, losses and the optimization loop.

pub mod augment;
pub mod data;
pub mod loss;
pub mod optim;
pub mod phantom;
pub mod step;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::evaluation::{run_lesionwise_eval, EvalConfig, EvalError};
use crate::inference::{Merge, PreparedVolume, Session, SessionEvaluator};
use crate::model::{Model, ModelConfig, ModelError};
use crate::tensor::{Graph, TensorError};

pub use augment::{Affine, AugmentConfig};
pub use data::{make_sample, PreparedPhantom, SampleConfig, TrainingSample};
pub use optim::{AdamW, AdamWConfig};
pub use phantom::{generate_phantom, ClassSpec, LesionClass, Phantom, PhantomConfig};
pub use step::{sample_loss, LossValues, LossVars, StepOptions};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("infeasible phantom: {0}")]
    Infeasible(String),
    #[error("loss diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        Self::Model(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub phantom: PhantomConfig,
    pub augment: AugmentConfig,
    pub optimizer: AdamWConfig,
    /// Window length `D_train`.
    pub window: usize,
    /// Prompted lesions per sample `N_train`.
    pub max_prompted: usize,
    pub max_corrections: usize,
    /// Share of samples with no prompted lesion (fallback supervision).
    pub p_no_prompt: f64,
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub teacher_forcing_epochs: usize,
    /// Training volumes use seeds `data_seed..data_seed + train_volumes`,
    /// validation volumes the following `val_volumes` seeds.
    pub data_seed: u64,
    pub train_volumes: usize,
    pub val_volumes: usize,
    pub seed: u64,
    pub val: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            phantom: PhantomConfig::default(),
            augment: AugmentConfig::default(),
            optimizer: AdamWConfig::default(),
            window: 4,
            max_prompted: 3,
            max_corrections: 6,
            p_no_prompt: 0.1,
            epochs: 30,
            samples_per_epoch: 80,
            teacher_forcing_epochs: 1,
            data_seed: 1000,
            train_volumes: 40,
            val_volumes: 10,
            seed: 0,
            val: EvalConfig {
                l_chosen: 3,
                c_chosen: 1,
                ..EvalConfig::default()
            },
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.phantom.validate()?;
        self.val.validate()?;
        if self.window == 0 || self.max_prompted == 0 {
            return Err(TrainError::Config("window and max_prompted must be positive".into()));
        }
        if self.train_volumes == 0 {
            return Err(TrainError::Config("train_volumes must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(TrainError::Config("lr must be positive".into()));
        }
        Ok(())
    }

    pub fn train_seeds(&self) -> std::ops::Range<u64> {
        self.data_seed..self.data_seed + self.train_volumes as u64
    }

    pub fn val_seeds(&self) -> std::ops::Range<u64> {
        let s = self.data_seed + self.train_volumes as u64;
        s..s + self.val_volumes as u64
    }

    fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            window: self.window,
            max_prompted: self.max_prompted,
            p_no_prompt: self.p_no_prompt,
            min_area: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_instance: f64,
    pub loss_object: f64,
    pub loss_semantic: f64,
    pub val_scan_dsc: Option<f64>,
    pub seconds: f64,
}

/// Median scan DSC of lesion-wise evaluation over phantoms.
pub fn validate_model(model: &Model, phantoms: &[Phantom], cfg: &EvalConfig, merge: Merge) -> Result<f64, TrainError> {
    let model = Arc::new(model.clone());
    let mut scores = Vec::with_capacity(phantoms.len());
    for p in phantoms {
        let vol = Arc::new(p.volume.clone());
        let prepared = Arc::new(PreparedVolume::new(&model, vol).map_err(|e| EvalError::Model(e.to_string()))?);
        let m = Arc::clone(&model);
        let run = run_lesionwise_eval(
            |_| Ok(SessionEvaluator::new(Session::with_prepared(m, prepared), merge)),
            &p.volume,
            &p.target(),
            cfg,
        )?;
        scores.push(run.report.scan_dsc);
    }
    Ok(median(&mut scores))
}

pub fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

/// Where training writes its artifacts.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
}

fn save_model(model: &Model, path: &Path) -> Result<(), TrainError> {
    let tmp = path.with_extension("tmp");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
    model.save(&mut f)?;
    drop(f);
    std::fs::rename(tmp, path)?;
    Ok(())
}

/// Trains from scratch. On divergence the last good checkpoint stays on disk.
pub fn train(
    cfg: &TrainConfig,
    out: Option<&TrainOutput>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let side = cfg.model.image_size;
    let train_set: Vec<PreparedPhantom> = cfg
        .train_seeds()
        .map(|s| generate_phantom(&cfg.phantom, s).map(|p| PreparedPhantom::new(&p, side)))
        .collect::<Result<_, _>>()?;
    let val_set: Vec<Phantom> = cfg
        .val_seeds()
        .map(|s| generate_phantom(&cfg.phantom, s))
        .collect::<Result<_, _>>()?;
    let mut opt = AdamW::new(cfg.optimizer.clone(), &model.params);
    let sample_cfg = cfg.sample_config();

    let mut writer = match out {
        Some(o) => {
            std::fs::create_dir_all(&o.dir)?;
            Some(csv::Writer::from_path(o.metrics())?)
        }
        None => None,
    };
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let opts = StepOptions {
            teacher_forcing: epoch < cfg.teacher_forcing_epochs,
            max_corrections: cfg.max_corrections,
        };
        let mut sums = LossValues::default();
        for step in 0..cfg.samples_per_epoch {
            let idx = rand::Rng::random_range(&mut rng, 0..train_set.len());
            let sample = make_sample(&train_set[idx], &sample_cfg, &cfg.augment, &mut rng);
            let mut g = Graph::new();
            let lv = sample_loss(&model, &mut g, &sample, opts, &mut rng)?;
            let v = lv.values(&g);
            if !v.total.is_finite() {
                return Err(TrainError::Diverged { epoch, step });
            }
            let grads = g.backward(lv.total)?;
            opt.step(&mut model.params, &grads);
            if model.params.iter().any(|(_, _, t)| !t.is_finite()) {
                return Err(TrainError::Diverged { epoch, step });
            }
            sums.total += v.total;
            sums.instance += v.instance;
            sums.object += v.object;
            sums.semantic += v.semantic;
        }
        let n = cfg.samples_per_epoch.max(1) as f64;
        let val_scan_dsc = if val_set.is_empty() {
            None
        } else {
            Some(validate_model(&model, &val_set, &cfg.val, Merge::Union)?)
        };
        let entry = EpochLog {
            epoch,
            loss_total: sums.total / n,
            loss_instance: sums.instance / n,
            loss_object: sums.object / n,
            loss_semantic: sums.semantic / n,
            val_scan_dsc,
            seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(w) = writer.as_mut() {
            w.serialize(&entry)?;
            w.flush()?;
        }
        if let Some(o) = out {
            save_model(&model, &o.checkpoint())?;
        }
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}

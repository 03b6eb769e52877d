//! `mois` subcommands: phantom-gen, train, eval, serve.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use mois_core::evaluation::{run_lesionwise_eval, EvalConfig, MetricsReport};
use mois_core::inference::{Merge, PreparedVolume, Session, SessionEvaluator};
use mois_core::io::{load_mask, load_volume, save_mask, save_volume};
use mois_core::model::Model;
use mois_core::training::{generate_phantom, train, LesionClass, PhantomConfig, TrainConfig, TrainOutput};
use mois_core::volume::{Mask, Volume};
use serde::Serialize;

use crate::{AppState, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "mois", version, about = "Exemplar-based multi-object interactive segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic phantom volumes with ground truth in the native format.
    PhantomGen(PhantomGenArgs),
    /// Train a model from a TOML config.
    Train(TrainArgs),
    /// Run the lesion-wise interactive evaluation on phantoms or stored volumes.
    Eval(EvalArgs),
    /// Start the HTTP session service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct PhantomGenArgs {
    /// Phantom generator config (TOML); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub count: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Receives model.ckpt and metrics.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluation config (TOML) with `l_chosen`, `c_chosen` and friends.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Stored volume to evaluate; needs `--gt`. Phantoms are generated otherwise.
    #[arg(long, requires = "gt")]
    pub volume: Option<PathBuf>,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long)]
    pub phantom_config: Option<PathBuf>,
    #[arg(long, default_value_t = 9000)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub count: u64,
    #[arg(long, value_enum, default_value_t = MergeArg::Union)]
    pub merge: MergeArg,
    /// Writes all reports as JSON here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum MergeArg {
    Union,
    SemanticOnly,
    InstanceOnly,
}

impl From<MergeArg> for Merge {
    fn from(m: MergeArg) -> Self {
        match m {
            MergeArg::Union => Merge::Union,
            MergeArg::SemanticOnly => Merge::SemanticOnly,
            MergeArg::InstanceOnly => Merge::InstanceOnly,
        }
    }
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Service config (TOML); `MOIS_*` environment variables override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}: {1}")]
    Read(PathBuf, std::io::Error),
    #[error("{0}: {1}")]
    Parse(PathBuf, toml::de::Error),
    #[error(transparent)]
    Train(#[from] mois_core::training::TrainError),
    #[error(transparent)]
    Io(#[from] mois_core::io::IoError),
    #[error(transparent)]
    Model(#[from] mois_core::model::ModelError),
    #[error(transparent)]
    Eval(#[from] mois_core::evaluation::EvalError),
    #[error(transparent)]
    Inference(#[from] mois_core::inference::InferenceError),
    #[error(transparent)]
    Startup(#[from] crate::StartupError),
    #[error("{0}")]
    Other(String),
}

fn read_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(p) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(p).map_err(|e| CliError::Read(p.to_path_buf(), e))?;
    toml::from_str(&text).map_err(|e| CliError::Parse(p.to_path_buf(), e))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::PhantomGen(a) => phantom_gen(&a).map(|paths| {
            for p in paths {
                println!("{}", p.display());
            }
        }),
        Command::Train(a) => run_train(&a),
        Command::Eval(a) => run_eval(&a).map(|_| ()),
        Command::Serve(a) => {
            let cfg = ServiceConfig::load(a.config.as_deref()).map_err(crate::StartupError::from)?;
            let state = Arc::new(AppState::from_config(cfg)?);
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Other(e.to_string()))?;
            rt.block_on(crate::serve(state))?;
            Ok(())
        }
    }
}

/// Writes `phantom-{seed}` (volume), `-gt` (class A mask) and `-distractor` (class B mask).
pub fn phantom_gen(a: &PhantomGenArgs) -> Result<Vec<PathBuf>, CliError> {
    let cfg: PhantomConfig = read_toml(a.config.as_deref())?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::Read(a.out.clone(), e))?;
    let mut written = Vec::new();
    for seed in a.seed..a.seed + a.count {
        let p = generate_phantom(&cfg, seed)?;
        let base = a.out.join(format!("phantom-{seed}"));
        save_volume(&p.volume, &base)?;
        save_mask(&p.target(), p.volume.spacing, &a.out.join(format!("phantom-{seed}-gt")))?;
        save_mask(
            &p.class_mask(LesionClass::B),
            p.volume.spacing,
            &a.out.join(format!("phantom-{seed}-distractor")),
        )?;
        written.push(base);
    }
    Ok(written)
}

fn run_train(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Read(p.clone(), e))?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::default(),
    };
    let out = TrainOutput { dir: a.out.clone() };
    train(&cfg, Some(&out), |e| {
        println!(
            "epoch {} loss {:.4} (instance {:.4}, object {:.4}, semantic {:.4}) val_dsc {} {:.1}s",
            e.epoch,
            e.loss_total,
            e.loss_instance,
            e.loss_object,
            e.loss_semantic,
            e.val_scan_dsc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            e.seconds
        );
    })?;
    println!("{}", out.checkpoint().display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct NamedReport {
    name: String,
    report: MetricsReport,
}

pub fn run_eval(a: &EvalArgs) -> Result<Vec<MetricsReport>, CliError> {
    let f = std::fs::File::open(&a.checkpoint).map_err(|e| CliError::Read(a.checkpoint.clone(), e))?;
    let model = Arc::new(Model::load(&mut std::io::BufReader::new(f))?);
    let cfg: EvalConfig = read_toml(a.config.as_deref())?;
    cfg.validate()?;
    let cases: Vec<(String, Volume, Mask)> = match (&a.volume, &a.gt) {
        (Some(v), Some(g)) => vec![(v.display().to_string(), load_volume(v)?, load_mask(g)?.0)],
        _ => {
            let pcfg: PhantomConfig = read_toml(a.phantom_config.as_deref())?;
            (a.seed..a.seed + a.count)
                .map(|s| {
                    let p = generate_phantom(&pcfg, s)?;
                    let gt = p.target();
                    Ok((format!("phantom-{s}"), p.volume, gt))
                })
                .collect::<Result<_, CliError>>()?
        }
    };
    println!("name,{}", MetricsReport::csv_header());
    let mut named = Vec::with_capacity(cases.len());
    for (name, volume, gt) in cases {
        let volume = Arc::new(volume);
        let prepared = Arc::new(PreparedVolume::new(&model, Arc::clone(&volume))?);
        let merge = a.merge.into();
        let run = run_lesionwise_eval(
            |_| Ok(SessionEvaluator::new(Session::with_prepared(Arc::clone(&model), Arc::clone(&prepared)), merge)),
            &volume,
            &gt,
            &cfg,
        )?;
        println!("{name},{}", run.report.csv_row());
        named.push(NamedReport { name, report: run.report });
    }
    if let Some(path) = &a.report {
        let json = serde_json::to_vec_pretty(&named).map_err(|e| CliError::Other(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| CliError::Read(path.clone(), e))?;
    }
    Ok(named.into_iter().map(|n| n.report).collect())
}

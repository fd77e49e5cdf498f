//! The six commands and what they share: the worker pool, per-item seeds
//! and checkpoint lookup.

use std::fs;
use std::path::{Path, PathBuf};

use osmosis_core::checkpoint::Checkpoint;
use osmosis_core::diffusion::NoiseSchedule;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;

pub mod ablate;
pub mod evaluate;
pub mod restore;
pub mod sample;
pub mod simulate;
pub mod train;

pub const CACHE_ENV: &str = "OSMOSIS_CACHE";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Train,
    Sample,
    Simulate,
    Restore,
    Evaluate,
    Ablate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Sample => "sample",
            Command::Simulate => "simulate",
            Command::Restore => "restore",
            Command::Evaluate => "evaluate",
            Command::Ablate => "ablate",
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunContext {
    pub config: RunConfig,
    pub jobs: usize,
    /// Sequential processing and no wall-clock fields in manifests.
    pub deterministic: bool,
}

impl RunContext {
    pub fn new(config: RunConfig, jobs: usize, deterministic: bool) -> Self {
        Self {
            config,
            jobs: if deterministic { 1 } else { jobs.max(1) },
            deterministic,
        }
    }

    pub fn output_dir(&self) -> Result<&Path> {
        let dir = &self.config.paths.output;
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(dir)
    }

    pub fn start_manifest(&self, command: Command) -> RunManifest {
        RunManifest::start(command.name(), &self.config, self.deterministic)
    }

    /// Runs `f` over `0..n` on `jobs` threads; results keep index order.
    pub fn par_map<T: Send>(&self, n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
        if self.jobs == 1 {
            return (0..n).map(f).collect();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
        pool.install(|| (0..n).into_par_iter().map(&f).collect())
    }

    pub fn item_seed(&self, index: usize) -> u64 {
        self.config.seed.wrapping_add(index as u64)
    }

    pub fn item_rng(&self, index: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.item_seed(index))
    }
}

pub fn run(command: Command, ctx: &RunContext) -> Result<RunManifest> {
    match command {
        Command::Train => train::run(ctx),
        Command::Sample => sample::run(ctx),
        Command::Simulate => simulate::run(ctx),
        Command::Restore => restore::run(ctx),
        Command::Evaluate => evaluate::run(ctx),
        Command::Ablate => ablate::run(ctx).map(|(m, _)| m),
    }
}

pub fn cache_dir() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

#[derive(Serialize)]
struct TrainingKey<'a> {
    schedule: &'a osmosis_core::diffusion::ScheduleParams,
    model: &'a osmosis_core::denoiser::ToyUNetConfig,
    train: &'a crate::config::TrainConfig,
    synth: &'a osmosis_core::data::SynthSceneSpec,
    dataset: &'a Option<PathBuf>,
    seed: u64,
    format: u32,
}

/// Hash of every setting that affects trained weights.
pub fn training_key(cfg: &RunConfig) -> String {
    let key = TrainingKey {
        schedule: &cfg.schedule,
        model: &cfg.model,
        train: &cfg.train,
        synth: &cfg.synth,
        dataset: &cfg.paths.dataset,
        seed: cfg.seed,
        format: osmosis_core::checkpoint::FORMAT_VERSION,
    };
    let json = serde_json::to_vec(&key).expect("key serializes");
    hex::encode(&Sha256::digest(&json)[..12])
}

pub fn cached_checkpoint_path(cfg: &RunConfig) -> Option<PathBuf> {
    cache_dir().map(|d| d.join("checkpoints").join(format!("{}.ckpt", training_key(cfg))))
}

/// The prior to restore or sample with: `paths.checkpoint`, else the
/// output directory's `checkpoint.ckpt`, else the cache entry for the
/// current training settings.
pub fn load_checkpoint(cfg: &RunConfig) -> Result<(Checkpoint, NoiseSchedule)> {
    let candidates = [
        cfg.paths.checkpoint.clone(),
        Some(cfg.paths.output.join(CHECKPOINT_FILE)),
        cached_checkpoint_path(cfg),
    ];
    let path = match &cfg.paths.checkpoint {
        Some(p) => p.clone(),
        None => candidates.into_iter().flatten().find(|p| p.is_file()).ok_or_else(|| {
            CliError::Config("no checkpoint: set paths.checkpoint or run `osmosis train` first".into())
        })?,
    };
    let ck = Checkpoint::load(&path)?;
    if ck.schedule != cfg.schedule {
        return Err(CliError::Config(format!(
            "{} was trained with {:?} but the config asks for {:?}",
            path.display(),
            ck.schedule,
            cfg.schedule
        )));
    }
    log::info!("using checkpoint {}", path.display());
    let sched = NoiseSchedule::new(ck.schedule)?;
    Ok((ck, sched))
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let json = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, json + "\n").map_err(|e| CliError::io(path, e))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Left-aligned text table with columns padded to their widest cell.
pub(crate) fn aligned_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    for r in rows {
        out += &line(r.iter().map(String::as_str).collect());
    }
    out
}

pub(crate) fn tsv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join("\t") + "\n";
    for r in rows {
        out += &(r.join("\t") + "\n");
    }
    out
}

pub(crate) fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        "-".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:.4}")
    }
}

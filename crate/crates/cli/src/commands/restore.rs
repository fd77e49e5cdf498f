//! `osmosis restore`: guided restoration of input images or of every
//! benchmark observation.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use osmosis_core::data::{degamma, gray_world_white_balance, read_pfm, read_rgb, write_pfm, write_rgb_png, Benchmark};
use osmosis_core::denoiser::ToyUNet;
use osmosis_core::diffusion::NoiseSchedule;
use osmosis_core::formation::WaterParams;
use osmosis_core::guidance::{restore_with_depth, GuidanceConfig, LossBreakdown, RestorationResult};
use osmosis_core::Raster;
use serde::Serialize;

use super::simulate::benchmark_dir;
use super::{load_checkpoint, write_json, Command, RunContext};
use crate::config::{RestoreOptions, RunConfig};
use crate::error::{CliError, Result};
use crate::manifest::{ItemRecord, RunManifest};
use crate::render::colorize_depth;

pub const UNCONDITIONAL: &str = "unconditional";
pub const GUIDED: &str = "guided";

pub fn results_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.results.clone().unwrap_or_else(|| cfg.paths.output.join("restored"))
}

/// Guidance settings after the restore options are applied.
pub fn effective_guidance(cfg: &RunConfig) -> GuidanceConfig {
    let mut g = cfg.guidance.clone();
    if cfg.restore.haze {
        g.haze = true;
        g.tie_phi = true;
    }
    g
}

/// White balance and haze linearization, in that order.
pub fn prepare_input(y: &Raster, opts: &RestoreOptions) -> Result<Raster> {
    let mut y = y.clone();
    if opts.white_balance {
        y = gray_world_white_balance(&y)?;
    }
    if opts.haze {
        y = degamma(&y, opts.haze_degamma);
    }
    Ok(y)
}

pub fn read_image(path: &Path) -> Result<Raster> {
    let img = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pfm")) {
        read_pfm(path)?
    } else {
        read_rgb(path)?
    };
    if img.channels() != 3 {
        return Err(osmosis_core::Error::Shape(format!("{}: expected 3 channels", path.display())).into());
    }
    Ok(img)
}

/// Restores one observation with the rng stream of `index`.
pub fn restore_item(
    ctx: &RunContext,
    model: &ToyUNet<f32>,
    sched: &NoiseSchedule,
    guidance: &GuidanceConfig,
    y: &Raster,
    frozen_depth: Option<&Raster>,
    index: usize,
) -> Result<RestorationResult> {
    let y = prepare_input(y, &ctx.config.restore)?;
    let mut rng = ctx.item_rng(index);
    Ok(restore_with_depth(&y, model, sched, guidance, frozen_depth, &mut rng)?)
}

#[derive(Serialize)]
struct ResultFile<'a> {
    name: &'a str,
    label: &'a str,
    phi: &'a WaterParams,
    final_loss: Option<&'a LossBreakdown>,
    loss_trace: &'a [LossBreakdown],
}

/// Writes `<stem>_J.png`, `_J.pfm`, `_depth.pfm`, `_depth.png` and
/// `_result.json` and returns the record for the run manifest.
pub fn write_result(dir: &Path, stem: &str, seed: u64, r: &RestorationResult, display_gamma: f64) -> Result<ItemRecord> {
    let label = if r.unconditional { UNCONDITIONAL } else { GUIDED };
    let paths: Vec<PathBuf> = ["J.png", "J.pfm", "depth.pfm", "depth.png", "result.json"]
        .iter()
        .map(|s| dir.join(format!("{stem}_{s}")))
        .collect();
    let display = if display_gamma == 1.0 {
        r.j.clone()
    } else {
        r.j.map(|v| v.powf(1.0 / display_gamma))
    };
    write_rgb_png(&paths[0], &display)?;
    write_pfm(&paths[1], &r.j)?;
    write_pfm(&paths[2], &r.depth)?;
    write_rgb_png(&paths[3], &colorize_depth(&r.depth))?;
    write_json(
        &paths[4],
        &ResultFile {
            name: stem,
            label,
            phi: &r.phi,
            final_loss: r.loss_trace.last(),
            loss_trace: &r.loss_trace,
        },
    )?;
    let mut metrics = std::collections::BTreeMap::new();
    if let Some(l) = r.loss_trace.last() {
        metrics.insert("l_rec".to_string(), l.l_rec);
        metrics.insert("loss_total".to_string(), l.total);
    }
    metrics.insert("mean_depth".to_string(), r.depth.channel_mean(0));
    Ok(ItemRecord {
        name: stem.to_string(),
        seed,
        label: Some(label.to_string()),
        metrics,
        outputs: paths,
    })
}

fn input_stems(inputs: &[PathBuf]) -> Result<Vec<String>> {
    let stems: Vec<String> = inputs
        .iter()
        .map(|p| {
            p.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .ok_or_else(|| CliError::Config(format!("input {} has no file name", p.display())))
        })
        .collect::<Result<_>>()?;
    let unique: BTreeSet<&String> = stems.iter().collect();
    if unique.len() != stems.len() {
        return Err(CliError::Config("input file names must be unique".into()));
    }
    Ok(stems)
}

/// Restores `paths.inputs`, or every benchmark observation when no inputs
/// are given and `paths.benchmark` is set. Outputs go to `paths.results`
/// (default `<output>/restored`).
pub fn run(ctx: &RunContext) -> Result<RunManifest> {
    let cfg = &ctx.config;
    ctx.output_dir()?;
    let (ck, sched) = load_checkpoint(cfg)?;
    let guidance = effective_guidance(cfg);
    let frozen = cfg.restore.frozen_depth.as_deref().map(read_pfm).transpose()?;
    let dir = results_dir(cfg);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut manifest = ctx.start_manifest(Command::Restore);

    let (stems, observations): (Vec<String>, Vec<Raster>) = if !cfg.paths.inputs.is_empty() {
        let stems = input_stems(&cfg.paths.inputs)?;
        let imgs = cfg.paths.inputs.iter().map(|p| read_image(p)).collect::<Result<_>>()?;
        (stems, imgs)
    } else if cfg.paths.benchmark.is_some() {
        let (bench, _) = Benchmark::load(&benchmark_dir(cfg))?;
        bench.items.into_iter().map(|it| (format!("{:04}", it.index), it.y)).unzip()
    } else {
        return Err(CliError::Config("restore needs paths.inputs or paths.benchmark".into()));
    };

    let n = observations.len();
    manifest.items = ctx.par_map(n, |i| {
        let r = restore_item(ctx, &ck.model, &sched, &guidance, &observations[i], frozen.as_ref(), i)?;
        log::info!("restored {} ({}/{n})", stems[i], i + 1);
        write_result(&dir, &stems[i], ctx.item_seed(i), &r, cfg.restore.display_gamma)
    })?;
    manifest.outputs = vec![dir];
    manifest.finish()?;
    Ok(manifest)
}

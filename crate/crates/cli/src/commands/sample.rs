//! `osmosis sample`: unconditional draws from the trained prior.

use osmosis_core::data::{write_pfm, write_rgb_png};
use osmosis_core::diffusion::sample_unconditional;

use super::{load_checkpoint, Command, RunContext};
use crate::error::Result;
use crate::manifest::{ItemRecord, RunManifest};
use crate::render::{colorize_depth_range, grid};

/// Writes `sample_NNN_rgb.pfm` / `_depth.pfm` (both in [0, 1]) per draw and
/// the preview grids `samples_rgb.png` and `samples_depth.png`.
pub fn run(ctx: &RunContext) -> Result<RunManifest> {
    let cfg = &ctx.config;
    let out = ctx.output_dir()?.to_path_buf();
    let (ck, sched) = load_checkpoint(cfg)?;
    let size = cfg.synth.size;
    let mut manifest = ctx.start_manifest(Command::Sample);
    let samples = ctx.par_map(cfg.sample.count, |i| {
        let mut rng = ctx.item_rng(i);
        let s = sample_unconditional(&ck.model, &sched, size, size, cfg.guidance.step_options(), &mut rng)?;
        let rgb = s.rgb.to_unit_range().clamped(0.0, 1.0);
        let depth = s.depth.to_unit_range().clamped(0.0, 1.0);
        let rgb_path = out.join(format!("sample_{i:03}_rgb.pfm"));
        let depth_path = out.join(format!("sample_{i:03}_depth.pfm"));
        write_pfm(&rgb_path, &rgb)?;
        write_pfm(&depth_path, &depth)?;
        log::info!("sample {}/{}", i + 1, cfg.sample.count);
        let record = ItemRecord {
            name: format!("{i:03}"),
            seed: ctx.item_seed(i),
            label: None,
            metrics: [("mean_depth".to_string(), depth.channel_mean(0))].into(),
            outputs: vec![rgb_path, depth_path],
        };
        Ok((rgb, depth, record))
    })?;
    if !samples.is_empty() {
        let rgb_tiles: Vec<_> = samples.iter().map(|s| s.0.clone()).collect();
        let depth_tiles: Vec<_> = samples.iter().map(|s| colorize_depth_range(&s.1, 0.0, 1.0)).collect();
        let rgb_grid = out.join("samples_rgb.png");
        let depth_grid = out.join("samples_depth.png");
        write_rgb_png(&rgb_grid, &grid(&rgb_tiles, cfg.sample.columns, 1.0))?;
        write_rgb_png(&depth_grid, &grid(&depth_tiles, cfg.sample.columns, 1.0))?;
        manifest.outputs = vec![rgb_grid, depth_grid];
    }
    manifest.items = samples.into_iter().map(|s| s.2).collect();
    manifest.finish()?;
    Ok(manifest)
}

//! `osmosis simulate`: the degraded synthetic benchmark.

use std::path::PathBuf;

use osmosis_core::data::{simulate_item, synth_scene, Benchmark, SynthSceneSpec};

use super::{Command, RunContext};
use crate::config::RunConfig;
use crate::error::Result;
use crate::manifest::{ItemRecord, RunManifest};

pub fn benchmark_dir(cfg: &RunConfig) -> PathBuf {
    cfg.paths.benchmark.clone().unwrap_or_else(|| cfg.paths.output.join("benchmark"))
}

/// Clean scenes come from `synth` with `simulate.scene_seed` in place of the
/// training seed.
pub fn scene_spec(cfg: &RunConfig) -> SynthSceneSpec {
    SynthSceneSpec {
        count: cfg.simulation.count,
        seed: cfg.simulate.scene_seed,
        ..cfg.synth.clone()
    }
}

pub fn build(ctx: &RunContext) -> Result<Benchmark> {
    let cfg = &ctx.config;
    cfg.simulation.validate()?;
    let scenes = scene_spec(cfg);
    scenes.validate()?;
    let items = ctx.par_map(cfg.simulation.count, |i| {
        Ok(simulate_item(&synth_scene(&scenes, i), &cfg.simulation, i)?)
    })?;
    Ok(Benchmark {
        spec: cfg.simulation.clone(),
        items,
    })
}

pub fn run(ctx: &RunContext) -> Result<RunManifest> {
    let cfg = &ctx.config;
    ctx.output_dir()?;
    let mut manifest = ctx.start_manifest(Command::Simulate);
    let bench = build(ctx)?;
    let dir = benchmark_dir(cfg);
    let source = format!("synth scene_seed={}", cfg.simulate.scene_seed);
    let saved = bench.save(&dir, &source)?;
    log::info!("wrote {} scenes to {}", bench.items.len(), dir.display());
    for (item, entry) in bench.items.iter().zip(&saved.items) {
        manifest.items.push(ItemRecord {
            name: format!("{:04}", item.index),
            seed: cfg.simulation.seed,
            label: None,
            metrics: [
                ("psnr_degraded".to_string(), osmosis_core::data::psnr(&item.y, &item.j)?),
                ("mean_depth".to_string(), item.depth.channel_mean(0)),
            ]
            .into(),
            outputs: [&entry.clean, &entry.depth, &entry.degraded].iter().map(|p| dir.join(p)).collect(),
        });
    }
    manifest.metrics.insert("count".into(), bench.items.len() as f64);
    manifest.outputs = vec![dir.join(osmosis_core::data::simulate::MANIFEST_FILE)];
    manifest.finish()?;
    Ok(manifest)
}

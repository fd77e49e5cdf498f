//! `osmosis evaluate`: scores restored images against the benchmark.

use std::collections::BTreeMap;

use osmosis_core::data::{depth_abs_rel, psnr, read_pfm, ssim, Benchmark, SimItem};
use osmosis_core::Raster;

use super::restore::results_dir;
use super::simulate::benchmark_dir;
use super::{aligned_table, fmt_metric, tsv, write_text, Command, RunContext};
use crate::config::{Reference, RunConfig};
use crate::error::Result;
use crate::manifest::{ItemRecord, RunManifest};

pub const METRIC_NAMES: [&str; 6] = [
    "psnr",
    "ssim",
    "psnr_input",
    "ssim_input",
    "depth_abs_rel",
    "depth_abs_rel_constant",
];

/// Baseline depth: the configured constant or the benchmark's mean depth.
pub fn constant_depth(cfg: &RunConfig, bench: &Benchmark) -> f64 {
    cfg.evaluate.constant_depth.unwrap_or_else(|| {
        let n = bench.items.len().max(1) as f64;
        bench.items.iter().map(|it| it.depth.channel_mean(0)).sum::<f64>() / n
    })
}

/// Metrics of one restored item. Depth entries are NaN when no depth
/// estimate is available.
pub fn score(
    item: &SimItem,
    j_hat: &Raster,
    depth_hat: Option<&Raster>,
    reference: Reference,
    constant: f64,
) -> Result<BTreeMap<String, f64>> {
    let target = match reference {
        Reference::Clean => &item.j,
        Reference::Degraded => &item.y,
    };
    let mut m = BTreeMap::new();
    m.insert("psnr".to_string(), psnr(j_hat, target)?);
    m.insert("ssim".to_string(), ssim(j_hat, target)?);
    m.insert("psnr_input".to_string(), psnr(&item.y, target)?);
    m.insert("ssim_input".to_string(), ssim(&item.y, target)?);
    let depth_err = match depth_hat {
        Some(d) => depth_abs_rel(d, &item.depth, None)?,
        None => f64::NAN,
    };
    m.insert("depth_abs_rel".to_string(), depth_err);
    let flat = item.depth.map(|_| constant);
    m.insert("depth_abs_rel_constant".to_string(), depth_abs_rel(&flat, &item.depth, None)?);
    Ok(m)
}

/// Per-metric mean over items; NaN entries are skipped.
pub fn means(rows: &[BTreeMap<String, f64>]) -> BTreeMap<String, f64> {
    METRIC_NAMES
        .iter()
        .map(|&k| {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r.get(k).copied()).filter(|v| !v.is_nan()).collect();
            let mean = if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            };
            (k.to_string(), mean)
        })
        .collect()
}

fn table_rows(names: &[String], rows: &[BTreeMap<String, f64>], mean: &BTreeMap<String, f64>) -> Vec<Vec<String>> {
    let line = |name: &str, r: &BTreeMap<String, f64>| {
        std::iter::once(name.to_string())
            .chain(METRIC_NAMES.iter().map(|k| fmt_metric(r.get(*k).copied().unwrap_or(f64::NAN))))
            .collect()
    };
    let mut out: Vec<Vec<String>> = names.iter().zip(rows).map(|(n, r)| line(n, r)).collect();
    out.push(line("mean", mean));
    out
}

/// Reads `<results>/<NNNN>_J.pfm` (and `_depth.pfm` when present) for every
/// benchmark item and writes `evaluation.txt` and `evaluation.tsv`.
pub fn run(ctx: &RunContext) -> Result<RunManifest> {
    let cfg = &ctx.config;
    let out = ctx.output_dir()?.to_path_buf();
    let (bench, _) = Benchmark::load(&benchmark_dir(cfg))?;
    let results = results_dir(cfg);
    let constant = constant_depth(cfg, &bench);
    let mut manifest = ctx.start_manifest(Command::Evaluate);
    let scored = ctx.par_map(bench.items.len(), |i| {
        let item = &bench.items[i];
        let stem = format!("{:04}", item.index);
        let j_hat = read_pfm(&results.join(format!("{stem}_J.pfm")))?;
        let depth_path = results.join(format!("{stem}_depth.pfm"));
        let depth = if depth_path.is_file() { Some(read_pfm(&depth_path)?) } else { None };
        Ok((stem, score(item, &j_hat, depth.as_ref(), cfg.evaluate.reference, constant)?))
    })?;
    let (names, rows): (Vec<String>, Vec<_>) = scored.into_iter().unzip();
    let mean = means(&rows);
    let header: Vec<&str> = std::iter::once("item").chain(METRIC_NAMES).collect();
    let table = table_rows(&names, &rows, &mean);
    let txt = out.join("evaluation.txt");
    let tsv_path = out.join("evaluation.tsv");
    write_text(&txt, &aligned_table(&header, &table))?;
    write_text(&tsv_path, &tsv(&header, &table))?;
    manifest.metrics = mean.iter().map(|(k, v)| (format!("mean_{k}"), *v)).collect();
    manifest.metrics.insert("constant_depth".into(), constant);
    manifest.items = names
        .into_iter()
        .zip(rows)
        .enumerate()
        .map(|(i, (name, metrics))| ItemRecord {
            name,
            seed: ctx.item_seed(i),
            label: None,
            metrics,
            outputs: Vec::new(),
        })
        .collect();
    manifest.outputs = vec![txt, tsv_path];
    manifest.finish()?;
    Ok(manifest)
}

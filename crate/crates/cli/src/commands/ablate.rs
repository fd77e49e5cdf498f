//! `osmosis ablate`: the full method against ablation variants on one
//! benchmark, with shared per-item seeds.

use std::collections::BTreeMap;

use osmosis_core::data::Benchmark;
use osmosis_core::guidance::ablation_preset;
use serde::{Deserialize, Serialize};

use super::evaluate::{constant_depth, means, score};
use super::restore::{effective_guidance, restore_item};
use super::simulate::benchmark_dir;
use super::{aligned_table, fmt_metric, load_checkpoint, tsv, write_json, write_text, Command, RunContext};
use crate::config::Reference;
use crate::error::Result;
use crate::manifest::{ItemRecord, RunManifest};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `None` for the full method.
    pub variant: Option<u8>,
    pub mean: BTreeMap<String, f64>,
    pub item_psnr: Vec<f64>,
}

impl AblationRow {
    pub fn label(&self) -> String {
        self.variant.map_or("full".to_string(), |v| format!("variant_{v}"))
    }

    pub fn psnr(&self) -> f64 {
        self.mean["psnr"]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    /// Full mean PSNR ≥ variant mean PSNR.
    Holds,
    /// Variant ahead by no more than the waiver margin.
    Waived,
    Violated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub waiver_margin_db: f64,
    /// Per variant: its ordering against the full method.
    pub ordering: Vec<(u8, Ordering)>,
    /// Variants whose mean PSNR is within the margin of the full method.
    pub waived: Vec<u8>,
}

impl AblationReport {
    pub fn full(&self) -> &AblationRow {
        &self.rows[0]
    }

    fn build(rows: Vec<AblationRow>, margin: f64) -> Self {
        let full = rows[0].psnr();
        let mut ordering = Vec::new();
        let mut waived = Vec::new();
        for r in &rows[1..] {
            let v = r.variant.expect("only the first row is the full method");
            let gap = full - r.psnr();
            if gap.abs() <= margin {
                waived.push(v);
            }
            let o = if gap >= 0.0 {
                Ordering::Holds
            } else if -gap <= margin {
                Ordering::Waived
            } else {
                Ordering::Violated
            };
            ordering.push((v, o));
        }
        Self {
            rows,
            waiver_margin_db: margin,
            ordering,
            waived,
        }
    }

    pub fn waiver_text(&self) -> String {
        let full = self.full().psnr();
        let mut s = format!(
            "# variants within {} dB of the full method's mean PSNR ({:.4} dB)\n",
            self.waiver_margin_db, full
        );
        for r in self.rows.iter().filter(|r| r.variant.is_some_and(|v| self.waived.contains(&v))) {
            s += &format!("{}\t{:.4}\t{:+.4}\n", r.label(), r.psnr(), r.psnr() - full);
        }
        s
    }
}

/// Restores every benchmark item with the full method and each configured
/// variant; writes `ablation.txt`, `ablation.tsv`, `ablation.json` and
/// `ablation_waivers.txt`.
pub fn run(ctx: &RunContext) -> Result<(RunManifest, AblationReport)> {
    let cfg = &ctx.config;
    let out = ctx.output_dir()?.to_path_buf();
    let (ck, sched) = load_checkpoint(cfg)?;
    let (bench, _) = Benchmark::load(&benchmark_dir(cfg))?;
    let constant = constant_depth(cfg, &bench);
    let full = effective_guidance(cfg);
    let mut manifest = ctx.start_manifest(Command::Ablate);
    let variants: Vec<Option<u8>> = std::iter::once(None).chain(cfg.ablate.variants.iter().map(|&v| Some(v))).collect();
    let mut rows = Vec::with_capacity(variants.len());
    for variant in variants {
        let guidance = match variant {
            None => full.clone(),
            Some(v) => ablation_preset(&full, v)?,
        };
        let n = bench.items.len();
        let scores = ctx.par_map(n, |i| {
            let item = &bench.items[i];
            let r = restore_item(ctx, &ck.model, &sched, &guidance, &item.y, None, i)?;
            let s = score(item, &r.j, Some(&r.depth), Reference::Clean, constant)?;
            log::info!(
                "{} item {}/{n}: psnr {:.2} (input {:.2})",
                variant.map_or("full".to_string(), |v| format!("variant {v}")),
                i + 1,
                s["psnr"],
                s["psnr_input"]
            );
            Ok(s)
        })?;
        let row = AblationRow {
            variant,
            mean: means(&scores),
            item_psnr: scores.iter().map(|s| s["psnr"]).collect(),
        };
        if variant.is_none() {
            manifest.items = scores
                .into_iter()
                .enumerate()
                .map(|(i, metrics)| ItemRecord {
                    name: format!("{:04}", bench.items[i].index),
                    seed: ctx.item_seed(i),
                    label: Some("full".into()),
                    metrics,
                    outputs: Vec::new(),
                })
                .collect();
        }
        rows.push(row);
    }
    let report = AblationReport::build(rows, cfg.ablate.waiver_margin_db);

    let header = ["method", "psnr", "ssim", "depth_abs_rel", "psnr_input", "depth_abs_rel_constant", "ordering"];
    let table: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            let ord = r
                .variant
                .and_then(|v| report.ordering.iter().find(|o| o.0 == v))
                .map_or("-".to_string(), |o| format!("{:?}", o.1).to_lowercase());
            std::iter::once(r.label())
                .chain(header[1..6].iter().map(|k| fmt_metric(r.mean[*k])))
                .chain(std::iter::once(ord))
                .collect()
        })
        .collect();
    let paths = ["ablation.txt", "ablation.tsv", "ablation.json", "ablation_waivers.txt"].map(|f| out.join(f));
    write_text(&paths[0], &aligned_table(&header, &table))?;
    write_text(&paths[1], &tsv(&header, &table))?;
    write_json(&paths[2], &report)?;
    write_text(&paths[3], &report.waiver_text())?;
    for r in &report.rows {
        for (k, v) in &r.mean {
            manifest.metrics.insert(format!("{}.{k}", r.label()), *v);
        }
    }
    manifest.metrics.insert("constant_depth".into(), constant);
    manifest.outputs = paths.to_vec();
    manifest.finish()?;
    Ok((manifest, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(variant: Option<u8>, psnr: f64) -> AblationRow {
        AblationRow {
            variant,
            mean: [("psnr".to_string(), psnr)].into(),
            item_psnr: vec![psnr],
        }
    }

    #[test]
    fn ordering_and_waivers() {
        let rows = vec![row(None, 20.0), row(Some(1), 19.0), row(Some(2), 20.1), row(Some(3), 20.5), row(Some(4), 19.85)];
        let r = AblationReport::build(rows, 0.2);
        assert_eq!(
            r.ordering,
            vec![(1, Ordering::Holds), (2, Ordering::Waived), (3, Ordering::Violated), (4, Ordering::Holds)]
        );
        assert_eq!(r.waived, vec![2, 4]);
        let text = r.waiver_text();
        assert!(text.contains("variant_2\t20.1000\t+0.1000"));
        assert!(text.contains("variant_4\t19.8500\t-0.1500"));
        assert!(!text.contains("variant_3"));
    }
}

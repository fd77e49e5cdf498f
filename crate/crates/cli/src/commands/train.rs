//! `osmosis train`: fits the toy RGBD prior and writes a checkpoint.

use std::fs;
use std::time::Instant;

use osmosis_core::checkpoint::{Checkpoint, TrainingMeta};
use osmosis_core::data::{augment, ingest, synth_scenes, DatasetRule};
use osmosis_core::denoiser::ToyUNet;
use osmosis_core::diffusion::{train_step, NoiseSchedule, TrainObjective};
use osmosis_core::nn::AdamConfig;
use osmosis_core::RgbdImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{cached_checkpoint_path, write_text, Command, RunContext, CHECKPOINT_FILE};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;

pub const METRICS_FILE: &str = "train_metrics.tsv";

fn training_images(cfg: &RunConfig) -> Result<(Vec<RgbdImage>, String)> {
    match &cfg.paths.dataset {
        Some(root) => {
            let rule = DatasetRule::preset(&cfg.train.dataset_rule).ok_or_else(|| {
                CliError::Config(format!("unknown train.dataset_rule {:?}", cfg.train.dataset_rule))
            })?;
            let report = ingest(root, &rule, cfg.synth.size, cfg.seed)?;
            for (p, why) in &report.skipped {
                log::warn!("skipped {}: {why}", p.display());
            }
            if report.images.is_empty() {
                return Err(osmosis_core::Error::Data(format!("no usable items under {}", root.display())).into());
            }
            Ok((report.images, format!("{}:{}", rule.name, root.display())))
        }
        None => Ok((synth_scenes(&cfg.synth)?.collect(), "synth".into())),
    }
}

/// Trains from scratch. Returns the checkpoint (EMA weights when
/// `train.ema_decay > 0`) and the metrics table.
pub fn train_prior(cfg: &RunConfig) -> Result<(Checkpoint, String)> {
    let (images, source) = training_images(cfg)?;
    let sched = NoiseSchedule::new(cfg.schedule)?;
    let tc = &cfg.train;
    let mut net = ToyUNet::<f32>::new(cfg.model.clone())?;
    net.set_optimizer(AdamConfig {
        lr: tc.lr,
        max_grad_norm: tc.max_grad_norm,
        warmup: tc.warmup,
        ..AdamConfig::default()
    });
    let objective = TrainObjective {
        vlb_weight: tc.vlb_weight,
        depth_fill: tc.depth_fill,
    };
    let mut ema: Vec<f32> = net.params().to_vec();
    let decay = tc.ema_decay as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut table = String::from("step\tl_simple\tl_vlb\ttotal\tgrad_norm\n");
    let (mut acc, mut acc_vlb, mut acc_total, mut n) = (0.0, 0.0, 0.0, 0usize);
    let mut last_l_simple = f64::NAN;
    let log_every = tc.log_every.max(1);
    let started = Instant::now();
    log::info!("training on {} {source} images for {} steps", images.len(), tc.steps);
    for step in 1..=tc.steps {
        let batch: Vec<RgbdImage> = (0..tc.batch_size)
            .map(|_| {
                let img = &images[rng.gen_range(0..images.len())];
                if tc.augment {
                    augment(img, &mut rng)
                } else {
                    img.clone()
                }
            })
            .collect();
        let loss = train_step(&batch, &mut net, &sched, &objective, &mut rng)?;
        if !loss.total.is_finite() {
            return Err(osmosis_core::Error::Numerical {
                t: step,
                detail: "training loss became non-finite".into(),
            }
            .into());
        }
        if decay > 0.0 {
            for (e, p) in ema.iter_mut().zip(net.params()) {
                *e = decay * *e + (1.0 - decay) * p;
            }
        }
        acc += loss.l_simple;
        acc_vlb += loss.l_vlb;
        acc_total += loss.total;
        n += 1;
        if step % log_every == 0 || step == tc.steps {
            let k = n as f64;
            last_l_simple = acc / k;
            table += &format!(
                "{step}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                acc / k,
                acc_vlb / k,
                acc_total / k,
                net.last_grad_norm()
            );
            log::info!("step {step}/{} l_simple {:.4} ({:.0?})", tc.steps, acc / k, started.elapsed());
            (acc, acc_vlb, acc_total, n) = (0.0, 0.0, 0.0, 0);
        }
    }
    let params = if decay > 0.0 { ema } else { net.params().to_vec() };
    let model = ToyUNet::from_params(cfg.model.clone(), params)?;
    let meta = TrainingMeta {
        steps: tc.steps as u64,
        batch_size: tc.batch_size,
        seed: cfg.seed,
        learning_rate: tc.lr,
        final_l_simple: last_l_simple,
        data: source,
    };
    Ok((
        Checkpoint {
            schedule: cfg.schedule,
            meta,
            model,
        },
        table,
    ))
}

/// Writes `checkpoint.ckpt` and `train_metrics.tsv`, reusing the cache
/// entry for identical training settings when `OSMOSIS_CACHE` is set.
pub fn run(ctx: &RunContext) -> Result<RunManifest> {
    let cfg = &ctx.config;
    let out = ctx.output_dir()?;
    let mut manifest = ctx.start_manifest(Command::Train);
    let ck_path = out.join(CHECKPOINT_FILE);
    let metrics_path = out.join(METRICS_FILE);
    let cached = cached_checkpoint_path(cfg);
    let cached_metrics = cached.as_ref().map(|p| p.with_extension("tsv"));
    let hit = cached.as_ref().filter(|p| p.is_file()).zip(cached_metrics.as_ref().filter(|p| p.is_file()));
    let ck = if let Some((c, t)) = hit {
        log::info!("reusing cached checkpoint {}", c.display());
        let ck = Checkpoint::load(c)?;
        ck.save(&ck_path)?;
        fs::copy(t, &metrics_path).map_err(|e| CliError::io(t, e))?;
        ck
    } else {
        let (ck, table) = train_prior(cfg)?;
        ck.save(&ck_path)?;
        write_text(&metrics_path, &table)?;
        if let (Some(c), Some(t)) = (cached, cached_metrics) {
            let dir = c.parent().expect("cache entries live in a directory");
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            ck.save(&c)?;
            write_text(&t, &table)?;
        }
        ck
    };
    manifest.metrics.insert("final_l_simple".into(), ck.meta.final_l_simple);
    manifest.metrics.insert("param_count".into(), ck.model.param_count() as f64);
    manifest.outputs = vec![ck_path, metrics_path];
    manifest.finish()?;
    Ok(manifest)
}

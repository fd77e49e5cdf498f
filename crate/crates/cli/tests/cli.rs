mod common;

use std::fs;

use common::{check, osmosis, tiny_sets};
use osmosis_cli::RunManifest;

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = osmosis("train", &["train.stepz=3".into()], &[], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
}

#[test]
fn missing_input_image_fails_without_panicking() {
    let dir = tempfile::tempdir().unwrap();
    let mut sets = tiny_sets(dir.path());
    check(&osmosis("train", &sets, &[], dir.path()));
    sets.push(format!("paths.inputs=[{:?}]", dir.path().join("nope.png").display().to_string()));
    let out = osmosis("restore", &sets, &[], dir.path());
    assert!(matches!(out.status.code(), Some(3 | 4)), "{:?}", out.status);
    assert!(!String::from_utf8_lossy(&out.stderr).contains("panicked"));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let sets = tiny_sets(dir.path());
    check(&osmosis("train", &sets, &[], &cache));
    assert!(dir.path().join("checkpoint.ckpt").is_file());
    assert!(fs::read_to_string(dir.path().join("train_metrics.tsv")).unwrap().lines().count() > 1);

    check(&osmosis("sample", &sets, &[], &cache));
    assert!(dir.path().join("samples_rgb.png").is_file());
    assert!(dir.path().join("samples_depth.png").is_file());

    check(&osmosis("simulate", &sets, &[], &cache));
    let bench = dir.path().join("benchmark");
    assert!(bench.join("manifest.json").is_file());

    // Evaluating the observations against themselves.
    let results = dir.path().join("restored");
    fs::create_dir_all(&results).unwrap();
    for i in 0..3 {
        fs::copy(bench.join(format!("{i:04}_y.pfm")), results.join(format!("{i:04}_J.pfm"))).unwrap();
    }
    let mut eval_sets = sets.clone();
    eval_sets.push(format!("paths.benchmark={:?}", bench.display().to_string()));
    eval_sets.push("evaluate.reference=\"degraded\"".into());
    check(&osmosis("evaluate", &eval_sets, &[], &cache));
    let tsv = fs::read_to_string(dir.path().join("evaluation.tsv")).unwrap();
    let header: Vec<&str> = tsv.lines().next().unwrap().split('\t').collect();
    let mean: Vec<&str> = tsv.lines().last().unwrap().split('\t').collect();
    let col = |name: &str| mean[header.iter().position(|h| *h == name).unwrap()];
    assert_eq!(col("psnr"), "inf");
    assert_eq!(col("ssim"), "1.0000");

    // Zero guidance scales run the unconditional sampler.
    let mut uncond = sets.clone();
    uncond.push(format!("paths.benchmark={:?}", bench.display().to_string()));
    uncond.push("paths.results=\"unguided\"".into());
    uncond.push("guidance.scale_rgb=[0.0, 0.0, 0.0]".into());
    uncond.push("guidance.scale_depth=0.0".into());
    check(&osmosis("restore", &uncond, &[], &cache));
    let m = RunManifest::load(&dir.path().join("restore_manifest.json")).unwrap();
    assert_eq!(m.items.len(), 3);
    assert!(m.items.iter().all(|it| it.label.as_deref() == Some("unconditional")));
}

#[test]
fn worker_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let mut runs = Vec::new();
    for jobs in ["1", "3"] {
        let out = dir.path().join(format!("jobs{jobs}"));
        let mut sets = tiny_sets(&out);
        check(&osmosis("train", &sets, &[], &cache));
        check(&osmosis("simulate", &sets, &[], &cache));
        sets.push(format!("paths.benchmark={:?}", out.join("benchmark").display().to_string()));
        check(&osmosis("restore", &sets, &["--jobs", jobs], &cache));
        let files: Vec<Vec<u8>> = (0..3)
            .map(|i| fs::read(out.join(format!("restored/{i:04}_J.pfm"))).unwrap())
            .collect();
        runs.push(files);
    }
    assert_eq!(runs[0], runs[1]);
}

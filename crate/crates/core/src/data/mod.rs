//! Datasets, synthetic scenes, the simulation benchmark and metrics.

pub mod ingest;
pub mod io;
pub mod metrics;
pub mod preprocess;
pub mod simulate;
pub mod synth;

pub use ingest::{ingest, CropMode, DatasetRule, DepthMode, IngestReport, MaskSource};
pub use io::{read_depth, read_gray_raw, read_mask, read_pfm, read_rgb, write_depth_png16, write_gray_png, write_mask_png, write_pfm, write_rgb_png};
pub use metrics::{depth_abs_rel, psnr, ssim};
pub use preprocess::{augment, degamma, flip_horizontal, flip_vertical, gray_world_white_balance};
pub use simulate::{build_simulation, simulate_item, Benchmark, BenchmarkManifest, SimItem, SimulationSpec};
pub use synth::{luminance_depth_correlation, synth_scene, synth_scenes, SynthSceneSpec};

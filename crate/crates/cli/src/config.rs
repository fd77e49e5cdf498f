//! Run configuration: built-in profiles, a TOML file merged on top, and
//! `--set key.path=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use osmosis_core::data::{SimulationSpec, SynthSceneSpec};
use osmosis_core::denoiser::ToyUNetConfig;
use osmosis_core::diffusion::{NoiseSchedule, ScheduleParams};
use osmosis_core::guidance::GuidanceConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const PROFILES: [&str; 3] = ["base", "simulation", "desk"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Directory every command writes into.
    pub output: PathBuf,
    /// Trained prior; when unset, `train` output is looked up in the cache.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Benchmark directory written by `simulate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<PathBuf>,
    /// Restoration outputs read by `evaluate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub results: Option<PathBuf>,
    /// Folder of real RGBD data for `train`; synthetic scenes when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Images for `restore` (PNG or PFM, [0, 1]).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub max_grad_norm: f64,
    /// Decay of the exponential moving average whose weights are saved;
    /// 0 saves the raw weights.
    pub ema_decay: f64,
    pub vlb_weight: f64,
    pub depth_fill: f64,
    /// Random horizontal and vertical flips.
    pub augment: bool,
    pub log_every: usize,
    /// Dataset rule preset for `paths.dataset`.
    pub dataset_rule: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            lr: 1e-3,
            warmup: 100,
            max_grad_norm: 1.0,
            ema_decay: 0.995,
            vlb_weight: 1e-3,
            depth_fill: 0.0,
            augment: true,
            log_every: 50,
            dataset_rule: "nyu".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    /// Seed of the clean scenes; kept apart from `synth.seed` so benchmark
    /// scenes are not training scenes.
    pub scene_seed: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            scene_seed: 1_000_003,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub count: usize,
    /// Columns of the preview grid.
    pub columns: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { count: 16, columns: 4 }
    }
}

/// Image the restored colour is scored against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    #[default]
    Clean,
    Degraded,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub reference: Reference,
    /// Depth of the constant baseline in the [0, 1] benchmark frame; the
    /// mean benchmark depth when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant_depth: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestoreOptions {
    /// Gray-world balance of the input before restoration.
    pub white_balance: bool,
    /// Haze mode: tied scalar coefficient and linearized input.
    pub haze: bool,
    /// Exponent applied to the input in haze mode.
    pub haze_degamma: f64,
    /// Gamma applied to the restored PNG (`v^(1/γ)`); 1 writes linear values.
    pub display_gamma: f64,
    /// Frozen depth map (PFM, diffusion range) replacing the sampled depth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frozen_depth: Option<PathBuf>,
}

impl Default for RestoreOptions {
    fn default() -> Self {
        Self {
            white_balance: false,
            haze: false,
            haze_degamma: 2.2,
            display_gamma: 1.0,
            frozen_depth: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    /// Ablation variants compared against the full method.
    pub variants: Vec<u8>,
    /// Variants whose mean PSNR is below the full method's by at most this
    /// margin are listed in the waiver file instead of failing the ordering.
    pub waiver_margin_db: f64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            variants: vec![1, 2, 3],
            waiver_margin_db: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: String,
    pub seed: u64,
    pub paths: Paths,
    pub schedule: ScheduleParams,
    pub model: ToyUNetConfig,
    pub train: TrainConfig,
    pub synth: SynthSceneSpec,
    pub simulation: SimulationSpec,
    pub simulate: SimulateConfig,
    pub sample: SampleConfig,
    pub guidance: GuidanceConfig,
    pub restore: RestoreOptions,
    pub evaluate: EvaluateConfig,
    pub ablate: AblateConfig,
}

impl RunConfig {
    /// Real-world defaults with the full 1000-step schedule.
    pub fn base() -> Self {
        Self {
            profile: "base".into(),
            seed: 0,
            paths: Paths {
                output: PathBuf::from("osmosis-out"),
                ..Paths::default()
            },
            schedule: ScheduleParams::STANDARD,
            model: ToyUNetConfig::default(),
            train: TrainConfig::default(),
            synth: SynthSceneSpec::default(),
            simulation: SimulationSpec::default(),
            simulate: SimulateConfig::default(),
            sample: SampleConfig::default(),
            guidance: GuidanceConfig::real_world(),
            restore: RestoreOptions::default(),
            evaluate: EvaluateConfig::default(),
            ablate: AblateConfig::default(),
        }
    }

    /// Base with the simulated-benchmark guidance settings.
    pub fn simulation() -> Self {
        Self {
            profile: "simulation".into(),
            guidance: GuidanceConfig::simulation(),
            ..Self::base()
        }
    }

    /// Simulation settings scaled to a single CPU core: a shorter
    /// schedule and a narrower network. Guidance scales grow by
    /// `1000 / steps` so the summed guidance over the chain is unchanged.
    pub fn desk() -> Self {
        let mut cfg = Self::simulation();
        cfg.profile = "desk".into();
        cfg.schedule = ScheduleParams::compressed(DESK_STEPS);
        cfg.model.channels = DESK_WIDTH;
        let k = 1000.0 / DESK_STEPS as f64;
        cfg.guidance.scale_rgb = cfg.guidance.scale_rgb.map(|s| s * k);
        cfg.guidance.scale_depth *= k;
        cfg
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "base" => Ok(Self::base()),
            "simulation" => Ok(Self::simulation()),
            "desk" => Ok(Self::desk()),
            other => Err(CliError::Config(format!(
                "unknown profile {other:?}; expected one of {PROFILES:?}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        NoiseSchedule::new(self.schedule)?;
        self.model.validate()?;
        self.guidance.validate()?;
        self.synth.validate()?;
        self.synth.check_stride(self.model.stride())?;
        self.simulation.validate()?;
        if self.train.batch_size == 0 {
            return Err(CliError::Config("train.batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.train.ema_decay) {
            return Err(CliError::Config("train.ema_decay must be in [0, 1)".into()));
        }
        if self.sample.columns == 0 {
            return Err(CliError::Config("sample.columns must be positive".into()));
        }
        if let Some(d) = self.evaluate.constant_depth {
            if !(d.is_finite() && d > 0.0) {
                return Err(CliError::Config("evaluate.constant_depth must be positive".into()));
            }
        }
        if self.restore.haze_degamma <= 0.0 || self.restore.display_gamma <= 0.0 {
            return Err(CliError::Config("gamma values must be positive".into()));
        }
        for &v in &self.ablate.variants {
            if !(1..=6).contains(&v) {
                return Err(CliError::Config(format!("ablation variant {v} is not in 1..=6")));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

pub const DESK_STEPS: usize = 250;
pub const DESK_WIDTH: usize = 16;

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies one `a.b.c=value` override. The value is read as a TOML literal,
/// falling back to a bare string.
pub fn apply_set(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {assignment:?}")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        cur = match cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        {
            toml::Value::Table(t) => t,
            _ => return Err(CliError::Config(format!("{key:?}: {p:?} is not a table"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Reads the config table from a TOML file, or the `config` field of a
/// JSON run manifest.
fn read_table(path: &Path) -> Result<toml::Table> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg = v
            .get("config")
            .ok_or_else(|| CliError::Config(format!("{}: no config field", path.display())))?;
        let cfg: RunConfig = serde_json::from_value(cfg.clone())
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        return Ok(toml::Table::try_from(&cfg).expect("config serializes"));
    }
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Resolves the effective configuration: profile defaults, then the file,
/// then each override in order. Unknown keys are errors.
pub fn load(file: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut over = match file {
        Some(p) => read_table(p)?,
        None => toml::Table::new(),
    };
    for s in sets {
        apply_set(&mut over, s)?;
    }
    let profile = match over.get("profile") {
        None => "base".to_string(),
        Some(toml::Value::String(s)) => s.clone(),
        Some(v) => return Err(CliError::Config(format!("profile must be a string, got {v}"))),
    };
    let mut table = toml::Table::try_from(RunConfig::profile(&profile)?).expect("config serializes");
    merge(&mut table, over);
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_round_trip_through_toml() {
        for p in PROFILES {
            let cfg = RunConfig::profile(p).unwrap();
            cfg.validate().unwrap();
            let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn profiles_differ_where_documented() {
        let base = RunConfig::base();
        assert_eq!(base.guidance.scale_rgb, [7.0; 3]);
        assert_eq!(base.schedule.steps, 1000);
        let sim = RunConfig::simulation();
        assert_eq!(sim.guidance.scale_rgb, [4.0; 3]);
        assert!(sim.guidance.tie_phi);
        let desk = RunConfig::desk();
        assert_eq!(desk.schedule.steps, DESK_STEPS);
        assert_eq!(desk.guidance.scale_rgb, [16.0; 3]);
        assert_eq!(desk.guidance.scale_depth, 4.0);
    }

    #[test]
    fn overrides_apply_in_order() {
        let sets = [
            "profile=simulation".to_string(),
            "guidance.lambda_v=12.5".to_string(),
            "seed=4".to_string(),
            "paths.output=\"runs/a\"".to_string(),
            "paths.benchmark=bench".to_string(),
            "guidance.lambda_v=13".to_string(),
        ];
        let cfg = load(None, &sets).unwrap();
        assert_eq!(cfg.profile, "simulation");
        assert_eq!(cfg.guidance.lambda_v, 13.0);
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.paths.output, PathBuf::from("runs/a"));
        assert_eq!(cfg.paths.benchmark, Some(PathBuf::from("bench")));
        assert_eq!(cfg.guidance.scale_rgb, [4.0; 3]);
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(
            &p,
            "profile = \"desk\"\nseed = 9\nguidance.scale_rgb = [1.0, 2.0, 3.0]\n[train]\nsteps = 5\n",
        )
        .unwrap();
        let cfg = load(Some(&p), &["train.steps=7".into()]).unwrap();
        assert_eq!(cfg.profile, "desk");
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.guidance.scale_rgb, [1.0, 2.0, 3.0]);
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.schedule.steps, DESK_STEPS);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        for bad in [
            "guidance.lamda_v=1",
            "nonsense=1",
            "profile=fast",
            "guidance.clip_value=-1",
            "seed.x=1",
            "noequals",
            "schedule.steps=0",
        ] {
            let e = load(None, &[bad.to_string()]).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad}: {e}");
        }
    }

    #[test]
    fn manifest_json_config_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let mut cfg = RunConfig::desk();
        cfg.seed = 77;
        let json = serde_json::json!({ "command": "restore", "config": cfg });
        fs::write(&p, serde_json::to_string(&json).unwrap()).unwrap();
        assert_eq!(load(Some(&p), &[]).unwrap(), cfg);
    }
}

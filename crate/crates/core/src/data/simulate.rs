//! Paired benchmark of clean RGBD scenes and their simulated underwater
//! observations.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::io::{read_pfm, write_pfm, write_rgb_png};
use crate::error::{Error, Result};
use crate::formation::{apply_formation_nonneg, DepthScaling, WaterParams};
use crate::raster::{Raster, RgbdImage};

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    /// Per-channel sampling range of `φa`.
    pub phi_a: [(f64, f64); 3],
    /// Per-channel sampling range of `φb`; ignored when `tie` is set.
    pub phi_b: [(f64, f64); 3],
    /// Per-channel sampling range of `φ∞`.
    pub phi_inf: [(f64, f64); 3],
    /// Sample only `φa` and use it for `φb`.
    pub tie: bool,
    /// Swap draws so red attenuates most and `φ∞` is ordered
    /// red ≤ green ≤ blue.
    pub enforce_order: bool,
    pub count: usize,
    pub seed: u64,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        let profile = |p: [f64; 3]| p.map(|v| (0.4 * v, 1.6 * v));
        Self {
            phi_a: profile([1.1, 0.95, 0.95]),
            phi_b: profile([0.95, 0.8, 0.8]),
            phi_inf: [(0.1, 0.8); 3],
            tie: true,
            enforce_order: true,
            count: 50,
            seed: 0,
        }
    }
}

impl SimulationSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = |r: &(f64, f64), max: f64| r.0.is_finite() && r.1.is_finite() && 0.0 <= r.0 && r.0 <= r.1 && r.1 <= max;
        for c in 0..3 {
            if !ok(&self.phi_a[c], f64::MAX) || !ok(&self.phi_b[c], f64::MAX) {
                return Err(Error::Config(format!(
                    "coefficient ranges for channel {c} must be ordered and nonnegative"
                )));
            }
            if !ok(&self.phi_inf[c], 1.0) {
                return Err(Error::Config(format!(
                    "veiling-light range for channel {c} must be ordered within [0, 1]"
                )));
            }
        }
        if self.count == 0 {
            return Err(Error::Config("simulation count must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Draws the water parameters of item `index`.
    pub fn sample_phi(&self, index: usize) -> WaterParams {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let mut draw = |r: &(f64, f64)| if r.0 == r.1 { r.0 } else { rng.gen_range(r.0..r.1) };
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        let mut inf = [0.0; 3];
        for c in 0..3 {
            a[c] = draw(&self.phi_a[c]);
        }
        for c in 0..3 {
            b[c] = draw(&self.phi_b[c]);
        }
        for c in 0..3 {
            inf[c] = draw(&self.phi_inf[c]);
        }
        if self.enforce_order {
            put_max_first(&mut a);
            put_max_first(&mut b);
            inf.sort_by(f64::total_cmp);
        }
        if self.tie {
            WaterParams::tied(a, inf)
        } else {
            WaterParams::new(a, b, inf)
        }
    }
}

fn put_max_first(v: &mut [f64; 3]) {
    let i = (0..3).fold(0, |m, c| if v[c] > v[m] { c } else { m });
    v.swap(0, i);
}

/// One benchmark scene. `j`, `depth` and `y` hold f32-representable values
/// so the files on disk reproduce them exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct SimItem {
    pub index: usize,
    /// Clean image in [0, 1].
    pub j: Raster,
    /// Depth after the simulation scaling, in [0, 1].
    pub depth: Raster,
    /// Degraded observation.
    pub y: Raster,
    pub phi: WaterParams,
}

impl SimItem {
    /// Ground-truth depth in the diffusion range.
    pub fn depth_signed(&self) -> Raster {
        self.depth.map(|d| DepthScaling::SIMULATION.invert(d))
    }

    /// Recomputes the observation from `(j, depth, phi)`.
    pub fn regenerate_y(&self) -> Result<Raster> {
        degrade(&self.j, &self.depth, &self.phi)
    }
}

fn quantize(r: &Raster) -> Raster {
    r.map(|v| v as f32 as f64)
}

fn degrade(j: &Raster, depth: &Raster, phi: &WaterParams) -> Result<Raster> {
    Ok(quantize(&apply_formation_nonneg(j, depth, phi)?))
}

/// Degrades one clean scene with the parameters drawn for `index`.
pub fn simulate_item(clean: &RgbdImage, spec: &SimulationSpec, index: usize) -> Result<SimItem> {
    if clean.mask.iter().any(|m| !m) {
        return Err(Error::Data(format!(
            "clean scene {index} has invalid depth pixels"
        )));
    }
    let j = quantize(&clean.rgb.to_unit_range().clamped(0.0, 1.0));
    let depth = quantize(&clean.depth.map(|d| DepthScaling::SIMULATION.apply(d).clamp(0.0, 1.0)));
    let phi = spec.sample_phi(index);
    let y = degrade(&j, &depth, &phi)?;
    Ok(SimItem {
        index,
        j,
        depth,
        y,
        phi,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub spec: SimulationSpec,
    pub items: Vec<SimItem>,
}

/// Degrades the first `spec.count` scenes of `clean`.
pub fn build_simulation(
    clean: impl IntoIterator<Item = RgbdImage>,
    spec: &SimulationSpec,
) -> Result<Benchmark> {
    spec.validate()?;
    let items = clean
        .into_iter()
        .take(spec.count)
        .enumerate()
        .map(|(i, img)| simulate_item(&img, spec, i))
        .collect::<Result<Vec<_>>>()?;
    if items.len() < spec.count {
        return Err(Error::Data(format!(
            "simulation needs {} clean scenes, got {}",
            spec.count,
            items.len()
        )));
    }
    Ok(Benchmark {
        spec: spec.clone(),
        items,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub index: usize,
    pub clean: PathBuf,
    pub depth: PathBuf,
    pub degraded: PathBuf,
    pub phi: WaterParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkManifest {
    pub version: u32,
    pub spec: SimulationSpec,
    pub spec_hash: String,
    /// Free-form description of the clean scenes.
    pub source: String,
    pub items: Vec<ManifestItem>,
}

impl Benchmark {
    /// Writes PFM files for `J`, `D` and `y`, PNG previews of `J` and `y`,
    /// and the manifest. Paths in the manifest are relative to `dir`.
    pub fn save(&self, dir: &Path, source: &str) -> Result<BenchmarkManifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut items = Vec::with_capacity(self.items.len());
        for it in &self.items {
            let stem = format!("{:04}", it.index);
            let entry = ManifestItem {
                index: it.index,
                clean: PathBuf::from(format!("{stem}_clean.pfm")),
                depth: PathBuf::from(format!("{stem}_depth.pfm")),
                degraded: PathBuf::from(format!("{stem}_y.pfm")),
                phi: it.phi.clone(),
            };
            write_pfm(&dir.join(&entry.clean), &it.j)?;
            write_pfm(&dir.join(&entry.depth), &it.depth)?;
            write_pfm(&dir.join(&entry.degraded), &it.y)?;
            write_rgb_png(&dir.join(format!("{stem}_clean.png")), &it.j)?;
            write_rgb_png(&dir.join(format!("{stem}_y.png")), &it.y)?;
            items.push(entry);
        }
        let manifest = BenchmarkManifest {
            version: MANIFEST_VERSION,
            spec: self.spec.clone(),
            spec_hash: self.spec.hash(),
            source: source.to_string(),
            items,
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    /// Loads a saved benchmark and checks that every stored observation is
    /// reproduced bit for bit from its `(J, D, φ)`.
    pub fn load(dir: &Path) -> Result<(Self, BenchmarkManifest)> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: BenchmarkManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "unsupported benchmark manifest version {}",
                manifest.version
            )));
        }
        if manifest.spec_hash != manifest.spec.hash() {
            return Err(Error::Data("benchmark spec hash does not match its spec".into()));
        }
        let mut items = Vec::with_capacity(manifest.items.len());
        for m in &manifest.items {
            let item = SimItem {
                index: m.index,
                j: read_pfm(&dir.join(&m.clean))?,
                depth: read_pfm(&dir.join(&m.depth))?,
                y: read_pfm(&dir.join(&m.degraded))?,
                phi: m.phi.clone(),
            };
            let regen = item.regenerate_y()?;
            if regen.data().iter().zip(item.y.data()).any(|(a, b)| a.to_bits() != b.to_bits())
                || !regen.same_shape(&item.y)
            {
                return Err(Error::Data(format!(
                    "item {} does not regenerate its stored observation",
                    m.index
                )));
            }
            items.push(item);
        }
        Ok((
            Self {
                spec: manifest.spec.clone(),
                items,
            },
            manifest,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::metrics::psnr;
    use crate::data::synth::{synth_scene, SynthSceneSpec};

    fn scenes(n: usize) -> Vec<RgbdImage> {
        let s = SynthSceneSpec::default();
        (0..n).map(|i| synth_scene(&s, i)).collect()
    }

    #[test]
    fn default_draws_respect_ranges_and_order() {
        let spec = SimulationSpec::default();
        for i in 0..200 {
            let p = spec.sample_phi(i);
            assert!(p.is_tied());
            let (a, inf) = (p.phi_a(), p.phi_inf());
            assert!(a[0] >= a[1] && a[0] >= a[2]);
            assert!(inf[0] <= inf[1] && inf[1] <= inf[2]);
            assert!(a.iter().all(|v| (0.38..=1.76).contains(v)));
            assert!(inf.iter().all(|v| (0.1..=0.8).contains(v)));
        }
    }

    #[test]
    fn zero_coefficients_leave_the_scene_unchanged() {
        let spec = SimulationSpec {
            phi_a: [(0.0, 0.0); 3],
            phi_b: [(0.0, 0.0); 3],
            count: 3,
            ..SimulationSpec::default()
        };
        let b = build_simulation(scenes(3), &spec).unwrap();
        for it in &b.items {
            assert_eq!(it.y, it.j);
        }
    }

    #[test]
    fn same_seed_same_benchmark() {
        let spec = SimulationSpec {
            count: 4,
            seed: 9,
            ..SimulationSpec::default()
        };
        let a = build_simulation(scenes(4), &spec).unwrap();
        let b = build_simulation(scenes(4), &spec).unwrap();
        assert_eq!(a, b);
        let c = build_simulation(scenes(4), &SimulationSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_few_scenes_is_an_error() {
        let spec = SimulationSpec {
            count: 5,
            ..SimulationSpec::default()
        };
        assert!(build_simulation(scenes(2), &spec).is_err());
    }

    #[test]
    fn save_load_regenerates_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SimulationSpec {
            count: 3,
            tie: false,
            ..SimulationSpec::default()
        };
        let b = build_simulation(scenes(3), &spec).unwrap();
        let m = b.save(dir.path(), "synthetic").unwrap();
        assert_eq!(m.spec_hash.len(), 64);
        let (back, m2) = Benchmark::load(dir.path()).unwrap();
        assert_eq!(back, b);
        assert_eq!(m2, m);

        // A tampered observation is detected.
        let mut y = back.items[1].y.clone();
        y.data_mut()[0] += 0.25;
        write_pfm(&dir.path().join(&m.items[1].degraded), &y).unwrap();
        assert!(Benchmark::load(dir.path()).is_err());
    }

    #[test]
    fn stronger_attenuation_lowers_psnr() {
        let clean = &scenes(1)[0];
        let base = simulate_item(clean, &SimulationSpec::default(), 0).unwrap();
        let mut last = f64::INFINITY;
        for k in 1..=8 {
            let s = 0.2 * k as f64;
            let phi = WaterParams::tied([s * 1.1, s * 0.95, s * 0.95], base.phi.phi_inf());
            let y = apply_formation_nonneg(&base.j, &base.depth, &phi).unwrap();
            let p = psnr(&y, &base.j).unwrap();
            assert!(p < last, "psnr {p} at scale {s} did not drop below {last}");
            last = p;
        }
    }
}

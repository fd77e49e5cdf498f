//! Folder ingestion with per-dataset depth conventions.
//!
//! Layout: `<root>/rgb/<stem>.<ext>`, `<root>/depth/<stem>.{pfm,png}` and,
//! for [`MaskSource::Provided`], `<root>/mask/<stem>.png`.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma, Rgb};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{read_depth, read_mask, read_rgb};
use crate::error::{Error, Result};
use crate::raster::{Raster, RgbdImage};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DepthMode {
    /// Metric depth divided by the sensor maximum.
    NormalizeByMax { value: f64 },
    /// Relative disparity in [0, 1]; depth is `1 − disparity`.
    OneMinusDisparity,
    /// Depth already in [0, 1].
    AlreadyNormalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// A mask image per item; nonzero means valid.
    Provided,
    /// Zero and non-finite depth samples are invalid.
    HolesAsInvalid,
    /// Every pixel is valid.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CropMode {
    /// Resize the smaller side to the target, crop the other at the center.
    Center,
    /// Keep the bottom `target` rows (dropping sky at the top) and take a
    /// random horizontal window.
    BottomRandomX,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRule {
    pub name: String,
    pub depth_mode: DepthMode,
    pub mask_source: MaskSource,
    pub crop: CropMode,
    /// Multiplier applied to raw PNG depth samples (PFM values are used
    /// as stored).
    pub png_depth_unit: f64,
}

impl DatasetRule {
    /// Lidar depth in 1/256 m PNGs, 80 m maximum, holes masked.
    pub fn kitti() -> Self {
        Self {
            name: "kitti".into(),
            depth_mode: DepthMode::NormalizeByMax { value: 80.0 },
            mask_source: MaskSource::HolesAsInvalid,
            crop: CropMode::BottomRandomX,
            png_depth_unit: 1.0 / 256.0,
        }
    }

    /// Laser depth up to 350 m with provided masks.
    pub fn diode() -> Self {
        Self {
            name: "diode".into(),
            depth_mode: DepthMode::NormalizeByMax { value: 350.0 },
            mask_source: MaskSource::Provided,
            crop: CropMode::Center,
            png_depth_unit: 1.0,
        }
    }

    /// 8-bit relative disparity with provided masks.
    pub fn hr_wsi() -> Self {
        Self {
            name: "hr_wsi".into(),
            depth_mode: DepthMode::OneMinusDisparity,
            mask_source: MaskSource::Provided,
            crop: CropMode::Center,
            png_depth_unit: 1.0 / 255.0,
        }
    }

    /// Dense predicted depth, already normalized.
    pub fn redweb() -> Self {
        Self {
            name: "redweb".into(),
            depth_mode: DepthMode::AlreadyNormalized,
            mask_source: MaskSource::None,
            crop: CropMode::Center,
            png_depth_unit: 1.0 / 255.0,
        }
    }

    /// NYU-format folders: metric depth up to 10 m stored as millimetres.
    pub fn nyu() -> Self {
        Self {
            name: "nyu".into(),
            depth_mode: DepthMode::NormalizeByMax { value: 10.0 },
            mask_source: MaskSource::HolesAsInvalid,
            crop: CropMode::Center,
            png_depth_unit: 1e-3,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "kitti" => Some(Self::kitti()),
            "diode" => Some(Self::diode()),
            "hr_wsi" => Some(Self::hr_wsi()),
            "redweb" => Some(Self::redweb()),
            "nyu" => Some(Self::nyu()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let DepthMode::NormalizeByMax { value } = self.depth_mode {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::Config(format!(
                    "normalize_by_max value must be positive, got {value}"
                )));
            }
        }
        if !(self.png_depth_unit > 0.0 && self.png_depth_unit.is_finite()) {
            return Err(Error::Config("png_depth_unit must be positive".into()));
        }
        Ok(())
    }

    /// Maps one stored depth sample to [0, 1], or `None` for a hole.
    pub fn normalize(&self, raw: f64) -> Option<f64> {
        if !raw.is_finite() {
            return None;
        }
        let d = match self.depth_mode {
            DepthMode::NormalizeByMax { value } => raw / value,
            DepthMode::OneMinusDisparity => 1.0 - raw,
            DepthMode::AlreadyNormalized => raw,
        };
        Some(d.clamp(0.0, 1.0))
    }

    fn is_hole(&self, raw: f64) -> bool {
        !raw.is_finite() || raw <= 0.0
    }
}

/// Result of ingesting a folder.
#[derive(Debug)]
pub struct IngestReport {
    /// Items in sorted file-name order.
    pub images: Vec<RgbdImage>,
    pub names: Vec<String>,
    /// Files that could not be used, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

/// Converts one `(rgb, raw depth, mask)` triple to the diffusion range.
/// `rgb` is in [0, 1]; `mask`, if given, is nonzero where valid.
pub fn prepare(
    rgb: &Raster,
    raw_depth: &Raster,
    mask: Option<&Raster>,
    rule: &DatasetRule,
    target: usize,
    rng: &mut impl Rng,
) -> Result<RgbdImage> {
    if rgb.channels() != 3 || raw_depth.channels() != 1 {
        return Err(Error::Data("expected a 3-channel image and 1-channel depth".into()));
    }
    if rgb.height() != raw_depth.height() || rgb.width() != raw_depth.width() {
        return Err(Error::Data(format!(
            "image is {}×{} but depth is {}×{}",
            rgb.height(),
            rgb.width(),
            raw_depth.height(),
            raw_depth.width()
        )));
    }
    if let Some(m) = mask {
        if !m.same_shape(raw_depth) {
            return Err(Error::Data("mask size differs from depth".into()));
        }
    }
    if !rgb.all_finite() {
        return Err(Error::Data("image contains non-finite values".into()));
    }
    let n = raw_depth.plane_len();
    let mut depth = Raster::zeros(1, raw_depth.height(), raw_depth.width());
    let mut valid = Raster::zeros(1, raw_depth.height(), raw_depth.width());
    for i in 0..n {
        let raw = raw_depth.data()[i];
        let ok = match rule.mask_source {
            MaskSource::Provided => mask.map_or(true, |m| m.data()[i] > 0.0) && raw.is_finite(),
            MaskSource::HolesAsInvalid => !rule.is_hole(raw),
            MaskSource::None => {
                if !raw.is_finite() {
                    return Err(Error::Data("depth contains non-finite values".into()));
                }
                true
            }
        };
        if ok {
            depth.data_mut()[i] = rule.normalize(raw).expect("finite sample");
            valid.data_mut()[i] = 1.0;
        }
    }

    let (rgb, depth, valid) = crop_resize(rgb, &depth, &valid, rule.crop, target, rng)?;
    let mask: Vec<bool> = valid.data().iter().map(|&v| v > 0.5).collect();
    let depth = Raster::from_fn(1, target, target, |_, y, x| {
        if mask[y * target + x] {
            2.0 * depth.get(0, y, x) - 1.0
        } else {
            -1.0
        }
    });
    RgbdImage::new(rgb.clamped(0.0, 1.0).to_signed_range(), depth, mask)
}

type Gray = ImageBuffer<Luma<f32>, Vec<f32>>;
type Color = ImageBuffer<Rgb<f32>, Vec<f32>>;

fn to_color(r: &Raster) -> Color {
    ImageBuffer::from_fn(r.width() as u32, r.height() as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([0, 1, 2].map(|c| r.get(c, y, x) as f32))
    })
}

fn to_gray(r: &Raster) -> Gray {
    ImageBuffer::from_fn(r.width() as u32, r.height() as u32, |x, y| {
        Luma([r.get(0, y as usize, x as usize) as f32])
    })
}

fn crop_resize(
    rgb: &Raster,
    depth: &Raster,
    valid: &Raster,
    mode: CropMode,
    target: usize,
    rng: &mut impl Rng,
) -> Result<(Raster, Raster, Raster)> {
    if target == 0 {
        return Err(Error::Config("target size must be positive".into()));
    }
    let (h, w) = (rgb.height(), rgb.width());
    let mut color = to_color(rgb);
    let mut d = to_gray(depth);
    let mut m = to_gray(valid);
    let needs_resize = match mode {
        CropMode::Center => h.min(w) != target,
        CropMode::BottomRandomX => h.min(w) < target,
    };
    if needs_resize {
        let s = target as f64 / h.min(w) as f64;
        let nh = ((h as f64 * s).round() as u32).max(target as u32);
        let nw = ((w as f64 * s).round() as u32).max(target as u32);
        color = imageops::resize(&color, nw, nh, FilterType::Triangle);
        // Nearest keeps holes from bleeding into valid depth.
        d = imageops::resize(&d, nw, nh, FilterType::Nearest);
        m = imageops::resize(&m, nw, nh, FilterType::Nearest);
    }
    let (h, w) = (color.height() as usize, color.width() as usize);
    let (y0, x0) = match mode {
        CropMode::Center => ((h - target) / 2, (w - target) / 2),
        CropMode::BottomRandomX => (h - target, rng.gen_range(0..=w - target)),
    };
    let rgb = Raster::from_fn(3, target, target, |c, y, x| {
        color.get_pixel((x0 + x) as u32, (y0 + y) as u32)[c] as f64
    });
    let depth = Raster::from_fn(1, target, target, |_, y, x| {
        d.get_pixel((x0 + x) as u32, (y0 + y) as u32)[0] as f64
    });
    let valid = Raster::from_fn(1, target, target, |_, y, x| {
        m.get_pixel((x0 + x) as u32, (y0 + y) as u32)[0] as f64
    });
    Ok((rgb, depth, valid))
}

fn find_with_ext(dir: &Path, stem: &str, exts: &[&str]) -> Option<PathBuf> {
    exts.iter()
        .map(|e| dir.join(format!("{stem}.{e}")))
        .find(|p| p.is_file())
}

fn load_item(root: &Path, rgb_path: &Path, rule: &DatasetRule, target: usize, rng: &mut ChaCha8Rng) -> Result<RgbdImage> {
    let stem = rgb_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Data("file name is not valid UTF-8".into()))?;
    let depth_path = find_with_ext(&root.join("depth"), stem, &["pfm", "png"])
        .ok_or_else(|| Error::Data(format!("no depth file for {stem}")))?;
    let rgb = read_rgb(rgb_path)?;
    let mut depth = read_depth(&depth_path)?;
    if depth_path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        depth = depth.map(|v| v * rule.png_depth_unit);
    }
    let mask = match rule.mask_source {
        MaskSource::Provided => {
            let p = find_with_ext(&root.join("mask"), stem, &["png"])
                .ok_or_else(|| Error::Data(format!("no mask file for {stem}")))?;
            Some(read_mask(&p)?)
        }
        _ => None,
    };
    prepare(&rgb, &depth, mask.as_ref(), rule, target, rng)
}

/// Ingests every image under `<root>/rgb`. Unusable items are skipped and
/// reported; an empty result is an error. Random crops use a stream per
/// item derived from `seed`.
pub fn ingest(root: &Path, rule: &DatasetRule, target: usize, seed: u64) -> Result<IngestReport> {
    rule.validate()?;
    let rgb_dir = root.join("rgb");
    let mut files: Vec<PathBuf> = fs::read_dir(&rgb_dir)
        .map_err(|e| Error::io(&rgb_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let mut report = IngestReport {
        images: Vec::new(),
        names: Vec::new(),
        skipped: Vec::new(),
    };
    for (i, path) in files.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        match load_item(root, path, rule, target, &mut rng) {
            Ok(img) => {
                report.images.push(img);
                report
                    .names
                    .push(path.file_stem().unwrap_or_default().to_string_lossy().into_owned());
            }
            Err(e) => report.skipped.push((path.clone(), e.to_string())),
        }
    }
    if !report.skipped.is_empty() {
        log::warn!(
            "{}: skipped {} of {} items",
            root.display(),
            report.skipped.len(),
            files.len()
        );
    }
    if report.images.is_empty() {
        return Err(Error::Data(format!("{}: no usable items", root.display())));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::io::{write_depth_png16, write_mask_png, write_pfm, write_rgb_png};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn normalization_conventions() {
        let kitti = DatasetRule::kitti();
        assert_eq!(kitti.normalize(80.0), Some(1.0));
        assert_eq!(kitti.normalize(40.0), Some(0.5));
        assert_eq!(DatasetRule::hr_wsi().normalize(0.25), Some(0.75));
        assert_eq!(DatasetRule::redweb().normalize(0.3), Some(0.3));
        assert_eq!(kitti.normalize(f64::NAN), None);
        let bad = DatasetRule {
            depth_mode: DepthMode::NormalizeByMax { value: 0.0 },
            ..kitti
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn max_depth_maps_to_plus_one() {
        let rgb = Raster::filled(3, 4, 4, 0.5);
        let depth = Raster::filled(1, 4, 4, 80.0);
        let img = prepare(&rgb, &depth, None, &DatasetRule::kitti(), 4, &mut rng()).unwrap();
        assert!(img.depth.data().iter().all(|&d| d == 1.0));
        assert!(img.rgb.data().iter().all(|&v| v == 0.0));
        assert!(img.mask.iter().all(|&m| m));
    }

    #[test]
    fn all_holes_keep_the_item_with_an_empty_mask() {
        let rgb = Raster::filled(3, 6, 8, 0.2);
        let depth = Raster::zeros(1, 6, 8);
        let img = prepare(&rgb, &depth, None, &DatasetRule::kitti(), 4, &mut rng()).unwrap();
        assert_eq!(img.valid_count(), 0);
        assert_eq!((img.height(), img.width()), (4, 4));
    }

    #[test]
    fn center_crop_after_resize() {
        // 8×16 image whose columns encode x; resizing to 4 halves it, and
        // the center crop keeps columns 2..6 of the resized image.
        let rgb = Raster::from_fn(3, 8, 16, |_, _, x| x as f64 / 15.0);
        let depth = Raster::filled(1, 8, 16, 0.5);
        let img = prepare(&rgb, &depth, None, &DatasetRule::redweb(), 4, &mut rng()).unwrap();
        assert_eq!((img.height(), img.width()), (4, 4));
        let row: Vec<f64> = (0..4).map(|x| img.rgb.get(0, 0, x)).collect();
        assert!(row.windows(2).all(|w| w[1] > w[0]));
        assert!(row[0] > -0.6 && row[3] < 0.6, "{row:?}");
    }

    #[test]
    fn bottom_crop_drops_the_top_rows() {
        let rgb = Raster::from_fn(3, 10, 20, |_, y, _| y as f64 / 9.0);
        let depth = Raster::from_fn(1, 10, 20, |_, y, _| if y < 4 { 0.0 } else { 40.0 });
        let img = prepare(&rgb, &depth, None, &DatasetRule::kitti(), 6, &mut rng()).unwrap();
        assert!((img.rgb.get(0, 0, 0) - (2.0 * 4.0 / 9.0 - 1.0)).abs() < 1e-6);
        assert!(img.mask.iter().all(|&m| m));
        assert!(img.depth.data().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn provided_mask_is_used() {
        let rgb = Raster::filled(3, 2, 2, 0.5);
        let depth = Raster::filled(1, 2, 2, 100.0);
        let mask = Raster::from_vec(1, 2, 2, vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let img = prepare(&rgb, &depth, Some(&mask), &DatasetRule::diode(), 2, &mut rng()).unwrap();
        assert_eq!(img.mask, vec![true, false, true, true]);
        assert_eq!(img.depth.data()[1], -1.0);
    }

    #[test]
    fn folder_ingest_skips_malformed_items() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        for sub in ["rgb", "depth"] {
            fs::create_dir(root.join(sub)).unwrap();
        }
        let rgb = Raster::from_fn(3, 8, 12, |c, y, x| ((c + y + x) % 5) as f64 / 4.0);
        for name in ["a", "b", "c", "d"] {
            write_rgb_png(&root.join(format!("rgb/{name}.png")), &rgb).unwrap();
        }
        let depth = Raster::from_fn(1, 8, 12, |_, y, _| 1000.0 * (1 + y) as f64);
        write_depth_png16(&root.join("depth/a.png"), &depth, 1.0).unwrap();
        write_pfm(&root.join("depth/b.pfm"), &depth.map(|v| v * 1e-3)).unwrap();
        // c has no depth; d has a truncated PFM.
        fs::write(root.join("depth/d.pfm"), b"Pf\n12 8\n-1\n\0\0").unwrap();
        fs::write(root.join("rgb/e.png"), b"not an image").unwrap();
        write_depth_png16(&root.join("depth/e.png"), &depth, 1.0).unwrap();

        let report = ingest(root, &DatasetRule::nyu(), 8, 0).unwrap();
        assert_eq!(report.names, vec!["a", "b"]);
        assert_eq!(report.skipped.len(), 3);
        // 1 m at row 0 over a 10 m maximum, from millimetre PNG and metre PFM.
        for img in &report.images {
            assert!((img.depth.get(0, 0, 0) - (2.0 * 0.1 - 1.0)).abs() < 1e-6);
        }

        let masked = DatasetRule::diode();
        assert!(ingest(root, &masked, 8, 0).is_err());
        fs::create_dir(root.join("mask")).unwrap();
        write_mask_png(&root.join("mask/a.png"), &vec![true; 96], 8, 12).unwrap();
        assert_eq!(ingest(root, &masked, 8, 0).unwrap().names, vec!["a"]);
    }
}

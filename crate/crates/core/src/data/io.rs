//! PFM and PNG readers and writers for rasters in [0, 1] or metric units.

use std::fs;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, RgbImage};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Writes a 1- or 3-channel raster as little-endian PFM. Values are
/// rounded to f32.
pub fn write_pfm(path: &Path, r: &Raster) -> Result<()> {
    let tag = match r.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::Shape(format!("PFM holds 1 or 3 channels, got {c}"))),
    };
    let (c, h, w) = r.shape();
    let mut buf = format!("{tag}\n{w} {h}\n-1.0\n").into_bytes();
    buf.reserve(c * h * w * 4);
    // PFM scanlines run bottom to top.
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..c {
                buf.extend_from_slice(&(r.get(ch, y, x) as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pfm(&bytes).map_err(|m| Error::Data(format!("{}: {m}", path.display())))
}

fn parse_pfm(bytes: &[u8]) -> std::result::Result<Raster, String> {
    // Three whitespace-separated header tokens follow the tag, and exactly
    // one whitespace byte separates the last token from the payload.
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ascii header")?);
    }
    pos += 1;
    let channels = match tokens[0] {
        "Pf" => 1,
        "PF" => 3,
        t => return Err(format!("unknown PFM tag {t:?}")),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad dimension {s:?}"));
    let (w, h) = (parse(tokens[1])?, parse(tokens[2])?);
    let scale: f64 = tokens[3].parse().map_err(|_| format!("bad scale {:?}", tokens[3]))?;
    if scale == 0.0 || !scale.is_finite() || w == 0 || h == 0 {
        return Err("invalid header values".into());
    }
    let little = scale < 0.0;
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(channels * 4))
        .ok_or("dimensions overflow")?;
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() < need {
        return Err(format!("payload has {} bytes, expected {need}", payload.len()));
    }
    let mut r = Raster::zeros(channels, h, w);
    for (i, chunk) in payload[..need].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let ch = i % channels;
        let px = i / channels;
        let (row, x) = (px / w, px % w);
        r.set(ch, h - 1 - row, x, v as f64);
    }
    Ok(r)
}

fn codec(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Codec {
        path: path.to_path_buf(),
        source,
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 3-channel [0, 1] raster as an 8-bit PNG.
pub fn write_rgb_png(path: &Path, r: &Raster) -> Result<()> {
    if r.channels() != 3 {
        return Err(Error::Shape(format!("rgb PNG needs 3 channels, got {}", r.channels())));
    }
    let img = RgbImage::from_fn(r.width() as u32, r.height() as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([to_u8(r.get(0, y, x)), to_u8(r.get(1, y, x)), to_u8(r.get(2, y, x))])
    });
    img.save(path).map_err(codec(path))
}

/// Writes a 1-channel [0, 1] raster as an 8-bit grayscale PNG.
pub fn write_gray_png(path: &Path, r: &Raster) -> Result<()> {
    if r.channels() != 1 {
        return Err(Error::Shape(format!("gray PNG needs 1 channel, got {}", r.channels())));
    }
    let img = GrayImage::from_fn(r.width() as u32, r.height() as u32, |x, y| {
        Luma([to_u8(r.get(0, y as usize, x as usize))])
    });
    img.save(path).map_err(codec(path))
}

/// Writes a 1-channel raster as a 16-bit PNG holding `round(v / unit)`.
pub fn write_depth_png16(path: &Path, r: &Raster, unit: f64) -> Result<()> {
    if r.channels() != 1 {
        return Err(Error::Shape(format!("depth PNG needs 1 channel, got {}", r.channels())));
    }
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(r.width() as u32, r.height() as u32, |x, y| {
            let v = r.get(0, y as usize, x as usize) / unit;
            Luma([v.round().clamp(0.0, u16::MAX as f64) as u16])
        });
    img.save(path).map_err(codec(path))
}

pub fn write_mask_png(path: &Path, mask: &[bool], height: usize, width: usize) -> Result<()> {
    if mask.len() != height * width {
        return Err(Error::Shape("mask length differs from image size".into()));
    }
    let img = GrayImage::from_fn(width as u32, height as u32, |x, y| {
        Luma([if mask[y as usize * width + x as usize] { 255 } else { 0 }])
    });
    img.save(path).map_err(codec(path))
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(codec(path))
}

/// Reads an 8- or 16-bit PNG (or any format the decoder knows) as a
/// 3-channel raster in [0, 1].
pub fn read_rgb(path: &Path) -> Result<Raster> {
    let img = open(path)?.into_rgb32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Raster::from_fn(3, h, w, |c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as f64
    }))
}

/// Reads a single-channel image as raw integer sample values (0..=255 for
/// 8-bit, 0..=65535 for 16-bit). Color images are rejected.
pub fn read_gray_raw(path: &Path) -> Result<Raster> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(b) => Ok(Raster::from_fn(1, h, w, |_, y, x| {
            b.get_pixel(x as u32, y as u32)[0] as f64
        })),
        DynamicImage::ImageLuma16(b) => Ok(Raster::from_fn(1, h, w, |_, y, x| {
            b.get_pixel(x as u32, y as u32)[0] as f64
        })),
        other => Err(Error::Data(format!(
            "{}: expected a single-channel image, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}

/// Reads a mask image; nonzero samples are valid.
pub fn read_mask(path: &Path) -> Result<Raster> {
    Ok(read_gray_raw(path)?.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
}

/// Reads depth from PFM (values as stored) or a grayscale PNG (raw sample
/// values), chosen by extension.
pub fn read_depth(path: &Path) -> Result<Raster> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    let r = match ext.as_deref() {
        Some("pfm") => read_pfm(path)?,
        _ => read_gray_raw(path)?,
    };
    if r.channels() != 1 {
        return Err(Error::Data(format!("{}: depth must have one channel", path.display())));
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trips_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let r = Raster::from_fn(3, 3, 5, |c, y, x| (c * 100 + y * 10 + x) as f32 as f64 * 0.37);
        let p = dir.path().join("a.pfm");
        write_pfm(&p, &r).unwrap();
        assert_eq!(read_pfm(&p).unwrap(), r.map(|v| v as f32 as f64));
        let g = Raster::from_fn(1, 4, 2, |_, y, x| (y * 2 + x) as f64 - 3.5);
        write_pfm(&p, &g).unwrap();
        assert_eq!(read_pfm(&p).unwrap(), g);
    }

    #[test]
    fn big_endian_pfm_is_accepted() {
        let mut b = b"Pf\n2 1\n1.0\n".to_vec();
        b.extend_from_slice(&1.5f32.to_be_bytes());
        b.extend_from_slice(&(-2.0f32).to_be_bytes());
        let r = parse_pfm(&b).unwrap();
        assert_eq!(r.data(), &[1.5, -2.0]);
    }

    #[test]
    fn malformed_pfm_is_rejected() {
        assert!(parse_pfm(b"P6\n2 2\n-1\n").is_err());
        assert!(parse_pfm(b"Pf\n2 2\n-1\n\0\0\0\0").is_err());
        assert!(parse_pfm(b"Pf\n0 2\n-1\n").is_err());
        assert!(parse_pfm(b"Pf\n2").is_err());
    }

    #[test]
    fn png_writers_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = Raster::from_fn(3, 2, 3, |c, y, x| ((c + y + x) * 17) as f64 / 255.0);
        let p = dir.path().join("rgb.png");
        write_rgb_png(&p, &r).unwrap();
        let back = read_rgb(&p).unwrap();
        for (a, b) in back.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let d = Raster::from_fn(1, 2, 2, |_, y, x| (y * 2 + x) as f64 * 1.5);
        let p = dir.path().join("d.png");
        write_depth_png16(&p, &d, 1.0 / 256.0).unwrap();
        assert_eq!(read_depth(&p).unwrap().data(), &[0.0, 384.0, 768.0, 1152.0]);
        let p = dir.path().join("m.png");
        write_mask_png(&p, &[true, false, false, true], 2, 2).unwrap();
        assert_eq!(read_mask(&p).unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
    }
}

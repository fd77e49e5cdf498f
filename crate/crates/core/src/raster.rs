//! Planar floating-point rasters and the joint color+depth image.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A channel-planar (CHW) raster of `f64` samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} samples cannot fill a {channels}x{height}x{width} raster",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    /// Pixels per channel.
    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_shape(&self, other: &Raster, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )))
        }
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Raster {
        Raster {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn zip_map(&self, other: &Raster, f: impl Fn(f64, f64) -> f64) -> Result<Raster> {
        self.ensure_shape(other, "zip_map")?;
        Ok(Raster {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..*self
        })
    }

    /// Channels `start..end` as a new raster.
    pub fn select_channels(&self, start: usize, end: usize) -> Raster {
        let n = self.plane_len();
        Raster {
            channels: end - start,
            height: self.height,
            width: self.width,
            data: self.data[start * n..end * n].to_vec(),
        }
    }

    /// Stacks rasters of equal spatial size along the channel axis.
    pub fn concat(parts: &[&Raster]) -> Result<Raster> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero rasters".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.height != h || p.width != w {
                return Err(Error::Shape(format!(
                    "concat: {}x{} vs {}x{}",
                    p.height, p.width, h, w
                )));
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Ok(Raster {
            channels,
            height: h,
            width: w,
            data,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn channel_mean(&self, c: usize) -> f64 {
        let p = self.plane(c);
        p.iter().sum::<f64>() / p.len() as f64
    }

    pub fn clamped(&self, lo: f64, hi: f64) -> Raster {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Maps a [-1, 1] diffusion-range raster to [0, 1].
    pub fn to_unit_range(&self) -> Raster {
        self.map(|v| (v + 1.0) * 0.5)
    }

    /// Maps a [0, 1] raster to the [-1, 1] diffusion range.
    pub fn to_signed_range(&self) -> Raster {
        self.map(|v| v * 2.0 - 1.0)
    }
}

impl Raster {
    /// Element-wise `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Raster) -> Result<()> {
        self.ensure_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn sq_distance(&self, other: &Raster) -> Result<f64> {
        self.ensure_shape(other, "sq_distance")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }
}

/// Joint color and depth image in the diffusion range, with a validity mask
/// for depth supervision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RgbdImage {
    /// Three channels in [-1, 1].
    pub rgb: Raster,
    /// One channel in [-1, 1].
    pub depth: Raster,
    /// `true` where the depth value is a valid training target.
    pub mask: Vec<bool>,
}

impl RgbdImage {
    pub fn new(rgb: Raster, depth: Raster, mask: Vec<bool>) -> Result<Self> {
        if rgb.channels() != 3 || depth.channels() != 1 {
            return Err(Error::Shape(format!(
                "rgbd expects 3+1 channels, got {}+{}",
                rgb.channels(),
                depth.channels()
            )));
        }
        if rgb.height() != depth.height() || rgb.width() != depth.width() {
            return Err(Error::Shape("rgb and depth sizes differ".into()));
        }
        if mask.len() != depth.plane_len() {
            return Err(Error::Shape("mask size differs from depth".into()));
        }
        Ok(Self { rgb, depth, mask })
    }

    pub fn height(&self) -> usize {
        self.rgb.height()
    }

    pub fn width(&self) -> usize {
        self.rgb.width()
    }

    /// The 4-channel diffusion state `x_0 = (J, D)`.
    pub fn to_state(&self) -> Raster {
        Raster::concat(&[&self.rgb, &self.depth]).expect("shapes checked on construction")
    }

    /// Splits a 4-channel state; the mask is all-valid.
    pub fn from_state(state: &Raster) -> Result<Self> {
        if state.channels() != 4 {
            return Err(Error::Shape(format!(
                "state has {} channels, expected 4",
                state.channels()
            )));
        }
        let mask = vec![true; state.plane_len()];
        Self::new(state.select_channels(0, 3), state.select_channels(3, 4), mask)
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_finite(&self) -> bool {
        self.rgb.all_finite() && self.depth.all_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_round_trip() {
        let rgb = Raster::from_fn(3, 2, 3, |c, y, x| (c * 100 + y * 10 + x) as f64);
        let depth = Raster::filled(1, 2, 3, 0.5);
        let img = RgbdImage::new(rgb.clone(), depth.clone(), vec![true; 6]).unwrap();
        let s = img.to_state();
        assert_eq!(s.channels(), 4);
        assert_eq!(s.get(3, 1, 2), 0.5);
        let back = RgbdImage::from_state(&s).unwrap();
        assert_eq!(back.rgb, rgb);
        assert_eq!(back.depth, depth);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Raster::from_vec(3, 2, 2, vec![0.0; 11]).is_err());
        let rgb = Raster::zeros(3, 2, 2);
        let depth = Raster::zeros(1, 2, 3);
        assert!(RgbdImage::new(rgb, depth, vec![true; 6]).is_err());
    }
}

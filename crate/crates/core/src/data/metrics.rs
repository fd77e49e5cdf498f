//! Full-reference image metrics on [0, 1] rasters.

use crate::error::{Error, Result};
use crate::raster::Raster;

const SSIM_SIGMA: f64 = 1.5;
const SSIM_RADIUS: usize = 5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// `10·log10(1/MSE)` in dB; `+∞` for identical inputs.
pub fn psnr(a: &Raster, b: &Raster) -> Result<f64> {
    a.ensure_shape(b, "psnr")?;
    if a.is_empty() {
        return Err(Error::Shape("psnr of an empty image".into()));
    }
    let mse = a.sq_distance(b)? / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

fn gaussian_kernel() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-0.5 * d * d / (SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Half-sample symmetric index (`d c b a | a b c d | d c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

fn blur(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * plane[y * w + reflect(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[reflect(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), population
/// statistics, data range 1, averaged over the valid (uncropped) interior
/// and then over channels.
pub fn ssim(a: &Raster, b: &Raster) -> Result<f64> {
    a.ensure_shape(b, "ssim")?;
    let (c, h, w) = a.shape();
    let win = 2 * SSIM_RADIUS + 1;
    if h < win || w < win {
        return Err(Error::Shape(format!("ssim needs at least {win}×{win} pixels, got {h}×{w}")));
    }
    let k = gaussian_kernel();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    for ch in 0..c {
        let (pa, pb) = (a.plane(ch), b.plane(ch));
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            pa.iter().zip(pb).map(|(&x, &y)| f(x, y)).collect()
        };
        let ux = blur(pa, h, w, &k);
        let uy = blur(pb, h, w, &k);
        let uxx = blur(&prod(&|x, _| x * x), h, w, &k);
        let uyy = blur(&prod(&|_, y| y * y), h, w, &k);
        let uxy = blur(&prod(&|x, y| x * y), h, w, &k);
        let mut sum = 0.0;
        let mut n = 0usize;
        for y in SSIM_RADIUS..h - SSIM_RADIUS {
            for x in SSIM_RADIUS..w - SSIM_RADIUS {
                let i = y * w + x;
                let vx = uxx[i] - ux[i] * ux[i];
                let vy = uyy[i] - uy[i] * uy[i];
                let vxy = uxy[i] - ux[i] * uy[i];
                let num = (2.0 * ux[i] * uy[i] + c1) * (2.0 * vxy + c2);
                let den = (ux[i] * ux[i] + uy[i] * uy[i] + c1) * (vx + vy + c2);
                sum += num / den;
                n += 1;
            }
        }
        total += sum / n as f64;
    }
    Ok(total / c as f64)
}

/// Mean of `|d − d*| / d*` over pixels where the mask is set and the
/// reference is positive.
pub fn depth_abs_rel(estimate: &Raster, reference: &Raster, mask: Option<&[bool]>) -> Result<f64> {
    estimate.ensure_shape(reference, "depth error")?;
    if let Some(m) = mask {
        if m.len() != reference.len() {
            return Err(Error::Shape("mask size differs from depth".into()));
        }
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (&d, &r)) in estimate.data().iter().zip(reference.data()).enumerate() {
        if r > 0.0 && mask.map_or(true, |m| m[i]) {
            sum += (d - r).abs() / r;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Data("no valid reference depth pixels".into()));
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn interleaved_pair() -> (Raster, Raster) {
        let a = Raster::from_fn(3, 24, 20, |c, y, x| ((c * 7 + y * 13 + x * 29) % 101) as f64 / 100.0);
        let b = Raster::from_fn(3, 24, 20, |c, y, x| {
            ((c * 11 + y * 5 + x * 17 + (y * x) % 7) % 97) as f64 / 96.0
        });
        (a, b)
    }

    fn smooth_pair() -> (Raster, Raster) {
        let a = Raster::from_fn(3, 16, 13, |c, y, x| {
            0.5 + 0.4 * (0.3 * x as f64 + 0.2 * y as f64 + c as f64).sin()
        });
        let b = Raster::from_fn(3, 16, 13, |c, y, x| {
            0.9 * a.get(c, y, x) + 0.05 * (0.7 * (x * y) as f64 + c as f64).cos()
        });
        (a, b)
    }

    // Frozen values from skimage.metrics 0.25 (gaussian_weights, sigma 1.5,
    // population covariance, data_range 1, channel_axis last).
    #[test]
    fn matches_reference_implementation() {
        let (a, b) = interleaved_pair();
        assert!((ssim(&a, &b).unwrap() - -0.040388123628285616).abs() < 1e-4);
        assert!((psnr(&a, &b).unwrap() - 7.775025998666113).abs() < 1e-6);
        let (a, b) = smooth_pair();
        assert!((ssim(&a, &b).unwrap() - 0.9434140783724825).abs() < 1e-4);
        assert!((psnr(&a, &b).unwrap() - 24.574575233990895).abs() < 1e-6);
    }

    #[test]
    fn identical_images() {
        let (a, _) = smooth_pair();
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_closed_form() {
        let a = Raster::filled(3, 4, 4, 0.5);
        let b = Raster::filled(3, 4, 4, 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn reflect_indexing() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn small_images_are_rejected() {
        let a = Raster::zeros(3, 10, 40);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn abs_rel_respects_mask() {
        let r = Raster::from_vec(1, 1, 3, vec![1.0, 2.0, 0.0]).unwrap();
        let e = Raster::from_vec(1, 1, 3, vec![1.5, 1.0, 9.0]).unwrap();
        assert!((depth_abs_rel(&e, &r, None).unwrap() - 0.5).abs() < 1e-15);
        let m = [false, true, true];
        assert!((depth_abs_rel(&e, &r, Some(&m)).unwrap() - 0.5).abs() < 1e-15);
        assert!(depth_abs_rel(&e, &r, Some(&[false, false, true])).is_err());
    }
}

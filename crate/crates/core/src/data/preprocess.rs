use rand::Rng;

use crate::error::{Error, Result};
use crate::raster::{Raster, RgbdImage};

fn flip_raster(r: &Raster, horizontal: bool) -> Raster {
    let (c, h, w) = r.shape();
    Raster::from_fn(c, h, w, |ch, y, x| {
        if horizontal {
            r.get(ch, y, w - 1 - x)
        } else {
            r.get(ch, h - 1 - y, x)
        }
    })
}

fn flip_mask(m: &[bool], h: usize, w: usize, horizontal: bool) -> Vec<bool> {
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            if horizontal {
                m[y * w + (w - 1 - x)]
            } else {
                m[(h - 1 - y) * w + x]
            }
        })
        .collect()
}

fn flip(img: &RgbdImage, horizontal: bool) -> RgbdImage {
    RgbdImage {
        rgb: flip_raster(&img.rgb, horizontal),
        depth: flip_raster(&img.depth, horizontal),
        mask: flip_mask(&img.mask, img.height(), img.width(), horizontal),
    }
}

pub fn flip_horizontal(img: &RgbdImage) -> RgbdImage {
    flip(img, true)
}

pub fn flip_vertical(img: &RgbdImage) -> RgbdImage {
    flip(img, false)
}

/// Independent horizontal and vertical flips, each with probability 1/2.
/// Exactly two draws are taken from `rng`.
pub fn augment(img: &RgbdImage, rng: &mut impl Rng) -> RgbdImage {
    let h = rng.gen_bool(0.5);
    let v = rng.gen_bool(0.5);
    let mut out = img.clone();
    if h {
        out = flip_horizontal(&out);
    }
    if v {
        out = flip_vertical(&out);
    }
    out
}

/// Gray-world balance of a 3-channel [0, 1] image: each channel is scaled
/// by `global_mean / channel_mean`, then clipped.
pub fn gray_world_white_balance(img: &Raster) -> Result<Raster> {
    if img.channels() != 3 {
        return Err(Error::Shape(format!(
            "white balance needs 3 channels, got {}",
            img.channels()
        )));
    }
    let means = [img.channel_mean(0), img.channel_mean(1), img.channel_mean(2)];
    for (c, m) in means.iter().enumerate() {
        if !(m.is_finite() && *m > 0.0) {
            return Err(Error::Domain(format!(
                "channel {} has mean {m}; gray-world balance needs a positive mean",
                ["red", "green", "blue"][c]
            )));
        }
    }
    let global = means.iter().sum::<f64>() / 3.0;
    let mut out = img.clone();
    for (c, m) in means.iter().enumerate() {
        let gain = global / m;
        out.plane_mut(c)
            .iter_mut()
            .for_each(|v| *v = (*v * gain).clamp(0.0, 1.0));
    }
    Ok(out)
}

/// `v^γ` on a [0, 1] raster, used to linearize display-encoded input.
pub fn degamma(img: &Raster, gamma: f64) -> Raster {
    img.map(|v| v.clamp(0.0, 1.0).powf(gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(h: usize, w: usize) -> RgbdImage {
        let rgb = Raster::from_fn(3, h, w, |c, y, x| (c * 100 + y * 10 + x) as f64 / 400.0);
        let depth = Raster::from_fn(1, h, w, |_, y, x| (y * w + x) as f64 / (h * w) as f64);
        let mask = (0..h * w).map(|i| i % 3 != 0).collect();
        RgbdImage::new(rgb, depth, mask).unwrap()
    }

    fn pixels(img: &RgbdImage) -> Vec<(u64, u64, u64, u64, bool)> {
        let mut v: Vec<_> = (0..img.height() * img.width())
            .map(|i| {
                let (y, x) = (i / img.width(), i % img.width());
                (
                    img.rgb.get(0, y, x).to_bits(),
                    img.rgb.get(1, y, x).to_bits(),
                    img.rgb.get(2, y, x).to_bits(),
                    img.depth.get(0, y, x).to_bits(),
                    img.mask[i],
                )
            })
            .collect();
        v.sort();
        v
    }

    #[test]
    fn double_flip_is_identity() {
        let img = sample(3, 5);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
        assert_eq!(flip_vertical(&flip_vertical(&img)), img);
        assert_ne!(flip_horizontal(&img), img);
    }

    #[test]
    fn flips_move_channels_jointly() {
        let img = sample(4, 4);
        let f = flip_horizontal(&img);
        assert_eq!(f.rgb.get(1, 2, 0), img.rgb.get(1, 2, 3));
        assert_eq!(f.depth.get(0, 2, 0), img.depth.get(0, 2, 3));
        assert_eq!(f.mask[2 * 4], img.mask[2 * 4 + 3]);
        assert_eq!(pixels(&f), pixels(&img));
        assert_eq!(pixels(&flip_vertical(&img)), pixels(&img));
    }

    #[test]
    fn augment_is_reproducible() {
        let img = sample(4, 6);
        let a: Vec<_> = (0..8)
            .scan(ChaCha8Rng::seed_from_u64(3), |r, _| Some(augment(&img, r)))
            .collect();
        let b: Vec<_> = (0..8)
            .scan(ChaCha8Rng::seed_from_u64(3), |r, _| Some(augment(&img, r)))
            .collect();
        assert_eq!(a, b);
        assert!(a.iter().any(|x| *x != img));
    }

    #[test]
    fn white_balance_equalizes_means() {
        let img = Raster::from_fn(3, 4, 4, |c, y, x| {
            let base = [0.2, 0.4, 0.6][c];
            base + 0.05 * ((y + x) as f64 - 3.0) / 3.0
        });
        let m: Vec<f64> = (0..3).map(|c| img.channel_mean(c)).collect();
        assert!((m[0] - 0.2).abs() < 1e-12 && (m[2] - 0.6).abs() < 1e-12);
        let out = gray_world_white_balance(&img).unwrap();
        for c in 0..3 {
            assert!((out.channel_mean(c) - 0.4).abs() < 1e-6);
        }
    }

    #[test]
    fn gray_and_constant_images_are_unchanged() {
        let img = Raster::from_fn(3, 3, 3, |_, y, x| 0.1 * (y + x) as f64);
        assert_eq!(gray_world_white_balance(&img).unwrap(), img);
        let k = Raster::filled(3, 2, 2, 0.3);
        assert_eq!(gray_world_white_balance(&k).unwrap(), k);
    }

    #[test]
    fn zero_mean_channel_is_named() {
        let img = Raster::from_fn(3, 2, 2, |c, _, _| if c == 1 { 0.0 } else { 0.5 });
        let e = gray_world_white_balance(&img).unwrap_err().to_string();
        assert!(e.contains("green"), "{e}");
    }

    proptest! {
        #[test]
        fn flips_preserve_pixel_multiset(h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
            let img = sample(h, w);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            prop_assert_eq!(pixels(&augment(&img, &mut rng)), pixels(&img));
        }
    }
}

//! Preview images: depth colorization and sample grids.

use osmosis_core::Raster;

// Piecewise-linear dark-blue to yellow ramp, near = dark.
const RAMP: [[f64; 3]; 5] = [
    [0.05, 0.03, 0.25],
    [0.15, 0.25, 0.55],
    [0.15, 0.55, 0.55],
    [0.50, 0.80, 0.30],
    [0.99, 0.90, 0.15],
];

fn ramp(v: f64) -> [f64; 3] {
    let s = v.clamp(0.0, 1.0) * (RAMP.len() - 1) as f64;
    let i = (s.floor() as usize).min(RAMP.len() - 2);
    let f = s - i as f64;
    std::array::from_fn(|c| RAMP[i][c] * (1.0 - f) + RAMP[i + 1][c] * f)
}

/// Maps a 1-channel depth raster to colour, normalized by its own range.
pub fn colorize_depth(depth: &Raster) -> Raster {
    let plane = depth.plane(0);
    let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    colorize_depth_range(depth, lo, hi)
}

/// Maps `[lo, hi]` onto the colour ramp; values outside are clamped.
pub fn colorize_depth_range(depth: &Raster, lo: f64, hi: f64) -> Raster {
    let span = if hi > lo { hi - lo } else { 1.0 };
    Raster::from_fn(3, depth.height(), depth.width(), |c, y, x| {
        ramp((depth.get(0, y, x) - lo) / span)[c]
    })
}

/// Tiles equally sized rasters row-major into `columns` columns with a
/// one-pixel gap of value `gap`.
pub fn grid(tiles: &[Raster], columns: usize, gap: f64) -> Raster {
    assert!(!tiles.is_empty() && columns > 0);
    let (c, h, w) = tiles[0].shape();
    let cols = columns.min(tiles.len());
    let rows = tiles.len().div_ceil(cols);
    let (gh, gw) = (rows * (h + 1) - 1, cols * (w + 1) - 1);
    let mut out = Raster::filled(c, gh, gw, gap);
    for (i, t) in tiles.iter().enumerate() {
        assert_eq!(t.shape(), (c, h, w), "grid tiles must share a shape");
        let (oy, ox) = ((i / cols) * (h + 1), (i % cols) * (w + 1));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(ch, oy + y, ox + x, t.get(ch, y, x));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colorize_spans_the_ramp() {
        let d = Raster::from_fn(1, 1, 5, |_, _, x| 2.0 + x as f64);
        let c = colorize_depth(&d);
        for ch in 0..3 {
            assert!((c.get(ch, 0, 0) - RAMP[0][ch]).abs() < 1e-12);
            assert!((c.get(ch, 0, 4) - RAMP[4][ch]).abs() < 1e-12);
        }
        let flat = colorize_depth(&Raster::filled(1, 2, 2, 0.3));
        assert!(flat.all_finite());
    }

    #[test]
    fn grid_places_tiles() {
        let tiles: Vec<_> = (0..3).map(|i| Raster::filled(1, 2, 2, i as f64)).collect();
        let g = grid(&tiles, 2, -1.0);
        assert_eq!(g.shape(), (1, 5, 5));
        assert_eq!(g.get(0, 0, 0), 0.0);
        assert_eq!(g.get(0, 0, 3), 1.0);
        assert_eq!(g.get(0, 3, 0), 2.0);
        assert_eq!(g.get(0, 2, 2), -1.0);
        assert_eq!(g.get(0, 4, 4), -1.0);
    }
}

//! Per-instance input features for the mask head: a fixed 8-channel image basis
//! plus anchor-relative coordinates.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::imagegrid::{Pixel, Raster};

/// ITU-R BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub const BASE_CHANNELS: usize = 8;
pub const INPUT_CHANNELS: usize = BASE_CHANNELS + 2;

/// Base features plus the relative-coordinate maps for one anchor.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub base: Arc<Raster>,
    /// Two channels: (dx, dy) relative to the anchor, scaled by half the image diagonal.
    pub rel_coords: Raster,
    pub anchor: Pixel,
}

impl FeatureStack {
    pub fn height(&self) -> usize {
        self.base.height()
    }

    pub fn width(&self) -> usize {
        self.base.width()
    }

    pub fn channels(&self) -> usize {
        self.base.channels() + self.rel_coords.channels()
    }

    /// Channel-major copy of all inputs: `out[c * pixels + p]`.
    pub fn planar(&self) -> Vec<f64> {
        let n = self.base.pixel_count();
        let bc = self.base.channels();
        let mut out = vec![0.0; (bc + 2) * n];
        for (p, px) in self.base.data().chunks_exact(bc).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * n + p] = v;
            }
        }
        for (p, px) in self.rel_coords.data().chunks_exact(2).enumerate() {
            out[bc * n + p] = px[0];
            out[(bc + 1) * n + p] = px[1];
        }
        out
    }
}

/// Channels: R, G, B, luma, |d/dx luma|, |d/dy luma|, 3x3 box-blurred luma, luma - blur.
///
/// Derivatives are central differences halved, with replicated borders.
pub fn build_base_features(image: &Raster) -> Result<Raster> {
    if image.channels() != 3 {
        return Err(Error::Shape(format!(
            "expected a 3-channel image, got {} channels",
            image.channels()
        )));
    }
    let (h, w) = (image.height(), image.width());
    let luma = Raster::from_fn(h, w, |y, x| {
        (0..3).map(|c| LUMA[c] * image.get(y, x, c)).sum()
    });
    let at = |y: isize, x: isize| {
        luma.get(
            y.clamp(0, h as isize - 1) as usize,
            x.clamp(0, w as isize - 1) as usize,
            0,
        )
    };
    let mut out = Raster::zeros(h, w, BASE_CHANNELS);
    for y in 0..h {
        for x in 0..w {
            let (yi, xi) = (y as isize, x as isize);
            let l = luma.get(y, x, 0);
            let dx = 0.5 * (at(yi, xi + 1) - at(yi, xi - 1));
            let dy = 0.5 * (at(yi + 1, xi) - at(yi - 1, xi));
            let mut blur = 0.0;
            for oy in -1..=1 {
                for ox in -1..=1 {
                    blur += at(yi + oy, xi + ox);
                }
            }
            blur /= 9.0;
            let vals = [
                image.get(y, x, 0),
                image.get(y, x, 1),
                image.get(y, x, 2),
                l,
                dx.abs(),
                dy.abs(),
                blur,
                l - blur,
            ];
            for (c, v) in vals.into_iter().enumerate() {
                out.set(y, x, c, v);
            }
        }
    }
    Ok(out)
}

/// Half the image diagonal, the coordinate normaliser.
pub fn coord_scale(height: usize, width: usize) -> f64 {
    ((height * height + width * width) as f64).sqrt() / 2.0
}

pub fn attach_rel_coords(base: Arc<Raster>, anchor: Pixel) -> Result<FeatureStack> {
    let (h, w) = (base.height(), base.width());
    if anchor.x >= w || anchor.y >= h {
        return Err(Error::InvalidArgument(format!(
            "anchor ({}, {}) outside {h}x{w} raster",
            anchor.x, anchor.y
        )));
    }
    let scale = coord_scale(h, w);
    let mut rel = Raster::zeros(h, w, 2);
    for y in 0..h {
        for x in 0..w {
            let dx = (x as f64 - anchor.x as f64) / scale;
            let dy = (y as f64 - anchor.y as f64) / scale;
            rel.set(y, x, 0, dx.clamp(-1.0, 1.0));
            rel.set(y, x, 1, dy.clamp(-1.0, 1.0));
        }
    }
    Ok(FeatureStack {
        base,
        rel_coords: rel,
        anchor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_from(h: usize, w: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Raster {
        let mut r = Raster::zeros(h, w, 3);
        for y in 0..h {
            for x in 0..w {
                let c = f(y, x);
                for k in 0..3 {
                    r.set(y, x, k, c[k]);
                }
            }
        }
        r
    }

    #[test]
    fn constant_gray_has_no_structure() {
        let f = build_base_features(&image_from(6, 7, |_, _| [0.4; 3])).unwrap();
        for y in 0..6 {
            for x in 0..7 {
                for c in [4, 5, 7] {
                    assert!(f.get(y, x, c).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn pure_red_luma() {
        let f = build_base_features(&image_from(3, 3, |_, _| [1.0, 0.0, 0.0])).unwrap();
        assert_eq!(f.get(1, 1, 0), 1.0);
        assert_eq!(f.get(1, 1, 1), 0.0);
        assert_eq!(f.get(1, 1, 2), 0.0);
        assert!((f.get(1, 1, 3) - LUMA[0]).abs() < 1e-15);
    }

    #[test]
    fn vertical_edge_gradient_band_is_two_pixels() {
        let f = build_base_features(&image_from(5, 10, |_, x| if x >= 5 { [1.0; 3] } else { [0.0; 3] }))
            .unwrap();
        for y in 0..5 {
            let band: Vec<usize> = (0..10).filter(|&x| f.get(y, x, 4) > 0.0).collect();
            assert_eq!(band, vec![4, 5]);
            assert!(f.get(y, 4, 5).abs() < 1e-15);
        }
        let (lo, hi) = f.min_max();
        assert!(lo >= -1.0 && hi <= 1.0);
    }

    #[test]
    fn rel_coords_zero_at_anchor_and_linear() {
        let base = Arc::new(Raster::zeros(8, 8, BASE_CHANNELS));
        let a = attach_rel_coords(base.clone(), Pixel::new(3, 5)).unwrap();
        assert_eq!(a.rel_coords.get(5, 3, 0), 0.0);
        assert_eq!(a.rel_coords.get(5, 3, 1), 0.0);
        let b = attach_rel_coords(base.clone(), Pixel::new(4, 5)).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let diff = a.rel_coords.get(y, x, 0) - b.rel_coords.get(y, x, 0);
                assert!((diff - 1.0 / coord_scale(8, 8)).abs() < 1e-12);
            }
        }
        assert!(attach_rel_coords(base, Pixel::new(8, 0)).is_err());
    }

    #[test]
    fn rel_coords_corners_from_center() {
        let base = Arc::new(Raster::zeros(9, 9, BASE_CHANNELS));
        let s = attach_rel_coords(base, Pixel::new(4, 4)).unwrap();
        let scale = coord_scale(9, 9);
        assert!((s.rel_coords.get(0, 0, 0) + 4.0 / scale).abs() < 1e-15);
        assert!((s.rel_coords.get(8, 8, 1) - 4.0 / scale).abs() < 1e-15);
        // Reflection of the anchor through the centre negates the map.
        let base = Arc::new(Raster::zeros(9, 9, BASE_CHANNELS));
        let a = attach_rel_coords(base.clone(), Pixel::new(2, 3)).unwrap();
        let b = attach_rel_coords(base, Pixel::new(6, 5)).unwrap();
        for y in 0..9 {
            for x in 0..9 {
                let (ry, rx) = (8 - y, 8 - x);
                assert!((a.rel_coords.get(y, x, 0) + b.rel_coords.get(ry, rx, 0)).abs() < 1e-15);
                assert!((a.rel_coords.get(y, x, 1) + b.rel_coords.get(ry, rx, 1)).abs() < 1e-15);
            }
        }
    }
}

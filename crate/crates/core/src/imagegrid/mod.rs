//! Dense 2-D rasters and the pixel-pair adjacency used by the pairwise losses.

mod io;

pub use io::{read_dbr, read_png_gray, read_png_rgb, write_dbr, write_png};

use crate::error::{Error, Result};

/// Row-major raster with interleaved channels: `data[(y * width + x) * channels + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "raster {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Raster {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Raster {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    /// Single-channel raster built from a per-pixel function.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Raster {
            height,
            width,
            channels: 1,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_size(&self, other: &Raster) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn ensure_same_size(&self, other: &Raster, what: &str) -> Result<()> {
        if self.same_size(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    /// Copies one channel out into a single-channel raster.
    pub fn channel(&self, c: usize) -> Raster {
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px[c])
            .collect();
        Raster {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Applies `f` to every value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Raster {
        Raster {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Binary raster: 1 where the value is strictly above `threshold`.
    pub fn threshold(&self, threshold: f64) -> Raster {
        self.map(|v| if v > threshold { 1.0 } else { 0.0 })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Integer pixel location.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct Pixel {
    pub x: usize,
    pub y: usize,
}

impl Pixel {
    pub fn new(x: usize, y: usize) -> Self {
        Pixel { x, y }
    }
}

/// Undirected pixel-pair adjacency over a raster, in canonical (lexicographic) order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeGraph {
    height: usize,
    width: usize,
    dilation: usize,
    edges: Vec<(usize, usize)>,
}

impl EdgeGraph {
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of edges incident to each pixel.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.height * self.width];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }
}

/// All undirected 8-neighbourhood pairs at the given dilation, each exactly once,
/// sorted by (first pixel index, second pixel index).
pub fn neighbor_edges(height: usize, width: usize, dilation: usize) -> EdgeGraph {
    let d = dilation.max(1) as isize;
    // Forward half of the 8-neighbourhood; the other half is covered from the partner pixel.
    let offsets: [(isize, isize); 4] = [(0, d), (d, -d), (d, 0), (d, d)];
    let mut edges = Vec::with_capacity(height * width * 4);
    for y in 0..height as isize {
        for x in 0..width as isize {
            let a = (y * width as isize + x) as usize;
            for &(dy, dx) in &offsets {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                    continue;
                }
                edges.push((a, (ny * width as isize + nx) as usize));
            }
        }
    }
    // Within a pixel the offsets above are not sorted by partner index.
    edges.sort_unstable();
    EdgeGraph {
        height,
        width,
        dilation: dilation.max(1),
        edges,
    }
}

/// Align-corners bilinear resize, applied per channel.
pub fn resize_bilinear(raster: &Raster, new_height: usize, new_width: usize) -> Result<Raster> {
    if raster.height == 0 || raster.width == 0 || new_height == 0 || new_width == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot resize {}x{} to {new_height}x{new_width}",
            raster.height, raster.width
        )));
    }
    if new_height == raster.height && new_width == raster.width {
        return Ok(raster.clone());
    }
    let ys = sample_positions(raster.height, new_height);
    let xs = sample_positions(raster.width, new_width);
    let c = raster.channels;
    let mut out = Raster::zeros(new_height, new_width, c);
    for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let top = lerp(raster.get(y0, x0, ch), raster.get(y0, x1, ch), tx);
                let bottom = lerp(raster.get(y1, x0, ch), raster.get(y1, x1, ch), tx);
                out.set(oy, ox, ch, lerp(top, bottom, ty));
            }
        }
    }
    Ok(out)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a * (1.0 - t) + b * t
    }
}

fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let pos = if dst == 1 {
                (src - 1) as f64 / 2.0
            } else {
                i as f64 * (src - 1) as f64 / (dst - 1) as f64
            };
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Maps a source coordinate onto the resized grid used by [`resize_bilinear`].
pub fn rescale_coord(coord: f64, src: usize, dst: usize) -> f64 {
    if src <= 1 || dst <= 1 {
        return 0.0;
    }
    coord * (dst - 1) as f64 / (src - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_edges(h: usize, w: usize, d: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for a in 0..h * w {
            for b in (a + 1)..h * w {
                let (ay, ax) = ((a / w) as isize, (a % w) as isize);
                let (by, bx) = ((b / w) as isize, (b % w) as isize);
                let (dy, dx) = ((by - ay).abs(), (bx - ax).abs());
                let d = d as isize;
                if (dy == 0 || dy == d) && (dx == 0 || dx == d) && (dy, dx) != (0, 0) {
                    out.push((a, b));
                }
            }
        }
        out
    }

    #[test]
    fn edge_counts_match_enumeration() {
        assert_eq!(neighbor_edges(3, 3, 1).len(), 20);
        assert_eq!(neighbor_edges(1, 1, 1).len(), 0);
        assert_eq!(neighbor_edges(2, 2, 1).len(), 6);
        assert_eq!(neighbor_edges(0, 5, 1).len(), 0);
        for (h, w, d) in [(3, 3, 1), (4, 5, 2), (6, 2, 3), (7, 7, 2)] {
            assert_eq!(neighbor_edges(h, w, d).edges(), brute_force_edges(h, w, d).as_slice());
        }
    }

    #[test]
    fn resize_examples() {
        let r = Raster::new(2, 1, 1, vec![0.0, 1.0]).unwrap();
        let out = resize_bilinear(&r, 3, 1).unwrap();
        assert_eq!(out.data(), &[0.0, 0.5, 1.0]);

        let c = Raster::filled(5, 7, 2, 0.37);
        let out = resize_bilinear(&c, 9, 3).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-15));

        let noisy = Raster::from_fn(4, 6, |y, x| ((y * 7 + x * 3) % 5) as f64 / 4.0);
        assert_eq!(resize_bilinear(&noisy, 4, 6).unwrap(), noisy);
        assert!(resize_bilinear(&noisy, 0, 6).is_err());
    }

    #[test]
    fn raster_rejects_bad_length() {
        assert!(Raster::new(2, 2, 1, vec![0.0; 3]).is_err());
    }
}

/// Half-open pixel box: covers columns `x0..x1` and rows `y0..y1`.
///
/// A box with zero width or height is the empty-box sentinel; its IoU with anything is 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelBox {
    pub const EMPTY: PixelBox = PixelBox {
        x0: 0,
        y0: 0,
        x1: 0,
        y1: 0,
    };

    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::InvalidArgument(format!(
                "degenerate box ({x0},{y0},{x1},{y1})"
            )));
        }
        Ok(PixelBox { x0, y0, x1, y1 })
    }

    pub fn is_empty(&self) -> bool {
        self.x0 >= self.x1 || self.y0 >= self.y1
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    #[inline]
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn fits_in(&self, height: usize, width: usize) -> bool {
        self.x1 <= width && self.y1 <= height
    }

    /// Centre pixel, rounded down.
    pub fn center(&self) -> Pixel {
        Pixel::new((self.x0 + self.x1 - 1) / 2, (self.y0 + self.y1 - 1) / 2)
    }

    pub fn intersection(&self, other: &PixelBox) -> PixelBox {
        let b = PixelBox {
            x0: self.x0.max(other.x0),
            y0: self.y0.max(other.y0),
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
        };
        if b.is_empty() {
            PixelBox::EMPTY
        } else {
            b
        }
    }

    /// Grows the box by `margin` on every side, clipped to the raster.
    pub fn dilate(&self, margin: usize, height: usize, width: usize) -> PixelBox {
        PixelBox {
            x0: self.x0.saturating_sub(margin),
            y0: self.y0.saturating_sub(margin),
            x1: (self.x1 + margin).min(width),
            y1: (self.y1 + margin).min(height),
        }
    }

    /// Binary indicator raster of the box.
    pub fn indicator(&self, height: usize, width: usize) -> Raster {
        Raster::from_fn(height, width, |y, x| if self.contains(x, y) { 1.0 } else { 0.0 })
    }

    /// Tight box around the pixels strictly above `threshold`; empty sentinel if there are none.
    pub fn from_mask(mask: &Raster, threshold: f64) -> PixelBox {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..mask.height() {
            for x in 0..mask.width() {
                if mask.get(y, x, 0) > threshold {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        if x1 == 0 {
            PixelBox::EMPTY
        } else {
            PixelBox { x0, y0, x1, y1 }
        }
    }

    /// Maps the box onto a resized raster (align-corners convention), keeping it non-empty.
    pub fn rescale(&self, src: (usize, usize), dst: (usize, usize)) -> PixelBox {
        if self.is_empty() {
            return PixelBox::EMPTY;
        }
        let (sh, sw) = src;
        let (dh, dw) = dst;
        let map = |v: usize, s: usize, d: usize| rescale_coord(v as f64, s, d).round() as usize;
        let x0 = map(self.x0, sw, dw).min(dw - 1);
        let y0 = map(self.y0, sh, dh).min(dh - 1);
        let x1 = (map(self.x1 - 1, sw, dw) + 1).clamp(x0 + 1, dw);
        let y1 = (map(self.y1 - 1, sh, dh) + 1).clamp(y0 + 1, dh);
        PixelBox { x0, y0, x1, y1 }
    }
}

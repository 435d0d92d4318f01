//! Raster file formats.
//!
//! `DBR1` layout (all little-endian):
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `b"DBR1"`               |
//! | 4      | 4    | height (u32)                  |
//! | 8      | 4    | width (u32)                   |
//! | 12     | 4    | channels (u32)                |
//! | 16     | 8·n  | values (f64), row-major, interleaved channels |

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use super::Raster;
use crate::error::{Error, Result};

const DBR_MAGIC: &[u8; 4] = b"DBR1";

pub fn encode_dbr(raster: &Raster) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + raster.data().len() * 8);
    buf.extend_from_slice(DBR_MAGIC);
    for dim in [raster.height(), raster.width(), raster.channels()] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in raster.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_dbr(bytes: &[u8], path: &Path) -> Result<Raster> {
    let bad = |reason: String| Error::RasterFormat {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 16 || &bytes[..4] != DBR_MAGIC {
        return Err(bad("missing DBR1 header".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let n = h * w * c;
    if bytes.len() != 16 + 8 * n {
        return Err(bad(format!(
            "expected {} payload bytes for {h}x{w}x{c}, found {}",
            8 * n,
            bytes.len() - 16
        )));
    }
    let data = bytes[16..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Raster::new(h, w, c, data)
}

pub fn write_dbr(raster: &Raster, path: &Path) -> Result<()> {
    fs::write(path, encode_dbr(raster)).map_err(|e| Error::io(path, e))
}

pub fn read_dbr(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dbr(&bytes, path)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1- or 3-channel raster with values in [0,1] as an 8-bit PNG.
pub fn write_png(raster: &Raster, path: &Path) -> Result<()> {
    let (w, h) = (raster.width() as u32, raster.height() as u32);
    match raster.channels() {
        1 => {
            let img: GrayImage = ImageBuffer::from_fn(w, h, |x, y| {
                Luma([to_u8(raster.get(y as usize, x as usize, 0))])
            });
            img.save(path)?;
        }
        3 => {
            let img: RgbImage = ImageBuffer::from_fn(w, h, |x, y| {
                let (y, x) = (y as usize, x as usize);
                Rgb([
                    to_u8(raster.get(y, x, 0)),
                    to_u8(raster.get(y, x, 1)),
                    to_u8(raster.get(y, x, 2)),
                ])
            });
            img.save(path)?;
        }
        c => {
            return Err(Error::InvalidArgument(format!(
                "PNG output supports 1 or 3 channels, got {c}"
            )))
        }
    }
    Ok(())
}

pub fn read_png_rgb(path: &Path) -> Result<Raster> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.pixels().flat_map(|p| p.0.map(|v| v as f64 / 255.0)).collect();
    Raster::new(h as usize, w as usize, 3, data)
}

/// Reads a grayscale PNG (8 or 16 bit) normalised to [0,1].
pub fn read_png_gray(path: &Path) -> Result<Raster> {
    let img = image::open(path)?.to_luma16();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| p.0[0] as f64 / 65535.0).collect();
    Raster::new(h as usize, w as usize, 1, data)
}

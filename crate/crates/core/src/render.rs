//! PNG output. Clamping to `[0, 1]` happens here and nowhere else.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::data::ImageShape;
use crate::error::{Error, Result};

/// Quantise one intensity for display.
pub fn to_byte(value: f64) -> u8 {
    (value.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn image_from_bytes(bytes: &[u8], shape: ImageShape) -> Result<DynamicImage> {
    if bytes.len() != shape.size() {
        return Err(Error::dim("image bytes", shape.size(), bytes.len()));
    }
    let (w, h) = (shape.width as u32, shape.height as u32);
    let img = match shape.channels {
        1 => GrayImage::from_raw(w, h, bytes.to_vec()).map(DynamicImage::ImageLuma8),
        3 => RgbImage::from_raw(w, h, bytes.to_vec()).map(DynamicImage::ImageRgb8),
        c => return Err(Error::InvalidArgument(format!("unsupported channel count {c}"))),
    };
    img.ok_or_else(|| Error::InvalidArgument("image buffer size mismatch".into()))
}

pub fn to_image(values: &[f64], shape: ImageShape) -> Result<DynamicImage> {
    let bytes: Vec<u8> = values.iter().map(|&v| to_byte(v)).collect();
    image_from_bytes(&bytes, shape)
}

pub fn png_bytes(values: &[f64], shape: ImageShape) -> Result<Vec<u8>> {
    let img = to_image(values, shape)?;
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn write_png(path: &Path, values: &[f64], shape: ImageShape) -> Result<()> {
    std::fs::write(path, png_bytes(values, shape)?)?;
    Ok(())
}

/// Tile `tiles` (row-major, `rows × cols`) into one image with a one-pixel
/// gap of `gap_value` between tiles.
pub fn tile_grid(tiles: &[Vec<f64>], rows: usize, cols: usize, shape: ImageShape, gap_value: f64) -> Result<(Vec<f64>, ImageShape)> {
    if tiles.len() != rows * cols {
        return Err(Error::dim("grid tiles", rows * cols, tiles.len()));
    }
    let gap = 1;
    let out_shape = ImageShape::new(
        cols * shape.width + cols.saturating_sub(1) * gap,
        rows * shape.height + rows.saturating_sub(1) * gap,
        shape.channels,
    );
    let mut out = vec![gap_value; out_shape.size()];
    for (t, tile) in tiles.iter().enumerate() {
        if tile.len() != shape.size() {
            return Err(Error::dim("tile", shape.size(), tile.len()));
        }
        let (row, col) = (t / cols, t % cols);
        let (ox, oy) = (col * (shape.width + gap), row * (shape.height + gap));
        for y in 0..shape.height {
            for x in 0..shape.width {
                for c in 0..shape.channels {
                    let src = shape.index(x, y, c).unwrap();
                    let dst = out_shape.index(ox + x, oy + y, c).unwrap();
                    out[dst] = tile[src];
                }
            }
        }
    }
    Ok((out, out_shape))
}

/// Read a tile back out of a grid produced by [`tile_grid`].
pub fn extract_tile(grid: &[u8], grid_shape: ImageShape, shape: ImageShape, row: usize, col: usize) -> Vec<u8> {
    let (ox, oy) = (col * (shape.width + 1), row * (shape.height + 1));
    let mut out = Vec::with_capacity(shape.size());
    for y in 0..shape.height {
        for x in 0..shape.width {
            for c in 0..shape.channels {
                out.push(grid[grid_shape.index(ox + x, oy + y, c).unwrap()]);
            }
        }
    }
    out
}

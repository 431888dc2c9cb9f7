//! Binary PGM (P5) output. Grids tile images row-major with one-pixel
//! separators at gray value 128, so golden files stay byte-exact.

use std::fs;
use std::path::Path;

use latentcf::tensor::Tensor;

use crate::error::{CliError, Result};

const SEPARATOR: u8 = 128;

fn quantize(v: f64) -> u8 {
    (255.0 * v).round().clamp(0.0, 255.0) as u8
}

/// Renders the grid into PGM bytes: magic `P5`, dimensions, maxval 255,
/// then one byte per pixel, `round(255 * v)`.
pub fn grid_bytes(images: &[Tensor], cols: usize) -> Result<Vec<u8>> {
    if images.is_empty() {
        return Err(CliError::Pgm("no images to export".into()));
    }
    if cols == 0 {
        return Err(CliError::Pgm("grid needs at least one column".into()));
    }
    let shape = images[0].shape().to_vec();
    if shape.len() != 2 {
        return Err(CliError::Pgm(format!(
            "images must be 2-D, got shape {shape:?}"
        )));
    }
    if let Some(other) = images.iter().find(|t| t.shape() != shape) {
        return Err(CliError::Pgm(format!(
            "mixed image shapes: {:?} vs {:?}",
            shape,
            other.shape()
        )));
    }
    let (h, w) = (shape[0], shape[1]);
    let cols = cols.min(images.len());
    let rows = images.len().div_ceil(cols);
    let total_w = cols * w + (cols - 1);
    let total_h = rows * h + (rows - 1);

    let mut canvas = vec![0u8; total_w * total_h];
    // separator rows and columns between tiles
    for tile_row in 1..rows {
        let y = tile_row * (h + 1) - 1;
        canvas[y * total_w..(y + 1) * total_w].fill(SEPARATOR);
    }
    for tile_col in 1..cols {
        let x = tile_col * (w + 1) - 1;
        for y in 0..total_h {
            canvas[y * total_w + x] = SEPARATOR;
        }
    }
    for (idx, image) in images.iter().enumerate() {
        let (tr, tc) = (idx / cols, idx % cols);
        let (y0, x0) = (tr * (h + 1), tc * (w + 1));
        for r in 0..h {
            for c in 0..w {
                canvas[(y0 + r) * total_w + (x0 + c)] = quantize(image.values()[r * w + c]);
            }
        }
    }

    let mut bytes = format!("P5\n{total_w} {total_h}\n255\n").into_bytes();
    bytes.extend_from_slice(&canvas);
    Ok(bytes)
}

/// Writes a tiled grid of equally-shaped grayscale images.
pub fn export_grid(images: &[Tensor], cols: usize, path: impl AsRef<Path>) -> Result<()> {
    let bytes = grid_bytes(images, cols)?;
    fs::write(path, bytes)?;
    Ok(())
}

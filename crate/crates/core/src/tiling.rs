//! Masking the field image with the vegetation mask and cutting it into
//! non-overlapping square tiles.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::FieldImage;
use crate::vegseg::VegetationMask;

/// Default tile side in pixels.
pub const DEFAULT_SIDE: usize = 50;
/// Tiles with less vegetation than this fraction are treated as background.
pub const DEFAULT_VEG_THRESHOLD: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TileLabel {
    Crop,
    Weed,
    Background,
}

/// Color image with every non-vegetation pixel set to exact black.
#[derive(Debug, Clone)]
pub struct MaskedImage {
    pub pixels: FieldImage,
    pub mask: VegetationMask,
}

pub fn overlay(image: &FieldImage, mask: &VegetationMask) -> Result<MaskedImage> {
    if image.width() != mask.width || image.height() != mask.height {
        return Err(Error::dims(
            format!("{}x{}", image.width(), image.height()),
            format!("{}x{} mask", mask.width, mask.height),
        ));
    }
    let mut pixels = image.clone();
    for (p, &m) in pixels.pixels_mut().chunks_exact_mut(3).zip(&mask.mask) {
        if m == 0 {
            p.fill(0);
        }
    }
    Ok(MaskedImage {
        pixels,
        mask: mask.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub row: usize,
    pub col: usize,
    pub side: usize,
    pub pixels: FieldImage,
    /// Count of mask=1 pixels inside the tile.
    pub vegetation_pixels: usize,
    pub vegetation_fraction: f64,
    pub label: Option<TileLabel>,
}

#[derive(Debug, Clone)]
pub struct TileGrid {
    pub tiles: Vec<Tile>,
    pub rows: usize,
    pub cols: usize,
    pub side: usize,
}

/// Cuts the masked image into a row-major grid of `side`x`side` tiles.
pub fn make_tiles(masked: &MaskedImage, side: usize) -> Result<TileGrid> {
    let (w, h) = (masked.pixels.width(), masked.pixels.height());
    if side == 0 || w % side != 0 || h % side != 0 {
        return Err(Error::Parameter(format!("tile side {side} does not divide {w}x{h}")));
    }
    let (rows, cols) = (h / side, w / side);
    let mut tiles = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let (x0, y0) = (col * side, row * side);
            let mut veg = 0usize;
            for y in y0..y0 + side {
                veg += masked.mask.mask[y * w + x0..y * w + x0 + side]
                    .iter()
                    .filter(|&&m| m == 1)
                    .count();
            }
            let mut pixels = masked.pixels.crop(x0, y0, side, side)?;
            pixels.source_id = format!("{}:r{row}_c{col}", masked.pixels.source_id);
            tiles.push(Tile {
                row,
                col,
                side,
                pixels,
                vegetation_pixels: veg,
                vegetation_fraction: veg as f64 / (side * side) as f64,
                label: None,
            });
        }
    }
    Ok(TileGrid {
        tiles,
        rows,
        cols,
        side,
    })
}

/// Splits tiles into those with at least `threshold` vegetation (kept) and the
/// rest, which are labeled background.
pub fn filter_tiles(grid: TileGrid, threshold: f64) -> Result<(Vec<Tile>, Vec<Tile>)> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Parameter(format!("threshold {threshold} outside [0, 1]")));
    }
    let (kept, mut discarded): (Vec<Tile>, Vec<Tile>) = grid
        .tiles
        .into_iter()
        .partition(|t| t.vegetation_fraction >= threshold);
    for t in &mut discarded {
        t.label = Some(TileLabel::Background);
    }
    Ok((kept, discarded))
}

/// Labels sub-threshold tiles background in place, leaving the grid whole.
/// Returns the number of tiles kept for classification.
pub fn mark_background(grid: &mut TileGrid, threshold: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Parameter(format!("threshold {threshold} outside [0, 1]")));
    }
    let mut kept = 0;
    for t in &mut grid.tiles {
        if t.vegetation_fraction >= threshold {
            kept += 1;
        } else {
            t.label = Some(TileLabel::Background);
        }
    }
    Ok(kept)
}

/// Reassembles a full grid into one image.
pub fn reassemble(grid: &TileGrid) -> Result<FieldImage> {
    let (w, h) = (grid.cols * grid.side, grid.rows * grid.side);
    let mut out = FieldImage::filled(w, h, [0, 0, 0], "reassembled");
    if grid.tiles.len() != grid.rows * grid.cols {
        return Err(Error::dims(grid.rows * grid.cols, grid.tiles.len()));
    }
    for t in &grid.tiles {
        for y in 0..t.side {
            for x in 0..t.side {
                out.put(t.col * t.side + x, t.row * t.side + y, t.pixels.get(x, y));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub row: usize,
    pub col: usize,
    pub side: usize,
    pub vegetation_fraction: f64,
    pub label: Option<TileLabel>,
}

impl From<&Tile> for TileRecord {
    fn from(t: &Tile) -> Self {
        Self {
            row: t.row,
            col: t.col,
            side: t.side,
            vegetation_fraction: t.vegetation_fraction,
            label: t.label,
        }
    }
}

pub fn write_tile_records<'a>(tiles: impl IntoIterator<Item = &'a Tile>, path: &Path) -> Result<()> {
    let mut records: Vec<TileRecord> = tiles.into_iter().map(TileRecord::from).collect();
    records.sort_by_key(|r| (r.row, r.col));
    let text = serde_json::to_string_pretty(&records)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes each tile as `r{row}_c{col}.png` under `dir`.
pub fn dump_tile_pngs<'a>(tiles: impl IntoIterator<Item = &'a Tile>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in tiles {
        t.pixels.save_png(&dir.join(format!("r{}_c{}.png", t.row, t.col)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(w: usize, h: usize) -> FieldImage {
        let mut img = FieldImage::filled(w, h, [0, 0, 0], "img");
        for y in 0..h {
            for x in 0..w {
                img.put(x, y, [(x % 200) as u8 + 1, (y % 200) as u8 + 1, 77]);
            }
        }
        img
    }

    fn mask_from(w: usize, h: usize, f: impl Fn(usize, usize) -> bool) -> VegetationMask {
        let m = (0..w * h).map(|i| u8::from(f(i % w, i / w))).collect();
        VegetationMask::new(w, h, m).unwrap()
    }

    #[test]
    fn identity_and_null_masks() {
        let img = image(20, 10);
        let all = overlay(&img, &mask_from(20, 10, |_, _| true)).unwrap();
        assert_eq!(all.pixels.pixels(), img.pixels());
        let none = overlay(&img, &mask_from(20, 10, |_, _| false)).unwrap();
        assert!(none.pixels.pixels().iter().all(|&v| v == 0));
    }

    #[test]
    fn checkerboard_overlay_is_exact() {
        let img = FieldImage::filled(8, 8, [30, 200, 40], "g");
        let m = mask_from(8, 8, |x, y| (x + y) % 2 == 0);
        let out = overlay(&img, &m).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let expected = if (x + y) % 2 == 0 { [30, 200, 40] } else { [0, 0, 0] };
                assert_eq!(out.pixels.get(x, y), expected);
            }
        }
        let again = overlay(&out.pixels, &m).unwrap();
        assert_eq!(again.pixels.pixels(), out.pixels.pixels());
    }

    #[test]
    fn overlay_rejects_mismatched_dims() {
        assert!(overlay(&image(4, 4), &mask_from(4, 5, |_, _| true)).is_err());
    }

    #[test]
    fn tile_counts() {
        let masked = overlay(&image(500, 500), &mask_from(500, 500, |_, _| true)).unwrap();
        for (side, n) in [(50, 100), (100, 25), (25, 400)] {
            let grid = make_tiles(&masked, side).unwrap();
            assert_eq!(grid.tiles.len(), n);
            assert_eq!(grid.rows * grid.cols, n);
        }
        assert!(matches!(make_tiles(&masked, 30), Err(Error::Parameter(_))));
    }

    #[test]
    fn threshold_boundary() {
        // 249 of 2500 pixels in tile 0, 250 in tile 1
        let m = mask_from(100, 50, |x, y| {
            let k = y * 50 + (x % 50);
            if x < 50 {
                k < 249
            } else {
                k < 250
            }
        });
        let masked = overlay(&image(100, 50), &m).unwrap();
        let grid = make_tiles(&masked, 50).unwrap();
        let (kept, discarded) = filter_tiles(grid, 0.10).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!((kept[0].row, kept[0].col), (0, 1));
        assert_eq!(discarded[0].label, Some(TileLabel::Background));
    }

    #[test]
    fn all_background_grid_keeps_nothing() {
        let masked = overlay(&image(100, 100), &mask_from(100, 100, |_, _| false)).unwrap();
        let (kept, discarded) = filter_tiles(make_tiles(&masked, 50).unwrap(), 0.1).unwrap();
        assert!(kept.is_empty());
        assert_eq!(discarded.len(), 4);
        assert!(discarded.iter().all(|t| t.label == Some(TileLabel::Background)));
    }

    #[test]
    fn reassembly_reconstructs_masked_image() {
        let m = mask_from(100, 100, |x, y| (x * y) % 7 < 3);
        let masked = overlay(&image(100, 100), &m).unwrap();
        let grid = make_tiles(&masked, 25).unwrap();
        assert_eq!(reassemble(&grid).unwrap().pixels(), masked.pixels.pixels());
        let total: usize = grid.tiles.iter().map(|t| t.vegetation_pixels).sum();
        assert_eq!(total, m.count());
    }
}

//! Per-tile cluster rate, the density map, and its dense/heatmap renderings.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_io::{ClassMap, PixelClass};
use crate::error::{Error, Result};
use crate::image::FieldImage;
use crate::tiling::{Tile, TileGrid, TileLabel};
use crate::vegseg::VegetationMask;

const CROP_RGB: [u8; 3] = [60, 160, 60];
const BACKGROUND_RGB: [u8; 3] = [128, 128, 128];
/// Weed shading runs from light yellow (CR 0) to dark red (CR 1).
const WEED_LOW_RGB: [u8; 3] = [255, 235, 130];
const WEED_HIGH_RGB: [u8; 3] = [170, 0, 0];

/// Vegetation pixels over tile area. Under tile-level labeling every
/// vegetation pixel of a weed tile counts as weed coverage.
pub fn cluster_rate(tile: &Tile) -> f64 {
    tile.vegetation_pixels as f64 / (tile.side * tile.side) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityRecord {
    pub row: usize,
    pub col: usize,
    pub label: TileLabel,
    pub cluster_rate: f64,
    pub vegetation_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityMap {
    pub source_id: String,
    pub tile_side: usize,
    pub rows: usize,
    pub cols: usize,
    /// Row-major, one record per tile position.
    pub records: Vec<DensityRecord>,
}

impl DensityMap {
    pub fn record(&self, row: usize, col: usize) -> &DensityRecord {
        &self.records[row * self.cols + col]
    }

    pub fn weed_tiles(&self) -> impl Iterator<Item = &DensityRecord> {
        self.records.iter().filter(|r| r.label == TileLabel::Weed)
    }

    /// Vegetation pixels under each label, in (crop, weed, background) order.
    pub fn coverage_by_label(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for r in &self.records {
            match r.label {
                TileLabel::Crop => c.0 += r.vegetation_pixels,
                TileLabel::Weed => c.1 += r.vegetation_pixels,
                TileLabel::Background => c.2 += r.vegetation_pixels,
            }
        }
        c
    }

    /// Weed-tile vegetation as a fraction of the whole image area.
    pub fn weed_coverage(&self) -> f64 {
        let area = (self.rows * self.cols * self.tile_side * self.tile_side) as f64;
        self.coverage_by_label().1 as f64 / area
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// One flat-colored block per tile: weed shaded by cluster rate, crop
    /// green, background gray.
    pub fn heatmap(&self) -> FieldImage {
        let s = self.tile_side;
        let mut img = FieldImage::filled(self.cols * s, self.rows * s, BACKGROUND_RGB, &self.source_id);
        for r in &self.records {
            let rgb = match r.label {
                TileLabel::Crop => CROP_RGB,
                TileLabel::Background => BACKGROUND_RGB,
                TileLabel::Weed => {
                    let t = r.cluster_rate.clamp(0.0, 1.0);
                    std::array::from_fn(|i| {
                        (WEED_LOW_RGB[i] as f64 + t * (WEED_HIGH_RGB[i] as f64 - WEED_LOW_RGB[i] as f64)).round() as u8
                    })
                }
            };
            for y in r.row * s..(r.row + 1) * s {
                for x in r.col * s..(r.col + 1) * s {
                    img.put(x, y, rgb);
                }
            }
        }
        img
    }

    pub fn write_heatmap(&self, path: &Path) -> Result<()> {
        self.heatmap().save_png(path)
    }
}

/// Combines the grid with per-tile predictions. Tiles already labeled
/// background keep that label; every other tile needs a prediction.
pub fn build_density_map(
    grid: &TileGrid,
    predictions: &BTreeMap<(usize, usize), TileLabel>,
    source_id: &str,
) -> Result<DensityMap> {
    if grid.tiles.len() != grid.rows * grid.cols {
        return Err(Error::dims(grid.rows * grid.cols, grid.tiles.len()));
    }
    let mut records = Vec::with_capacity(grid.tiles.len());
    for (i, t) in grid.tiles.iter().enumerate() {
        if (t.row, t.col) != (i / grid.cols, i % grid.cols) {
            return Err(Error::InvalidData(format!("tile ({}, {}) out of row-major order", t.row, t.col)));
        }
        let label = match t.label {
            Some(TileLabel::Background) => TileLabel::Background,
            _ => *predictions.get(&(t.row, t.col)).ok_or_else(|| {
                Error::InvalidData(format!("no prediction for kept tile ({}, {})", t.row, t.col))
            })?,
        };
        records.push(DensityRecord {
            row: t.row,
            col: t.col,
            label,
            cluster_rate: cluster_rate(t),
            vegetation_pixels: t.vegetation_pixels,
        });
    }
    Ok(DensityMap {
        source_id: source_id.to_string(),
        tile_side: grid.side,
        rows: grid.rows,
        cols: grid.cols,
        records,
    })
}

/// Pixel-level rendering: vegetation pixels take their tile's label
/// (background tiles count as soil) and non-vegetation pixels are soil.
pub fn to_dense_prediction(map: &DensityMap, mask: &VegetationMask) -> Result<ClassMap> {
    let (w, h) = (map.cols * map.tile_side, map.rows * map.tile_side);
    if (mask.width, mask.height) != (w, h) {
        return Err(Error::dims(format!("{w}x{h}"), format!("{}x{} mask", mask.width, mask.height)));
    }
    let classes = (0..w * h)
        .map(|i| {
            if mask.mask[i] == 0 {
                return PixelClass::Soil;
            }
            let (x, y) = (i % w, i / w);
            match map.record(y / map.tile_side, x / map.tile_side).label {
                TileLabel::Crop => PixelClass::Crop,
                TileLabel::Weed => PixelClass::Weed,
                TileLabel::Background => PixelClass::Soil,
            }
        })
        .collect();
    ClassMap::new(w, h, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiling::{make_tiles, mark_background, overlay};

    fn grid_from_mask(mask: Vec<u8>, w: usize, h: usize, side: usize) -> (TileGrid, VegetationMask) {
        let img = FieldImage::filled(w, h, [90, 140, 60], "g");
        let mask = VegetationMask::new(w, h, mask).unwrap();
        let grid = make_tiles(&overlay(&img, &mask).unwrap(), side).unwrap();
        (grid, mask)
    }

    #[test]
    fn cluster_rate_hand_values() {
        let mut mask = vec![0u8; 50 * 50];
        let (empty, _) = grid_from_mask(mask.clone(), 50, 50, 50);
        assert_eq!(cluster_rate(&empty.tiles[0]), 0.0);
        // 25x25 block: 625 of 2500 pixels.
        for y in 0..25 {
            for x in 0..25 {
                mask[y * 50 + x] = 1;
            }
        }
        let (quarter, _) = grid_from_mask(mask, 50, 50, 50);
        assert_eq!(cluster_rate(&quarter.tiles[0]), 0.25);
        let (full, _) = grid_from_mask(vec![1; 2500], 50, 50, 50);
        assert_eq!(cluster_rate(&full.tiles[0]), 1.0);
    }

    #[test]
    fn single_weed_tile_and_conservation() {
        // 10x10 tiles of side 5; tile (3,4) has 5 of 25 pixels (CR 0.2).
        let (w, side) = (50, 5);
        let mut mask = vec![0u8; w * w];
        for x in 20..25 {
            mask[15 * w + x] = 1;
        }
        mask[0] = 1; // sub-threshold speck in tile (0,0)
        let (mut grid, _) = grid_from_mask(mask.clone(), w, w, side);
        mark_background(&mut grid, 0.1).unwrap();
        let preds = BTreeMap::from([((3, 4), TileLabel::Weed)]);
        let map = build_density_map(&grid, &preds, "g").unwrap();
        let weeds: Vec<_> = map.weed_tiles().collect();
        assert_eq!(weeds.len(), 1);
        assert_eq!((weeds[0].row, weeds[0].col, weeds[0].cluster_rate), (3, 4, 0.2));
        let total: f64 = map.records.iter().map(|r| r.cluster_rate * (side * side) as f64).sum();
        assert_eq!(total.round() as usize, mask.iter().filter(|&&m| m == 1).count());
        assert_eq!(map.record(0, 0).cluster_rate, 0.04);
    }

    #[test]
    fn missing_prediction_is_an_error() {
        let (mut grid, _) = grid_from_mask(vec![1; 100], 10, 10, 5);
        mark_background(&mut grid, 0.1).unwrap();
        assert!(build_density_map(&grid, &BTreeMap::new(), "g").is_err());
    }

    #[test]
    fn dense_prediction_follows_tiles_and_mask() {
        let mut mask = vec![0u8; 100];
        for (i, m) in mask.iter_mut().enumerate() {
            *m = u8::from(i % 3 == 0);
        }
        let (mut grid, vm) = grid_from_mask(mask.clone(), 10, 10, 5);
        mark_background(&mut grid, 0.1).unwrap();
        let all_weed: BTreeMap<_, _> = grid.tiles.iter().map(|t| ((t.row, t.col), TileLabel::Weed)).collect();
        let dense = to_dense_prediction(&build_density_map(&grid, &all_weed, "g").unwrap(), &vm).unwrap();
        for (c, &m) in dense.classes.iter().zip(&mask) {
            assert_eq!(*c, if m == 1 { PixelClass::Weed } else { PixelClass::Soil });
        }

        let mut bg = build_density_map(&grid, &all_weed, "g").unwrap();
        bg.records.iter_mut().for_each(|r| r.label = TileLabel::Background);
        let dense = to_dense_prediction(&bg, &vm).unwrap();
        assert!(dense.classes.iter().all(|&c| c == PixelClass::Soil));
    }

    #[test]
    fn heatmap_colors_by_label() {
        let (mut grid, _) = grid_from_mask(vec![1; 100], 10, 10, 5);
        mark_background(&mut grid, 0.1).unwrap();
        let preds = BTreeMap::from([
            ((0, 0), TileLabel::Weed),
            ((0, 1), TileLabel::Crop),
            ((1, 0), TileLabel::Crop),
            ((1, 1), TileLabel::Weed),
        ]);
        let img = build_density_map(&grid, &preds, "g").unwrap().heatmap();
        assert_eq!(img.get(2, 2), WEED_HIGH_RGB);
        assert_eq!(img.get(7, 2), CROP_RGB);
    }

    #[test]
    fn json_round_trip() {
        let (mut grid, _) = grid_from_mask(vec![1; 100], 10, 10, 5);
        mark_background(&mut grid, 0.1).unwrap();
        let preds: BTreeMap<_, _> = grid.tiles.iter().map(|t| ((t.row, t.col), TileLabel::Crop)).collect();
        let map = build_density_map(&grid, &preds, "g").unwrap();
        let back: DensityMap = serde_json::from_str(&map.to_json().unwrap()).unwrap();
        assert_eq!(back, map);
    }
}

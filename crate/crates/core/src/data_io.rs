//! Annotated dataset ingestion, mask-consistent augmentation, tile-label
//! derivation and train/test split management.
//!
//! On-disk layout: `images/*.png`, `annotations/*.png` with matching stems, and
//! an optional `split.txt` whose lines read `<stem> train|test`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{sample_bicubic, FieldImage};
use crate::tiling::TileLabel;
use crate::vegseg::VegetationMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelClass {
    Soil = 0,
    Crop = 1,
    Weed = 2,
}

impl PixelClass {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Per-pixel soil/crop/weed labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    pub width: usize,
    pub height: usize,
    pub classes: Vec<PixelClass>,
}

impl ClassMap {
    pub fn new(width: usize, height: usize, classes: Vec<PixelClass>) -> Result<Self> {
        if classes.len() != width * height {
            return Err(Error::dims(width * height, classes.len()));
        }
        Ok(Self {
            width,
            height,
            classes,
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> PixelClass {
        self.classes[y * self.width + x]
    }

    pub fn vegetation_mask(&self) -> VegetationMask {
        let mask = self
            .classes
            .iter()
            .map(|&c| u8::from(c != PixelClass::Soil))
            .collect();
        VegetationMask::new(self.width, self.height, mask).expect("same dims")
    }

    /// Class indices (soil 0, crop 1, weed 2) for metric computations.
    pub fn indices(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.index()).collect()
    }

    /// Nearest-neighbour resize (keeps labels discrete).
    pub fn resize_nearest(&self, out_w: usize, out_h: usize) -> ClassMap {
        let sx = self.width as f64 / out_w as f64;
        let sy = self.height as f64 / out_h as f64;
        let mut classes = Vec::with_capacity(out_w * out_h);
        for y in 0..out_h {
            let iy = (((y as f64 + 0.5) * sy) as usize).min(self.height - 1);
            for x in 0..out_w {
                let ix = (((x as f64 + 0.5) * sx) as usize).min(self.width - 1);
                classes.push(self.at(ix, iy));
            }
        }
        ClassMap {
            width: out_w,
            height: out_h,
            classes,
        }
    }
}

fn parse_hex(s: &str) -> Result<[u8; 3]> {
    let t = s.trim_start_matches('#');
    let bytes = hex::decode(t).map_err(|e| Error::Parameter(format!("bad color {s:?}: {e}")))?;
    <[u8; 3]>::try_from(bytes.as_slice())
        .map_err(|_| Error::Parameter(format!("color {s:?} is not 6 hex digits")))
}

/// Annotation color to class mapping, written as `"rrggbb" = "crop"` entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ColorMap(pub BTreeMap<String, PixelClass>);

impl Default for ColorMap {
    fn default() -> Self {
        ColorMap(BTreeMap::from([
            ("000000".to_string(), PixelClass::Soil),
            ("00ff00".to_string(), PixelClass::Crop),
            ("ff0000".to_string(), PixelClass::Weed),
        ]))
    }
}

impl ColorMap {
    fn table(&self) -> Result<Vec<([u8; 3], PixelClass)>> {
        self.0
            .iter()
            .map(|(k, &v)| Ok((parse_hex(k)?, v)))
            .collect()
    }

    pub fn decode(&self, annotation: &FieldImage, path: &Path) -> Result<ClassMap> {
        let table = self.table()?;
        let mut classes = Vec::with_capacity(annotation.len());
        for p in annotation.pixels().chunks_exact(3) {
            let rgb = [p[0], p[1], p[2]];
            match table.iter().find(|(c, _)| *c == rgb) {
                Some(&(_, class)) => classes.push(class),
                None => return Err(Error::UnknownColor(hex::encode(rgb), path.to_path_buf())),
            }
        }
        ClassMap::new(annotation.width(), annotation.height(), classes)
    }

    pub fn encode(&self, map: &ClassMap) -> Result<FieldImage> {
        let table = self.table()?;
        let color_of = |class: PixelClass| -> Result<[u8; 3]> {
            table
                .iter()
                .find(|(_, c)| *c == class)
                .map(|&(rgb, _)| rgb)
                .ok_or_else(|| Error::Parameter(format!("color map has no entry for {class:?}")))
        };
        let lut = [
            color_of(PixelClass::Soil)?,
            color_of(PixelClass::Crop)?,
            color_of(PixelClass::Weed)?,
        ];
        let pixels = map.classes.iter().flat_map(|c| lut[c.index()]).collect();
        FieldImage::new(map.width, map.height, pixels, "annotation")
    }
}

#[derive(Debug, Clone)]
pub struct AnnotatedSample {
    pub image: FieldImage,
    pub annotation: ClassMap,
    pub split: Split,
    pub augmented_from: Option<String>,
}

impl AnnotatedSample {
    pub fn new(image: FieldImage, annotation: ClassMap, split: Split) -> Result<Self> {
        if image.width() != annotation.width || image.height() != annotation.height {
            return Err(Error::dims(
                format!("{}x{}", image.width(), image.height()),
                format!("{}x{} annotation", annotation.width, annotation.height),
            ));
        }
        Ok(Self {
            image,
            annotation,
            split,
            augmented_from: None,
        })
    }

    /// Resizes to `side`x`side`: bicubic for the image, nearest for labels.
    pub fn resized(&self, side: usize) -> AnnotatedSample {
        let mut image = crate::image::resize_bicubic(&self.image, side, side);
        image.resized = true;
        AnnotatedSample {
            image,
            annotation: self.annotation.resize_nearest(side, side),
            split: self.split,
            augmented_from: self.augmented_from.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub samples: Vec<AnnotatedSample>,
    pub color_map: ColorMap,
    /// Train:test proportion used when no `split.txt` is present.
    pub split_ratio: (u32, u32),
    pub seed: u64,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &AnnotatedSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Checks that no source id appears in both splits and that augmented
    /// samples share their source's split.
    pub fn check_leakage(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for s in &self.samples {
            let root = s.augmented_from.as_deref().unwrap_or(&s.image.source_id);
            if let Some(prev) = seen.insert(root, s.split) {
                if prev != s.split {
                    return Err(Error::Leakage(format!("{root} appears in both splits")));
                }
            }
        }
        Ok(())
    }
}

fn read_split_file(path: &Path) -> Result<BTreeMap<String, Split>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(stem), Some(tag)) = (parts.next(), parts.next()) else {
            return Err(Error::InvalidData(format!("{}:{}: expected `<stem> <split>`", path.display(), ln + 1)));
        };
        let split = match tag {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(Error::InvalidData(format!(
                    "{}:{}: unknown split {other:?}",
                    path.display(),
                    ln + 1
                )))
            }
        };
        out.insert(stem.to_string(), split);
    }
    Ok(out)
}

fn png_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_raster = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "bmp"));
        if is_raster {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            out.push((stem, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Loads every image/annotation pair under `root`.
///
/// Samples are ordered by stem. Without `split.txt`, a seeded shuffle assigns
/// `split_ratio.0 / (split_ratio.0 + split_ratio.1)` of the samples (rounded)
/// to the train split.
pub fn load_dataset(root: &Path, color_map: &ColorMap, split_ratio: (u32, u32), seed: u64) -> Result<DatasetManifest> {
    let images = png_stems(&root.join("images"))?;
    let annotations: BTreeMap<String, PathBuf> = png_stems(&root.join("annotations"))?.into_iter().collect();
    if images.is_empty() {
        log::warn!("no images found under {}", root.display());
    }

    let split_path = root.join("split.txt");
    let assigned = if split_path.exists() {
        Some(read_split_file(&split_path)?)
    } else {
        None
    };

    let fallback: BTreeMap<String, Split> = if assigned.is_none() {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let total = (split_ratio.0 + split_ratio.1).max(1) as f64;
        let n_train = (images.len() as f64 * split_ratio.0 as f64 / total).round() as usize;
        order
            .iter()
            .enumerate()
            .map(|(rank, &i)| {
                let s = if rank < n_train { Split::Train } else { Split::Test };
                (images[i].0.clone(), s)
            })
            .collect()
    } else {
        BTreeMap::new()
    };

    let mut samples = Vec::with_capacity(images.len());
    for (stem, img_path) in &images {
        let ann_path = annotations
            .get(stem)
            .ok_or_else(|| Error::InvalidData(format!("no annotation for image {stem}")))?;
        let mut image = FieldImage::load(img_path)?;
        image.source_id = stem.clone();
        let annotation = color_map.decode(&FieldImage::load(ann_path)?, ann_path)?;
        let split = match &assigned {
            Some(map) => *map
                .get(stem)
                .ok_or_else(|| Error::InvalidData(format!("{stem} missing from split.txt")))?,
            None => fallback[stem],
        };
        samples.push(AnnotatedSample::new(image, annotation, split)?);
    }

    Ok(DatasetManifest {
        root: root.to_path_buf(),
        samples,
        color_map: color_map.clone(),
        split_ratio,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    HFlip,
    VFlip,
    /// Rotation about the image center, in degrees (counter-clockwise).
    Rotate(f64),
    /// Zoom about the center; `s > 1` magnifies.
    Zoom(f64),
    /// Horizontal shear: `x' = x + k * (y - cy)`.
    Skew(f64),
}

impl AugmentOp {
    fn tag(&self) -> String {
        match self {
            AugmentOp::HFlip => "hflip".into(),
            AugmentOp::VFlip => "vflip".into(),
            AugmentOp::Rotate(t) => format!("rot{t}"),
            AugmentOp::Zoom(s) => format!("zoom{s}"),
            AugmentOp::Skew(k) => format!("skew{k}"),
        }
    }

    /// A random op with moderate parameters.
    pub fn random<R: Rng>(rng: &mut R) -> AugmentOp {
        match rng.random_range(0..5) {
            0 => AugmentOp::HFlip,
            1 => AugmentOp::VFlip,
            2 => AugmentOp::Rotate([90.0, 180.0, 270.0, rng.random_range(-20.0..20.0)][rng.random_range(0..4)]),
            3 => AugmentOp::Zoom(rng.random_range(1.1..1.4)),
            _ => AugmentOp::Skew(rng.random_range(-0.2..0.2)),
        }
    }

    /// Output-to-source coordinate map (pixel centers at integers).
    fn inverse(&self, w: usize, h: usize) -> Box<dyn Fn(f64, f64) -> (f64, f64)> {
        let cx = (w as f64 - 1.0) / 2.0;
        let cy = (h as f64 - 1.0) / 2.0;
        match *self {
            AugmentOp::HFlip => Box::new(move |x, y| (2.0 * cx - x, y)),
            AugmentOp::VFlip => Box::new(move |x, y| (x, 2.0 * cy - y)),
            AugmentOp::Rotate(deg) => {
                let (s, c) = exact_sin_cos(deg);
                // inverse rotation maps output back to source
                Box::new(move |x, y| {
                    let (dx, dy) = (x - cx, y - cy);
                    (cx + c * dx - s * dy, cy + s * dx + c * dy)
                })
            }
            AugmentOp::Zoom(z) => Box::new(move |x, y| (cx + (x - cx) / z, cy + (y - cy) / z)),
            AugmentOp::Skew(k) => Box::new(move |x, y| (x - k * (y - cy), y)),
        }
    }
}

fn exact_sin_cos(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    match r {
        r if r == 0.0 => (0.0, 1.0),
        r if r == 90.0 => (1.0, 0.0),
        r if r == 180.0 => (0.0, -1.0),
        r if r == 270.0 => (-1.0, 0.0),
        _ => r.to_radians().sin_cos(),
    }
}

/// Applies each op independently to `sample`; image pixels are resampled
/// bicubically and labels by nearest neighbour. Pixels mapped from outside the
/// source become black soil.
pub fn augment(sample: &AnnotatedSample, ops: &[AugmentOp]) -> Result<Vec<AnnotatedSample>> {
    if ops.is_empty() {
        return Err(Error::Parameter("augment needs at least one op".into()));
    }
    let (w, h) = (sample.image.width(), sample.image.height());
    let source = sample
        .augmented_from
        .clone()
        .unwrap_or_else(|| sample.image.source_id.clone());
    let mut out = Vec::with_capacity(ops.len());
    for op in ops {
        if let AugmentOp::Zoom(z) = op {
            if !(*z > 0.0) {
                return Err(Error::Parameter(format!("zoom factor must be > 0, got {z}")));
            }
        }
        let inv = op.inverse(w, h);
        let mut pixels = vec![0u8; w * h * 3];
        let mut classes = vec![PixelClass::Soil; w * h];
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = inv(x as f64, y as f64);
                let i = y * w + x;
                pixels[i * 3..i * 3 + 3].copy_from_slice(&sample_bicubic(&sample.image, sx, sy));
                let (nx, ny) = (sx.round(), sy.round());
                if nx >= 0.0 && ny >= 0.0 && (nx as usize) < w && (ny as usize) < h {
                    classes[i] = sample.annotation.at(nx as usize, ny as usize);
                }
            }
        }
        let id = format!("{}_{}", sample.image.source_id, op.tag());
        let mut image = FieldImage::new(w, h, pixels, id)?;
        image.resized = sample.image.resized;
        out.push(AnnotatedSample {
            image,
            annotation: ClassMap::new(w, h, classes)?,
            split: sample.split,
            augmented_from: Some(source.clone()),
        });
    }
    Ok(out)
}

/// Adds one random augmentation for each of a seeded `fraction` of the
/// original samples (CWFID: 60 originals at 0.5 give 90 samples).
pub fn augment_dataset(manifest: &mut DatasetManifest, fraction: f64, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let originals: Vec<usize> = (0..manifest.samples.len())
        .filter(|&i| manifest.samples[i].augmented_from.is_none())
        .collect();
    let n_aug = (originals.len() as f64 * fraction).round() as usize;
    let mut chosen: Vec<usize> = originals.choose_multiple(&mut rng, n_aug).copied().collect();
    chosen.sort_unstable();
    let mut added = Vec::with_capacity(n_aug);
    for i in chosen {
        let op = AugmentOp::random(&mut rng);
        added.extend(augment(&manifest.samples[i], &[op])?);
    }
    let n = added.len();
    manifest.samples.extend(added);
    Ok(n)
}

/// Ground-truth label of one tile derived from pixel annotations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedTile {
    pub row: usize,
    pub col: usize,
    pub label: TileLabel,
    pub crop_px: usize,
    pub weed_px: usize,
}

impl DerivedTile {
    /// Weed coverage of the tile area (the ground-truth cluster rate).
    pub fn weed_rate(&self, side: usize) -> f64 {
        self.weed_px as f64 / (side * side) as f64
    }
}

/// Labels every `side`x`side` tile: below `veg_threshold` vegetation it is
/// background, otherwise the majority of crop vs weed pixels (ties to weed).
pub fn derive_tile_labels(annotation: &ClassMap, side: usize, veg_threshold: f64) -> Result<Vec<DerivedTile>> {
    if side == 0 || annotation.width % side != 0 || annotation.height % side != 0 {
        return Err(Error::Parameter(format!(
            "tile side {side} does not divide {}x{}",
            annotation.width, annotation.height
        )));
    }
    let (rows, cols) = (annotation.height / side, annotation.width / side);
    let mut out = Vec::with_capacity(rows * cols);
    for row in 0..rows {
        for col in 0..cols {
            let (mut crop, mut weed) = (0usize, 0usize);
            for y in row * side..(row + 1) * side {
                for x in col * side..(col + 1) * side {
                    match annotation.at(x, y) {
                        PixelClass::Crop => crop += 1,
                        PixelClass::Weed => weed += 1,
                        PixelClass::Soil => {}
                    }
                }
            }
            let frac = (crop + weed) as f64 / (side * side) as f64;
            let label = if frac < veg_threshold {
                TileLabel::Background
            } else if weed >= crop {
                TileLabel::Weed
            } else {
                TileLabel::Crop
            };
            out.push(DerivedTile {
                row,
                col,
                label,
                crop_px: crop,
                weed_px: weed,
            });
        }
    }
    Ok(out)
}

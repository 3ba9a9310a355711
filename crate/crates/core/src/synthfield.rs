//! Synthetic top-down field images with exact ground truth.
//!
//! Crops are lobed ellipses planted along evenly spaced rows; weeds are smaller
//! blobs scattered over the field, some of them deliberately touching a crop.
//! Soil gets additive texture noise and the whole frame a linear illumination
//! gradient. Masks are rasterized from the same geometry, so they are exact.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data_io::{ClassMap, ColorMap, PixelClass};
use crate::error::{Error, Result};
use crate::image::FieldImage;
use crate::vegseg::VegetationMask;

/// Minimum RGB distance between crop and weed base colors.
pub const MIN_CLASS_COLOR_DISTANCE: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub size: usize,
    /// Distance between crop rows, in pixels.
    pub row_spacing: f64,
    /// Distance between neighbouring crops within a row, in pixels.
    pub crop_spacing: f64,
    pub crop_radius: (f64, f64),
    pub n_weeds: usize,
    pub weed_radius: (f64, f64),
    /// Standard deviation of the additive soil texture noise.
    pub soil_noise: f64,
    /// Fractional brightness drop from the left edge to the right edge.
    pub illumination_gradient: f64,
    /// Probability that a weed is placed touching a crop rather than uniformly.
    pub overlap_prob: f64,
    pub crop_color: [u8; 3],
    pub weed_color: [u8; 3],
    pub soil_color: [u8; 3],
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Bright, saturated plants on even soil.
    HighContrast,
    /// Dim, desaturated plants with an illumination gradient.
    LowContrast,
}

impl Default for FieldSpec {
    fn default() -> Self {
        Self::preset(Preset::HighContrast, 500, 0)
    }
}

impl FieldSpec {
    /// A preset for a `size`-pixel field. Plant sizes are absolute, so a
    /// smaller field behaves like a crop of a 500 px one; the weed count
    /// scales with area.
    pub fn preset(preset: Preset, size: usize, seed: u64) -> Self {
        let area = (size as f64 / 500.0).powi(2);
        let base = FieldSpec {
            size,
            row_spacing: 125.0f64.min(size as f64),
            crop_spacing: 60.0,
            crop_radius: (13.0, 21.0),
            n_weeds: ((28.0 * area).round() as usize).max(1),
            weed_radius: (7.0, 13.0),
            soil_noise: 7.0,
            illumination_gradient: 0.0,
            overlap_prob: 0.15,
            crop_color: [50, 150, 45],
            weed_color: [150, 175, 40],
            soil_color: [130, 100, 75],
            seed,
        };
        match preset {
            Preset::HighContrast => base,
            Preset::LowContrast => FieldSpec {
                soil_noise: 6.0,
                illumination_gradient: 0.2,
                overlap_prob: 0.3,
                crop_color: [70, 110, 62],
                weed_color: [112, 124, 58],
                soil_color: [96, 84, 72],
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let radii_ok = |(lo, hi): (f64, f64)| lo > 0.0 && hi >= lo && hi.is_finite();
        if self.size < 8 {
            return Err(Error::Parameter(format!("field size {} too small", self.size)));
        }
        if !radii_ok(self.crop_radius) || !radii_ok(self.weed_radius) {
            return Err(Error::Parameter("radii must satisfy 0 < min <= max".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap_prob) || !(0.0..1.0).contains(&self.illumination_gradient) {
            return Err(Error::Parameter("overlap_prob / illumination_gradient out of range".into()));
        }
        if self.row_spacing < 2.0 * self.crop_radius.1 || self.crop_spacing < 2.0 * self.crop_radius.1 {
            return Err(Error::Parameter(format!(
                "crops of radius {} do not fit rows spaced {} / plants spaced {}",
                self.crop_radius.1, self.row_spacing, self.crop_spacing
            )));
        }
        let size = self.size as f64;
        if 2.0 * self.crop_radius.1 >= size || 2.0 * self.weed_radius.1 >= size || self.row_spacing > size {
            return Err(Error::Parameter(format!(
                "plants do not fit in a {}px field",
                self.size
            )));
        }
        let dist = color_distance(self.crop_color, self.weed_color);
        if dist < MIN_CLASS_COLOR_DISTANCE {
            return Err(Error::Parameter(format!(
                "crop and weed colors too close ({dist:.1} < {MIN_CLASS_COLOR_DISTANCE})"
            )));
        }
        Ok(())
    }
}

fn color_distance(a: [u8; 3], b: [u8; 3]) -> f64 {
    a.iter()
        .zip(&b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// One generated field.
#[derive(Debug, Clone)]
pub struct SyntheticField {
    pub image: FieldImage,
    pub veg_mask: VegetationMask,
    pub class_map: ClassMap,
}

struct Blob {
    cx: f64,
    cy: f64,
    radius: f64,
    aspect: f64,
    angle: f64,
    lobes: u32,
    lobe_amp: f64,
    phase: f64,
    tint: [f64; 3],
}

impl Blob {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = (-dx * s + dy * c) * self.aspect;
        let r = (u * u + v * v).sqrt();
        if r > self.radius * (1.0 + self.lobe_amp) {
            return false;
        }
        let theta = v.atan2(u);
        r <= self.radius * (1.0 + self.lobe_amp * (self.lobes as f64 * theta + self.phase).cos())
    }

    fn bbox(&self, size: usize) -> (usize, usize, usize, usize) {
        let ext = self.radius * (1.0 + self.lobe_amp) * self.aspect.max(1.0) + 1.0;
        let clampi = |v: f64| v.clamp(0.0, (size - 1) as f64) as usize;
        (
            clampi((self.cx - ext).floor()),
            clampi((self.cx + ext).ceil()),
            clampi((self.cy - ext).floor()),
            clampi((self.cy + ext).ceil()),
        )
    }
}

fn plant<R: Rng>(rng: &mut R, cx: f64, cy: f64, radius: (f64, f64), lobes: (u32, u32), amp: f64) -> Blob {
    Blob {
        cx,
        cy,
        radius: rng.random_range(radius.0..=radius.1),
        aspect: rng.random_range(1.0..1.4),
        angle: rng.random_range(0.0..PI),
        lobes: rng.random_range(lobes.0..=lobes.1),
        lobe_amp: rng.random_range(amp * 0.6..=amp),
        phase: rng.random_range(0.0..2.0 * PI),
        tint: [
            rng.random_range(-12.0..12.0),
            rng.random_range(-12.0..12.0),
            rng.random_range(-8.0..8.0),
        ],
    }
}

/// Generates a field; identical specs (including seed) give bit-identical output.
pub fn generate(spec: &FieldSpec) -> Result<SyntheticField> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.size;
    let sizef = size as f64;

    let mut crops = Vec::new();
    let n_rows = (sizef / spec.row_spacing).floor().max(1.0) as usize;
    let row_offset = (sizef - (n_rows - 1) as f64 * spec.row_spacing) / 2.0;
    for r in 0..n_rows {
        let y = row_offset + r as f64 * spec.row_spacing;
        let mut x = rng.random_range(0.3..1.0) * spec.crop_spacing;
        while x < sizef {
            let jx = x + rng.random_range(-0.1..0.1) * spec.crop_spacing;
            let jy = y + rng.random_range(-0.08..0.08) * spec.row_spacing;
            // occasional gaps in the row
            if rng.random_bool(0.88) {
                crops.push(plant(&mut rng, jx, jy, spec.crop_radius, (5, 7), 0.28));
            }
            x += spec.crop_spacing * rng.random_range(0.9..1.1);
        }
    }

    let mut weeds = Vec::with_capacity(spec.n_weeds);
    for _ in 0..spec.n_weeds {
        let (cx, cy) = if !crops.is_empty() && rng.random_bool(spec.overlap_prob) {
            let host = &crops[rng.random_range(0..crops.len())];
            let ang = rng.random_range(0.0..2.0 * PI);
            let d = host.radius * rng.random_range(0.8..1.3);
            (host.cx + d * ang.cos(), host.cy + d * ang.sin())
        } else {
            (rng.random_range(0.0..sizef), rng.random_range(0.0..sizef))
        };
        weeds.push(plant(&mut rng, cx, cy, spec.weed_radius, (2, 4), 0.45));
    }

    let mut classes = vec![PixelClass::Soil; size * size];
    let mut tints = vec![[0.0f64; 3]; size * size];
    for (blobs, class) in [(&crops, PixelClass::Crop), (&weeds, PixelClass::Weed)] {
        for b in blobs.iter() {
            let (x0, x1, y0, y1) = b.bbox(size);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if b.contains(x as f64, y as f64) {
                        classes[y * size + x] = class;
                        tints[y * size + x] = b.tint;
                    }
                }
            }
        }
    }

    let soil_noise = Normal::new(0.0, spec.soil_noise.max(1e-9)).expect("finite std");
    let leaf_noise = Normal::new(0.0, 4.0).expect("finite std");
    let mut pixels = vec![0u8; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let light = 1.0 - spec.illumination_gradient * x as f64 / sizef;
            let (base, noise) = match classes[i] {
                PixelClass::Soil => (spec.soil_color, soil_noise.sample(&mut rng)),
                PixelClass::Crop => (spec.crop_color, leaf_noise.sample(&mut rng)),
                PixelClass::Weed => (spec.weed_color, leaf_noise.sample(&mut rng)),
            };
            for c in 0..3 {
                let v = (base[c] as f64 + tints[i][c] + noise) * light;
                pixels[i * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }

    let id = format!("synth_{:08x}", spec.seed);
    let image = FieldImage::new(size, size, pixels, id)?;
    let class_map = ClassMap::new(size, size, classes)?;
    let veg_mask = class_map.vegetation_mask();
    Ok(SyntheticField {
        image,
        veg_mask,
        class_map,
    })
}

/// Writes fields in the dataset layout understood by [`crate::data_io::load_dataset`],
/// with the first `n_train` fields in the train split.
pub fn write_dataset(root: &Path, fields: &[SyntheticField], n_train: usize, colors: &ColorMap) -> Result<()> {
    let images = root.join("images");
    let annotations = root.join("annotations");
    for dir in [&images, &annotations] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut split = String::new();
    for (k, f) in fields.iter().enumerate() {
        let stem = &f.image.source_id;
        f.image.save_png(&images.join(format!("{stem}.png")))?;
        colors
            .encode(&f.class_map)?
            .save_png(&annotations.join(format!("{stem}.png")))?;
        let tag = if k < n_train { "train" } else { "test" };
        split.push_str(&format!("{stem} {tag}\n"));
    }
    let path = root.join("split.txt");
    std::fs::write(&path, split).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_weeds_means_no_weed_pixels() {
        let spec = FieldSpec {
            n_weeds: 0,
            ..FieldSpec::preset(Preset::HighContrast, 200, 3)
        };
        let f = generate(&spec).unwrap();
        assert!(f.class_map.classes.iter().all(|&c| c != PixelClass::Weed));
    }

    #[test]
    fn generation_is_bit_reproducible() {
        let spec = FieldSpec::preset(Preset::LowContrast, 160, 11);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.class_map, b.class_map);
    }

    #[test]
    fn mask_matches_class_map() {
        let f = generate(&FieldSpec::preset(Preset::HighContrast, 200, 5)).unwrap();
        for (m, c) in f.veg_mask.mask.iter().zip(&f.class_map.classes) {
            assert_eq!(*m == 1, *c != PixelClass::Soil);
        }
    }

    #[test]
    fn default_vegetation_fraction_is_in_observed_range() {
        for seed in 0..5 {
            let f = generate(&FieldSpec { seed, ..FieldSpec::default() }).unwrap();
            let frac = f.veg_mask.vegetation_fraction;
            assert!((0.05..=0.25).contains(&frac), "seed {seed}: {frac}");
        }
    }

    #[test]
    fn vegetation_grows_with_weed_count() {
        let base = FieldSpec::preset(Preset::HighContrast, 200, 9);
        let mut last = 0.0;
        for n_weeds in [0, 5, 20, 60] {
            let f = generate(&FieldSpec { n_weeds, ..base.clone() }).unwrap();
            assert!(f.veg_mask.vegetation_fraction >= last);
            last = f.veg_mask.vegetation_fraction;
        }
    }

    #[test]
    fn impossible_specs_are_rejected() {
        let base = FieldSpec::default();
        let too_big = FieldSpec { crop_radius: (10.0, 300.0), ..base.clone() };
        assert!(matches!(generate(&too_big), Err(Error::Parameter(_))));
        let same_color = FieldSpec { weed_color: base.crop_color, ..base.clone() };
        assert!(generate(&same_color).is_err());
        let bad_radius = FieldSpec { weed_radius: (0.0, 5.0), ..base };
        assert!(generate(&bad_radius).is_err());
    }
}

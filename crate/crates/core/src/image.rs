//! Color field images, loading/saving, and bicubic resampling.

use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};

use crate::error::{Error, Result};

/// Side length every field image is resized to before segmentation.
pub const TARGET_SIDE: usize = 500;

/// Keys cubic coefficient used by OpenCV's `INTER_CUBIC`.
const CUBIC_A: f64 = -0.75;

/// An 8-bit RGB field image, row-major, 3 interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    pub source_id: String,
    pub resized: bool,
}

impl FieldImage {
    pub fn new(
        width: usize,
        height: usize,
        pixels: Vec<u8>,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Format("image is empty".into()));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::dims(
                format!("{} bytes ({width}x{height}x3)", width * height * 3),
                format!("{} bytes", pixels.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            pixels,
            source_id: source_id.into(),
            resized: false,
        })
    }

    /// Constant-color image.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3], source_id: &str) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, pixels, source_id).expect("nonempty by construction")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Converts a decoded image, rejecting anything that is not 3-channel color.
    pub fn from_dynamic(img: DynamicImage, source_id: impl Into<String>) -> Result<Self> {
        let rgb = match img {
            DynamicImage::ImageRgb8(rgb) => rgb,
            DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgb32F(_) => img.to_rgb8(),
            other => {
                return Err(Error::Format(format!(
                    "expected 3 color channels, got {:?}",
                    other.color()
                )))
            }
        };
        let (w, h) = rgb.dimensions();
        Self::new(w as usize, h as usize, rgb.into_raw(), source_id)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_dynamic(img, id)
    }

    pub fn to_rgb_image(&self) -> RgbImage {
        RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("buffer length checked at construction")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb_image().save(path)?;
        Ok(())
    }

    /// Crops a `w`x`h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<FieldImage> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Parameter(format!(
                "crop {w}x{h}@({x0},{y0}) exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut out = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let row = (y * self.width + x0) * 3;
            out.extend_from_slice(&self.pixels[row..row + w * 3]);
        }
        FieldImage::new(w, h, out, self.source_id.clone())
    }
}

/// Resizes to `TARGET_SIDE`x`TARGET_SIDE` with bicubic interpolation.
pub fn preprocess(image: &FieldImage) -> FieldImage {
    let mut out = resize_bicubic(image, TARGET_SIDE, TARGET_SIDE);
    out.resized = true;
    out
}

#[inline]
fn cubic_weights(t: f64) -> [f64; 4] {
    let a = CUBIC_A;
    let w0 = ((a * (t + 1.0) - 5.0 * a) * (t + 1.0) + 8.0 * a) * (t + 1.0) - 4.0 * a;
    let w1 = ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
    let u = 1.0 - t;
    let w2 = ((a + 2.0) * u - (a + 3.0)) * u * u + 1.0;
    [w0, w1, w2, 1.0 - w0 - w1 - w2]
}

#[inline]
fn saturate(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Half-pixel-centered bicubic resize with replicated borders.
pub fn resize_bicubic(image: &FieldImage, out_w: usize, out_h: usize) -> FieldImage {
    let (w, h) = (image.width, image.height);
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let taps = |dst: usize, scale: f64, len: usize| -> ([usize; 4], [f64; 4]) {
        let f = (dst as f64 + 0.5) * scale - 0.5;
        let base = f.floor();
        let wts = cubic_weights(f - base);
        let base = base as isize;
        let idx = [-1isize, 0, 1, 2].map(|o| (base + o).clamp(0, len as isize - 1) as usize);
        (idx, wts)
    };
    let xtaps: Vec<_> = (0..out_w).map(|x| taps(x, sx, w)).collect();
    let mut out = vec![0u8; out_w * out_h * 3];
    for oy in 0..out_h {
        let (yi, yw) = taps(oy, sy, h);
        for (ox, (xi, xw)) in xtaps.iter().enumerate() {
            let mut acc = [0.0f64; 3];
            for (r, &ry) in yi.iter().enumerate() {
                for (c, &cx) in xi.iter().enumerate() {
                    let wt = yw[r] * xw[c];
                    let p = image.get(cx, ry);
                    for ch in 0..3 {
                        acc[ch] += wt * p[ch] as f64;
                    }
                }
            }
            let o = (oy * out_w + ox) * 3;
            for ch in 0..3 {
                out[o + ch] = saturate(acc[ch]);
            }
        }
    }
    let mut img = FieldImage::new(out_w, out_h, out, image.source_id.clone())
        .expect("output dims are nonzero");
    img.resized = image.resized;
    img
}

/// Samples the image at a continuous position (pixel centers at integers).
/// Taps falling outside the image read as black.
pub fn sample_bicubic(image: &FieldImage, x: f64, y: f64) -> [u8; 3] {
    let bx = x.floor();
    let by = y.floor();
    let xw = cubic_weights(x - bx);
    let yw = cubic_weights(y - by);
    let (bx, by) = (bx as isize, by as isize);
    let mut acc = [0.0f64; 3];
    for (r, wy) in yw.iter().enumerate() {
        let py = by + r as isize - 1;
        if py < 0 || py >= image.height as isize {
            continue;
        }
        for (c, wx) in xw.iter().enumerate() {
            let px = bx + c as isize - 1;
            if px < 0 || px >= image.width as isize {
                continue;
            }
            let p = image.get(px as usize, py as usize);
            for ch in 0..3 {
                acc[ch] += wy * wx * p[ch] as f64;
            }
        }
    }
    acc.map(saturate)
}

/// Writes a binary 0/1 mask as a single-channel PNG (0 / 255).
pub fn save_binary_png(mask: &[u8], width: usize, height: usize, path: &Path) -> Result<()> {
    let data = mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect();
    let img = GrayImage::from_raw(width as u32, height as u32, data)
        .ok_or_else(|| Error::dims(width * height, mask.len()))?;
    img.save(path)?;
    Ok(())
}

/// Reads a single-channel mask PNG; any nonzero value is foreground.
pub fn load_binary_png(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| u8::from(v > 127)).collect();
    Ok((data, w as usize, h as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_is_identity_at_target_size() {
        let mut img = FieldImage::filled(TARGET_SIDE, TARGET_SIDE, [10, 20, 30], "a");
        for y in 0..TARGET_SIDE {
            for x in 0..TARGET_SIDE {
                img.put(x, y, [(x % 256) as u8, (y % 256) as u8, ((x * y) % 251) as u8]);
            }
        }
        let out = preprocess(&img);
        assert_eq!(out.pixels(), img.pixels());
        assert!(out.resized);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = FieldImage::filled(2, 2, [40, 160, 77], "c");
        let out = preprocess(&img);
        assert_eq!((out.width(), out.height()), (500, 500));
        assert!(out.pixels().chunks(3).all(|p| p == [40, 160, 77]));
    }

    #[test]
    fn cwfid_sized_frame_resizes_to_square() {
        let img = FieldImage::filled(1296, 966, [90, 70, 50], "cwfid");
        let out = preprocess(&img);
        assert_eq!((out.width(), out.height()), (500, 500));
    }

    #[test]
    fn cubic_weights_partition_unity() {
        for i in 0..=20 {
            let w = cubic_weights(i as f64 / 20.0);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(cubic_weights(0.0), [0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn gray_input_is_a_format_error() {
        let gray = DynamicImage::ImageLuma8(GrayImage::new(4, 4));
        assert!(matches!(
            FieldImage::from_dynamic(gray, "g"),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn upsampling_overshoot_is_clamped() {
        let mut img = FieldImage::filled(4, 1, [0, 0, 0], "step");
        img.put(2, 0, [255, 255, 255]);
        img.put(3, 0, [255, 255, 255]);
        let out = resize_bicubic(&img, 40, 1);
        // the cubic kernel rings at the step; saturation keeps it in range
        assert!(out.pixels().contains(&0) && out.pixels().contains(&255));
    }
}

//! sRGB to CIE L*a*b* (D65) conversion.

use crate::image::FieldImage;

const SRGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

const EPSILON: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

/// Planar-free Lab image: one `[L, a, b]` triple per pixel, row-major.
#[derive(Debug, Clone)]
pub struct LabImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl LabImage {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }
}

fn srgb_to_linear(c: u8) -> f64 {
    let v = c as f64 / 255.0;
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    if t > EPSILON {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

/// D65 reference white, taken as the image of sRGB white so neutral grays land on a = b = 0.
fn white() -> [f64; 3] {
    SRGB_TO_XYZ.map(|row| row.iter().sum())
}

pub fn rgb_pixel_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let wp = white();
    let mut f = [0.0; 3];
    for (i, row) in SRGB_TO_XYZ.iter().enumerate() {
        let xyz = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
        f[i] = lab_f(xyz / wp[i]);
    }
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

pub fn rgb_to_lab(image: &FieldImage) -> LabImage {
    // 8-bit input has at most 2^24 colors but typically far fewer; a per-channel
    // table for the linearization keeps this cheap.
    let lut: Vec<f64> = (0..=255u8).map(srgb_to_linear).collect();
    let wp = white();
    let data = image
        .pixels()
        .chunks_exact(3)
        .map(|p| {
            let lin = [lut[p[0] as usize], lut[p[1] as usize], lut[p[2] as usize]];
            let mut f = [0.0; 3];
            for (i, row) in SRGB_TO_XYZ.iter().enumerate() {
                f[i] = lab_f((row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2]) / wp[i]);
            }
            [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
        })
        .collect();
    LabImage {
        width: image.width(),
        height: image.height(),
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_and_black() {
        let w = rgb_pixel_to_lab([255, 255, 255]);
        assert!((w[0] - 100.0).abs() < 1e-9, "{w:?}");
        assert!(w[1].abs() < 1e-9 && w[2].abs() < 1e-9);
        assert_eq!(rgb_pixel_to_lab([0, 0, 0]), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn mid_gray_matches_closed_form() {
        // Neutral gray has X/Xn = Y/Yn = Z/Zn = linearized channel value, so
        // L reduces to 116 * cbrt(Y) - 16 with Y the linearized sRGB value.
        let v: f64 = 119.0 / 255.0;
        let y = ((v + 0.055) / 1.055).powf(2.4);
        let expected_l = 116.0 * y.cbrt() - 16.0;
        assert!((expected_l - 50.034_438_792_538).abs() < 1e-9);
        let lab = rgb_pixel_to_lab([119, 119, 119]);
        assert!((lab[0] - expected_l).abs() < 1e-9);
        assert!(lab[1].abs() < 1e-9 && lab[2].abs() < 1e-9);
    }

    #[test]
    fn image_conversion_matches_pixel_conversion() {
        let mut img = FieldImage::filled(3, 2, [0, 0, 0], "t");
        img.put(1, 0, [30, 160, 40]);
        img.put(2, 1, [150, 110, 70]);
        let lab = rgb_to_lab(&img);
        for y in 0..2 {
            for x in 0..3 {
                let a = lab.at(x, y);
                let b = rgb_pixel_to_lab(img.get(x, y));
                for c in 0..3 {
                    assert!((a[c] - b[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn lightness_in_range() {
        for r in (0..=255).step_by(51) {
            for g in (0..=255).step_by(51) {
                for b in (0..=255).step_by(51) {
                    let l = rgb_pixel_to_lab([r as u8, g as u8, b as u8])[0];
                    assert!((-1e-9..=100.0 + 1e-6).contains(&l));
                }
            }
        }
    }
}

//! Segments seeded synthetic fields and reports mIoU against the exact mask.
//!
//! Usage: segment_synthetic [size] [count] [high|low] [max_iters]

use std::time::Instant;

use weedmap_core::metrics::binary_miou;
use weedmap_core::synthfield::{generate, FieldSpec, Preset};
use weedmap_core::vegseg::{segment_vegetation, SegmentParams};

fn main() {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    fn arg<T: std::str::FromStr>(args: &[String], i: usize) -> Option<T> {
        args.get(i).and_then(|s| s.parse().ok())
    }
    let size: usize = arg(&args, 1).unwrap_or(200);
    let count: u64 = arg(&args, 2).unwrap_or(3);
    let preset = match args.get(3).map(String::as_str) {
        Some("low") => Preset::LowContrast,
        _ => Preset::HighContrast,
    };
    // Keep superpixel size constant as the field shrinks.
    let n_superpixels = (2500.0 * (size as f64 / 500.0).powi(2)).round() as usize;
    for seed in 0..count {
        let field = generate(&FieldSpec::preset(preset, size, seed)).expect("valid spec");
        let params = SegmentParams {
            n_superpixels,
            max_iters: arg(&args, 4).unwrap_or(500),
            seed,
            ..Default::default()
        };
        let t = Instant::now();
        let (mask, rec) = segment_vegetation(&field.image, &params).expect("segmentation");
        let score = binary_miou(&mask.mask, &field.veg_mask.mask).expect("same dims");
        println!(
            "seed {seed}: mIoU {score:.4} iters {} veg {:.3} (truth {:.3}) {:.1}s",
            rec.iterations_used,
            mask.vegetation_fraction,
            field.veg_mask.vegetation_fraction,
            t.elapsed().as_secs_f64()
        );
    }
}

use proptest::prelude::*;

use weedmap_core::classify::{resample_random, resample_smote, weighted_cross_entropy, LabeledExample, LossWeights};
use weedmap_core::data_io::Split;
use weedmap_core::image::FieldImage;
use weedmap_core::metrics::{density_errors, miou, precision_recall_f1, ConfusionCounts};
use weedmap_core::tiling::{make_tiles, mark_background, overlay, reassemble};
use weedmap_core::vegseg::VegetationMask;

fn labels(len: usize, classes: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..classes, len)
}

proptest! {
    #[test]
    fn miou_is_symmetric_and_bounded((pred, truth) in (1usize..80).prop_flat_map(|n| (labels(n, 3), labels(n, 3)))) {
        let a = miou(&pred, &truth, 3).unwrap();
        let b = miou(&truth, &pred, 3).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert_eq!(a == 1.0, pred == truth);
    }

    #[test]
    fn f1_lies_between_precision_and_recall(counts in prop::collection::vec(0u64..20, 9)) {
        let mut cm = ConfusionCounts::new(3);
        cm.counts = counts;
        for c in 0..3 {
            let s = precision_recall_f1(&cm, c);
            if let (Some(p), Some(r), Some(f)) = (s.precision, s.recall, s.f1) {
                prop_assert!(f >= p.min(r) - 1e-12 && f <= p.max(r) + 1e-12);
            }
        }
    }

    #[test]
    fn density_error_orderings(pairs in prop::collection::vec((0.01f64..1.0, 0.0f64..1.0), 1..30)) {
        let r = density_errors(&pairs).unwrap();
        prop_assert!(r.rmse.unwrap() + 1e-15 >= r.mae.unwrap());
        prop_assert!(r.mean_accuracy.unwrap() <= 1.0);
    }

    #[test]
    fn tiles_partition_the_image(rows in 1usize..5, cols in 1usize..5, side in 1usize..12, seed in any::<u64>()) {
        let (w, h) = (cols * side, rows * side);
        let mut state = seed | 1;
        let mut next = || { state ^= state << 13; state ^= state >> 7; state ^= state << 17; state };
        let pixels: Vec<u8> = (0..w * h * 3).map(|_| next() as u8).collect();
        let mask: Vec<u8> = (0..w * h).map(|_| (next() % 2) as u8).collect();
        let img = FieldImage::new(w, h, pixels, "p").unwrap();
        let mask = VegetationMask::new(w, h, mask).unwrap();
        let masked = overlay(&img, &mask).unwrap();
        let mut grid = make_tiles(&masked, side).unwrap();
        prop_assert_eq!(grid.tiles.len(), rows * cols);
        let back = reassemble(&grid).unwrap();
        prop_assert_eq!(back.pixels(), masked.pixels.pixels());
        let kept = mark_background(&mut grid, 0.1).unwrap();
        prop_assert_eq!(kept, grid.tiles.iter().filter(|t| t.label.is_none()).count());
        prop_assert_eq!(grid.tiles.iter().map(|t| t.vegetation_pixels).sum::<usize>(), mask.count());
    }

    #[test]
    fn resamplers_balance_any_imbalance(n_major in 8usize..60, n_minor in 6usize..8, dim in 1usize..6, seed in any::<u64>()) {
        let mut data = Vec::new();
        for i in 0..n_major {
            data.push(LabeledExample::features(vec![i as f64; dim], 0, Split::Train, format!("a{i}")));
        }
        for i in 0..n_minor {
            data.push(LabeledExample::features((0..dim).map(|d| (i * (d + 1)) as f64 + 0.5).collect(), 1, Split::Train, format!("b{i}")));
        }
        for out in [resample_random(&data, seed).unwrap(), resample_smote(&data, 5, seed).unwrap()] {
            let weeds = out.iter().filter(|e| e.label == 1).count();
            prop_assert_eq!(weeds * 2, out.len());
        }
    }

    #[test]
    fn loss_is_linear_in_weights(
        batch in prop::collection::vec(((-6.0f64..6.0, -6.0f64..6.0), 0u8..2), 1..40),
        wc in 0.01f64..3.0, ww in 0.01f64..3.0, alpha in 0.01f64..20.0,
    ) {
        let logits: Vec<[f64; 2]> = batch.iter().map(|((a, b), _)| [*a, *b]).collect();
        let ys: Vec<u8> = batch.iter().map(|(_, y)| *y).collect();
        let base = weighted_cross_entropy(&logits, &ys, LossWeights::new(wc, ww).unwrap());
        let scaled = weighted_cross_entropy(&logits, &ys, LossWeights::new(alpha * wc, alpha * ww).unwrap());
        prop_assert!((scaled - alpha * base).abs() <= 1e-9 * (1.0 + scaled.abs()));
        prop_assert!(base >= 0.0);
    }
}

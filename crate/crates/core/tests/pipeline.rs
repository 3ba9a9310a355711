use std::collections::BTreeMap;

use weedmap_core::backbone::ResNet50;
use weedmap_core::config::RunConfig;
use weedmap_core::data_io::{AnnotatedSample, Split};
use weedmap_core::image::FieldImage;
use weedmap_core::pipeline::{self, TrainedClassifier};
use weedmap_core::synthfield::{generate, FieldSpec, Preset};
use weedmap_core::tiling::TileLabel;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.image_side = 200;
    cfg.finetune.epochs = 30;
    cfg
}

fn trained(cfg: &RunConfig, backbone: &ResNet50) -> TrainedClassifier {
    let mut tiles = Vec::new();
    for seed in 0..6 {
        let f = generate(&FieldSpec::preset(Preset::HighContrast, cfg.image_side, seed)).unwrap();
        let sample = AnnotatedSample::new(f.image.clone(), f.class_map.clone(), Split::Train).unwrap();
        tiles.extend(pipeline::labeled_tiles(cfg, &sample, &f.veg_mask).unwrap());
    }
    pipeline::train_classifier(cfg, backbone, &tiles).unwrap()
}

/// Conv/pool output size: floor((n + 2p - k) / s) + 1.
fn out(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p - k) / s + 1
}

#[test]
fn backbone_shapes_follow_conv_arithmetic() {
    let net = ResNet50::seeded(3);
    for side in [25, 50, 100] {
        let tile = FieldImage::filled(side, side, [80, 150, 60], "t");
        let a = &net.forward(&[&tile], true).unwrap()[0];
        // stem conv 7/2, max-pool 3/2, then two stride-2 stages.
        let mut n = out(out(side, 7, 2, 3), 3, 2, 1);
        n = out(n, 3, 2, 1);
        n = out(n, 3, 2, 1);
        assert_eq!(a.stage3_shape, [1024, n, n], "side {side}");
        assert_eq!(a.stage3.len(), 1024 * n * n);
        assert_eq!(a.pooled.len(), 2048);
    }
    let t = FieldImage::filled(50, 50, [0, 0, 0], "t");
    assert_eq!(net.forward(&[&t], false).unwrap()[0].stage3.len(), 16384);
}

#[test]
fn injected_ground_truth_mask_conserves_vegetation() {
    let cfg = small_config();
    let backbone = pipeline::load_backbone(&cfg).unwrap();
    let classifier = trained(&cfg, &backbone);
    let f = generate(&FieldSpec::preset(Preset::HighContrast, cfg.image_side, 99)).unwrap();
    let outcome = pipeline::process_image(&cfg, &backbone, &classifier, &f.image, Some(f.veg_mask.clone())).unwrap();
    let side2 = (cfg.tile_side * cfg.tile_side) as f64;
    let total: f64 = outcome.density.records.iter().map(|r| r.cluster_rate * side2).sum();
    assert!((total - f.veg_mask.count() as f64).abs() < 1e-6);
    assert_eq!(outcome.density.records.len(), 16);
    // Every kept tile is classified, every background tile is not.
    for (p, t) in outcome.predictions.iter().zip(&outcome.grid.tiles) {
        assert_eq!(p.score.is_some(), t.label.is_none());
        assert_eq!(p.label == TileLabel::Background, t.label.is_some());
    }
    // With the oracle mask the segmentation score is perfect.
    let eval = pipeline::evaluate_outcome(&cfg, &outcome, &f.class_map).unwrap();
    assert_eq!(eval.segmentation_miou, 1.0);
}

#[test]
fn timing_reports_tile_counts_per_side() {
    let mut cfg = small_config();
    cfg.image_side = 500;
    let backbone = pipeline::load_backbone(&cfg).unwrap();
    let small = small_config();
    let classifier = trained(&small, &backbone);
    let f = generate(&FieldSpec::preset(Preset::HighContrast, 500, 7)).unwrap();
    let models = BTreeMap::from([(50, classifier)]);
    let rows = pipeline::cmd_timing(&cfg, &backbone, &models, &f.image, &f.veg_mask, &[25, 50, 100]).unwrap();
    let raw: Vec<usize> = rows.iter().map(|r| r.raw_tiles).collect();
    assert_eq!(raw, vec![400, 100, 25]);
    assert!(rows[0].kept_tiles > rows[1].kept_tiles);
    assert!(rows.iter().all(|r| r.total_ms >= r.classify_ms));
}

#[test]
fn missing_classifier_is_a_missing_artifact() {
    let cfg = small_config();
    let backbone = ResNet50::seeded(0);
    let err = pipeline::obtain_classifier(&cfg, &backbone).unwrap_err();
    assert!(matches!(err, weedmap_core::Error::MissingArtifact(_)), "{err}");
}

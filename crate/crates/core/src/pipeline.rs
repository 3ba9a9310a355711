//! End-to-end orchestration: segment, tile, classify, estimate density,
//! and evaluate against annotations when they exist.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::ResNet50;
use crate::classify::{
    train_feature_classifier, train_finetuned, ClassifierKind, ClassifierModel, LabeledExample, Prediction,
};
use crate::config::{RunConfig, TrainingMasks};
use crate::data_io::{derive_tile_labels, load_dataset, AnnotatedSample, ClassMap, DatasetManifest, Split};
use crate::density::{build_density_map, to_dense_prediction, DensityMap};
use crate::error::{Error, Result};
use crate::features::{fit_pca, FeatureVector, PcaModel};
use crate::image::{load_binary_png, resize_bicubic, save_binary_png, FieldImage};
use crate::metrics::{
    binary_miou, density_errors, precision_recall_f1, ConfusionCounts, EvaluationReport,
};
use crate::tiling::{make_tiles, mark_background, overlay, write_tile_records, Tile, TileGrid, TileLabel};
use crate::vegseg::{segment_vegetation, SegmentationRecord, VegetationMask};

/// A trained tile classifier with the PCA it expects (feature-vector kinds).
#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub model: ClassifierModel,
    pub pca: Option<PcaModel>,
}

impl TrainedClassifier {
    pub fn save(&self, model_path: &Path, pca_path: &Path) -> Result<()> {
        self.model.save(model_path)?;
        if let Some(p) = &self.pca {
            p.save(pca_path)?;
        }
        Ok(())
    }

    pub fn load(model_path: &Path, pca_path: Option<&Path>) -> Result<Self> {
        let model = ClassifierModel::load(model_path)?;
        let pca = if model.is_finetuned() {
            None
        } else {
            let path = pca_path.ok_or_else(|| {
                Error::MissingArtifact(format!("PCA artifact for {} classifier", model.kind))
            })?;
            Some(PcaModel::load(path)?)
        };
        Ok(Self { model, pca })
    }

    /// Classifies tiles in input order.
    pub fn predict(&self, backbone: &ResNet50, tiles: &[&FieldImage]) -> Result<Vec<Prediction>> {
        if tiles.is_empty() {
            return Ok(Vec::new());
        }
        if self.model.is_finetuned() {
            return self.model.predict_tiles(backbone, tiles);
        }
        let pca = self
            .pca
            .as_ref()
            .ok_or_else(|| Error::Invariant("feature classifier without PCA".into()))?;
        let acts = backbone.forward(tiles, false)?;
        acts.iter()
            .map(|a| {
                let raw: Vec<f64> = a.stage3.iter().map(|&v| v as f64).collect();
                self.model.predict_vector(&pca.project_values(&raw)?)
            })
            .collect()
    }
}

pub fn load_backbone(cfg: &RunConfig) -> Result<ResNet50> {
    match &cfg.backbone.checkpoint {
        Some(path) => ResNet50::load(path),
        None => Ok(ResNet50::seeded(cfg.backbone.seed)),
    }
}

pub fn load_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    let root = cfg
        .dataset_root
        .as_ref()
        .ok_or_else(|| Error::Parameter("dataset_root is not set".into()))?;
    let m = load_dataset(root, &cfg.color_map, (cfg.split_ratio[0], cfg.split_ratio[1]), cfg.seeds.split)?;
    m.check_leakage()?;
    Ok(m)
}

/// Resizes to the configured square side unless already there.
pub fn prepare_image(cfg: &RunConfig, image: &FieldImage) -> FieldImage {
    let s = cfg.image_side;
    if image.width() == s && image.height() == s {
        image.clone()
    } else {
        let mut out = resize_bicubic(image, s, s);
        out.resized = true;
        out
    }
}

fn prepare_sample(cfg: &RunConfig, sample: &AnnotatedSample) -> AnnotatedSample {
    let s = cfg.image_side;
    if sample.image.width() == s && sample.image.height() == s {
        sample.clone()
    } else {
        sample.resized(s)
    }
}

pub fn ground_truth_mask(annotation: &ClassMap) -> VegetationMask {
    annotation.vegetation_mask()
}

/// Crop/weed tiles of one annotated image, labeled from its annotation and
/// cut from `mask`.
pub fn labeled_tiles(cfg: &RunConfig, sample: &AnnotatedSample, mask: &VegetationMask) -> Result<Vec<(Tile, u8)>> {
    let mut grid = make_tiles(&overlay(&sample.image, mask)?, cfg.tile_side)?;
    mark_background(&mut grid, cfg.veg_threshold)?;
    let truth = derive_tile_labels(&sample.annotation, cfg.tile_side, cfg.veg_threshold)?;
    Ok(grid
        .tiles
        .into_iter()
        .zip(truth)
        .filter(|(t, _)| t.label.is_none())
        .filter_map(|(t, d)| match d.label {
            TileLabel::Crop => Some((t, 0)),
            TileLabel::Weed => Some((t, 1)),
            TileLabel::Background => None,
        })
        .collect())
}

/// Every training-split crop/weed tile of the dataset.
pub fn training_tiles(cfg: &RunConfig, manifest: &DatasetManifest) -> Result<Vec<(Tile, u8)>> {
    let mut out = Vec::new();
    for sample in manifest.split(Split::Train) {
        let sample = prepare_sample(cfg, sample);
        let mask = match cfg.classifier.training_masks {
            TrainingMasks::GroundTruth => ground_truth_mask(&sample.annotation),
            TrainingMasks::Segmented => segment_vegetation(&sample.image, &cfg.segmentation)?.0,
        };
        out.extend(labeled_tiles(cfg, &sample, &mask)?);
    }
    Ok(out)
}

/// Trains the configured classifier kind on labeled training tiles.
pub fn train_classifier(cfg: &RunConfig, backbone: &ResNet50, tiles: &[(Tile, u8)]) -> Result<TrainedClassifier> {
    let kind = cfg.classifier.kind;
    let seed = cfg.seeds.classifier;
    if kind == ClassifierKind::FinetunedBackbone {
        let examples: Vec<LabeledExample> = tiles
            .iter()
            .map(|(t, l)| LabeledExample::pixels(t.pixels.clone(), *l, Split::Train))
            .collect();
        let model = train_finetuned(&examples, backbone, &cfg.finetune, seed)?;
        return Ok(TrainedClassifier { model, pca: None });
    }
    let images: Vec<&FieldImage> = tiles.iter().map(|(t, _)| &t.pixels).collect();
    let acts = backbone.forward(&images, false)?;
    let raw: Vec<FeatureVector> = tiles
        .iter()
        .zip(acts)
        .map(|((t, _), a)| FeatureVector {
            values: a.stage3.iter().map(|&v| v as f64).collect(),
            tile_ref: (t.row, t.col),
            source_id: t.pixels.source_id.clone(),
            split: Split::Train,
        })
        .collect();
    let pca = fit_pca(&raw, cfg.classifier.pca_k)?;
    let examples: Vec<LabeledExample> = raw
        .iter()
        .zip(tiles)
        .map(|(v, (_, l))| Ok(LabeledExample::features(pca.project_values(&v.values)?, *l, Split::Train, v.source_id.clone())))
        .collect::<Result<_>>()?;
    let model = train_feature_classifier(kind, &examples, cfg.classifier.sampler, seed)?;
    Ok(TrainedClassifier { model, pca: Some(pca) })
}

/// Loads the configured classifier artifacts, or trains from the dataset
/// when no model path is configured.
pub fn obtain_classifier(cfg: &RunConfig, backbone: &ResNet50) -> Result<TrainedClassifier> {
    if let Some(path) = &cfg.classifier.model_path {
        return TrainedClassifier::load(path, cfg.classifier.pca_path.as_deref());
    }
    if cfg.dataset_root.is_none() {
        return Err(Error::MissingArtifact(
            "no classifier.model_path configured and no dataset_root to train from".into(),
        ));
    }
    let manifest = load_manifest(cfg)?;
    let tiles = training_tiles(cfg, &manifest)?;
    log::info!("training {} on {} tiles", cfg.classifier.kind, tiles.len());
    train_classifier(cfg, backbone, &tiles)
}

/// Per-tile prediction record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TilePrediction {
    pub row: usize,
    pub col: usize,
    pub label: TileLabel,
    /// Weed score; absent for background tiles, which are not classified.
    pub score: Option<f64>,
    pub vegetation_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct ImageOutcome {
    pub image: FieldImage,
    pub mask: VegetationMask,
    pub segmentation: Option<SegmentationRecord>,
    pub grid: TileGrid,
    pub predictions: Vec<TilePrediction>,
    pub density: DensityMap,
}

/// Overlay the mask and cut the configured grid, marking background tiles.
pub fn tile_image(cfg: &RunConfig, image: &FieldImage, mask: &VegetationMask) -> Result<TileGrid> {
    let mut grid = make_tiles(&overlay(image, mask)?, cfg.tile_side)?;
    mark_background(&mut grid, cfg.veg_threshold)?;
    Ok(grid)
}

/// Classifies the kept tiles of a grid; one record per grid position in
/// row-major order, background tiles unscored.
pub fn predict_grid(
    backbone: &ResNet50,
    classifier: &TrainedClassifier,
    grid: &TileGrid,
) -> Result<Vec<TilePrediction>> {
    let kept: Vec<&Tile> = grid.tiles.iter().filter(|t| t.label.is_none()).collect();
    let pixels: Vec<&FieldImage> = kept.iter().map(|t| &t.pixels).collect();
    let preds = classifier.predict(backbone, &pixels)?;
    let mut scored = BTreeMap::new();
    for (t, p) in kept.iter().zip(&preds) {
        let label = if p.label == 1 { TileLabel::Weed } else { TileLabel::Crop };
        scored.insert((t.row, t.col), (label, p.score));
    }
    Ok(grid
        .tiles
        .iter()
        .map(|t| {
            let (label, score) = match scored.get(&(t.row, t.col)) {
                Some(&(l, s)) => (l, Some(s)),
                None => (TileLabel::Background, None),
            };
            TilePrediction {
                row: t.row,
                col: t.col,
                label,
                score,
                vegetation_fraction: t.vegetation_fraction,
            }
        })
        .collect())
}

/// Density map from a grid and the prediction records for it.
pub fn density_from_predictions(grid: &TileGrid, predictions: &[TilePrediction], source_id: &str) -> Result<DensityMap> {
    let labels: BTreeMap<_, _> = predictions
        .iter()
        .filter(|p| p.label != TileLabel::Background)
        .map(|p| ((p.row, p.col), p.label))
        .collect();
    build_density_map(grid, &labels, source_id)
}

/// Segment (unless a mask is given) → overlay → tile → filter → classify → density.
pub fn process_image(
    cfg: &RunConfig,
    backbone: &ResNet50,
    classifier: &TrainedClassifier,
    image: &FieldImage,
    mask: Option<VegetationMask>,
) -> Result<ImageOutcome> {
    let image = prepare_image(cfg, image);
    let (mask, segmentation) = match mask {
        Some(m) => (m, None),
        None => {
            let (m, rec) = segment_vegetation(&image, &cfg.segmentation)?;
            (m, Some(rec))
        }
    };
    let grid = tile_image(cfg, &image, &mask)?;
    let predictions = predict_grid(backbone, classifier, &grid)?;
    let density = density_from_predictions(&grid, &predictions, &image.source_id)?;
    Ok(ImageOutcome {
        image,
        mask,
        segmentation,
        grid,
        predictions,
        density,
    })
}

/// Tile label as a confusion-matrix class: crop 0, weed 1, background 2.
fn tile_class(l: TileLabel) -> usize {
    match l {
        TileLabel::Crop => 0,
        TileLabel::Weed => 1,
        TileLabel::Background => 2,
    }
}

/// Counts gathered from one annotated image.
#[derive(Debug, Clone)]
pub struct SampleEvaluation {
    pub segmentation_miou: f64,
    pub tile_confusion: ConfusionCounts,
    /// `(ground-truth weed rate, estimated cluster rate)` for tiles labeled
    /// weed in both truth and prediction.
    pub density_pairs: Vec<(f64, f64)>,
    pub dense_confusion: ConfusionCounts,
}

pub fn evaluate_outcome(cfg: &RunConfig, outcome: &ImageOutcome, annotation: &ClassMap) -> Result<SampleEvaluation> {
    evaluate_maps(cfg, &outcome.density, &outcome.mask, annotation)
}

/// Scores one density map and the mask it was cut from against an annotation.
pub fn evaluate_maps(
    cfg: &RunConfig,
    density: &DensityMap,
    mask: &VegetationMask,
    annotation: &ClassMap,
) -> Result<SampleEvaluation> {
    let truth_mask = ground_truth_mask(annotation);
    let segmentation_miou = binary_miou(&mask.mask, &truth_mask.mask)?;
    let truth = derive_tile_labels(annotation, density.tile_side, cfg.veg_threshold)?;
    if truth.len() != density.records.len() {
        return Err(Error::dims(format!("{} tiles", truth.len()), format!("{} density records", density.records.len())));
    }
    let mut tile_confusion = ConfusionCounts::new(3);
    let mut density_pairs = Vec::new();
    for (rec, gt) in density.records.iter().zip(&truth) {
        tile_confusion.add(tile_class(gt.label), tile_class(rec.label));
        if gt.label == TileLabel::Weed && rec.label == TileLabel::Weed {
            density_pairs.push((gt.weed_rate(density.tile_side), rec.cluster_rate));
        }
    }
    let dense = to_dense_prediction(density, mask)?;
    let dense_confusion = ConfusionCounts::from_labels(&dense.indices(), &annotation.indices(), 3)?;
    Ok(SampleEvaluation {
        segmentation_miou,
        tile_confusion,
        density_pairs,
        dense_confusion,
    })
}

/// Decodes an annotation image and brings it to the configured side.
pub fn load_annotation(cfg: &RunConfig, path: &Path) -> Result<ClassMap> {
    let raw = cfg.color_map.decode(&FieldImage::load(path)?, path)?;
    let side = cfg.image_side;
    Ok(if (raw.width, raw.height) == (side, side) {
        raw
    } else {
        raw.resize_nearest(side, side)
    })
}

/// Reads a mask PNG written by the segmentation stage.
pub fn load_mask(path: &Path) -> Result<VegetationMask> {
    let (mask, w, h) = load_binary_png(path)?;
    VegetationMask::new(w, h, mask)
}

/// Pools per-image evaluations: mIoU averaged over images, counts summed.
pub fn summarize(evals: &[SampleEvaluation]) -> Result<EvaluationReport> {
    let mut tiles = ConfusionCounts::new(3);
    let mut dense = ConfusionCounts::new(3);
    let mut pairs = Vec::new();
    for e in evals {
        tiles.add_counts(&e.tile_confusion)?;
        dense.add_counts(&e.dense_confusion)?;
        pairs.extend_from_slice(&e.density_pairs);
    }
    let segmentation_miou = if evals.is_empty() {
        None
    } else {
        Some(evals.iter().map(|e| e.segmentation_miou).sum::<f64>() / evals.len() as f64)
    };
    Ok(EvaluationReport {
        segmentation_miou,
        tile_scores: (0..2).map(|c| precision_recall_f1(&tiles, c)).collect(),
        tile_confusion: tiles,
        density: density_errors(&pairs)?,
        dense_scores: (0..3).map(|c| precision_recall_f1(&dense, c)).collect(),
    })
}

/// Runs every test-split image of the dataset through the pipeline.
pub fn evaluate_dataset(
    cfg: &RunConfig,
    backbone: &ResNet50,
    classifier: &TrainedClassifier,
    manifest: &DatasetManifest,
) -> Result<(EvaluationReport, Vec<SampleEvaluation>)> {
    let mut evals = Vec::new();
    for sample in manifest.split(Split::Test) {
        let sample = prepare_sample(cfg, sample);
        let outcome = process_image(cfg, backbone, classifier, &sample.image, None)?;
        evals.push(evaluate_outcome(cfg, &outcome, &sample.annotation)?);
    }
    Ok((summarize(&evals)?, evals))
}

/// Identifiers sufficient to reproduce a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub source_id: String,
    pub classifier: ClassifierKind,
    pub classifier_fingerprint: String,
    pub classifier_seed: u64,
    pub pca_fingerprint: Option<String>,
    pub backbone_checksum: String,
    pub segmentation_seed: u64,
    pub split_seed: u64,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub out_dir: PathBuf,
    pub outcome: ImageOutcome,
    pub report: Option<EvaluationReport>,
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Directory-safe form of a source id.
pub fn run_dir_name(source_id: &str) -> String {
    let name: String = source_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    if name.is_empty() {
        "image".into()
    } else {
        name
    }
}

/// Full pipeline on one image file, writing every artifact under
/// `<output root>/<image stem>/`.
pub fn cmd_pipeline(cfg: &RunConfig, image_path: &Path, annotation_path: Option<&Path>) -> Result<PipelineRun> {
    cfg.validate()?;
    let image = FieldImage::load(image_path)?;
    let backbone = load_backbone(cfg)?;
    let classifier = obtain_classifier(cfg, &backbone)?;
    run_with(cfg, &backbone, &classifier, &image, annotation_path, None)
}

/// `cmd_pipeline` with preloaded models and an optional injected mask.
pub fn run_with(
    cfg: &RunConfig,
    backbone: &ResNet50,
    classifier: &TrainedClassifier,
    image: &FieldImage,
    annotation_path: Option<&Path>,
    mask: Option<VegetationMask>,
) -> Result<PipelineRun> {
    let out_dir = cfg.output_root().join(run_dir_name(&image.source_id));
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    cfg.save(&out_dir.join("config.toml"))?;

    let outcome = process_image(cfg, backbone, classifier, image, mask)?;
    let side = cfg.image_side;
    save_binary_png(&outcome.mask.mask, side, side, &out_dir.join("mask.png"))?;
    if let Some(rec) = &outcome.segmentation {
        write_json(rec, &out_dir.join("segmentation.json"))?;
    }
    write_tile_records(&outcome.grid.tiles, &out_dir.join("tiles.json"))?;
    write_json(&outcome.predictions, &out_dir.join("predictions.json"))?;
    outcome.density.write_json(&out_dir.join("density.json"))?;
    outcome.density.write_heatmap(&out_dir.join("heatmap.png"))?;
    write_json(
        &Provenance {
            source_id: image.source_id.clone(),
            classifier: classifier.model.kind,
            classifier_fingerprint: classifier.model.fingerprint.clone(),
            classifier_seed: classifier.model.seed,
            pca_fingerprint: classifier.pca.as_ref().map(|p| p.fingerprint.clone()),
            backbone_checksum: backbone.cached_checksum().to_string(),
            segmentation_seed: cfg.segmentation.seed,
            split_seed: cfg.seeds.split,
        },
        &out_dir.join("provenance.json"),
    )?;

    let report = match annotation_path {
        Some(p) => {
            let annotation = load_annotation(cfg, p)?;
            let report = summarize(&[evaluate_outcome(cfg, &outcome, &annotation)?])?;
            write_json(&report, &out_dir.join("report.json"))?;
            Some(report)
        }
        None => None,
    };
    Ok(PipelineRun {
        out_dir,
        outcome,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub side: usize,
    pub raw_tiles: usize,
    pub kept_tiles: usize,
    pub tiling_ms: f64,
    /// Backbone, projection and classifier together.
    pub classify_ms: f64,
    pub total_ms: f64,
}

/// Wall-clock of tiling and classification per tile side on one
/// (already segmented) image. A fine-tuned head works for every side;
/// feature-vector classifiers need one entry per side.
pub fn cmd_timing(
    cfg: &RunConfig,
    backbone: &ResNet50,
    classifiers: &BTreeMap<usize, TrainedClassifier>,
    image: &FieldImage,
    mask: &VegetationMask,
    sides: &[usize],
) -> Result<Vec<TimingRow>> {
    let image = prepare_image(cfg, image);
    let masked = overlay(&image, mask)?;
    let mut rows = Vec::with_capacity(sides.len());
    for &side in sides {
        let classifier = match classifiers.get(&side) {
            Some(c) => c,
            None => classifiers
                .values()
                .find(|c| c.model.is_finetuned())
                .ok_or_else(|| Error::MissingArtifact(format!("no classifier for tile side {side}")))?,
        };
        let t0 = Instant::now();
        let mut grid = make_tiles(&masked, side)?;
        let kept = mark_background(&mut grid, cfg.veg_threshold)?;
        let tiling = t0.elapsed();
        let t1 = Instant::now();
        let pixels: Vec<&FieldImage> = grid.tiles.iter().filter(|t| t.label.is_none()).map(|t| &t.pixels).collect();
        classifier.predict(backbone, &pixels)?;
        let classify = t1.elapsed();
        rows.push(TimingRow {
            side,
            raw_tiles: grid.tiles.len(),
            kept_tiles: kept,
            tiling_ms: tiling.as_secs_f64() * 1e3,
            classify_ms: classify.as_secs_f64() * 1e3,
            total_ms: (tiling + classify).as_secs_f64() * 1e3,
        });
    }
    Ok(rows)
}

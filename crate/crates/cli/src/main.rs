mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use weedmap_core::classify::ClassifierKind;
use weedmap_core::config::RunConfig;
use weedmap_core::data_io::{ColorMap, Split};
use weedmap_core::density::DensityMap;
use weedmap_core::features::{extract_features, write_features_json, PcaModel};
use weedmap_core::image::{save_binary_png, FieldImage};
use weedmap_core::pipeline::{self, write_json, TilePrediction, TrainedClassifier};
use weedmap_core::synthfield::{generate, write_dataset, FieldSpec, Preset};
use weedmap_core::tiling::{dump_tile_pngs, write_tile_records, Tile};
use weedmap_core::vegseg::segment_vegetation;
use weedmap_core::Error;

use config::ConfigArgs;

#[derive(Parser)]
#[command(name = "weedmap", version, about = "Weed distribution and density maps from top-down field images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ImageArgs {
    /// Input field image (resized to `image_side` before processing).
    #[arg(long)]
    image: PathBuf,
    /// Stage directory; defaults to `<output root>/<image stem>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct MaskArg {
    /// Vegetation mask written by `segment`; defaults to `mask.png` in the stage directory.
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline on one image: segment, tile, classify, density, and a
    /// report when an annotation is given.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        image: PathBuf,
        /// Color-coded annotation of the same image.
        #[arg(long)]
        annotation: Option<PathBuf>,
    },
    /// Tiling and classification wall-clock per tile side.
    Timing {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        io: ImageArgs,
        #[command(flatten)]
        mask: MaskArg,
        #[arg(long, value_delimiter = ',', default_values_t = [25usize, 50, 100])]
        sides: Vec<usize>,
    },
    /// Unsupervised vegetation segmentation → mask.png, segmentation.json.
    Segment {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        io: ImageArgs,
    },
    /// Cut the masked image into tiles → tiles.json.
    Tile {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        io: ImageArgs,
        #[command(flatten)]
        mask: MaskArg,
        /// Also write every tile as a PNG into this directory.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Backbone features of the kept tiles → features.json; projected when
    /// `--pca` is given.
    ExtractFeatures {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        io: ImageArgs,
        #[command(flatten)]
        mask: MaskArg,
    },
    /// Train the configured classifier on the dataset's training split.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory for model.safetensors (and pca.safetensors); defaults to `<output root>/model`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classify kept tiles → predictions.json.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        io: ImageArgs,
        #[command(flatten)]
        mask: MaskArg,
    },
    /// Per-tile cluster rates from predictions → density.json, heatmap.png.
    Density {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        io: ImageArgs,
        #[command(flatten)]
        mask: MaskArg,
        /// Defaults to `predictions.json` in the stage directory.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Score a density map against an annotation (→ report.json), or with
    /// `--dataset` the whole test split of the configured dataset.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, required_unless_present = "dataset", conflicts_with = "dataset")]
        annotation: Option<PathBuf>,
        /// Directory holding density.json and mask.png.
        #[arg(long, required_unless_present = "dataset")]
        run: Option<PathBuf>,
        #[arg(long)]
        dataset: bool,
        /// Report path; defaults to report.json in the run (or output root).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset with exact annotations.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        n_train: usize,
        #[arg(long, default_value_t = 10)]
        n_test: usize,
        #[arg(long, default_value_t = 500)]
        size: usize,
        #[arg(long, value_enum, default_value_t = PresetArg::HighContrast)]
        preset: PresetArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    HighContrast,
    LowContrast,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::HighContrast => Preset::HighContrast,
            PresetArg::LowContrast => Preset::LowContrast,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 bad config or input, 3 missing artifact, 4 internal invariant violation.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::MissingArtifact(_)) => 3,
        Some(Error::Invariant(_) | Error::Leakage(_)) => 4,
        _ => 2,
    }
}

fn stage_dir(cfg: &RunConfig, io: &ImageArgs) -> Result<PathBuf> {
    let dir = match &io.out {
        Some(d) => d.clone(),
        None => {
            let stem = io.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            cfg.output_root().join(pipeline::run_dir_name(&stem))
        }
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_image(cfg: &RunConfig, path: &Path) -> Result<FieldImage> {
    let image = FieldImage::load(path).with_context(|| format!("reading image {}", path.display()))?;
    Ok(pipeline::prepare_image(cfg, &image))
}

fn mask_path(dir: &Path, mask: &MaskArg) -> PathBuf {
    mask.mask.clone().unwrap_or_else(|| dir.join("mask.png"))
}

fn load_mask(path: &Path) -> Result<weedmap_core::vegseg::VegetationMask> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!("mask {} (run `segment` first)", path.display())).into());
    }
    Ok(pipeline::load_mask(path)?)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Pipeline { cfg, image, annotation } => {
            let cfg = cfg.resolve()?;
            let run = pipeline::cmd_pipeline(&cfg, &image, annotation.as_deref())?;
            let weeds = run.outcome.density.weed_tiles().count();
            println!(
                "{}: {weeds} weed tiles, weed coverage {:.4}",
                run.out_dir.display(),
                run.outcome.density.weed_coverage()
            );
            if let Some(r) = &run.report {
                println!("{}", serde_json::to_string_pretty(r)?);
            }
        }
        Command::Timing { cfg, io, mask, sides } => {
            let cfg = cfg.resolve()?;
            let dir = stage_dir(&cfg, &io)?;
            let image = load_image(&cfg, &io.image)?;
            let mask = match &mask.mask {
                Some(p) => load_mask(p)?,
                None => segment_vegetation(&image, &cfg.segmentation)?.0,
            };
            let backbone = pipeline::load_backbone(&cfg)?;
            let classifiers = timing_classifiers(&cfg, &backbone, &sides)?;
            let rows = pipeline::cmd_timing(&cfg, &backbone, &classifiers, &image, &mask, &sides)?;
            println!("{:>5} {:>9} {:>10} {:>11} {:>13} {:>10}", "side", "raw tiles", "kept tiles", "tiling ms", "classify ms", "total ms");
            for r in &rows {
                println!(
                    "{:>5} {:>9} {:>10} {:>11.2} {:>13.2} {:>10.2}",
                    r.side, r.raw_tiles, r.kept_tiles, r.tiling_ms, r.classify_ms, r.total_ms
                );
            }
            write_json(&rows, &dir.join("timing.json"))?;
        }
        Command::Segment { cfg, io } => {
            let cfg = cfg.resolve()?;
            let dir = stage_dir(&cfg, &io)?;
            let image = load_image(&cfg, &io.image)?;
            let (mask, record) = segment_vegetation(&image, &cfg.segmentation)?;
            save_binary_png(&mask.mask, mask.width, mask.height, &dir.join("mask.png"))?;
            write_json(&record, &dir.join("segmentation.json"))?;
            println!("{}: {} vegetation pixels", dir.join("mask.png").display(), mask.count());
        }
        Command::Tile { cfg, io, mask, dump } => {
            let cfg = cfg.resolve()?;
            let dir = stage_dir(&cfg, &io)?;
            let image = load_image(&cfg, &io.image)?;
            let grid = pipeline::tile_image(&cfg, &image, &load_mask(&mask_path(&dir, &mask))?)?;
            write_tile_records(&grid.tiles, &dir.join("tiles.json"))?;
            if let Some(d) = dump {
                std::fs::create_dir_all(&d)?;
                dump_tile_pngs(&grid.tiles, &d)?;
            }
            let kept = grid.tiles.iter().filter(|t| t.label.is_none()).count();
            println!("{}: {} tiles, {kept} kept", dir.join("tiles.json").display(), grid.tiles.len());
        }
        Command::ExtractFeatures { cfg, io, mask } => {
            let cfg = cfg.resolve()?;
            let dir = stage_dir(&cfg, &io)?;
            let image = load_image(&cfg, &io.image)?;
            let grid = pipeline::tile_image(&cfg, &image, &load_mask(&mask_path(&dir, &mask))?)?;
            let kept: Vec<&Tile> = grid.tiles.iter().filter(|t| t.label.is_none()).collect();
            let backbone = pipeline::load_backbone(&cfg)?;
            let mut vectors = extract_features(&kept, Split::Test, &backbone)?;
            if let Some(p) = &cfg.classifier.pca_path {
                let pca = PcaModel::load(p)?;
                vectors = vectors.iter().map(|v| pca.project(v)).collect::<Result<_, _>>()?;
            }
            write_features_json(&vectors, &dir.join("features.json"))?;
            println!(
                "{}: {} vectors of length {}",
                dir.join("features.json").display(),
                vectors.len(),
                vectors.first().map_or(0, |v| v.len())
            );
        }
        Command::Train { cfg, out } => {
            let cfg = cfg.resolve()?;
            let dir = out.unwrap_or_else(|| cfg.output_root().join("model"));
            std::fs::create_dir_all(&dir)?;
            let backbone = pipeline::load_backbone(&cfg)?;
            let manifest = pipeline::load_manifest(&cfg)?;
            let tiles = pipeline::training_tiles(&cfg, &manifest)?;
            let trained = pipeline::train_classifier(&cfg, &backbone, &tiles)?;
            let (model_path, pca_path) = (dir.join("model.safetensors"), dir.join("pca.safetensors"));
            trained.save(&model_path, &pca_path)?;
            cfg.save(&dir.join("config.toml"))?;
            let weeds = tiles.iter().filter(|(_, l)| *l == 1).count();
            write_json(
                &serde_json::json!({
                    "classifier": trained.model.kind,
                    "sampler": trained.model.sampler,
                    "fingerprint": trained.model.fingerprint,
                    "pca_fingerprint": trained.pca.as_ref().map(|p| &p.fingerprint),
                    "backbone_checksum": backbone.cached_checksum(),
                    "training_tiles": tiles.len(),
                    "weed_tiles": weeds,
                }),
                &dir.join("training.json"),
            )?;
            println!("{}: {} trained on {} tiles ({weeds} weed)", model_path.display(), trained.model.kind, tiles.len());
        }
        Command::Predict { cfg, io, mask } => {
            let cfg = cfg.resolve()?;
            let dir = stage_dir(&cfg, &io)?;
            let image = load_image(&cfg, &io.image)?;
            let grid = pipeline::tile_image(&cfg, &image, &load_mask(&mask_path(&dir, &mask))?)?;
            let backbone = pipeline::load_backbone(&cfg)?;
            let classifier = pipeline::obtain_classifier(&cfg, &backbone)?;
            let preds = pipeline::predict_grid(&backbone, &classifier, &grid)?;
            write_json(&preds, &dir.join("predictions.json"))?;
            let weeds = preds.iter().filter(|p| p.label == weedmap_core::tiling::TileLabel::Weed).count();
            println!("{}: {weeds} weed tiles of {}", dir.join("predictions.json").display(), preds.len());
        }
        Command::Density { cfg, io, mask, predictions } => {
            let cfg = cfg.resolve()?;
            let dir = stage_dir(&cfg, &io)?;
            let image = load_image(&cfg, &io.image)?;
            let grid = pipeline::tile_image(&cfg, &image, &load_mask(&mask_path(&dir, &mask))?)?;
            let pred_path = predictions.unwrap_or_else(|| dir.join("predictions.json"));
            if !pred_path.exists() {
                return Err(Error::MissingArtifact(format!("predictions {} (run `predict` first)", pred_path.display())).into());
            }
            let preds: Vec<TilePrediction> = serde_json::from_str(&std::fs::read_to_string(&pred_path)?)
                .map_err(|e| Error::InvalidData(format!("{}: {e}", pred_path.display())))?;
            let map = pipeline::density_from_predictions(&grid, &preds, &image.source_id)?;
            map.write_json(&dir.join("density.json"))?;
            map.write_heatmap(&dir.join("heatmap.png"))?;
            println!("{}: weed coverage {:.4}", dir.join("density.json").display(), map.weed_coverage());
        }
        Command::Evaluate { cfg, annotation, run, dataset, out } => {
            let cfg = cfg.resolve()?;
            let report = if dataset {
                let backbone = pipeline::load_backbone(&cfg)?;
                let classifier = pipeline::obtain_classifier(&cfg, &backbone)?;
                let manifest = pipeline::load_manifest(&cfg)?;
                pipeline::evaluate_dataset(&cfg, &backbone, &classifier, &manifest)?.0
            } else {
                let run = run.clone().expect("clap enforces --run");
                let annotation = pipeline::load_annotation(&cfg, &annotation.expect("clap enforces --annotation"))?;
                let density_path = run.join("density.json");
                if !density_path.exists() {
                    return Err(Error::MissingArtifact(density_path.display().to_string()).into());
                }
                let density = DensityMap::read_json(&density_path)?;
                let mask = load_mask(&run.join("mask.png"))?;
                pipeline::summarize(&[pipeline::evaluate_maps(&cfg, &density, &mask, &annotation)?])?
            };
            let path = out.unwrap_or_else(|| match (dataset, run) {
                (false, Some(r)) => r.join("report.json"),
                _ => cfg.output_root().join("report.json"),
            });
            if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(d)?;
            }
            write_json(&report, &path)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::SynthGen { out, n_train, n_test, size, preset, seed } => {
            let fields = (0..n_train + n_test)
                .map(|k| generate(&FieldSpec::preset(preset.into(), size, seed + k as u64)))
                .collect::<Result<Vec<_>, _>>()?;
            write_dataset(&out, &fields, n_train, &ColorMap::default())?;
            println!("{}: {n_train} train / {n_test} test fields of {size} px", out.display());
        }
    }
    Ok(())
}

/// A fine-tuned head serves every side; feature-vector kinds are trained
/// once per side from the dataset unless a model is configured.
fn timing_classifiers(
    cfg: &RunConfig,
    backbone: &weedmap_core::backbone::ResNet50,
    sides: &[usize],
) -> Result<BTreeMap<usize, TrainedClassifier>> {
    let mut out = BTreeMap::new();
    if cfg.classifier.model_path.is_some() || cfg.classifier.kind == ClassifierKind::FinetunedBackbone {
        out.insert(cfg.tile_side, pipeline::obtain_classifier(cfg, backbone)?);
        if out[&cfg.tile_side].model.is_finetuned() {
            return Ok(out);
        }
    }
    let manifest = pipeline::load_manifest(cfg)?;
    for &side in sides {
        if out.contains_key(&side) {
            continue;
        }
        let mut c = cfg.clone();
        c.tile_side = side;
        c.validate()?;
        let tiles = pipeline::training_tiles(&c, &manifest)?;
        out.insert(side, pipeline::train_classifier(&c, backbone, &tiles)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}

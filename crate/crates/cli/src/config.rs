//! Config file loading with command-line overrides.

use std::path::PathBuf;

use anyhow::{anyhow, Context, Result};
use toml::{Table, Value};

use weedmap_core::classify::{ClassifierKind, Sampler};
use weedmap_core::config::RunConfig;
use weedmap_core::Error;

#[derive(clap::Args, Debug, Default)]
pub struct ConfigArgs {
    /// TOML run configuration; every key is optional.
    #[arg(long, short = 'c')]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset_root: Option<PathBuf>,
    #[arg(long)]
    pub tile_side: Option<usize>,
    #[arg(long)]
    pub veg_threshold: Option<f64>,
    #[arg(long)]
    pub classifier: Option<ClassifierKind>,
    #[arg(long)]
    pub sampler: Option<Sampler>,
    /// Trained classifier artifact.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// PCA artifact for feature-vector classifiers.
    #[arg(long)]
    pub pca: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Any config key as `dotted.key=value`, value in TOML syntax
    /// (e.g. `segmentation.max_iters=50`, `finetune.weights.w_weed=0.7`).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    /// File, then typed flags, then `--set` pairs; the result is validated.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut table = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<Table>().map_err(|e| Error::Parameter(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        let path = |p: &PathBuf| Value::String(p.to_string_lossy().into_owned());
        let typed = [
            ("dataset_root", self.dataset_root.as_ref().map(path)),
            ("tile_side", self.tile_side.map(|v| Value::Integer(v as i64))),
            ("veg_threshold", self.veg_threshold.map(Value::Float)),
            ("classifier.kind", self.classifier.map(|k| Value::String(k.name().into()))),
            ("classifier.sampler", self.sampler.map(|s| Value::String(s.name().into()))),
            ("classifier.model_path", self.model.as_ref().map(path)),
            ("classifier.pca_path", self.pca.as_ref().map(path)),
            ("output_dir", self.output_dir.as_ref().map(path)),
        ];
        for (key, value) in typed {
            if let Some(v) = value {
                set_key(&mut table, key, v)?;
            }
        }
        for pair in &self.set {
            let (key, raw) = pair
                .split_once('=')
                .ok_or_else(|| Error::Parameter(format!("--set expects KEY=VALUE, got {pair:?}")))?;
            set_key(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        let text = toml::to_string(&table).map_err(|e| Error::Serialization(e.to_string()))?;
        Ok(RunConfig::from_toml(&text)?)
    }
}

/// TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_key(table: &mut Table, dotted: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = dotted.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| anyhow!(Error::Parameter(format!("empty key in {dotted:?}"))))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Parameter(format!("{dotted}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_and_set_override_defaults() {
        let args = ConfigArgs {
            tile_side: Some(25),
            classifier: Some(ClassifierKind::SvmRbf),
            set: vec!["segmentation.max_iters=7".into(), "finetune.weights.w_weed=0.7".into()],
            ..Default::default()
        };
        let cfg = args.resolve().unwrap();
        assert_eq!(cfg.tile_side, 25);
        assert_eq!(cfg.classifier.kind, ClassifierKind::SvmRbf);
        assert_eq!(cfg.segmentation.max_iters, 7);
        assert_eq!(cfg.finetune.weights.w_weed, 0.7);
        assert_eq!(cfg.finetune.weights.w_crop, 0.33);
    }

    #[test]
    fn bare_strings_and_bad_keys() {
        assert_eq!(parse_value("runs/x"), Value::String("runs/x".into()));
        assert_eq!(parse_value("3"), Value::Integer(3));
        let bad = ConfigArgs {
            set: vec!["nope=1".into()],
            ..Default::default()
        };
        assert!(bad.resolve().is_err());
        let malformed = ConfigArgs {
            set: vec!["tile_side".into()],
            ..Default::default()
        };
        assert!(malformed.resolve().is_err());
    }
}

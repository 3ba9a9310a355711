//! Tile classification: feature-vector classifiers with class-imbalance
//! resampling, and a backbone with a fine-tuned two-class head.

mod finetune;
mod forest;
mod gnb;
mod mlp;
mod resample;
mod svm;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::{fingerprint_vectors, Artifact};
use crate::backbone::ResNet50;
use crate::data_io::Split;
use crate::error::{Error, Result};
use crate::image::FieldImage;

pub use finetune::{train_finetuned, weighted_cross_entropy, FinetuneParams, FinetunedHead, LossWeights};
pub use forest::ForestModel;
pub use gnb::GnbModel;
pub use mlp::MlpModel;
pub use resample::{resample, resample_random, resample_smote, DEFAULT_SMOTE_K};
pub use svm::{Kernel, SvmModel};

pub const CROP: u8 = 0;
pub const WEED: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ExampleInput {
    Features(Vec<f64>),
    Pixels(FieldImage),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub input: ExampleInput,
    /// 0 = crop, 1 = weed.
    pub label: u8,
    pub split: Split,
    /// Provenance: tile id, or how a synthetic example was made.
    pub source: String,
}

impl LabeledExample {
    pub fn features(values: Vec<f64>, label: u8, split: Split, source: impl Into<String>) -> Self {
        Self {
            input: ExampleInput::Features(values),
            label,
            split,
            source: source.into(),
        }
    }

    pub fn pixels(image: FieldImage, label: u8, split: Split) -> Self {
        let source = image.source_id.clone();
        Self {
            input: ExampleInput::Pixels(image),
            label,
            split,
            source,
        }
    }

    pub fn vector(&self) -> Result<&[f64]> {
        match &self.input {
            ExampleInput::Features(v) => Ok(v),
            ExampleInput::Pixels(_) => Err(Error::InvalidData(format!(
                "example {} holds pixels where a feature vector is required",
                self.source
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    SvmLinear,
    SvmPoly2,
    SvmPoly3,
    SvmRbf,
    SvmSigmoid,
    Gnb,
    Mlp,
    RandomForest,
    FinetunedBackbone,
}

impl ClassifierKind {
    pub const FEATURE_KINDS: [ClassifierKind; 8] = [
        Self::SvmLinear,
        Self::SvmPoly2,
        Self::SvmPoly3,
        Self::SvmRbf,
        Self::SvmSigmoid,
        Self::Gnb,
        Self::Mlp,
        Self::RandomForest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::SvmLinear => "svm_linear",
            Self::SvmPoly2 => "svm_poly2",
            Self::SvmPoly3 => "svm_poly3",
            Self::SvmRbf => "svm_rbf",
            Self::SvmSigmoid => "svm_sigmoid",
            Self::Gnb => "gnb",
            Self::Mlp => "mlp",
            Self::RandomForest => "random_forest",
            Self::FinetunedBackbone => "finetuned_backbone",
        }
    }

    fn kernel(self) -> Option<Kernel> {
        match self {
            Self::SvmLinear => Some(Kernel::Linear),
            Self::SvmPoly2 => Some(Kernel::Poly(2)),
            Self::SvmPoly3 => Some(Kernel::Poly(3)),
            Self::SvmRbf => Some(Kernel::Rbf),
            Self::SvmSigmoid => Some(Kernel::Sigmoid),
            _ => None,
        }
    }
}

impl std::str::FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::FEATURE_KINDS
            .iter()
            .chain([&Self::FinetunedBackbone])
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| Error::Parameter(format!("unknown classifier kind '{s}'")))
    }
}

impl std::fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    #[default]
    None,
    Random,
    Smote,
}

impl Sampler {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Random => "random",
            Self::Smote => "smote",
        }
    }
}

impl std::str::FromStr for Sampler {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "random" => Ok(Self::Random),
            "smote" => Ok(Self::Smote),
            _ => Err(Error::Parameter(format!("unknown sampler '{s}'"))),
        }
    }
}

/// Weed probability (or squashed decision value) and the thresholded label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: u8,
    pub score: f64,
}

impl Prediction {
    /// Ties at 0.5 go to weed.
    pub fn from_score(score: f64) -> Self {
        Self {
            label: u8::from(score >= 0.5),
            score,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    Svm(SvmModel),
    Gnb(GnbModel),
    Mlp(MlpModel),
    Forest(ForestModel),
    Finetuned(FinetunedHead),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub kind: ClassifierKind,
    pub sampler: Sampler,
    pub seed: u64,
    /// Fingerprint of the training set before resampling.
    pub fingerprint: String,
    pub params: ModelParams,
}

fn check_training_set(train: &[LabeledExample]) -> Result<()> {
    if let Some(e) = train.iter().find(|e| e.split != Split::Train) {
        return Err(Error::Leakage(format!("training received {:?}-split example {}", e.split, e.source)));
    }
    if let Some(e) = train.iter().find(|e| e.label > 1) {
        return Err(Error::InvalidData(format!("label {} of {} is not 0/1", e.label, e.source)));
    }
    let weeds = train.iter().filter(|e| e.label == WEED).count();
    if weeds == 0 || weeds == train.len() {
        return Err(Error::InvalidData(format!(
            "training set needs both classes ({} crop, {weeds} weed)",
            train.len() - weeds
        )));
    }
    Ok(())
}

/// Fits a feature-vector classifier on (optionally resampled) training examples.
pub fn train_feature_classifier(
    kind: ClassifierKind,
    train: &[LabeledExample],
    sampler: Sampler,
    seed: u64,
) -> Result<ClassifierModel> {
    check_training_set(train)?;
    let vectors = train.iter().map(LabeledExample::vector).collect::<Result<Vec<_>>>()?;
    let dim = vectors[0].len();
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::dims(dim, v.len()));
    }
    let fingerprint = fingerprint_examples(train)?;
    let data = resample(train, sampler, seed)?;
    let x: Vec<&[f64]> = data.iter().map(LabeledExample::vector).collect::<Result<_>>()?;
    let y: Vec<u8> = data.iter().map(|e| e.label).collect();
    let params = match kind {
        ClassifierKind::Gnb => ModelParams::Gnb(GnbModel::fit(&x, &y)?),
        ClassifierKind::Mlp => ModelParams::Mlp(MlpModel::fit(&x, &y, &mlp::MlpParams::default(), seed)?),
        ClassifierKind::RandomForest => {
            ModelParams::Forest(ForestModel::fit(&x, &y, &forest::ForestParams::default(), seed)?)
        }
        ClassifierKind::FinetunedBackbone => {
            return Err(Error::Parameter(
                "finetuned_backbone trains on tile pixels; use train_finetuned".into(),
            ))
        }
        svm_kind => {
            let kernel = svm_kind.kernel().expect("remaining kinds are SVMs");
            ModelParams::Svm(SvmModel::fit(&x, &y, kernel, &svm::SvmParams::default())?)
        }
    };
    Ok(ClassifierModel {
        kind,
        sampler,
        seed,
        fingerprint,
        params,
    })
}

/// Order-sensitive fingerprint of labels and inputs.
pub fn fingerprint_examples(examples: &[LabeledExample]) -> Result<String> {
    let rows: Vec<Vec<f64>> = examples
        .iter()
        .map(|e| {
            let mut row = vec![e.label as f64];
            match &e.input {
                ExampleInput::Features(v) => row.extend_from_slice(v),
                ExampleInput::Pixels(img) => row.extend(img.pixels().iter().map(|&p| p as f64)),
            }
            row
        })
        .collect();
    Ok(fingerprint_vectors(rows.iter().map(Vec::as_slice)))
}

impl ClassifierModel {
    pub fn is_finetuned(&self) -> bool {
        matches!(self.params, ModelParams::Finetuned(_))
    }

    pub fn input_dim(&self) -> usize {
        match &self.params {
            ModelParams::Svm(m) => m.dim(),
            ModelParams::Gnb(m) => m.dim(),
            ModelParams::Mlp(m) => m.dim(),
            ModelParams::Forest(m) => m.dim,
            ModelParams::Finetuned(h) => h.in_features,
        }
    }

    /// Predicts one feature vector.
    pub fn predict_vector(&self, x: &[f64]) -> Result<Prediction> {
        if self.is_finetuned() {
            return Err(Error::InvalidData(
                "finetuned_backbone predicts tile pixels, not feature vectors".into(),
            ));
        }
        if x.len() != self.input_dim() {
            return Err(Error::dims(self.input_dim(), x.len()));
        }
        let score = match &self.params {
            ModelParams::Svm(m) => m.score(x),
            ModelParams::Gnb(m) => m.score(x),
            ModelParams::Mlp(m) => m.score(x),
            ModelParams::Forest(m) => m.score(x),
            ModelParams::Finetuned(_) => unreachable!(),
        };
        Ok(Prediction::from_score(score))
    }

    /// Predicts feature vectors in input order.
    pub fn predict_vectors(&self, xs: &[&[f64]]) -> Result<Vec<Prediction>> {
        xs.iter().map(|x| self.predict_vector(x)).collect()
    }

    /// Predicts masked tiles with a fine-tuned backbone, in input order.
    pub fn predict_tiles(&self, backbone: &ResNet50, tiles: &[&FieldImage]) -> Result<Vec<Prediction>> {
        let ModelParams::Finetuned(head) = &self.params else {
            return Err(Error::InvalidData(format!(
                "{} predicts feature vectors, not tile pixels",
                self.kind
            )));
        };
        head.predict_tiles(backbone, tiles)
    }

    pub fn to_artifact(&self) -> Artifact {
        let mut a = match &self.params {
            ModelParams::Svm(m) => m.to_artifact(),
            ModelParams::Gnb(m) => m.to_artifact(),
            ModelParams::Mlp(m) => m.to_artifact(),
            ModelParams::Forest(m) => m.to_artifact(),
            ModelParams::Finetuned(h) => h.to_artifact(),
        };
        a.meta("kind", "classifier");
        a.meta("classifier", self.kind);
        a.meta("sampler", self.sampler.name());
        a.meta("seed", self.seed);
        a.meta("fingerprint", &self.fingerprint);
        a
    }

    pub fn from_artifact(a: &Artifact) -> Result<Self> {
        a.expect_kind("classifier")?;
        let kind: ClassifierKind = a.get_meta("classifier")?.parse()?;
        let params = match kind {
            ClassifierKind::Gnb => ModelParams::Gnb(GnbModel::from_artifact(a)?),
            ClassifierKind::Mlp => ModelParams::Mlp(MlpModel::from_artifact(a)?),
            ClassifierKind::RandomForest => ModelParams::Forest(ForestModel::from_artifact(a)?),
            ClassifierKind::FinetunedBackbone => ModelParams::Finetuned(FinetunedHead::from_artifact(a)?),
            _ => ModelParams::Svm(SvmModel::from_artifact(a)?),
        };
        Ok(Self {
            kind,
            sampler: a.get_meta("sampler")?.parse()?,
            seed: a.parse_meta("seed")?,
            fingerprint: a.get_meta("fingerprint")?.to_string(),
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_artifact().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_artifact(&Artifact::load(path)?)
    }
}

/// Per-feature mean/std standardization fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Standardizer {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &[&[f64]]) -> Self {
        let d = x[0].len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in x {
            for ((s, v), m) in var.iter_mut().zip(row.iter()).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let inv_std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, inv_std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.inv_std)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn blobs(n: usize, sep: f64, seed: u64) -> Vec<LabeledExample> {
        // Offset from the origin: an even kernel cannot split x from -x.
        blobs_at(n, sep, 4.0, seed)
    }

    fn blobs_at(n: usize, sep: f64, offset: f64, seed: u64) -> Vec<LabeledExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = (i % 2) as u8;
                let c = if label == 1 { sep } else { -sep } + offset;
                let v = vec![c + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), c * 0.5];
                LabeledExample::features(v, label, Split::Train, format!("b{i}"))
            })
            .collect()
    }

    #[test]
    fn every_feature_kind_fits_separable_blobs() {
        for kind in ClassifierKind::FEATURE_KINDS {
            // tanh with zero offset needs centred inputs, as PCA scores are.
            let offset = if kind == ClassifierKind::SvmSigmoid { 0.0 } else { 4.0 };
            let data = blobs_at(60, 3.0, offset, 1);
            let m = train_feature_classifier(kind, &data, Sampler::None, 7).unwrap();
            let correct = data
                .iter()
                .filter(|e| m.predict_vector(e.vector().unwrap()).unwrap().label == e.label)
                .count();
            assert!(correct >= 57, "{kind}: {correct}/60");
        }
    }

    #[test]
    fn artifacts_round_trip_with_identical_predictions() {
        let data = blobs(40, 1.0, 2);
        let probe: Vec<Vec<f64>> = blobs(20, 1.0, 3).into_iter().map(|e| e.vector().unwrap().to_vec()).collect();
        for kind in ClassifierKind::FEATURE_KINDS {
            let m = train_feature_classifier(kind, &data, Sampler::Random, 5).unwrap();
            let back = ClassifierModel::from_artifact(&Artifact::from_bytes(&m.to_artifact().to_bytes().unwrap()).unwrap()).unwrap();
            for p in &probe {
                assert_eq!(m.predict_vector(p).unwrap(), back.predict_vector(p).unwrap(), "{kind}");
            }
            assert_eq!(back.kind, kind);
            assert_eq!(back.sampler, Sampler::Random);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = blobs(50, 0.7, 4);
        let probe = blobs(30, 0.7, 8);
        for kind in [ClassifierKind::Mlp, ClassifierKind::RandomForest, ClassifierKind::SvmRbf] {
            let a = train_feature_classifier(kind, &data, Sampler::Smote, 11).unwrap();
            let b = train_feature_classifier(kind, &data, Sampler::Smote, 11).unwrap();
            for e in &probe {
                let x = e.vector().unwrap();
                assert_eq!(a.predict_vector(x).unwrap(), b.predict_vector(x).unwrap());
            }
        }
    }

    #[test]
    fn label_follows_threshold() {
        assert_eq!(Prediction::from_score(0.5).label, WEED);
        assert_eq!(Prediction::from_score(0.73).label, WEED);
        assert_eq!(Prediction::from_score(0.4999).label, CROP);
    }

    #[test]
    fn rejects_test_split_and_single_class() {
        let mut data = blobs(10, 1.0, 5);
        data[3].split = Split::Test;
        assert!(matches!(
            train_feature_classifier(ClassifierKind::Gnb, &data, Sampler::None, 0),
            Err(Error::Leakage(_))
        ));
        let one: Vec<_> = blobs(10, 1.0, 5).into_iter().filter(|e| e.label == 0).collect();
        assert!(train_feature_classifier(ClassifierKind::Gnb, &one, Sampler::None, 0).is_err());
    }

    #[test]
    fn wrong_representation_is_rejected() {
        let m = train_feature_classifier(ClassifierKind::Gnb, &blobs(10, 2.0, 1), Sampler::None, 0).unwrap();
        let net = ResNet50::seeded_uncalibrated(0);
        let tile = FieldImage::filled(50, 50, [0, 0, 0], "t");
        assert!(m.predict_tiles(&net, &[&tile]).is_err());
        assert!(m.predict_vector(&[1.0]).is_err());
    }
}

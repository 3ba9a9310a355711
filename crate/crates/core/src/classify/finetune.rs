//! Frozen backbone with a trainable two-class linear head on pooled features.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_training_set, fingerprint_examples, ClassifierKind, ClassifierModel, ExampleInput, LabeledExample, ModelParams, Prediction, Sampler};
use crate::artifact::{Artifact, Tensor};
use crate::backbone::ResNet50;
use crate::error::{Error, Result};
use crate::image::FieldImage;
use crate::nn::fan_in_uniform;

/// Per-class loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_crop: f64,
    pub w_weed: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_crop: 0.33,
            w_weed: 0.67,
        }
    }
}

impl LossWeights {
    pub fn new(w_crop: f64, w_weed: f64) -> Result<Self> {
        if !(w_crop > 0.0 && w_weed > 0.0) {
            return Err(Error::Parameter(format!(
                "loss weights must be positive, got ({w_crop}, {w_weed})"
            )));
        }
        Ok(Self { w_crop, w_weed })
    }

    fn of(&self, label: u8) -> f64 {
        if label == 1 {
            self.w_weed
        } else {
            self.w_crop
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneParams {
    pub weights: LossWeights,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
}

impl Default for FinetuneParams {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            epochs: 250,
            lr: 0.001,
            momentum: 0.9,
            batch: 32,
        }
    }
}

/// Mean over the batch of `w[y] * (-x[y] + log sum_j exp x[j])`.
///
/// Not normalized by the weight sum, so the loss is linear in the weights.
pub fn weighted_cross_entropy(logits: &[[f64; 2]], labels: &[u8], weights: LossWeights) -> f64 {
    assert_eq!(logits.len(), labels.len(), "one label per logit pair");
    if logits.is_empty() {
        return 0.0;
    }
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(x, &y)| weights.of(y) * (log_sum_exp(x) - x[usize::from(y)]))
        .sum();
    total / logits.len() as f64
}

fn log_sum_exp(x: &[f64; 2]) -> f64 {
    let m = x[0].max(x[1]);
    m + ((x[0] - m).exp() + (x[1] - m).exp()).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetunedHead {
    pub in_features: usize,
    /// Row-major `2 x in_features`.
    pub weight: Vec<f64>,
    pub bias: [f64; 2],
    pub params: FinetuneParams,
    /// Checksum of the frozen backbone the head was trained on.
    pub backbone_checksum: String,
    /// Training loss after the last epoch.
    pub final_loss: f64,
}

impl FinetunedHead {
    fn logits(&self, x: &[f64]) -> [f64; 2] {
        let (w0, w1) = self.weight.split_at(self.in_features);
        let d = |w: &[f64]| w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        [d(w0) + self.bias[0], d(w1) + self.bias[1]]
    }

    /// Softmax probability of weed for a pooled feature vector.
    pub fn score_pooled(&self, pooled: &[f64]) -> f64 {
        let z = self.logits(pooled);
        (z[1] - log_sum_exp(&z)).exp()
    }

    pub fn predict_tiles(&self, backbone: &ResNet50, tiles: &[&FieldImage]) -> Result<Vec<Prediction>> {
        let sum = backbone.cached_checksum();
        if sum != self.backbone_checksum {
            return Err(Error::InvalidData(format!(
                "head was trained on backbone {}, got {sum}",
                self.backbone_checksum
            )));
        }
        Ok(pooled_features(backbone, tiles)?
            .iter()
            .map(|p| Prediction::from_score(self.score_pooled(p)))
            .collect())
    }

    pub fn to_artifact(&self) -> Artifact {
        let mut a = Artifact::new("classifier");
        a.insert("head.weight", Tensor::f64(vec![2, self.in_features], self.weight.clone()));
        a.insert("head.bias", Tensor::f64(vec![2], self.bias.to_vec()));
        a.meta("w_crop", self.params.weights.w_crop);
        a.meta("w_weed", self.params.weights.w_weed);
        a.meta("epochs", self.params.epochs);
        a.meta("lr", self.params.lr);
        a.meta("momentum", self.params.momentum);
        a.meta("batch", self.params.batch);
        a.meta("backbone_checksum", &self.backbone_checksum);
        a.meta("final_loss", self.final_loss);
        a
    }

    pub fn from_artifact(a: &Artifact) -> Result<Self> {
        let w = a.get("head.weight")?;
        let bias = a.get("head.bias")?.to_f64();
        let [2, in_features] = w.shape[..] else {
            return Err(Error::Format(format!("head weight has shape {:?}", w.shape)));
        };
        if bias.len() != 2 {
            return Err(Error::Format("head bias must have 2 entries".into()));
        }
        Ok(Self {
            in_features,
            weight: w.to_f64(),
            bias: [bias[0], bias[1]],
            params: FinetuneParams {
                weights: LossWeights::new(a.parse_meta("w_crop")?, a.parse_meta("w_weed")?)?,
                epochs: a.parse_meta("epochs")?,
                lr: a.parse_meta("lr")?,
                momentum: a.parse_meta("momentum")?,
                batch: a.parse_meta("batch")?,
            },
            backbone_checksum: a.get_meta("backbone_checksum")?.to_string(),
            final_loss: a.parse_meta("final_loss")?,
        })
    }
}

fn pooled_features(backbone: &ResNet50, tiles: &[&FieldImage]) -> Result<Vec<Vec<f64>>> {
    Ok(backbone
        .forward(tiles, true)?
        .into_iter()
        .map(|a| a.pooled.iter().map(|&v| v as f64).collect())
        .collect())
}

/// Trains only the head; the backbone runs in inference mode and its
/// checksum is verified unchanged afterwards.
pub fn train_finetuned(
    train: &[LabeledExample],
    backbone: &ResNet50,
    params: &FinetuneParams,
    seed: u64,
) -> Result<ClassifierModel> {
    check_training_set(train)?;
    if params.epochs == 0 || params.batch == 0 {
        return Err(Error::Parameter("fine-tuning needs epochs >= 1 and batch >= 1".into()));
    }
    LossWeights::new(params.weights.w_crop, params.weights.w_weed)?;
    let tiles: Vec<&FieldImage> = train
        .iter()
        .map(|e| match &e.input {
            ExampleInput::Pixels(img) => Ok(img),
            ExampleInput::Features(_) => Err(Error::InvalidData(format!(
                "fine-tuning needs tile pixels, {} holds a feature vector",
                e.source
            ))),
        })
        .collect::<Result<_>>()?;
    let labels: Vec<u8> = train.iter().map(|e| e.label).collect();

    let before = backbone.checksum();
    // The frozen backbone is deterministic, so its outputs are computed once.
    let feats = pooled_features(backbone, &tiles)?;
    let in_features = feats[0].len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut head = FinetunedHead {
        in_features,
        weight: fan_in_uniform(&mut rng, 2 * in_features, in_features)
            .into_iter()
            .map(f64::from)
            .collect(),
        bias: {
            let b = fan_in_uniform(&mut rng, 2, in_features);
            [b[0] as f64, b[1] as f64]
        },
        params: params.clone(),
        backbone_checksum: before.clone(),
        final_loss: f64::NAN,
    };
    let mut vw = vec![0.0; head.weight.len()];
    let mut vb = [0.0; 2];
    let mut order: Vec<usize> = (0..feats.len()).collect();
    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(params.batch) {
            let m = chunk.len() as f64;
            let mut gw = vec![0.0; head.weight.len()];
            let mut gb = [0.0; 2];
            for &i in chunk {
                let z = head.logits(&feats[i]);
                let lse = log_sum_exp(&z);
                let y = usize::from(labels[i]);
                let w = params.weights.of(labels[i]);
                epoch_loss += w * (lse - z[y]);
                for c in 0..2 {
                    let g = w * ((z[c] - lse).exp() - f64::from(u8::from(c == y))) / m;
                    gb[c] += g;
                    let row = &mut gw[c * in_features..(c + 1) * in_features];
                    row.iter_mut().zip(&feats[i]).for_each(|(r, x)| *r += g * x);
                }
            }
            for ((p, v), g) in head.weight.iter_mut().zip(&mut vw).zip(&gw) {
                *v = params.momentum * *v + g;
                *p -= params.lr * *v;
            }
            for c in 0..2 {
                vb[c] = params.momentum * vb[c] + gb[c];
                head.bias[c] -= params.lr * vb[c];
            }
        }
        head.final_loss = epoch_loss / feats.len() as f64;
        if epoch % 25 == 0 || epoch + 1 == params.epochs {
            log::debug!("fine-tune epoch {epoch}: loss {:.5}", head.final_loss);
        }
    }

    let after = backbone.checksum();
    if after != before {
        return Err(Error::Invariant(format!("frozen backbone changed during fine-tuning: {before} -> {after}")));
    }
    Ok(ClassifierModel {
        kind: ClassifierKind::FinetunedBackbone,
        sampler: Sampler::None,
        seed,
        fingerprint: fingerprint_examples(train)?,
        params: ModelParams::Finetuned(head),
    })
}

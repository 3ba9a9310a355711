//! ResNet50 in inference mode (batch-norm running statistics), batched over
//! tiles. Parameters use torchvision's key names so exported checkpoints load
//! directly; without a checkpoint a seeded deterministic initialization is used.

use std::cell::{OnceCell, RefCell};
use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::artifact::{sha256_hex, Artifact, Tensor, TensorData};
use crate::error::{Error, Result};
use crate::image::FieldImage;
use crate::nn::{self, ConvGeom};

/// Per-channel statistics of the pretraining corpus (RGB in [0, 1]).
pub const CHANNEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

const BN_EPS: f32 = 1e-5;
/// Bottleneck widths and depths of the four residual stages.
const STAGES: [(usize, usize); 4] = [(64, 3), (128, 4), (256, 6), (512, 3)];
const EXPANSION: usize = 4;
/// Scale of the last normalization in every residual branch under seeded
/// init, keeping activations bounded through the untrained network.
const SEEDED_RESIDUAL_GAMMA: f32 = 0.2;
/// Tiles per forward batch.
const BATCH: usize = 16;
/// Procedural images used to calibrate normalization statistics of a seeded backbone.
const CALIBRATION_IMAGES: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum BackboneSource {
    Checkpoint { path: String, sha256: String },
    Seeded { seed: u64 },
}

/// Activations of one tile.
#[derive(Debug, Clone, PartialEq)]
pub struct TileActivations {
    /// Stride-16 stage output `(C, H, W)` flattened channel-major.
    pub stage3: Vec<f32>,
    pub stage3_shape: [usize; 3],
    /// Global average pool of the final stage (2048 values).
    pub pooled: Vec<f32>,
}

pub struct ResNet50 {
    params: BTreeMap<String, Tensor>,
    pub source: BackboneSource,
    /// Batch statistics collected per normalization layer while calibrating.
    calibration: RefCell<Option<BTreeMap<String, (Vec<f32>, Vec<f32>)>>>,
    /// Memoized `checksum()`; cleared by the only mutating method.
    checksum: OnceCell<String>,
}

struct Act {
    data: Vec<f32>,
    c: usize,
    h: usize,
    w: usize,
    batch: usize,
}

impl ResNet50 {
    /// Every parameter name and shape in torchvision order (excluding `fc`).
    fn layout() -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let bn = |out: &mut Vec<(String, Vec<usize>)>, p: &str, c: usize| {
            for s in ["weight", "bias", "running_mean", "running_var"] {
                out.push((format!("{p}.{s}"), vec![c]));
            }
        };
        out.push(("conv1.weight".into(), vec![64, 3, 7, 7]));
        bn(&mut out, "bn1", 64);
        let mut cin = 64;
        for (si, &(planes, blocks)) in STAGES.iter().enumerate() {
            for b in 0..blocks {
                let p = format!("layer{}.{b}", si + 1);
                out.push((format!("{p}.conv1.weight"), vec![planes, cin, 1, 1]));
                bn(&mut out, &format!("{p}.bn1"), planes);
                out.push((format!("{p}.conv2.weight"), vec![planes, planes, 3, 3]));
                bn(&mut out, &format!("{p}.bn2"), planes);
                out.push((format!("{p}.conv3.weight"), vec![planes * EXPANSION, planes, 1, 1]));
                bn(&mut out, &format!("{p}.bn3"), planes * EXPANSION);
                if b == 0 {
                    out.push((format!("{p}.downsample.0.weight"), vec![planes * EXPANSION, cin, 1, 1]));
                    bn(&mut out, &format!("{p}.downsample.1"), planes * EXPANSION);
                }
                cin = planes * EXPANSION;
            }
        }
        out
    }

    /// Deterministic stand-in for a pretrained network: He-normal
    /// convolutions (fan-out), then normalization running statistics
    /// calibrated on seeded procedural images so every stage emits
    /// standardized activations.
    pub fn seeded(seed: u64) -> Self {
        let mut net = Self::seeded_uncalibrated(seed);
        let images = calibration_images(seed, CALIBRATION_IMAGES, 50);
        let refs: Vec<&FieldImage> = images.iter().collect();
        net.calibrate(&refs).expect("calibration images share one size");
        net
    }

    /// Seeded weights with identity running statistics.
    pub fn seeded_uncalibrated(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (name, shape) in Self::layout() {
            let len: usize = shape.iter().product();
            let data = if shape.len() == 4 {
                let fan_out = (shape[0] * shape[2] * shape[3]) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_out).sqrt()).expect("finite std");
                (0..len).map(|_| normal.sample(&mut rng) as f32).collect()
            } else if name.ends_with(".weight") {
                let residual_end = name.ends_with("bn3.weight");
                vec![if residual_end { SEEDED_RESIDUAL_GAMMA } else { 1.0 }; len]
            } else if name.ends_with("running_var") {
                vec![1.0; len]
            } else {
                vec![0.0; len]
            };
            params.insert(name, Tensor::f32(shape, data));
        }
        Self {
            params,
            source: BackboneSource::Seeded { seed },
            calibration: RefCell::new(None),
            checksum: OnceCell::new(),
        }
    }

    /// Replaces every running mean/variance by the batch statistics observed
    /// on `images` (processed as a single batch, layer by layer).
    pub fn calibrate(&mut self, images: &[&FieldImage]) -> Result<()> {
        if images.is_empty() {
            return Err(Error::InvalidData("calibration needs at least one image".into()));
        }
        *self.calibration.borrow_mut() = Some(BTreeMap::new());
        let run = self.forward_batch(images, true);
        let stats = self.calibration.borrow_mut().take().expect("set above");
        run?;
        for (name, (mean, var)) in stats {
            let c = mean.len();
            self.params.insert(format!("{name}.running_mean"), Tensor::f32(vec![c], mean));
            self.params.insert(format!("{name}.running_var"), Tensor::f32(vec![c], var));
        }
        self.checksum = OnceCell::new();
        Ok(())
    }

    /// Loads a torchvision-named checkpoint; extra keys (e.g. `fc.*`,
    /// `num_batches_tracked`) are ignored, missing or misshapen ones rejected.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let sha256 = sha256_hex([bytes.as_slice()]);
        let art = Artifact::from_bytes(&bytes)?;
        let mut params = BTreeMap::new();
        for (name, shape) in Self::layout() {
            let t = art
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks '{name}'")))?;
            if t.shape != shape {
                return Err(Error::Format(format!(
                    "'{name}' has shape {:?}, expected {shape:?}",
                    t.shape
                )));
            }
            let data = match &t.data {
                TensorData::F32(v) => v.clone(),
                TensorData::F64(v) => v.iter().map(|&x| x as f32).collect(),
            };
            params.insert(name, Tensor::f32(shape, data));
        }
        Ok(Self {
            params,
            source: BackboneSource::Checkpoint {
                path: path.display().to_string(),
                sha256,
            },
            calibration: RefCell::new(None),
            checksum: OnceCell::new(),
        })
    }

    pub fn to_artifact(&self) -> Artifact {
        let mut a = Artifact::new("resnet50_backbone");
        for (k, t) in &self.params {
            a.insert(k.clone(), t.clone());
        }
        a
    }

    /// `checksum()` computed once per backbone value.
    pub fn cached_checksum(&self) -> &str {
        self.checksum.get_or_init(|| self.checksum())
    }

    /// SHA-256 over every parameter (name, shape, little-endian values) in key order,
    /// recomputed on every call.
    pub fn checksum(&self) -> String {
        let mut parts: Vec<Vec<u8>> = Vec::new();
        for (k, t) in &self.params {
            parts.push(k.as_bytes().to_vec());
            parts.push(t.shape.iter().flat_map(|&d| (d as u64).to_le_bytes()).collect());
            parts.push(
                t.as_f32()
                    .expect("backbone stores f32")
                    .iter()
                    .flat_map(|x| x.to_le_bytes())
                    .collect(),
            );
        }
        sha256_hex(parts.iter().map(Vec::as_slice))
    }

    fn w(&self, name: &str) -> &[f32] {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("backbone parameter '{name}' missing"))
            .as_f32()
            .expect("backbone stores f32")
    }

    fn conv(&self, name: &str, x: &Act, cout: usize, kernel: usize, stride: usize, pad: usize) -> Act {
        let g = ConvGeom {
            batch: x.batch,
            in_h: x.h,
            in_w: x.w,
            kernel,
            stride,
            pad,
        };
        let data = nn::conv_forward(&x.data, self.w(&format!("{name}.weight")), x.c, cout, &g);
        Act {
            data,
            c: cout,
            h: g.out_h(),
            w: g.out_w(),
            batch: x.batch,
        }
    }

    fn bn(&self, name: &str, x: &mut Act, relu: bool) {
        let gamma = self.w(&format!("{name}.weight"));
        let beta = self.w(&format!("{name}.bias"));
        let n = x.batch * x.h * x.w;
        let batch_stats;
        let (mean, var) = match self.calibration.borrow_mut().as_mut() {
            Some(stats) => {
                let (m, v): (Vec<f32>, Vec<f32>) = (0..x.c)
                    .map(|c| {
                        let row = &x.data[c * n..(c + 1) * n];
                        let m = row.iter().map(|&a| a as f64).sum::<f64>() / n as f64;
                        let v = row.iter().map(|&a| (a as f64 - m).powi(2)).sum::<f64>() / n as f64;
                        (m as f32, v as f32)
                    })
                    .unzip();
                stats.insert(name.to_string(), (m.clone(), v.clone()));
                batch_stats = (m, v);
                (batch_stats.0.as_slice(), batch_stats.1.as_slice())
            }
            None => (
                self.w(&format!("{name}.running_mean")),
                self.w(&format!("{name}.running_var")),
            ),
        };
        for c in 0..x.c {
            let s = gamma[c] / (var[c] + BN_EPS).sqrt();
            let t = beta[c] - mean[c] * s;
            for v in &mut x.data[c * n..(c + 1) * n] {
                *v = *v * s + t;
                if relu && *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }

    fn bottleneck(&self, prefix: &str, x: Act, planes: usize, stride: usize, downsample: bool) -> Act {
        let mut out = self.conv(&format!("{prefix}.conv1"), &x, planes, 1, 1, 0);
        self.bn(&format!("{prefix}.bn1"), &mut out, true);
        let mut out = self.conv(&format!("{prefix}.conv2"), &out, planes, 3, stride, 1);
        self.bn(&format!("{prefix}.bn2"), &mut out, true);
        let mut out = self.conv(&format!("{prefix}.conv3"), &out, planes * EXPANSION, 1, 1, 0);
        self.bn(&format!("{prefix}.bn3"), &mut out, false);
        let identity = if downsample {
            let mut d = self.conv(&format!("{prefix}.downsample.0"), &x, planes * EXPANSION, 1, stride, 0);
            self.bn(&format!("{prefix}.downsample.1"), &mut d, false);
            d
        } else {
            x
        };
        for (o, &i) in out.data.iter_mut().zip(&identity.data) {
            *o = (*o + i).max(0.0);
        }
        out
    }

    /// Normalized input tensor for a batch of equally sized tiles.
    fn input(tiles: &[&FieldImage]) -> Result<Act> {
        let (w, h) = (tiles[0].width(), tiles[0].height());
        if let Some(t) = tiles.iter().find(|t| t.width() != w || t.height() != h) {
            return Err(Error::dims(format!("{w}x{h}"), format!("{}x{}", t.width(), t.height())));
        }
        let plane = w * h;
        let n = tiles.len() * plane;
        let mut data = vec![0.0f32; 3 * n];
        for (b, t) in tiles.iter().enumerate() {
            for (i, p) in t.pixels().chunks_exact(3).enumerate() {
                for c in 0..3 {
                    data[c * n + b * plane + i] = (p[c] as f32 / 255.0 - CHANNEL_MEAN[c]) / CHANNEL_STD[c];
                }
            }
        }
        Ok(Act {
            data,
            c: 3,
            h,
            w,
            batch: tiles.len(),
        })
    }

    fn forward_batch(&self, tiles: &[&FieldImage], need_pooled: bool) -> Result<Vec<TileActivations>> {
        let x = Self::input(tiles)?;
        let mut x = self.conv("conv1", &x, 64, 7, 2, 3);
        self.bn("bn1", &mut x, true);
        let g = ConvGeom {
            batch: x.batch,
            in_h: x.h,
            in_w: x.w,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let mut x = Act {
            data: nn::max_pool(&x.data, x.c, &g),
            c: x.c,
            h: g.out_h(),
            w: g.out_w(),
            batch: x.batch,
        };
        let mut stage3 = None;
        for (si, &(planes, blocks)) in STAGES.iter().enumerate() {
            if si == 3 && !need_pooled {
                break;
            }
            for b in 0..blocks {
                let stride = if b == 0 && si > 0 { 2 } else { 1 };
                x = self.bottleneck(&format!("layer{}.{b}", si + 1), x, planes, stride, b == 0);
            }
            if si == 2 {
                stage3 = Some(split_batch(&x));
            }
        }
        let stage3 = stage3.expect("stage 3 always runs");
        let pooled = if need_pooled {
            let plane = x.h * x.w;
            let n = x.batch * plane;
            (0..x.batch)
                .map(|b| {
                    (0..x.c)
                        .map(|c| x.data[c * n + b * plane..][..plane].iter().sum::<f32>() / plane as f32)
                        .collect()
                })
                .collect()
        } else {
            vec![Vec::new(); x.batch]
        };
        Ok(stage3
            .into_iter()
            .zip(pooled)
            .map(|((s, h, w), p)| TileActivations {
                stage3: s,
                stage3_shape: [STAGES[2].0 * EXPANSION, h, w],
                pooled: p,
            })
            .collect())
    }

    /// Runs the network over `tiles` in batches. With `need_pooled = false`
    /// the final stage is skipped and `pooled` is empty.
    pub fn forward(&self, tiles: &[&FieldImage], need_pooled: bool) -> Result<Vec<TileActivations>> {
        let mut out = Vec::with_capacity(tiles.len());
        for chunk in tiles.chunks(BATCH) {
            out.extend(self.forward_batch(chunk, need_pooled)?);
        }
        Ok(out)
    }
}

/// Seeded procedural images: random-colored ellipses on black, as in masked tiles.
pub fn calibration_images(seed: u64, count: usize, side: usize) -> Vec<FieldImage> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ca11);
    (0..count)
        .map(|i| {
            let mut img = FieldImage::filled(side, side, [0, 0, 0], &format!("calibration-{i}"));
            for _ in 0..rng.random_range(1..6) {
                let color = [rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()];
                let (cx, cy) = (rng.random_range(0.0..side as f64), rng.random_range(0.0..side as f64));
                let (rx, ry) = (rng.random_range(3.0..side as f64 / 2.0), rng.random_range(3.0..side as f64 / 2.0));
                for y in 0..side {
                    for x in 0..side {
                        let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
                        if dx * dx + dy * dy <= 1.0 {
                            img.put(x, y, color);
                        }
                    }
                }
            }
            img
        })
        .collect()
}

/// Splits a batched `(C, B*H*W)` activation into per-sample channel-major vectors.
fn split_batch(x: &Act) -> Vec<(Vec<f32>, usize, usize)> {
    let plane = x.h * x.w;
    let n = x.batch * plane;
    (0..x.batch)
        .map(|b| {
            let mut v = Vec::with_capacity(x.c * plane);
            for c in 0..x.c {
                v.extend_from_slice(&x.data[c * n + b * plane..][..plane]);
            }
            (v, x.h, x.w)
        })
        .collect()
}

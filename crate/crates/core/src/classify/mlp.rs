//! Multilayer perceptron: ReLU hidden layers and one sigmoid output neuron,
//! trained on binary cross-entropy with Adam.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{sigmoid, Standardizer};
use crate::artifact::{Artifact, Tensor};
use crate::error::{Error, Result};
use crate::nn::{relu_inplace, sgemm};

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub hidden: Vec<usize>,
    pub lr: f32,
    pub batch: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without the training loss improving by `min_delta`.
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for MlpParams {
    fn default() -> Self {
        Self {
            hidden: vec![1024, 512, 256, 128, 64, 32],
            lr: 1e-3,
            batch: 32,
            max_epochs: 100,
            patience: 10,
            min_delta: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs x inputs`.
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Dense {
    /// `out = x W^T + b` for a row-major batch `x` of `rows x inputs`.
    fn forward(&self, x: &[f32], rows: usize) -> Vec<f32> {
        let mut out: Vec<f32> = self.bias.iter().copied().cycle().take(rows * self.outputs).collect();
        sgemm(
            rows,
            self.inputs,
            self.outputs,
            1.0,
            x,
            self.inputs as isize,
            1,
            &self.weight,
            1,
            self.inputs as isize,
            1.0,
            &mut out,
            self.outputs as isize,
            1,
        );
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Dense>,
    scaler: Standardizer,
    /// Epochs actually run before stopping.
    pub epochs_run: usize,
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Adam {
    const B1: f32 = 0.9;
    const B2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    fn step(&mut self, p: &mut [f32], g: &[f32], lr: f32, t: i32) {
        let c1 = 1.0 - Self::B1.powi(t);
        let c2 = 1.0 - Self::B2.powi(t);
        for (((p, &g), m), v) in p.iter_mut().zip(g).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

impl MlpModel {
    pub fn dim(&self) -> usize {
        self.layers[0].inputs
    }

    /// Output-neuron logits for standardized rows.
    fn forward_all(&self, x: &[f32], rows: usize) -> Vec<Vec<f32>> {
        let mut acts = vec![x.to_vec()];
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = layer.forward(acts.last().expect("input present"), rows);
            if li + 1 < self.layers.len() {
                relu_inplace(&mut z);
            }
            acts.push(z);
        }
        acts
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        let xs: Vec<f32> = self.scaler.apply(x).into_iter().map(|v| v as f32).collect();
        let acts = self.forward_all(&xs, 1);
        sigmoid(acts.last().expect("output present")[0] as f64)
    }

    /// Mean BCE loss over a batch and its `(weight, bias)` gradients per layer.
    fn gradients(&self, xb: &[f32], yb: &[f32]) -> (f64, Vec<(Vec<f32>, Vec<f32>)>) {
        let rows = yb.len();
        let acts = self.forward_all(xb, rows);
        let logits = acts.last().expect("output present");
        let mut loss = 0.0;
        let mut delta: Vec<f32> = logits
            .iter()
            .zip(yb)
            .map(|(&z, &yt)| {
                let z64 = z as f64;
                loss += z64.max(0.0) - z64 * yt as f64 + (-z64.abs()).exp().ln_1p();
                (sigmoid(z64) as f32 - yt) / rows as f32
            })
            .collect();
        let mut grads = vec![(Vec::new(), Vec::new()); self.layers.len()];
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &acts[li];
            let (i_n, o_n) = (layer.inputs, layer.outputs);
            let mut gw = vec![0.0f32; o_n * i_n];
            sgemm(o_n, rows, i_n, 1.0, &delta, 1, o_n as isize, input, i_n as isize, 1, 0.0, &mut gw, i_n as isize, 1);
            let mut gb = vec![0.0f32; o_n];
            for row in delta.chunks_exact(o_n) {
                gb.iter_mut().zip(row).for_each(|(g, v)| *g += v);
            }
            if li > 0 {
                let mut dx = vec![0.0f32; rows * i_n];
                sgemm(rows, o_n, i_n, 1.0, &delta, o_n as isize, 1, &layer.weight, i_n as isize, 1, 0.0, &mut dx, i_n as isize, 1);
                // ReLU gate of the previous layer.
                for (g, &a) in dx.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
                delta = dx;
            }
            grads[li] = (gw, gb);
        }
        (loss / rows as f64, grads)
    }

    pub fn fit(x: &[&[f64]], y: &[u8], p: &MlpParams, seed: u64) -> Result<Self> {
        if p.batch == 0 || p.max_epochs == 0 {
            return Err(Error::Parameter("MLP batch and epochs must be >= 1".into()));
        }
        let n = x.len();
        let d = x[0].len();
        let scaler = Standardizer::fit(x);
        let data: Vec<f32> = x.iter().flat_map(|r| scaler.apply(r)).map(|v| v as f32).collect();
        let targets: Vec<f32> = y.iter().map(|&l| l as f32).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths: Vec<usize> = std::iter::once(d).chain(p.hidden.iter().copied()).chain([1]).collect();
        let layers: Vec<Dense> = widths
            .windows(2)
            .map(|w| {
                let limit = (6.0 / (w[0] + w[1]) as f32).sqrt();
                Dense {
                    inputs: w[0],
                    outputs: w[1],
                    weight: (0..w[0] * w[1]).map(|_| rng.random_range(-limit..limit)).collect(),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        let mut model = Self {
            layers,
            scaler,
            epochs_run: 0,
        };
        let mut adam: Vec<(Adam, Adam)> = model
            .layers
            .iter()
            .map(|l| (Adam::new(l.weight.len()), Adam::new(l.bias.len())))
            .collect();

        let mut order: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        let mut stale = 0;
        let mut t = 0;
        for epoch in 0..p.max_epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(p.batch) {
                let rows = chunk.len();
                let xb: Vec<f32> = chunk.iter().flat_map(|&i| &data[i * d..(i + 1) * d]).copied().collect();
                let yb: Vec<f32> = chunk.iter().map(|&i| targets[i]).collect();
                let (loss, grads) = model.gradients(&xb, &yb);
                epoch_loss += loss * rows as f64;
                t += 1;
                for ((layer, (aw, ab)), (gw, gb)) in model.layers.iter_mut().zip(&mut adam).zip(&grads) {
                    aw.step(&mut layer.weight, gw, p.lr, t);
                    ab.step(&mut layer.bias, gb, p.lr, t);
                }
            }
            epoch_loss /= n as f64;
            model.epochs_run = epoch + 1;
            log::debug!("mlp epoch {epoch}: loss {epoch_loss:.6}");
            if epoch_loss < best - p.min_delta {
                best = epoch_loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= p.patience {
                    break;
                }
            }
            if best < p.min_delta {
                // Training loss cannot improve further by min_delta.
                break;
            }
        }
        Ok(model)
    }

    pub fn to_artifact(&self) -> Artifact {
        let mut a = Artifact::new("classifier");
        for (i, l) in self.layers.iter().enumerate() {
            a.insert(format!("layer{i}.weight"), Tensor::f32(vec![l.outputs, l.inputs], l.weight.clone()));
            a.insert(format!("layer{i}.bias"), Tensor::f32(vec![l.outputs], l.bias.clone()));
        }
        let d = self.dim();
        a.insert("input.mean", Tensor::f64(vec![d], self.scaler.mean.clone()));
        a.insert("input.inv_std", Tensor::f64(vec![d], self.scaler.inv_std.clone()));
        a.meta("layers", self.layers.len());
        a.meta("epochs_run", self.epochs_run);
        a
    }

    pub fn from_artifact(a: &Artifact) -> Result<Self> {
        let count: usize = a.parse_meta("layers")?;
        let mut layers = Vec::with_capacity(count);
        for i in 0..count {
            let w = a.get(&format!("layer{i}.weight"))?;
            let b = a.get(&format!("layer{i}.bias"))?;
            let (Some(weight), Some(bias), &[outputs, inputs]) = (w.as_f32(), b.as_f32(), &w.shape[..]) else {
                return Err(Error::Format(format!("malformed MLP layer {i}")));
            };
            if bias.len() != outputs || layers.last().is_some_and(|p: &Dense| p.outputs != inputs) {
                return Err(Error::Format(format!("MLP layer {i} does not chain")));
            }
            layers.push(Dense {
                inputs,
                outputs,
                weight: weight.to_vec(),
                bias: bias.to_vec(),
            });
        }
        if layers.is_empty() {
            return Err(Error::Format("MLP artifact has no layers".into()));
        }
        Ok(Self {
            layers,
            scaler: Standardizer {
                mean: a.get("input.mean")?.to_f64(),
                inv_std: a.get("input.inv_std")?.to_f64(),
            },
            epochs_run: a.parse_meta("epochs_run")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learns_xor() {
        let pts = [[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]];
        let rows: Vec<&[f64]> = pts.iter().cycle().take(64).map(|p| p.as_slice()).collect();
        let y: Vec<u8> = pts.iter().cycle().take(64).map(|p| u8::from(p[0] != p[1])).collect();
        let params = MlpParams {
            hidden: vec![16, 8],
            lr: 0.01,
            batch: 8,
            max_epochs: 300,
            ..MlpParams::default()
        };
        let m = MlpModel::fit(&rows, &y, &params, 0).unwrap();
        for p in &pts {
            assert_eq!(u8::from(m.score(p) >= 0.5), u8::from(p[0] != p[1]), "{p:?}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 0.3 - 0.7, (i * i) as f64 * 0.1]).collect();
        let x: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let y = [0u8, 1, 0, 1, 1, 0];
        let params = MlpParams {
            hidden: vec![5, 4],
            max_epochs: 1,
            ..MlpParams::default()
        };
        let model = MlpModel::fit(&x, &y, &params, 5).unwrap();
        let xs: Vec<f32> = x.iter().flat_map(|r| model.scaler.apply(r)).map(|v| v as f32).collect();
        let ys: Vec<f32> = y.iter().map(|&v| v as f32).collect();
        let (_, grads) = model.gradients(&xs, &ys);
        let h = 1e-3f32;
        for li in 0..model.layers.len() {
            for wi in 0..model.layers[li].weight.len() {
                let mut plus = model.clone();
                plus.layers[li].weight[wi] += h;
                let mut minus = model.clone();
                minus.layers[li].weight[wi] -= h;
                let numeric = (plus.gradients(&xs, &ys).0 - minus.gradients(&xs, &ys).0) / (2.0 * h as f64);
                let analytic = grads[li].0[wi] as f64;
                assert!((numeric - analytic).abs() < 2e-3, "layer {li} w{wi}: {numeric} vs {analytic}");
            }
        }
    }
}

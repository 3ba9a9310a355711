//! Gaussian naive Bayes with a variance floor.

use super::sigmoid;
use crate::artifact::{Artifact, Tensor};
use crate::error::{Error, Result};

/// Fraction of the largest feature variance added to every variance.
const VAR_SMOOTHING: f64 = 1e-9;
/// Absolute floor used when every feature has zero variance.
const MIN_VARIANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct GnbModel {
    /// Class log-priors `[crop, weed]`.
    pub log_prior: [f64; 2],
    /// Per-class feature means and variances.
    pub mean: [Vec<f64>; 2],
    pub var: [Vec<f64>; 2],
}

impl GnbModel {
    pub fn dim(&self) -> usize {
        self.mean[0].len()
    }

    pub fn fit(x: &[&[f64]], y: &[u8]) -> Result<Self> {
        let d = x[0].len();
        let mut mean = [vec![0.0; d], vec![0.0; d]];
        let mut var = [vec![0.0; d], vec![0.0; d]];
        let mut count = [0usize; 2];
        for (row, &l) in x.iter().zip(y) {
            let c = usize::from(l);
            count[c] += 1;
            for (m, v) in mean[c].iter_mut().zip(row.iter()) {
                *m += v;
            }
        }
        if count.contains(&0) {
            return Err(Error::InvalidData("naive Bayes needs both classes".into()));
        }
        for c in 0..2 {
            mean[c].iter_mut().for_each(|m| *m /= count[c] as f64);
        }
        for (row, &l) in x.iter().zip(y) {
            let c = usize::from(l);
            for ((s, v), m) in var[c].iter_mut().zip(row.iter()).zip(&mean[c]) {
                *s += (v - m).powi(2);
            }
        }
        for c in 0..2 {
            var[c].iter_mut().for_each(|s| *s /= count[c] as f64);
        }

        let widest = var.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
        let eps = if widest > 0.0 {
            VAR_SMOOTHING * widest
        } else {
            log::warn!("all features have zero variance; applying variance floor {MIN_VARIANCE}");
            MIN_VARIANCE
        };
        var.iter_mut().flatten().for_each(|v| *v += eps);

        let n = x.len() as f64;
        Ok(Self {
            log_prior: [(count[0] as f64 / n).ln(), (count[1] as f64 / n).ln()],
            mean,
            var,
        })
    }

    fn log_joint(&self, c: usize, x: &[f64]) -> f64 {
        let ll: f64 = x
            .iter()
            .zip(&self.mean[c])
            .zip(&self.var[c])
            .map(|((v, m), s)| -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + (v - m).powi(2) / s))
            .sum();
        self.log_prior[c] + ll
    }

    /// Posterior probability of weed.
    pub fn score(&self, x: &[f64]) -> f64 {
        sigmoid(self.log_joint(1, x) - self.log_joint(0, x))
    }

    pub fn to_artifact(&self) -> Artifact {
        let d = self.dim();
        let mut a = Artifact::new("classifier");
        a.insert("log_prior", Tensor::f64(vec![2], self.log_prior.to_vec()));
        a.insert("mean", Tensor::f64(vec![2, d], self.mean.concat()));
        a.insert("var", Tensor::f64(vec![2, d], self.var.concat()));
        a
    }

    pub fn from_artifact(a: &Artifact) -> Result<Self> {
        let lp = a.get("log_prior")?.to_f64();
        let mean = a.get("mean")?.to_f64();
        let var = a.get("var")?.to_f64();
        if lp.len() != 2 || mean.len() != var.len() || mean.len() % 2 != 0 {
            return Err(Error::Format("malformed naive Bayes artifact".into()));
        }
        let d = mean.len() / 2;
        Ok(Self {
            log_prior: [lp[0], lp[1]],
            mean: [mean[..d].to_vec(), mean[d..].to_vec()],
            var: [var[..d].to_vec(), var[d..].to_vec()],
        })
    }
}

//! C-SVC solved by SMO with second-order working-set selection over a
//! precomputed kernel matrix.

use serde::{Deserialize, Serialize};

use super::sigmoid;
use crate::artifact::{Artifact, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Kernel {
    Linear,
    /// `(gamma <x, y> + coef0)^degree`
    Poly(u32),
    Rbf,
    /// `tanh(gamma <x, y> + coef0)`
    Sigmoid,
}

impl Kernel {
    fn name(self) -> String {
        match self {
            Kernel::Linear => "linear".into(),
            Kernel::Poly(d) => format!("poly{d}"),
            Kernel::Rbf => "rbf".into(),
            Kernel::Sigmoid => "sigmoid".into(),
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Kernel::Linear),
            "rbf" => Ok(Kernel::Rbf),
            "sigmoid" => Ok(Kernel::Sigmoid),
            _ => s
                .strip_prefix("poly")
                .and_then(|d| d.parse().ok())
                .map(Kernel::Poly)
                .ok_or_else(|| Error::Format(format!("unknown kernel '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmParams {
    pub c: f64,
    /// `None` selects `1 / (dim * var(X))` over all training entries.
    pub gamma: Option<f64>,
    pub coef0: f64,
    /// Stopping tolerance on the maximal KKT violation.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            c: 1.0,
            gamma: None,
            coef0: 0.0,
            tol: 1e-3,
            max_iter: 10_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub kernel: Kernel,
    pub gamma: f64,
    pub coef0: f64,
    /// Support vectors, row-major `n_sv x dim`.
    pub support: Vec<f64>,
    /// `alpha_i * y_i` per support vector.
    pub dual_coef: Vec<f64>,
    pub rho: f64,
    dim: usize,
}

const TAU: f64 = 1e-12;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl SvmModel {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_support(&self) -> usize {
        self.dual_coef.len()
    }

    fn k(&self, dotp: f64, sq_a: f64, sq_b: f64) -> f64 {
        eval_kernel(self.kernel, self.gamma, self.coef0, dotp, sq_a, sq_b)
    }

    /// Signed distance-like decision value; positive means weed.
    pub fn decision(&self, x: &[f64]) -> f64 {
        let sq_x = dot(x, x);
        let mut f = -self.rho;
        for (sv, &c) in self.support.chunks_exact(self.dim).zip(&self.dual_coef) {
            f += c * self.k(dot(sv, x), dot(sv, sv), sq_x);
        }
        f
    }

    /// Logistic squashing of the decision value (uncalibrated).
    pub fn score(&self, x: &[f64]) -> f64 {
        sigmoid(self.decision(x))
    }

    pub fn fit(x: &[&[f64]], labels: &[u8], kernel: Kernel, params: &SvmParams) -> Result<Self> {
        let n = x.len();
        if n == 0 || labels.len() != n {
            return Err(Error::dims(n, labels.len()));
        }
        let dim = x[0].len();
        let gamma = match params.gamma {
            Some(g) => g,
            None => {
                let total = (n * dim) as f64;
                let mean = x.iter().flat_map(|r| r.iter()).sum::<f64>() / total;
                let var = x.iter().flat_map(|r| r.iter()).map(|v| (v - mean).powi(2)).sum::<f64>() / total;
                if var > 0.0 {
                    1.0 / (dim as f64 * var)
                } else {
                    1.0
                }
            }
        };
        let y: Vec<f64> = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
        let kmat = kernel_matrix(x, kernel, gamma, params.coef0);
        let q = |i: usize, j: usize| y[i] * y[j] * kmat[i * n + j];
        let c = params.c;

        let mut alpha = vec![0.0; n];
        let mut grad = vec![-1.0; n];
        let up = |a: f64, yi: f64| if yi > 0.0 { a < c } else { a > 0.0 };
        let low = |a: f64, yi: f64| if yi > 0.0 { a > 0.0 } else { a < c };

        let mut iter = 0;
        loop {
            // First index: maximal violating gradient among I_up.
            let mut gmax = f64::NEG_INFINITY;
            let mut i = usize::MAX;
            for t in 0..n {
                if up(alpha[t], y[t]) && -y[t] * grad[t] >= gmax {
                    gmax = -y[t] * grad[t];
                    i = t;
                }
            }
            // Second index: greatest second-order decrease among I_low.
            let mut gmax2 = f64::NEG_INFINITY;
            let mut j = usize::MAX;
            let mut best = f64::INFINITY;
            if i != usize::MAX {
                for t in 0..n {
                    if !low(alpha[t], y[t]) {
                        continue;
                    }
                    gmax2 = gmax2.max(y[t] * grad[t]);
                    let b = gmax + y[t] * grad[t];
                    if b > 0.0 {
                        let mut a = kmat[i * n + i] + kmat[t * n + t] - 2.0 * kmat[i * n + t];
                        if a <= 0.0 {
                            a = TAU;
                        }
                        if -(b * b) / a <= best {
                            best = -(b * b) / a;
                            j = t;
                        }
                    }
                }
            }
            if i == usize::MAX || j == usize::MAX || gmax + gmax2 < params.tol {
                break;
            }
            iter += 1;
            if iter > params.max_iter {
                log::warn!("SMO stopped after {} iterations without reaching tolerance", params.max_iter);
                break;
            }

            let (old_i, old_j) = (alpha[i], alpha[j]);
            if y[i] != y[j] {
                let quad = (kmat[i * n + i] + kmat[j * n + j] + 2.0 * q(i, j)).max(TAU);
                let delta = (-grad[i] - grad[j]) / quad;
                let diff = alpha[i] - alpha[j];
                alpha[i] += delta;
                alpha[j] += delta;
                if diff > 0.0 {
                    if alpha[j] < 0.0 {
                        alpha[j] = 0.0;
                        alpha[i] = diff;
                    }
                } else if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = -diff;
                }
                if diff > 0.0 {
                    if alpha[i] > c {
                        alpha[i] = c;
                        alpha[j] = c - diff;
                    }
                } else if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = c + diff;
                }
            } else {
                let quad = (kmat[i * n + i] + kmat[j * n + j] - 2.0 * q(i, j)).max(TAU);
                let delta = (grad[i] - grad[j]) / quad;
                let sum = alpha[i] + alpha[j];
                alpha[i] -= delta;
                alpha[j] += delta;
                if sum > c {
                    if alpha[i] > c {
                        alpha[i] = c;
                        alpha[j] = sum - c;
                    }
                } else if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = sum;
                }
                if sum > c {
                    if alpha[j] > c {
                        alpha[j] = c;
                        alpha[i] = sum - c;
                    }
                } else if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = sum;
                }
            }
            let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
            for t in 0..n {
                grad[t] += q(t, i) * di + q(t, j) * dj;
            }
        }
        log::debug!("SMO finished after {iter} iterations");

        // Bias: average over free vectors, else midpoint of the feasible interval.
        let (mut ub, mut lb, mut sum, mut free) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
        for t in 0..n {
            let yg = y[t] * grad[t];
            let at_upper = alpha[t] >= c;
            let at_lower = alpha[t] <= 0.0;
            if at_upper {
                if y[t] < 0.0 {
                    ub = ub.min(yg);
                } else {
                    lb = lb.max(yg);
                }
            } else if at_lower {
                if y[t] > 0.0 {
                    ub = ub.min(yg);
                } else {
                    lb = lb.max(yg);
                }
            } else {
                free += 1;
                sum += yg;
            }
        }
        let rho = if free > 0 { sum / free as f64 } else { (ub + lb) / 2.0 };

        let mut support = Vec::new();
        let mut dual_coef = Vec::new();
        for t in (0..n).filter(|&t| alpha[t] > 0.0) {
            support.extend_from_slice(x[t]);
            dual_coef.push(alpha[t] * y[t]);
        }
        Ok(Self {
            kernel,
            gamma,
            coef0: params.coef0,
            support,
            dual_coef,
            rho,
            dim,
        })
    }

    pub fn to_artifact(&self) -> Artifact {
        let mut a = Artifact::new("classifier");
        a.insert("support", Tensor::f64(vec![self.n_support(), self.dim], self.support.clone()));
        a.insert("dual_coef", Tensor::f64(vec![self.n_support()], self.dual_coef.clone()));
        a.insert("rho", Tensor::f64(vec![1], vec![self.rho]));
        a.insert("gamma", Tensor::f64(vec![1], vec![self.gamma]));
        a.insert("coef0", Tensor::f64(vec![1], vec![self.coef0]));
        a.meta("kernel", self.kernel.name());
        a.meta("dim", self.dim);
        a
    }

    pub fn from_artifact(a: &Artifact) -> Result<Self> {
        let scalar = |name: &str| -> Result<f64> {
            a.get(name)?
                .to_f64()
                .first()
                .copied()
                .ok_or_else(|| Error::Format(format!("empty tensor '{name}'")))
        };
        let dim: usize = a.parse_meta("dim")?;
        let support = a.get("support")?.to_f64();
        let dual_coef = a.get("dual_coef")?.to_f64();
        if support.len() != dual_coef.len() * dim {
            return Err(Error::dims(dual_coef.len() * dim, support.len()));
        }
        Ok(Self {
            kernel: Kernel::parse(a.get_meta("kernel")?)?,
            gamma: scalar("gamma")?,
            coef0: scalar("coef0")?,
            support,
            dual_coef,
            rho: scalar("rho")?,
            dim,
        })
    }
}

fn eval_kernel(kernel: Kernel, gamma: f64, coef0: f64, dotp: f64, sq_a: f64, sq_b: f64) -> f64 {
    match kernel {
        Kernel::Linear => dotp,
        Kernel::Poly(d) => (gamma * dotp + coef0).powi(d as i32),
        Kernel::Rbf => (-gamma * (sq_a + sq_b - 2.0 * dotp).max(0.0)).exp(),
        Kernel::Sigmoid => (gamma * dotp + coef0).tanh(),
    }
}

/// Full `n x n` kernel matrix from one Gram product.
fn kernel_matrix(x: &[&[f64]], kernel: Kernel, gamma: f64, coef0: f64) -> Vec<f64> {
    let n = x.len();
    let d = x[0].len();
    let flat: Vec<f64> = x.iter().flat_map(|r| r.iter().copied()).collect();
    let mut gram = vec![0.0; n * n];
    // SAFETY: `flat` is n x d row-major, `gram` is n x n row-major; strides match.
    unsafe {
        matrixmultiply::dgemm(
            n,
            d,
            n,
            1.0,
            flat.as_ptr(),
            d as isize,
            1,
            flat.as_ptr(),
            1,
            d as isize,
            0.0,
            gram.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    let sq: Vec<f64> = (0..n).map(|i| gram[i * n + i]).collect();
    for i in 0..n {
        for j in 0..n {
            let v = &mut gram[i * n + j];
            *v = eval_kernel(kernel, gamma, coef0, *v, sq[i], sq[j]);
        }
    }
    gram
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_point_problem_matches_closed_form() {
        // Max-margin separator of (-1,0) and (1,0) is x0 = 0 with w = (1,0),
        // so alpha = 0.5 for both points and f(x) = x0.
        let a = [-1.0, 0.0];
        let b = [1.0, 0.0];
        let m = SvmModel::fit(&[&a, &b], &[0, 1], Kernel::Linear, &SvmParams::default()).unwrap();
        assert!(m.rho.abs() < 1e-9);
        for (&c, s) in m.dual_coef.iter().zip([-0.5, 0.5]) {
            assert!((c - s).abs() < 1e-9);
        }
        assert!((m.decision(&[0.5, 3.0]) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn solution_satisfies_kkt_conditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..80).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let labels: Vec<u8> = rows.iter().map(|r| u8::from(r[0] + 0.3 * r[1] + rng.random_range(-0.3..0.3) > 0.0)).collect();
        let x: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let p = SvmParams { tol: 1e-6, ..SvmParams::default() };
        for kernel in [Kernel::Linear, Kernel::Rbf, Kernel::Poly(2)] {
            let m = SvmModel::fit(&x, &labels, kernel, &p).unwrap();
            assert!(m.dual_coef.iter().sum::<f64>().abs() < 1e-9);
            // Reconstruct every alpha (zero for non-support vectors) and check margins.
            for (r, &l) in rows.iter().zip(&labels) {
                let y = if l == 1 { 1.0 } else { -1.0 };
                let alpha = m
                    .support
                    .chunks_exact(4)
                    .zip(&m.dual_coef)
                    .find(|(sv, _)| *sv == r.as_slice())
                    .map_or(0.0, |(_, c)| c * y);
                assert!((-1e-12..=p.c + 1e-12).contains(&alpha));
                let margin = y * m.decision(r);
                if alpha < 1e-9 {
                    assert!(margin >= 1.0 - 1e-4, "{kernel:?} {margin}");
                } else if alpha > p.c - 1e-9 {
                    assert!(margin <= 1.0 + 1e-4, "{kernel:?} {margin}");
                } else {
                    assert!((margin - 1.0).abs() < 1e-4, "{kernel:?} {margin}");
                }
            }
        }
    }

    #[test]
    fn separable_blobs_are_fit_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|i| {
                let c = if i % 2 == 0 { -3.0 } else { 3.0 };
                vec![c + rng.random_range(-1.0..1.0), rng.random_range(-5.0..5.0)]
            })
            .collect();
        let labels: Vec<u8> = (0..100).map(|i| (i % 2) as u8).collect();
        let x: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let m = SvmModel::fit(&x, &labels, Kernel::Linear, &SvmParams::default()).unwrap();
        for (r, &l) in rows.iter().zip(&labels) {
            assert_eq!(u8::from(m.score(r) >= 0.5), l);
        }
    }

    #[test]
    fn kernel_names_round_trip() {
        for k in [Kernel::Linear, Kernel::Poly(2), Kernel::Poly(3), Kernel::Rbf, Kernel::Sigmoid] {
            assert_eq!(Kernel::parse(&k.name()).unwrap(), k);
        }
    }
}

//! Tile feature vectors from the stride-16 backbone stage, and exact PCA.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::artifact::{fingerprint_vectors, Artifact, Tensor};
use crate::backbone::ResNet50;
use crate::data_io::Split;
use crate::error::{Error, Result};
use crate::tiling::Tile;

/// Raw feature length for a 50x50 tile: 4 x 4 x 1024.
pub const RAW_LEN: usize = 16384;
/// Requested reduced dimensionality.
pub const DEFAULT_K: usize = 2048;
/// Eigenvalues below this fraction of the largest are treated as zero.
const RELATIVE_EIGEN_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    /// `(row, col)` of the source tile.
    pub tile_ref: (usize, usize),
    pub source_id: String,
    pub split: Split,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Flattens the stride-16 stage activation of every tile (channel-major).
///
/// Tiles of side other than 50 are accepted; their vectors have whatever
/// length the stage produces and a warning is logged.
pub fn extract_features(tiles: &[&Tile], split: Split, backbone: &ResNet50) -> Result<Vec<FeatureVector>> {
    if tiles.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(t) = tiles.iter().find(|t| t.side != 50) {
        log::warn!("tile side {} != 50: feature length will differ from {RAW_LEN}", t.side);
    }
    let images: Vec<_> = tiles.iter().map(|t| &t.pixels).collect();
    let acts = backbone.forward(&images, false)?;
    Ok(tiles
        .iter()
        .zip(acts)
        .map(|(t, a)| FeatureVector {
            values: a.stage3.iter().map(|&v| v as f64).collect(),
            tile_ref: (t.row, t.col),
            source_id: t.pixels.source_id.clone(),
            split,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k x dim`, row-major, rows orthonormal.
    pub components: Vec<f64>,
    pub k: usize,
    pub dim: usize,
    /// Variance along each component, non-increasing.
    pub explained_variance: Vec<f64>,
    pub requested_k: usize,
    pub n_train: usize,
    pub fingerprint: String,
}

impl PcaModel {
    pub fn component(&self, i: usize) -> &[f64] {
        &self.components[i * self.dim..(i + 1) * self.dim]
    }

    pub fn clamped(&self) -> bool {
        self.k < self.requested_k
    }

    pub fn project(&self, v: &FeatureVector) -> Result<FeatureVector> {
        Ok(FeatureVector {
            values: self.project_values(&v.values)?,
            ..v.clone()
        })
    }

    pub fn project_values(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::dims(self.dim, x.len()));
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok((0..self.k)
            .map(|i| self.component(i).iter().zip(&centered).map(|(c, v)| c * v).sum())
            .collect())
    }

    /// Maps reduced coordinates back to the input space.
    pub fn reconstruct(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.k {
            return Err(Error::dims(self.k, y.len()));
        }
        let mut out = self.mean.clone();
        for (i, &yi) in y.iter().enumerate() {
            for (o, c) in out.iter_mut().zip(self.component(i)) {
                *o += yi * c;
            }
        }
        Ok(out)
    }

    pub fn to_artifact(&self) -> Artifact {
        let mut a = Artifact::new("pca");
        a.insert("mean", Tensor::f64(vec![self.dim], self.mean.clone()));
        a.insert("components", Tensor::f64(vec![self.k, self.dim], self.components.clone()));
        a.insert("explained_variance", Tensor::f64(vec![self.k], self.explained_variance.clone()));
        a.meta("k", self.k);
        a.meta("dim", self.dim);
        a.meta("requested_k", self.requested_k);
        a.meta("clamped", self.clamped());
        a.meta("n_train", self.n_train);
        a.meta("fingerprint", &self.fingerprint);
        a
    }

    pub fn from_artifact(a: &Artifact) -> Result<Self> {
        a.expect_kind("pca")?;
        let k: usize = a.parse_meta("k")?;
        let dim: usize = a.parse_meta("dim")?;
        let model = Self {
            mean: a.get("mean")?.to_f64(),
            components: a.get("components")?.to_f64(),
            explained_variance: a.get("explained_variance")?.to_f64(),
            k,
            dim,
            requested_k: a.parse_meta("requested_k")?,
            n_train: a.parse_meta("n_train")?,
            fingerprint: a.get_meta("fingerprint")?.to_string(),
        };
        if model.mean.len() != dim || model.components.len() != k * dim || model.explained_variance.len() != k {
            return Err(Error::Format("pca artifact tensors disagree with k/dim".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_artifact().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_artifact(&Artifact::load(path)?)
    }
}

/// Fits PCA on training vectors by exact eigendecomposition.
///
/// `k` is clamped to `min(k, n, dim)`; directions beyond the data's rank
/// (zero variance) are completed deterministically to an orthonormal set.
pub fn fit_pca(train: &[FeatureVector], k: usize) -> Result<PcaModel> {
    if let Some(v) = train.iter().find(|v| v.split != Split::Train) {
        return Err(Error::Leakage(format!(
            "fit_pca received a {:?}-split vector from {}",
            v.split, v.source_id
        )));
    }
    let vectors: Vec<&[f64]> = train.iter().map(|v| v.values.as_slice()).collect();
    let mut model = fit_pca_values(&vectors, k)?;
    model.fingerprint = fingerprint_vectors(vectors.iter().copied());
    Ok(model)
}

fn fit_pca_values(vectors: &[&[f64]], k: usize) -> Result<PcaModel> {
    let n = vectors.len();
    if n < 2 {
        return Err(Error::InvalidData(format!("PCA needs at least 2 vectors, got {n}")));
    }
    if k == 0 {
        return Err(Error::Parameter("k must be positive".into()));
    }
    let dim = vectors[0].len();
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::dims(dim, v.len()));
    }
    let k_eff = k.min(n).min(dim);
    if k_eff < k {
        log::warn!("PCA k clamped from {k} to {k_eff} (n = {n}, dim = {dim})");
    }

    let mut mean = vec![0.0f64; dim];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v.iter()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    // centered data, n x dim row-major
    let mut x = Vec::with_capacity(n * dim);
    for v in vectors {
        x.extend(v.iter().zip(&mean).map(|(a, m)| a - m));
    }

    let (mut eigvals, mut comps) = if n <= dim {
        gram_route(&x, n, dim)
    } else {
        covariance_route(&x, n, dim)
    };
    eigvals.truncate(k_eff);
    comps.truncate(k_eff * dim);
    let scale = eigvals.first().copied().unwrap_or(0.0).max(0.0);
    let rank = eigvals
        .iter()
        .take_while(|&&l| l > RELATIVE_EIGEN_TOL * scale && l > 0.0)
        .count();
    // Replace numerically-null directions by a deterministic orthonormal completion.
    comps.truncate(rank * dim);
    for l in eigvals.iter_mut().skip(rank) {
        *l = 0.0;
    }
    complete_orthonormal(&mut comps, dim, k_eff);
    for i in 0..k_eff {
        fix_sign(&mut comps[i * dim..(i + 1) * dim]);
    }
    Ok(PcaModel {
        mean,
        components: comps,
        k: k_eff,
        dim,
        explained_variance: eigvals,
        requested_k: k,
        n_train: n,
        fingerprint: String::new(),
    })
}

/// `n x n` Gram matrix of the centered data; eigenvectors mapped back to the input space.
fn gram_route(x: &[f64], n: usize, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gram = vec![0.0f64; n * n];
    // SAFETY: x is n x dim row-major, gram is n x n row-major; both fully in bounds.
    unsafe {
        matrixmultiply::dgemm(
            n, dim, n, 1.0, x.as_ptr(), dim as isize, 1, x.as_ptr(), 1, dim as isize, 0.0,
            gram.as_mut_ptr(), n as isize, 1,
        );
    }
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, &gram));
    let order = descending(eig.eigenvalues.as_slice());
    let mut vals = Vec::with_capacity(n);
    let mut comps = Vec::with_capacity(n * dim);
    for &j in &order {
        let lambda = eig.eigenvalues[j];
        vals.push(lambda / (n - 1) as f64);
        let v = eig.eigenvectors.column(j);
        let mut u = vec![0.0f64; dim];
        for (i, &vi) in v.iter().enumerate() {
            for (uu, xx) in u.iter_mut().zip(&x[i * dim..(i + 1) * dim]) {
                *uu += vi * xx;
            }
        }
        let norm = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 0.0 {
            u.iter_mut().for_each(|a| *a /= norm);
        }
        comps.extend(u);
    }
    (vals, comps)
}

fn covariance_route(x: &[f64], n: usize, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut cov = vec![0.0f64; dim * dim];
    // SAFETY: x is n x dim row-major, cov is dim x dim row-major.
    unsafe {
        matrixmultiply::dgemm(
            dim, n, dim, 1.0 / (n - 1) as f64, x.as_ptr(), 1, dim as isize, x.as_ptr(), dim as isize, 1,
            0.0, cov.as_mut_ptr(), dim as isize, 1,
        );
    }
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(dim, dim, &cov));
    let order = descending(eig.eigenvalues.as_slice());
    let vals = order.iter().map(|&j| eig.eigenvalues[j]).collect();
    let comps = order
        .iter()
        .flat_map(|&j| eig.eigenvectors.column(j).iter().copied().collect::<Vec<_>>())
        .collect();
    (vals, comps)
}

/// Indices sorting `vals` descending (ties keep index order).
fn descending(vals: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    idx
}

/// Extends the orthonormal rows in `comps` to `k` rows by Gram-Schmidt over
/// the standard basis vectors in index order.
fn complete_orthonormal(comps: &mut Vec<f64>, dim: usize, k: usize) {
    let mut e = 0;
    while comps.len() < k * dim && e < dim {
        let mut u = vec![0.0f64; dim];
        u[e] = 1.0;
        e += 1;
        // two passes for numerical orthogonality
        for _ in 0..2 {
            for r in 0..comps.len() / dim {
                let row = &comps[r * dim..(r + 1) * dim];
                let dot: f64 = row.iter().zip(&u).map(|(a, b)| a * b).sum();
                for (uu, rr) in u.iter_mut().zip(row) {
                    *uu -= dot * rr;
                }
            }
        }
        let norm = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            comps.extend(u.iter().map(|a| a / norm));
        }
    }
}

/// Flips `v` so that its largest-magnitude coordinate (first on ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, a) in v.iter().enumerate() {
        if a.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|a| *a = -*a);
    }
}

#[derive(Serialize)]
struct FeatureDumpRow<'a> {
    source_id: &'a str,
    row: usize,
    col: usize,
    split: Split,
    values: &'a [f64],
}

/// Writes feature vectors as a JSON array for auditing.
pub fn write_features_json(vectors: &[FeatureVector], path: &Path) -> Result<()> {
    let rows: Vec<FeatureDumpRow> = vectors
        .iter()
        .map(|v| FeatureDumpRow {
            source_id: &v.source_id,
            row: v.tile_ref.0,
            col: v.tile_ref.1,
            split: v.split,
            values: &v.values,
        })
        .collect();
    let text = serde_json::to_string(&rows)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fv(values: Vec<f64>) -> FeatureVector {
        FeatureVector {
            values,
            tile_ref: (0, 0),
            source_id: "t".into(),
            split: Split::Train,
        }
    }

    #[test]
    fn toy_cloud_first_component_is_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<FeatureVector> = (0..400)
            .map(|_| {
                let t: f64 = rng.random_range(-5.0..5.0);
                let e: f64 = rng.random_range(-0.01..0.01);
                fv(vec![t + e, t - e])
            })
            .collect();
        let m = fit_pca(&data, 2).unwrap();
        let c = m.component(0);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((c[0] - r).abs() < 1e-3 && (c[1] - r).abs() < 1e-3, "{c:?}");
        // n > dim takes the covariance route; check the Gram route too
        let small: Vec<FeatureVector> = data[..2].to_vec();
        assert_eq!(fit_pca(&small, 2).unwrap().k, 2);
    }

    #[test]
    fn exact_subspace_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let data: Vec<FeatureVector> = (0..12)
            .map(|_| {
                let (s, t): (f64, f64) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                fv(a.iter().zip(&b).map(|(x, y)| s * x + t * y + 0.5).collect())
            })
            .collect();
        let m = fit_pca(&data, 2).unwrap();
        for v in &data {
            let back = m.reconstruct(&m.project_values(&v.values).unwrap()).unwrap();
            for (x, y) in back.iter().zip(&v.values) {
                assert!((x - y).abs() < 1e-8);
            }
        }
        let zero = m.project_values(&m.mean).unwrap();
        assert!(zero.iter().all(|z| z.abs() < 1e-12));
    }

    #[test]
    fn clamps_k_and_completes_basis() {
        let data: Vec<FeatureVector> = (0..5).map(|i| fv(vec![i as f64, 0.0, 1.0, 2.0 * i as f64])).collect();
        let m = fit_pca(&data, 10).unwrap();
        assert_eq!((m.k, m.requested_k), (4, 10));
        assert!(m.clamped());
        for i in 0..m.k {
            for j in 0..m.k {
                let d: f64 = m.component(i).iter().zip(m.component(j)).map(|(a, b)| a * b).sum();
                assert!((d - f64::from(u8::from(i == j))).abs() < 1e-9);
            }
        }
        assert!(m.explained_variance.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn test_split_vectors_are_rejected() {
        let mut data = vec![fv(vec![1.0, 2.0]), fv(vec![2.0, 1.0])];
        data[1].split = Split::Test;
        assert!(matches!(fit_pca(&data, 1), Err(Error::Leakage(_))));
    }

    #[test]
    fn artifact_round_trip() {
        let data: Vec<FeatureVector> = (0..6).map(|i| fv(vec![i as f64, (i * i) as f64, 1.0])).collect();
        let m = fit_pca(&data, 2).unwrap();
        let back = PcaModel::from_artifact(&Artifact::from_bytes(&m.to_artifact().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(m, back);
    }
}

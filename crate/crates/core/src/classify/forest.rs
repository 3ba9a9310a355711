//! Random forest of gini-split CART trees on bootstrap samples.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::artifact::{Artifact, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ForestParams {
    pub trees: usize,
    /// Candidate features per split; `None` means `round(sqrt(dim))`.
    pub max_features: Option<usize>,
    pub min_samples_split: usize,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            trees: 100,
            max_features: None,
            min_samples_split: 2,
            bootstrap: true,
        }
    }
}

/// Flattened node. Leaves have `feature == LEAF`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Node {
    feature: usize,
    threshold: f64,
    left: usize,
    right: usize,
    /// Fraction of weed among training samples reaching the node.
    weed: f64,
}

const LEAF: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub dim: usize,
    trees: Vec<Vec<Node>>,
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

struct Builder<'a> {
    x: &'a [&'a [f64]],
    y: &'a [u8],
    max_features: usize,
    min_split: usize,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn build(&mut self, idx: &mut [usize], rng: &mut ChaCha8Rng) -> usize {
        let n = idx.len();
        let pos = idx.iter().filter(|&&i| self.y[i] == 1).count();
        let id = self.nodes.len();
        self.nodes.push(Node {
            feature: LEAF,
            threshold: 0.0,
            left: 0,
            right: 0,
            weed: pos as f64 / n as f64,
        });
        if pos == 0 || pos == n || n < self.min_split {
            return id;
        }
        let Some((feature, threshold)) = self.best_split(idx, pos, rng) else {
            return id;
        };
        let mid = partition_in_place(idx, |&i| self.x[i][feature] <= threshold);
        let (l, r) = idx.split_at_mut(mid);
        let left = self.build(l, rng);
        let right = self.build(r, rng);
        self.nodes[id] = Node {
            feature,
            threshold,
            left,
            right,
            weed: self.nodes[id].weed,
        };
        id
    }

    /// Best gini decrease over `max_features` random non-constant features.
    fn best_split(&self, idx: &[usize], pos: usize, rng: &mut ChaCha8Rng) -> Option<(usize, f64)> {
        let n = idx.len();
        let dim = self.x[0].len();
        let mut features: Vec<usize> = (0..dim).collect();
        features.shuffle(rng);
        let parent = gini(pos, n);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut tried = 0;
        let mut vals: Vec<(f64, u8)> = Vec::with_capacity(n);
        for f in features {
            if tried >= self.max_features {
                break;
            }
            vals.clear();
            vals.extend(idx.iter().map(|&i| (self.x[i][f], self.y[i])));
            vals.sort_by(|a, b| a.0.total_cmp(&b.0));
            if vals[0].0 == vals[n - 1].0 {
                continue;
            }
            tried += 1;
            let mut left_pos = 0;
            for k in 1..n {
                left_pos += usize::from(vals[k - 1].1);
                if vals[k].0 == vals[k - 1].0 {
                    continue;
                }
                let w = k as f64 / n as f64;
                let child = w * gini(left_pos, k) + (1.0 - w) * gini(pos - left_pos, n - k);
                let gain = parent - child;
                if best.is_none_or(|(g, _, _)| gain > g) {
                    let mut thr = 0.5 * (vals[k - 1].0 + vals[k].0);
                    if thr >= vals[k].0 {
                        thr = vals[k - 1].0;
                    }
                    best = Some((gain, f, thr));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

fn partition_in_place<T>(v: &mut [T], pred: impl Fn(&T) -> bool) -> usize {
    let mut mid = 0;
    for i in 0..v.len() {
        if pred(&v[i]) {
            v.swap(i, mid);
            mid += 1;
        }
    }
    mid
}

impl ForestModel {
    pub fn fit(x: &[&[f64]], y: &[u8], p: &ForestParams, seed: u64) -> Result<Self> {
        if p.trees == 0 {
            return Err(Error::Parameter("forest needs at least one tree".into()));
        }
        let n = x.len();
        let dim = x[0].len();
        let max_features = p
            .max_features
            .unwrap_or_else(|| ((dim as f64).sqrt().round() as usize).max(1))
            .clamp(1, dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trees = Vec::with_capacity(p.trees);
        for _ in 0..p.trees {
            let mut idx: Vec<usize> = if p.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            let mut b = Builder {
                x,
                y,
                max_features,
                min_split: p.min_samples_split.max(2),
                nodes: Vec::new(),
            };
            b.build(&mut idx, &mut rng);
            trees.push(b.nodes);
        }
        Ok(Self { dim, trees })
    }

    /// Mean over trees of the leaf weed fraction.
    pub fn score(&self, x: &[f64]) -> f64 {
        let total: f64 = self
            .trees
            .iter()
            .map(|t| {
                let mut i = 0;
                while t[i].feature != LEAF {
                    i = if x[t[i].feature] <= t[i].threshold { t[i].left } else { t[i].right };
                }
                t[i].weed
            })
            .sum();
        total / self.trees.len() as f64
    }

    pub fn to_artifact(&self) -> Artifact {
        let mut a = Artifact::new("classifier");
        let mut offsets = Vec::with_capacity(self.trees.len());
        let mut rows = Vec::new();
        for t in &self.trees {
            offsets.push(rows.len() as f64 / 5.0);
            for nd in t {
                let f = if nd.feature == LEAF { -1.0 } else { nd.feature as f64 };
                rows.extend_from_slice(&[f, nd.threshold, nd.left as f64, nd.right as f64, nd.weed]);
            }
        }
        a.insert("tree_offsets", Tensor::f64(vec![offsets.len()], offsets));
        a.insert("nodes", Tensor::f64(vec![rows.len() / 5, 5], rows));
        a.meta("dim", self.dim);
        a
    }

    pub fn from_artifact(a: &Artifact) -> Result<Self> {
        let offsets: Vec<usize> = a.get("tree_offsets")?.to_f64().iter().map(|&o| o as usize).collect();
        let nodes = a.get("nodes")?.to_f64();
        let total = nodes.len() / 5;
        let mut trees = Vec::with_capacity(offsets.len());
        for (k, &start) in offsets.iter().enumerate() {
            let end = offsets.get(k + 1).copied().unwrap_or(total);
            if start >= end || end > total {
                return Err(Error::Format("malformed forest offsets".into()));
            }
            let len = end - start;
            let tree: Vec<Node> = nodes[start * 5..end * 5]
                .chunks_exact(5)
                .map(|r| Node {
                    feature: if r[0] < 0.0 { LEAF } else { r[0] as usize },
                    threshold: r[1],
                    left: r[2] as usize,
                    right: r[3] as usize,
                    weed: r[4],
                })
                .collect();
            if tree.iter().any(|nd| nd.feature != LEAF && (nd.left >= len || nd.right >= len)) {
                return Err(Error::Format("forest node points outside its tree".into()));
            }
            trees.push(tree);
        }
        Ok(Self {
            dim: a.parse_meta("dim")?,
            trees,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_tree_without_bootstrap_fits_training_data() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![(i % 7) as f64, (i / 7) as f64]).collect();
        let y: Vec<u8> = rows.iter().map(|r| u8::from((r[0] > 3.0) ^ (r[1] > 2.0))).collect();
        let x: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let p = ForestParams {
            trees: 1,
            max_features: Some(2),
            bootstrap: false,
            ..ForestParams::default()
        };
        let m = ForestModel::fit(&x, &y, &p, 0).unwrap();
        for (r, &l) in rows.iter().zip(&y) {
            assert_eq!(m.score(r), l as f64);
        }
    }

    #[test]
    fn gini_matches_hand_values() {
        assert_eq!(gini(0, 10), 0.0);
        assert!((gini(5, 10) - 0.5).abs() < 1e-15);
        assert!((gini(1, 4) - 0.375).abs() < 1e-15);
    }
}

//! Class-imbalance correction applied to training data only.

use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LabeledExample, Sampler};
use crate::data_io::Split;
use crate::error::{Error, Result};

/// Neighbours considered when interpolating synthetic minority examples.
pub const DEFAULT_SMOTE_K: usize = 5;

fn check_train_only(examples: &[LabeledExample]) -> Result<()> {
    match examples.iter().find(|e| e.split != Split::Train) {
        Some(e) => Err(Error::Leakage(format!(
            "resampling received {:?}-split example {}",
            e.split, e.source
        ))),
        None => Ok(()),
    }
}

/// (majority label, majority indices, minority indices). Ties pick crop as majority.
fn partition(examples: &[LabeledExample]) -> (u8, Vec<usize>, Vec<usize>) {
    let (zeros, ones): (Vec<usize>, Vec<usize>) = (0..examples.len()).partition(|&i| examples[i].label == 0);
    if ones.len() > zeros.len() {
        (1, ones, zeros)
    } else {
        (0, zeros, ones)
    }
}

pub fn resample(examples: &[LabeledExample], sampler: Sampler, seed: u64) -> Result<Vec<LabeledExample>> {
    match sampler {
        Sampler::None => {
            check_train_only(examples)?;
            Ok(examples.to_vec())
        }
        Sampler::Random => resample_random(examples, seed),
        Sampler::Smote => resample_smote(examples, DEFAULT_SMOTE_K, seed),
    }
}

/// Meets in the middle: the majority class is undersampled without
/// replacement and the minority oversampled with replacement so both reach
/// the midpoint of the two class counts (rounded down).
pub fn resample_random(examples: &[LabeledExample], seed: u64) -> Result<Vec<LabeledExample>> {
    check_train_only(examples)?;
    let (_, major, minor) = partition(examples);
    if minor.is_empty() {
        return Err(Error::InvalidData("random resampling needs both classes".into()));
    }
    let target = (major.len() + minor.len()) / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut keep: Vec<usize> = index::sample(&mut rng, major.len(), target)
        .into_iter()
        .map(|i| major[i])
        .collect();
    keep.sort_unstable();
    let mut out: Vec<LabeledExample> = keep.iter().map(|&i| examples[i].clone()).collect();
    out.extend(minor.iter().map(|&i| examples[i].clone()));
    for _ in minor.len()..target {
        let &i = minor.choose(&mut rng).expect("minority is non-empty");
        let mut e = examples[i].clone();
        e.source = format!("{}#dup", e.source);
        out.push(e);
    }
    Ok(out)
}

/// Synthesizes `majority - minority` new minority examples, each on the
/// segment between a random minority example and one of its `k` nearest
/// minority neighbours (Euclidean).
pub fn resample_smote(examples: &[LabeledExample], k: usize, seed: u64) -> Result<Vec<LabeledExample>> {
    check_train_only(examples)?;
    if k == 0 {
        return Err(Error::Parameter("SMOTE needs k >= 1".into()));
    }
    let (_, major, minor) = partition(examples);
    if minor.len() <= k {
        return Err(Error::InvalidData(format!(
            "SMOTE needs more than k={k} minority examples, found {}",
            minor.len()
        )));
    }
    let vecs: Vec<&[f64]> = minor
        .iter()
        .map(|&i| examples[i].vector())
        .collect::<Result<_>>()?;
    let neighbours = nearest_neighbours(&vecs, k);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = examples.to_vec();
    let template = &examples[minor[0]];
    for n in 0..major.len() - minor.len() {
        let a = rng.random_range(0..vecs.len());
        let b = *neighbours[a].choose(&mut rng).expect("k >= 1");
        let u: f64 = rng.random();
        let values = vecs[a]
            .iter()
            .zip(vecs[b])
            .map(|(&x, &y)| x + u * (y - x))
            .collect();
        out.push(LabeledExample::features(
            values,
            template.label,
            Split::Train,
            format!("smote{n}:{}+{}", examples[minor[a]].source, examples[minor[b]].source),
        ));
    }
    Ok(out)
}

/// Indices of the `k` nearest other points for every point; ties broken by index.
fn nearest_neighbours(points: &[&[f64]], k: usize) -> Vec<Vec<usize>> {
    (0..points.len())
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..points.len())
                .filter(|&j| j != i)
                .map(|j| {
                    let s: f64 = points[i].iter().zip(points[j]).map(|(a, b)| (a - b).powi(2)).sum();
                    (s, j)
                })
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn imbalanced(n_crop: usize, n_weed: usize) -> Vec<LabeledExample> {
        (0..n_crop)
            .map(|i| LabeledExample::features(vec![i as f64, 0.0], 0, Split::Train, format!("c{i}")))
            .chain((0..n_weed).map(|i| {
                LabeledExample::features(vec![100.0 + i as f64, (i % 3) as f64], 1, Split::Train, format!("w{i}"))
            }))
            .collect()
    }

    fn count(v: &[LabeledExample], label: u8) -> usize {
        v.iter().filter(|e| e.label == label).count()
    }

    #[test]
    fn random_meets_at_midpoint() {
        let data = imbalanced(90, 10);
        let out = resample_random(&data, 3).unwrap();
        assert_eq!(count(&out, 0), 50);
        assert_eq!(count(&out, 1), 50);
        // Undersampling is without replacement.
        let mut crops: Vec<_> = out.iter().filter(|e| e.label == 0).map(|e| e.source.clone()).collect();
        crops.sort();
        crops.dedup();
        assert_eq!(crops.len(), 50);
        // Every original minority example survives.
        for i in 0..10 {
            assert!(out.iter().any(|e| e.source == format!("w{i}")));
        }
    }

    #[test]
    fn smote_balances_and_interpolates_within_minority_hull() {
        let data = imbalanced(40, 8);
        let out = resample_smote(&data, 5, 1).unwrap();
        assert_eq!(count(&out, 0), 40);
        assert_eq!(count(&out, 1), 40);
        for e in out.iter().filter(|e| e.source.starts_with("smote")) {
            let v = e.vector().unwrap();
            assert!((100.0..=107.0).contains(&v[0]), "{v:?}");
            assert!((0.0..=2.0).contains(&v[1]), "{v:?}");
        }
    }

    #[test]
    fn hundred_to_twenty_policy_counts() {
        let data = imbalanced(100, 20);
        let r = resample_random(&data, 0).unwrap();
        assert_eq!((count(&r, 0), count(&r, 1)), (60, 60));
        let s = resample_smote(&data, 5, 0).unwrap();
        assert_eq!(s.iter().filter(|e| e.source.starts_with("smote")).count(), 80);
        assert_eq!((count(&s, 0), count(&s, 1)), (100, 100));
    }

    #[test]
    fn two_point_minority_stays_on_the_segment() {
        let mut data = imbalanced(12, 0);
        data.push(LabeledExample::features(vec![1.0, 2.0], 1, Split::Train, "p"));
        data.push(LabeledExample::features(vec![4.0, -1.0], 1, Split::Train, "q"));
        let out = resample_smote(&data, 1, 4).unwrap();
        for e in out.iter().filter(|e| e.source.starts_with("smote")) {
            let v = e.vector().unwrap();
            let t = (v[0] - 1.0) / 3.0;
            assert!((0.0..=1.0).contains(&t));
            assert!((v[1] - (2.0 - 3.0 * t)).abs() < 1e-12);
        }
    }

    #[test]
    fn smote_needs_more_than_k_minority() {
        assert!(resample_smote(&imbalanced(20, 5), 5, 0).is_err());
        assert!(resample_smote(&imbalanced(20, 6), 5, 0).is_ok());
    }

    #[test]
    fn test_split_is_refused() {
        let mut data = imbalanced(10, 4);
        data[11].split = Split::Test;
        for s in [Sampler::None, Sampler::Random, Sampler::Smote] {
            assert!(matches!(resample(&data, s, 0), Err(Error::Leakage(_))), "{s:?}");
        }
    }

    #[test]
    fn seeded_resampling_is_reproducible() {
        let data = imbalanced(30, 7);
        assert_eq!(resample_random(&data, 9).unwrap(), resample_random(&data, 9).unwrap());
        assert_eq!(resample_smote(&data, 5, 9).unwrap(), resample_smote(&data, 5, 9).unwrap());
    }
}

use std::ops::Deref;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Cohort;
use crate::error::{Error, Result};

/// Training portion of a split.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSet(pub Cohort);

impl Deref for TrainSet {
    type Target = Cohort;
    fn deref(&self) -> &Cohort {
        &self.0
    }
}

/// Held-out portion of a split. Every read is counted so callers can
/// confirm the held-out data was not touched during fitting.
#[derive(Debug)]
pub struct HeldOut {
    cohort: Cohort,
    reads: AtomicUsize,
}

impl HeldOut {
    pub fn new(cohort: Cohort) -> Self {
        Self {
            cohort,
            reads: AtomicUsize::new(0),
        }
    }

    pub fn cohort(&self) -> &Cohort {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.cohort
    }

    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.cohort.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cohort.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct Fold {
    pub train: Cohort,
    pub validation: Cohort,
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Random train/held-out split with `round(ratio · n)` training patients.
pub fn train_test_split(cohort: &Cohort, ratio: f64, seed: u64) -> Result<(TrainSet, HeldOut)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("split ratio {ratio} outside (0, 1)")));
    }
    let idx = shuffled(cohort.len(), seed);
    let n_train = (ratio * cohort.len() as f64).round() as usize;
    let (a, b) = idx.split_at(n_train);
    Ok((TrainSet(cohort.subset(a)), HeldOut::new(cohort.subset(b))))
}

/// `k` disjoint validation folds covering the cohort; fold sizes differ by at most one.
pub fn k_folds(cohort: &Cohort, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::invalid(format!("k-fold needs k ≥ 2, got {k}")));
    }
    if cohort.len() < k {
        return Err(Error::invalid(format!("cohort of {} is smaller than k={k}", cohort.len())));
    }
    let idx = shuffled(cohort.len(), seed);
    let n = idx.len();
    Ok((0..k)
        .map(|f| {
            let (lo, hi) = (f * n / k, (f + 1) * n / k);
            let train: Vec<usize> = idx[..lo].iter().chain(&idx[hi..]).copied().collect();
            Fold {
                train: cohort.subset(&train),
                validation: cohort.subset(&idx[lo..hi]),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Dims, PatientRecord, ULayout};

    fn cohort(n: usize) -> Cohort {
        let dims = Dims { j: 1, m: 1, l: 2, k: 1, t: 1 };
        let patients = (0..n)
            .map(|i| PatientRecord {
                b: vec![i as f64],
                x: vec![vec![0.0]],
                u: vec![vec![1.0, 0.0]],
                m: vec![vec![1]],
                length: 1,
            })
            .collect();
        Cohort::new("c", dims, ULayout::local_clock_only(1), patients).unwrap()
    }

    fn ids(c: &Cohort) -> Vec<usize> {
        c.patients().iter().map(|p| p.b[0] as usize).collect()
    }

    #[test]
    fn ratio_sizes_and_determinism() {
        let c = cohort(100);
        let (tr, ho) = train_test_split(&c, 0.75, 9).unwrap();
        assert_eq!((tr.len(), ho.len()), (75, 25));
        let (tr2, ho2) = train_test_split(&c, 0.75, 9).unwrap();
        assert_eq!(ids(&tr), ids(&tr2));
        assert_eq!(ids(ho.cohort()), ids(ho2.cohort()));
        let mut all = ids(&tr);
        all.extend(ids(ho.cohort()));
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(ho.reads(), 2);
    }

    #[test]
    fn five_folds_of_twenty() {
        let c = cohort(100);
        let folds = k_folds(&c, 5, 1).unwrap();
        let mut seen = Vec::new();
        for f in &folds {
            assert_eq!(f.validation.len(), 20);
            assert_eq!(f.train.len(), 80);
            seen.extend(ids(&f.validation));
        }
        seen.sort();
        assert_eq!(seen, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn too_small_for_k() {
        assert!(k_folds(&cohort(3), 5, 0).is_err());
        assert!(train_test_split(&cohort(3), 1.0, 0).is_err());
    }
}

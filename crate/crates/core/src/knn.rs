//! Exact brute-force k-nearest-neighbours classification.
//!
//! Neighbours are ranked by `(distance, train_index)` so every query has a
//! single well-defined answer. Majority-vote ties go to the class of the
//! nearest neighbour among the tied classes.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{stratified_folds, DataError, FoldAssignment, Label};
use crate::imaging::{FeatureKind, FeatureVector};

#[derive(Debug, Error)]
pub enum KnnError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl From<DataError> for KnnError {
    fn from(e: DataError) -> Self {
        KnnError::Config(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum DistanceMetric {
    Euclidean,
    Manhattan,
    /// Count of positions that differ exactly. Intended for binary features.
    Hamming,
    Minkowski {
        p: f64,
    },
}

impl DistanceMetric {
    pub fn minkowski(p: f64) -> Result<Self, KnnError> {
        let m = DistanceMetric::Minkowski { p };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), KnnError> {
        match *self {
            DistanceMetric::Minkowski { p } if !(p >= 1.0 && p.is_finite()) => {
                Err(KnnError::InvalidParameter(format!("minkowski exponent must be finite and >= 1, got {p}")))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DistanceMetric::Euclidean => "euclidean",
            DistanceMetric::Manhattan => "manhattan",
            DistanceMetric::Hamming => "hamming",
            DistanceMetric::Minkowski { .. } => "minkowski",
        }
    }

    #[inline]
    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            DistanceMetric::Euclidean => a.iter().zip(b).map(|(p, q)| (q - p) * (q - p)).sum::<f64>().sqrt(),
            DistanceMetric::Manhattan => a.iter().zip(b).map(|(p, q)| (q - p).abs()).sum(),
            DistanceMetric::Hamming => a.iter().zip(b).filter(|(p, q)| p != q).count() as f64,
            DistanceMetric::Minkowski { p } => {
                a.iter().zip(b).map(|(x, y)| (y - x).abs().powf(p)).sum::<f64>().powf(p.recip())
            }
        }
    }
}

pub fn distance(metric: DistanceMetric, a: &[f64], b: &[f64]) -> Result<f64, KnnError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(KnnError::DimensionMismatch { left: a.len(), right: b.len() });
    }
    metric.validate()?;
    Ok(metric.eval(a, b))
}

/// Row-major `N x D` matrix of samples of one feature kind.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    kind: Option<FeatureKind>,
    dims: usize,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn from_rows(dims: usize, rows: impl IntoIterator<Item = Vec<f64>>) -> Result<Self, KnnError> {
        if dims == 0 {
            return Err(KnnError::InvalidParameter("feature dimension must be >= 1".into()));
        }
        let mut values = Vec::new();
        for row in rows {
            if row.len() != dims {
                return Err(KnnError::DimensionMismatch { left: dims, right: row.len() });
            }
            values.extend(row);
        }
        Ok(Self { kind: None, dims, values })
    }

    pub fn from_features(features: &[FeatureVector]) -> Result<Self, KnnError> {
        let first = features.first().ok_or_else(|| KnnError::InvalidParameter("no feature vectors".into()))?;
        if let Some(f) = features.iter().find(|f| f.kind != first.kind) {
            return Err(KnnError::InvalidParameter(format!("mixed feature kinds {:?} and {:?}", first.kind, f.kind)));
        }
        let mut m = Self::from_rows(first.dims(), features.iter().map(|f| f.values.clone()))?;
        m.kind = Some(first.kind);
        Ok(m)
    }

    pub fn kind(&self) -> Option<FeatureKind> {
        self.kind
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dims
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dims..(i + 1) * self.dims]
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { kind: self.kind, dims: self.dims, values: self.values.iter().map(|v| v * s).collect() }
    }

    fn select(&self, rows: &[usize]) -> Self {
        let mut values = Vec::with_capacity(rows.len() * self.dims);
        for &r in rows {
            values.extend_from_slice(self.row(r));
        }
        Self { kind: self.kind, dims: self.dims, values }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub train_index: usize,
    pub distance: f64,
    pub label: Label,
}

/// The `k` nearest training rows, sorted ascending by `(distance, train_index)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSet {
    pub entries: Vec<Neighbor>,
}

impl NeighborSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.entries.iter().map(|n| n.train_index).collect()
    }

    fn prefix(&self, k: usize) -> NeighborSet {
        NeighborSet { entries: self.entries[..k].to_vec() }
    }
}

fn neighbor_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance.total_cmp(&b.distance).then(a.train_index.cmp(&b.train_index))
}

/// Training set, labels and search configuration. The training data is the
/// whole model.
#[derive(Clone, Debug)]
pub struct KnnModel {
    features: FeatureMatrix,
    labels: Vec<Label>,
    k: usize,
    metric: DistanceMetric,
}

impl KnnModel {
    pub fn new(
        features: FeatureMatrix,
        labels: Vec<Label>,
        k: usize,
        metric: DistanceMetric,
    ) -> Result<Self, KnnError> {
        metric.validate()?;
        if labels.len() != features.len() {
            return Err(KnnError::InvalidParameter(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if k == 0 || k > features.len() {
            return Err(KnnError::Config(format!("k = {k} must lie in 1..={} (training set size)", features.len())));
        }
        Ok(Self { features, labels, k, metric })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn metric(&self) -> DistanceMetric {
        self.metric
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Exact k nearest neighbours of `query`.
    pub fn k_nearest(&self, query: &[f64]) -> Result<NeighborSet, KnnError> {
        self.ranked(query, self.k)
    }

    pub fn classify(&self, query: &[f64]) -> Result<Label, KnnError> {
        Ok(predict(&self.k_nearest(query)?))
    }

    /// The `take` nearest rows in neighbour order.
    fn ranked(&self, query: &[f64], take: usize) -> Result<NeighborSet, KnnError> {
        if query.len() != self.features.dims {
            return Err(KnnError::DimensionMismatch { left: self.features.dims, right: query.len() });
        }
        if take == 0 || take > self.len() {
            return Err(KnnError::Config(format!("k = {take} exceeds training set size {}", self.len())));
        }
        let mut all: Vec<Neighbor> = (0..self.len())
            .map(|i| Neighbor {
                train_index: i,
                distance: self.metric.eval(self.features.row(i), query),
                label: self.labels[i],
            })
            .collect();
        if take < all.len() {
            all.select_nth_unstable_by(take - 1, neighbor_order);
            all.truncate(take);
        }
        all.sort_unstable_by(neighbor_order);
        Ok(NeighborSet { entries: all })
    }
}

fn class_counts(neighbors: &NeighborSet) -> [usize; 2] {
    let mut counts = [0usize; 2];
    for n in &neighbors.entries {
        counts[n.label.index()] += 1;
    }
    counts
}

/// Modal label; on a tie, the label of the nearest neighbour among the tied
/// classes.
pub fn predict(neighbors: &NeighborSet) -> Label {
    assert!(!neighbors.is_empty(), "predict needs at least one neighbour");
    let counts = class_counts(neighbors);
    let best = counts.iter().copied().max().unwrap_or(0);
    neighbors
        .entries
        .iter()
        .map(|n| n.label)
        .find(|l| counts[l.index()] == best)
        .expect("some class attains the maximum")
}

/// Normalized neighbour frequency of each class, indexed by label.
pub fn class_probabilities(neighbors: &NeighborSet) -> [f64; 2] {
    assert!(!neighbors.is_empty(), "class probabilities need at least one neighbour");
    let counts = class_counts(neighbors);
    let k = neighbors.len() as f64;
    [counts[0] as f64 / k, counts[1] as f64 / k]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub fold_digest: String,
    pub rows: Vec<CvReport>,
}

impl SweepReport {
    /// Row with the highest mean accuracy; the smallest k wins ties.
    pub fn best(&self) -> Option<&CvReport> {
        self.rows.iter().fold(None, |best: Option<&CvReport>, r| match best {
            Some(b) if b.mean_accuracy >= r.mean_accuracy => Some(b),
            _ => Some(r),
        })
    }
}

/// Stratified k-fold cross-validation at a single `k`.
pub fn cross_validate(
    features: &FeatureMatrix,
    labels: &[Label],
    k: usize,
    folds: usize,
    metric: DistanceMetric,
    seed: u64,
) -> Result<CvReport, KnnError> {
    let assignment = stratified_folds(labels, folds, seed)?;
    cross_validate_with(features, labels, k, &assignment, metric)
}

pub fn cross_validate_with(
    features: &FeatureMatrix,
    labels: &[Label],
    k: usize,
    assignment: &FoldAssignment,
    metric: DistanceMetric,
) -> Result<CvReport, KnnError> {
    let mut reports = sweep_with(features, labels, &[k], assignment, metric)?;
    Ok(reports.remove(0))
}

/// Cross-validation for every `k` in `k_values` over one shared fold
/// assignment.
pub fn k_sweep(
    features: &FeatureMatrix,
    labels: &[Label],
    k_values: &[usize],
    folds: usize,
    metric: DistanceMetric,
    seed: u64,
) -> Result<SweepReport, KnnError> {
    let assignment = stratified_folds(labels, folds, seed)?;
    let rows = sweep_with(features, labels, k_values, &assignment, metric)?;
    Ok(SweepReport { fold_digest: assignment.digest(), rows })
}

/// Shared engine: each held-out query is ranked once against its training
/// folds up to the largest requested k, and every k reads a prefix of that
/// ranking. A prefix of the `(distance, index)` order is exactly the k-NN
/// set, so this equals running each k separately.
fn sweep_with(
    features: &FeatureMatrix,
    labels: &[Label],
    k_values: &[usize],
    assignment: &FoldAssignment,
    metric: DistanceMetric,
) -> Result<Vec<CvReport>, KnnError> {
    metric.validate()?;
    if k_values.is_empty() || k_values.contains(&0) {
        return Err(KnnError::Config("k values must be non-empty and each >= 1".into()));
    }
    if features.len() != labels.len() || assignment.assignment.len() != labels.len() {
        return Err(KnnError::InvalidParameter(format!(
            "{} rows, {} labels, {} fold slots",
            features.len(),
            labels.len(),
            assignment.assignment.len()
        )));
    }
    let max_k = *k_values.iter().max().expect("non-empty");
    let mut fold_acc = vec![Vec::with_capacity(assignment.folds); k_values.len()];
    for fold in 0..assignment.folds {
        let (train_rows, test_rows) = assignment.split(fold);
        if train_rows.len() < max_k {
            return Err(KnnError::Config(format!(
                "fold {fold} trains on {} samples, fewer than k = {max_k}",
                train_rows.len()
            )));
        }
        if test_rows.is_empty() {
            return Err(KnnError::Config(format!("fold {fold} holds no samples")));
        }
        let model = KnnModel::new(
            features.select(&train_rows),
            train_rows.iter().map(|&r| labels[r]).collect(),
            max_k,
            metric,
        )?;
        let ranked: Vec<NeighborSet> =
            test_rows.par_iter().map(|&r| model.ranked(features.row(r), max_k)).collect::<Result<_, _>>()?;
        for (slot, &k) in k_values.iter().enumerate() {
            let correct =
                ranked.iter().zip(&test_rows).filter(|(set, &r)| predict(&set.prefix(k)) == labels[r]).count();
            fold_acc[slot].push(correct as f64 / test_rows.len() as f64);
        }
    }
    Ok(k_values
        .iter()
        .zip(fold_acc)
        .map(|(&k, accs)| {
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            CvReport { k, fold_accuracies: accs, mean_accuracy: mean }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SeededPrng;
    use proptest::prelude::*;

    fn lab(i: u8) -> Label {
        Label::from_index(i as usize).unwrap()
    }

    fn random_vec(rng: &mut SeededPrng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect()
    }

    fn set(entries: &[(usize, f64, u8)]) -> NeighborSet {
        NeighborSet {
            entries: entries.iter().map(|&(i, d, l)| Neighbor { train_index: i, distance: d, label: lab(l) }).collect(),
        }
    }

    #[test]
    fn distance_examples() {
        assert_eq!(distance(DistanceMetric::Euclidean, &[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert_eq!(distance(DistanceMetric::Manhattan, &[1.0, 2.0], &[4.0, 6.0]).unwrap(), 7.0);
        assert_eq!(distance(DistanceMetric::Hamming, &[0.0, 1.0, 1.0, 0.0], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 2.0);
    }

    #[test]
    fn distance_errors() {
        let err = distance(DistanceMetric::Euclidean, &[0.0; 3], &[0.0; 4]).unwrap_err();
        assert!(matches!(err, KnnError::DimensionMismatch { left: 3, right: 4 }));
        assert!(err.to_string().contains('3') && err.to_string().contains('4'));
        assert!(matches!(
            distance(DistanceMetric::Minkowski { p: 0.5 }, &[0.0], &[1.0]),
            Err(KnnError::InvalidParameter(_))
        ));
        assert!(DistanceMetric::minkowski(0.9).is_err());
    }

    #[test]
    fn minkowski_two_is_euclidean() {
        let mut rng = SeededPrng::new(1);
        for _ in 0..100 {
            let a = random_vec(&mut rng, 9);
            let b = random_vec(&mut rng, 9);
            let e = distance(DistanceMetric::Euclidean, &a, &b).unwrap();
            let m = distance(DistanceMetric::Minkowski { p: 2.0 }, &a, &b).unwrap();
            assert!((e - m).abs() <= 1e-9 * e.max(1e-300));
        }
    }

    #[test]
    fn nearest_point_and_self_match() {
        let m = FeatureMatrix::from_rows(2, vec![vec![0.0, 0.0], vec![10.0, 10.0]]).unwrap();
        let model = KnnModel::new(m, vec![lab(0), lab(1)], 1, DistanceMetric::Euclidean).unwrap();
        assert_eq!(model.k_nearest(&[1.0, 1.0]).unwrap().indices(), vec![0]);
        let hit = model.k_nearest(&[10.0, 10.0]).unwrap();
        assert_eq!(hit.indices(), vec![1]);
        assert_eq!(hit.entries[0].distance, 0.0);
    }

    #[test]
    fn k_larger_than_training_set_is_rejected() {
        let m = FeatureMatrix::from_rows(1, vec![vec![0.0]]).unwrap();
        assert!(matches!(KnnModel::new(m, vec![lab(0)], 2, DistanceMetric::Euclidean), Err(KnnError::Config(_))));
    }

    #[test]
    fn k_nearest_matches_sort_all_oracle() {
        let mut rng = SeededPrng::new(77);
        let rows: Vec<Vec<f64>> = (0..50).map(|_| random_vec(&mut rng, 5)).collect();
        let labels: Vec<Label> = (0..50).map(|i| lab((i % 2) as u8)).collect();
        let model =
            KnnModel::new(FeatureMatrix::from_rows(5, rows.clone()).unwrap(), labels, 7, DistanceMetric::Euclidean)
                .unwrap();
        for _ in 0..20 {
            let q = random_vec(&mut rng, 5);
            let mut oracle: Vec<(f64, usize)> = rows
                .iter()
                .enumerate()
                .map(|(i, r)| (r.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(), i))
                .collect();
            oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expect: Vec<usize> = oracle[..7].iter().map(|p| p.1).collect();
            assert_eq!(model.k_nearest(&q).unwrap().indices(), expect);
        }
    }

    #[test]
    fn vote_and_tie_rule() {
        assert_eq!(predict(&set(&[(0, 0.1, 1), (1, 0.2, 1), (2, 0.3, 0)])), lab(1));
        assert_eq!(predict(&set(&[(4, 0.1, 0), (2, 0.5, 1)])), lab(0));
        assert_eq!(predict(&set(&[(4, 0.1, 1), (2, 0.5, 0)])), lab(1));
    }

    #[test]
    fn vote_matches_counting_oracle() {
        let mut rng = SeededPrng::new(8);
        for _ in 0..200 {
            let entries: Vec<(usize, f64, u8)> = (0..10).map(|i| (i, i as f64, rng.below(2) as u8)).collect();
            let ones = entries.iter().filter(|e| e.2 == 1).count();
            let expected = match ones.cmp(&5) {
                Ordering::Greater => 1,
                Ordering::Less => 0,
                Ordering::Equal => entries[0].2,
            };
            assert_eq!(predict(&set(&entries)), lab(expected));
        }
    }

    #[test]
    fn probabilities() {
        let seven_zero: Vec<(usize, f64, u8)> = (0..10).map(|i| (i, i as f64, if i < 7 { 0 } else { 1 })).collect();
        assert_eq!(class_probabilities(&set(&seven_zero)), [0.7, 0.3]);
        let all_one: Vec<(usize, f64, u8)> = (0..5).map(|i| (i, 0.0, 1)).collect();
        assert_eq!(class_probabilities(&set(&all_one)), [0.0, 1.0]);
        assert_eq!(class_probabilities(&set(&[(0, 0.0, 0), (1, 0.0, 1), (2, 0.0, 1), (3, 0.0, 0)])), [0.5, 0.5]);
    }

    fn separable(n: usize) -> (FeatureMatrix, Vec<Label>) {
        let mut rng = SeededPrng::new(4);
        let labels: Vec<Label> = (0..n).map(|i| lab((i % 2) as u8)).collect();
        let rows = labels
            .iter()
            .map(|l| {
                let base = if l.index() == 0 { 0.0 } else { 10.0 };
                (0..4).map(|_| base + rng.next_f64()).collect()
            })
            .collect::<Vec<Vec<f64>>>();
        (FeatureMatrix::from_rows(4, rows).unwrap(), labels)
    }

    #[test]
    fn separable_cv_is_perfect() {
        let (m, labels) = separable(40);
        let r = cross_validate(&m, &labels, 1, 4, DistanceMetric::Euclidean, 1).unwrap();
        assert_eq!(r.fold_accuracies.len(), 4);
        assert_eq!(r.mean_accuracy, 1.0);
        let s = k_sweep(&m, &labels, &[1], 4, DistanceMetric::Euclidean, 1).unwrap();
        assert_eq!(s.rows.len(), 1);
        assert_eq!((s.rows[0].k, s.rows[0].mean_accuracy), (1, 1.0));
    }

    #[test]
    fn shuffled_labels_are_chance_level() {
        let mut rng = SeededPrng::new(400);
        let rows: Vec<Vec<f64>> = (0..400).map(|_| random_vec(&mut rng, 6)).collect();
        let mut labels: Vec<Label> = (0..400).map(|i| lab((i % 2) as u8)).collect();
        rng.shuffle(&mut labels);
        let m = FeatureMatrix::from_rows(6, rows).unwrap();
        let r = cross_validate(&m, &labels, 5, 4, DistanceMetric::Euclidean, 9).unwrap();
        assert!((r.mean_accuracy - 0.5).abs() <= 0.1, "{}", r.mean_accuracy);
    }

    #[test]
    fn sweep_equals_independent_runs_and_is_deterministic() {
        let mut rng = SeededPrng::new(12);
        let rows: Vec<Vec<f64>> = (0..80).map(|_| random_vec(&mut rng, 3)).collect();
        let labels: Vec<Label> = rows.iter().map(|r| lab((r[0] + 0.3 * r[1] > 0.0) as u8)).collect();
        let m = FeatureMatrix::from_rows(3, rows).unwrap();
        let sweep = k_sweep(&m, &labels, &[1, 5, 10], 4, DistanceMetric::Manhattan, 3).unwrap();
        assert_eq!(sweep.rows.len(), 3);
        for row in &sweep.rows {
            let single = cross_validate(&m, &labels, row.k, 4, DistanceMetric::Manhattan, 3).unwrap();
            assert_eq!(&single, row);
        }
        let again = k_sweep(&m, &labels, &[1, 5, 10], 4, DistanceMetric::Manhattan, 3).unwrap();
        assert_eq!(sweep, again);
    }

    #[test]
    fn fold_smaller_than_k_is_config_error() {
        let (m, labels) = separable(8);
        assert!(matches!(cross_validate(&m, &labels, 7, 4, DistanceMetric::Euclidean, 0), Err(KnnError::Config(_))));
    }

    fn metric_strategy() -> impl Strategy<Value = DistanceMetric> {
        prop_oneof![
            Just(DistanceMetric::Euclidean),
            Just(DistanceMetric::Manhattan),
            (1.0f64..5.0).prop_map(|p| DistanceMetric::Minkowski { p }),
        ]
    }

    proptest! {
        #[test]
        fn metric_axioms(m in metric_strategy(), seed in any::<u64>(), d in 1usize..12) {
            let mut rng = SeededPrng::new(seed);
            let a = random_vec(&mut rng, d);
            let b = random_vec(&mut rng, d);
            let c = random_vec(&mut rng, d);
            let dist = |x: &[f64], y: &[f64]| distance(m, x, y).unwrap();
            prop_assert_eq!(dist(&a, &a), 0.0);
            prop_assert_eq!(dist(&a, &b), dist(&b, &a));
            prop_assert!(dist(&a, &c) <= dist(&a, &b) + dist(&b, &c) + 1e-9);
        }

        #[test]
        fn minkowski_reductions(seed in any::<u64>(), d in 1usize..20) {
            let mut rng = SeededPrng::new(seed);
            let a = random_vec(&mut rng, d);
            let b = random_vec(&mut rng, d);
            let man = distance(DistanceMetric::Manhattan, &a, &b).unwrap();
            let euc = distance(DistanceMetric::Euclidean, &a, &b).unwrap();
            let m1 = distance(DistanceMetric::Minkowski { p: 1.0 }, &a, &b).unwrap();
            let m2 = distance(DistanceMetric::Minkowski { p: 2.0 }, &a, &b).unwrap();
            prop_assert!((man - m1).abs() <= 1e-9 * man.max(1e-300));
            prop_assert!((euc - m2).abs() <= 1e-9 * euc.max(1e-300));
        }

        #[test]
        fn predict_is_argmax_of_probabilities(labels in proptest::collection::vec(0u8..2, 1..20)) {
            let entries: Vec<(usize, f64, u8)> = labels.iter().enumerate().map(|(i, &l)| (i, i as f64, l)).collect();
            let s = set(&entries);
            let p = class_probabilities(&s);
            let expected = match p[0].partial_cmp(&p[1]).unwrap() {
                Ordering::Greater => lab(0),
                Ordering::Less => lab(1),
                Ordering::Equal => s.entries[0].label,
            };
            prop_assert_eq!(predict(&s), expected);
            prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-15);
        }
    }
}

//! Prototype-guided pseudo-labeling.
//!
//! Instead of clustering the target features, each feature takes the label of
//! its nearest prototype in two banks: class means of labeled source features
//! (later replaced by means of the pseudo-labeled target features), and target
//! features drawn at random. One labeling pass over `N` features against `K`
//! prototypes costs exactly `N * K` distance evaluations, which
//! [`DistanceCounter`] records.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Embedding of one detected person box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceFeature {
    pub vector: Vec<f64>,
    pub image_id: u32,
    pub box_id: u32,
}

impl InstanceFeature {
    /// Builds a feature from `vector` scaled to unit length.
    pub fn new(vector: Vec<f64>, image_id: u32, box_id: u32) -> Self {
        let norm = l2_norm(&vector);
        let vector = if norm > 0.0 { vector.into_iter().map(|v| v / norm).collect() } else { vector };
        Self { vector, image_id, box_id }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

impl AsRef<[f64]> for InstanceFeature {
    fn as_ref(&self) -> &[f64] {
        &self.vector
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankKind {
    Source,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    vectors: Vec<Vec<f64>>,
    labels: Vec<u32>,
    kind: BankKind,
}

impl PrototypeBank {
    pub fn new(vectors: Vec<Vec<f64>>, labels: Vec<u32>, kind: BankKind) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::NoLabeledFeatures);
        }
        if vectors.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!("{} prototypes, {} labels", vectors.len(), labels.len())));
        }
        let dim = vectors[0].len();
        for v in &vectors {
            if v.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: v.len() });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteFeature);
            }
        }
        let unique: HashSet<_> = labels.iter().collect();
        if unique.len() != labels.len() {
            return Err(Error::ShapeMismatch("prototype labels must be unique".into()));
        }
        Ok(Self { vectors, labels, kind })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn kind(&self) -> BankKind {
        self.kind
    }
}

/// Running count of pairwise distance evaluations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DistanceCounter {
    evaluations: u64,
}

impl DistanceCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn evaluations(&self) -> u64 {
        self.evaluations
    }

    fn record(&mut self, n: u64) {
        self.evaluations += n;
    }

    pub fn merge(&mut self, other: DistanceCounter) {
        self.evaluations += other.evaluations;
    }
}

/// Class means of labeled features, one prototype per distinct label, in
/// ascending label order. Means are not re-normalized.
pub fn init_source_prototypes<F: AsRef<[f64]>>(features: &[F], labels: &[u32]) -> Result<PrototypeBank> {
    if features.is_empty() {
        return Err(Error::NoLabeledFeatures);
    }
    if features.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} features, {} labels", features.len(), labels.len())));
    }
    let dim = features[0].as_ref().len();
    let mut sums: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for (f, &l) in features.iter().zip(labels) {
        let f = f.as_ref();
        if f.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: f.len() });
        }
        let entry = sums.entry(l).or_insert_with(|| (vec![0.0; dim], 0));
        for (s, v) in entry.0.iter_mut().zip(f) {
            *s += v;
        }
        entry.1 += 1;
    }
    let (labels, vectors) = sums
        .into_iter()
        .map(|(l, (s, n))| (l, s.into_iter().map(|v| v / n as f64).collect()))
        .unzip();
    PrototypeBank::new(vectors, labels, BankKind::Source)
}

/// `n_random` distinct features drawn uniformly without replacement, labeled `0..n_random`.
pub fn sample_random_prototypes<F: AsRef<[f64]>>(features: &[F], n_random: usize, seed: u64) -> Result<PrototypeBank> {
    if n_random == 0 || n_random > features.len() {
        return Err(Error::NotEnoughTargetFeatures { requested: n_random, available: features.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, features.len(), n_random);
    let vectors = picks.iter().map(|i| features[i].as_ref().to_vec()).collect();
    PrototypeBank::new(vectors, (0..n_random as u32).collect(), BankKind::Random)
}

/// Nearest-prototype assignment of every feature against one bank.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Row of the chosen prototype in the bank.
    pub indices: Vec<usize>,
    pub labels: Vec<u32>,
    pub distances: Vec<f64>,
}

fn nearest(f: &[f64], bank: &PrototypeBank) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, p) in bank.vectors.iter().enumerate() {
        let d = euclidean(f, p);
        // strict comparison keeps the lowest index on ties
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Label every feature with its nearest prototype (one neighbor, Euclidean,
/// ties to the lowest prototype index). Adds `N * K` to `counter`.
pub fn assign_pseudo_labels<F: AsRef<[f64]>>(
    features: &[F],
    bank: &PrototypeBank,
    counter: &mut DistanceCounter,
) -> Result<Assignment> {
    let dim = bank.dim();
    if let Some(f) = features.iter().find(|f| f.as_ref().len() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, got: f.as_ref().len() });
    }
    let mut out = Assignment {
        indices: Vec::with_capacity(features.len()),
        labels: Vec::with_capacity(features.len()),
        distances: Vec::with_capacity(features.len()),
    };
    for f in features {
        let (k, d) = nearest(f.as_ref(), bank);
        out.indices.push(k);
        out.labels.push(bank.labels[k]);
        out.distances.push(d);
    }
    counter.record((features.len() * bank.len()) as u64);
    Ok(out)
}

/// [`assign_pseudo_labels`] split over `workers` scoped threads; the
/// per-partition counters are summed into `counter`.
pub fn assign_pseudo_labels_partitioned<F: AsRef<[f64]> + Sync>(
    features: &[F],
    bank: &PrototypeBank,
    workers: usize,
    counter: &mut DistanceCounter,
) -> Result<Assignment> {
    let chunk = features.len().div_ceil(workers.max(1)).max(1);
    let parts: Vec<Result<(Assignment, DistanceCounter)>> = std::thread::scope(|s| {
        let handles: Vec<_> = features
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    let mut c = DistanceCounter::new();
                    assign_pseudo_labels(part, bank, &mut c).map(|a| (a, c))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("labeling worker panicked")).collect()
    });
    let mut out = Assignment { indices: Vec::new(), labels: Vec::new(), distances: Vec::new() };
    for part in parts {
        let (a, c) = part?;
        out.indices.extend(a.indices);
        out.labels.extend(a.labels);
        out.distances.extend(a.distances);
        counter.merge(c);
    }
    Ok(out)
}

/// Replace each prototype by the mean of the features assigned to it and drop
/// prototypes that received nothing. Labels of surviving prototypes are kept.
pub fn update_source_prototypes<F: AsRef<[f64]>>(
    bank: &PrototypeBank,
    features: &[F],
    assignment: &Assignment,
) -> Result<PrototypeBank> {
    if features.len() != assignment.indices.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} features, {} assignments",
            features.len(),
            assignment.indices.len()
        )));
    }
    let dim = bank.dim();
    let mut sums = vec![vec![0.0; dim]; bank.len()];
    let mut counts = vec![0usize; bank.len()];
    for (f, &k) in features.iter().zip(&assignment.indices) {
        let f = f.as_ref();
        if f.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: f.len() });
        }
        if k >= bank.len() {
            return Err(Error::ShapeMismatch(format!("assignment index {k} outside bank of {}", bank.len())));
        }
        for (s, v) in sums[k].iter_mut().zip(f) {
            *s += v;
        }
        counts[k] += 1;
    }
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    for ((sum, n), &label) in sums.into_iter().zip(counts).zip(&bank.labels) {
        if n == 0 {
            continue;
        }
        vectors.push(sum.into_iter().map(|v| v / n as f64).collect());
        labels.push(label);
    }
    if vectors.is_empty() {
        return Err(Error::LabelingCollapsed);
    }
    PrototypeBank::new(vectors, labels, bank.kind)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub l_source: u32,
    pub l_random: u32,
    pub d_source: f64,
    pub d_random: f64,
}

/// One label from each bank for every instance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabelSet {
    pub entries: Vec<PseudoLabel>,
}

impl PseudoLabelSet {
    pub fn from_assignments(source: &Assignment, random: &Assignment) -> Result<Self> {
        if source.labels.len() != random.labels.len() {
            return Err(Error::ShapeMismatch("assignments of different lengths".into()));
        }
        let entries = (0..source.labels.len())
            .map(|i| PseudoLabel {
                l_source: source.labels[i],
                l_random: random.labels[i],
                d_source: source.distances[i],
                d_random: random.distances[i],
            })
            .collect();
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn source_labels(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.l_source).collect()
    }

    pub fn random_labels(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.l_random).collect()
    }
}

/// Label against both banks in one pass; returns the label set together with
/// the source-bank assignment (needed for the prototype update).
pub fn label_with_banks<F: AsRef<[f64]>>(
    features: &[F],
    source: &PrototypeBank,
    random: &PrototypeBank,
    counter: &mut DistanceCounter,
) -> Result<(PseudoLabelSet, Assignment)> {
    let s = assign_pseudo_labels(features, source, counter)?;
    let r = assign_pseudo_labels(features, random, counter)?;
    Ok((PseudoLabelSet::from_assignments(&s, &r)?, s))
}

/// Naive all-pairs reference used to cost clustering-style labeling: evaluates
/// every unordered pair once (`N(N-1)/2` distances) and returns each feature's
/// nearest other feature.
pub fn pairwise_reference<F: AsRef<[f64]>>(features: &[F], counter: &mut DistanceCounter) -> Vec<Option<usize>> {
    let n = features.len();
    let mut best: Vec<(Option<usize>, f64)> = vec![(None, f64::INFINITY); n];
    for i in 0..n {
        for j in i + 1..n {
            let d = euclidean(features[i].as_ref(), features[j].as_ref());
            if d < best[i].1 {
                best[i] = (Some(j), d);
            }
            if d < best[j].1 {
                best[j] = (Some(i), d);
            }
        }
    }
    counter.record((n * n.saturating_sub(1) / 2) as u64);
    best.into_iter().map(|(i, _)| i).collect()
}

/// BCubed F-score of a predicted labeling against ground-truth identities.
pub fn bcubed_f1(predicted: &[u32], truth: &[u32]) -> f64 {
    assert_eq!(predicted.len(), truth.len());
    let n = predicted.len();
    if n == 0 {
        return 0.0;
    }
    let mut pair: HashMap<(u32, u32), usize> = HashMap::new();
    let mut by_pred: HashMap<u32, usize> = HashMap::new();
    let mut by_truth: HashMap<u32, usize> = HashMap::new();
    for (&p, &t) in predicted.iter().zip(truth) {
        *pair.entry((p, t)).or_default() += 1;
        *by_pred.entry(p).or_default() += 1;
        *by_truth.entry(t).or_default() += 1;
    }
    let (mut precision, mut recall) = (0.0, 0.0);
    for (&p, &t) in predicted.iter().zip(truth) {
        let both = pair[&(p, t)] as f64;
        precision += both / by_pred[&p] as f64;
        recall += both / by_truth[&t] as f64;
    }
    precision /= n as f64;
    recall /= n as f64;
    2.0 * precision * recall / (precision + recall)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn source_prototype_is_class_mean() {
        let f = vec![vec![1.0, 1.0], vec![3.0, 3.0], vec![5.0, -1.0]];
        let bank = init_source_prototypes(&f, &[0, 0, 7]).unwrap();
        assert_eq!(bank.labels(), &[0, 7]);
        assert_eq!(bank.vectors()[0], vec![2.0, 2.0]);
        assert_eq!(bank.vectors()[1], vec![5.0, -1.0]);
        assert_eq!(bank.kind(), BankKind::Source);
        let empty: Vec<Vec<f64>> = vec![];
        assert!(matches!(init_source_prototypes(&empty, &[]), Err(Error::NoLabeledFeatures)));
    }

    #[test]
    fn random_bank_sampling() {
        let f: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 0.0]).collect();
        let a = sample_random_prototypes(&f, 10, 4).unwrap();
        let mut rows: Vec<f64> = a.vectors().iter().map(|v| v[0]).collect();
        rows.sort_by(f64::total_cmp);
        assert_eq!(rows, (0..10).map(|i| i as f64).collect::<Vec<_>>());
        assert_eq!(a, sample_random_prototypes(&f, 10, 4).unwrap());
        assert!(matches!(
            sample_random_prototypes(&f, 11, 4),
            Err(Error::NotEnoughTargetFeatures { requested: 11, available: 10 })
        ));
    }

    #[test]
    fn nearest_and_tie_break() {
        let bank = PrototypeBank::new(vec![vec![0.0, 0.0], vec![10.0, 0.0]], vec![0, 1], BankKind::Source).unwrap();
        let mut c = DistanceCounter::new();
        let a = assign_pseudo_labels(&[vec![1.0, 0.0], vec![5.0, 0.0], vec![9.0, 0.0]], &bank, &mut c).unwrap();
        assert_eq!(a.labels, vec![0, 0, 1]);
        assert_eq!(c.evaluations(), 6);
        let err = assign_pseudo_labels(&[vec![1.0]], &bank, &mut c).unwrap_err();
        assert!(err.to_string().contains("dimension mismatch"));
    }

    #[test]
    fn update_drops_empty_and_keeps_labels() {
        let bank =
            PrototypeBank::new(vec![vec![0.0], vec![5.0], vec![100.0]], vec![10, 11, 12], BankKind::Source).unwrap();
        let f = vec![vec![1.0], vec![2.0], vec![3.0]];
        let mut c = DistanceCounter::new();
        let a = assign_pseudo_labels(&f, &bank, &mut c).unwrap();
        let updated = update_source_prototypes(&bank, &f, &a).unwrap();
        assert_eq!(updated.labels(), &[10, 11]);
        assert_eq!(updated.vectors(), &[vec![1.5], vec![3.0]]);

        let all_one = Assignment { indices: vec![2, 2, 2], labels: vec![12; 3], distances: vec![0.0; 3] };
        let shrunk = update_source_prototypes(&bank, &f, &all_one).unwrap();
        assert_eq!(shrunk.len(), 1);
        assert_eq!(shrunk.vectors()[0], vec![2.0]);
        assert_eq!(shrunk.labels(), &[12]);
    }

    #[test]
    fn partitioned_labeling_matches_serial() {
        let f: Vec<Vec<f64>> = (0..37).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()]).collect();
        let bank = sample_random_prototypes(&f, 5, 1).unwrap();
        let mut c1 = DistanceCounter::new();
        let mut c2 = DistanceCounter::new();
        let a = assign_pseudo_labels(&f, &bank, &mut c1).unwrap();
        let b = assign_pseudo_labels_partitioned(&f, &bank, 4, &mut c2).unwrap();
        assert_eq!(a, b);
        assert_eq!(c1, c2);
    }

    #[test]
    fn pairwise_counts() {
        let mut c = DistanceCounter::new();
        let nn = pairwise_reference(&[vec![0.0], vec![1.0]], &mut c);
        assert_eq!(c.evaluations(), 1);
        assert_eq!(nn, vec![Some(1), Some(0)]);
    }

    #[test]
    fn bcubed_extremes() {
        assert_eq!(bcubed_f1(&[0, 0, 1, 1], &[5, 5, 6, 6]), 1.0);
        let f = bcubed_f1(&[0, 0, 0, 0], &[5, 5, 6, 6]);
        assert!((f - 2.0 * 0.5 / 1.5).abs() < 1e-12);
    }
}

//! Cluster- and instance-level memories and the contrastive objectives that
//! refine pseudo-labels during target-domain training.

use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::labeler::{euclidean, l2_norm};

pub const DEFAULT_TAU: f64 = 0.05;
pub const DEFAULT_MOMENTUM: f64 = 0.2;
pub const DEFAULT_NEIGHBOR_THRESHOLD: f64 = 0.7;
const DEGENERATE_NORM: f64 = 1e-8;

fn normalized(v: Vec<f64>) -> Option<Vec<f64>> {
    let n = l2_norm(&v);
    (n >= DEGENERATE_NORM).then(|| v.into_iter().map(|x| x / n).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterMemory {
    centroids: Vec<Vec<f64>>,
    labels: Vec<u32>,
    momentum: f64,
    tau: f64,
}

impl ClusterMemory {
    /// One centroid per entry of `clusters`, each the normalized mean of the
    /// features carrying that label.
    pub fn with_clusters<F: AsRef<[f64]>>(
        features: &[F],
        labels: &[u32],
        clusters: &[u32],
        tau: f64,
        momentum: f64,
    ) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!("{} features, {} labels", features.len(), labels.len())));
        }
        if !(tau > 0.0) || !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("memory needs tau > 0 and momentum in [0, 1], got {tau}, {momentum}")));
        }
        let dim = features.first().map_or(0, |f| f.as_ref().len());
        let mut sums: BTreeMap<u32, (Vec<f64>, usize)> =
            clusters.iter().map(|&c| (c, (vec![0.0; dim], 0))).collect();
        for (f, l) in features.iter().zip(labels) {
            if let Some((s, n)) = sums.get_mut(l) {
                for (a, b) in s.iter_mut().zip(f.as_ref()) {
                    *a += b;
                }
                *n += 1;
            }
        }
        let mut centroids = Vec::with_capacity(clusters.len());
        for &c in clusters {
            let (sum, n) = sums[&c].clone();
            if n == 0 {
                return Err(Error::EmptyCluster(c));
            }
            let mean = sum.into_iter().map(|v| v / n as f64).collect();
            centroids.push(normalized(mean).ok_or(Error::DegenerateCentroid(c))?);
        }
        Ok(Self { centroids, labels: clusters.to_vec(), momentum, tau })
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn position(&self, label: u32) -> Result<usize> {
        self.labels.iter().position(|&l| l == label).ok_or(Error::LabelNotInMemory(label))
    }

    fn as_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.centroids)
    }
}

/// Memory over every distinct label in `labels`, in ascending label order.
pub fn init_cluster_memory<F: AsRef<[f64]>>(features: &[F], labels: &[u32], tau: f64, momentum: f64) -> Result<ClusterMemory> {
    let mut clusters: Vec<u32> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    ClusterMemory::with_clusters(features, labels, &clusters, tau, momentum)
}

/// InfoNCE of each query row (`B x D`, unit rows) against all centroids,
/// averaged over the batch.
pub fn cluster_contrastive_loss_on(tape: &mut Tape, queries: Var, memory: &ClusterMemory, positives: &[u32]) -> Result<Var> {
    let (b, d) = tape.shape(queries);
    if b != positives.len() {
        return Err(Error::ShapeMismatch(format!("{b} queries, {} positive labels", positives.len())));
    }
    if memory.centroids[0].len() != d {
        return Err(Error::DimensionMismatch { expected: memory.centroids[0].len(), got: d });
    }
    let k = memory.len();
    let cols = positives.iter().map(|&l| memory.position(l)).collect::<Result<Vec<_>>>()?;
    let mem = tape.constant(memory.as_tensor());
    let mem_t = tape.transpose(mem);
    let sims = tape.matmul(queries, mem_t);
    let logits = tape.scale(sims, 1.0 / memory.tau);
    let log_p = tape.log_softmax_rows(logits);
    let index: Rc<[usize]> = cols.iter().enumerate().map(|(r, &c)| r * k + c).collect();
    let picked = tape.gather(log_p, index, b, 1);
    let m = tape.mean(picked);
    Ok(tape.neg(m))
}

pub fn cluster_contrastive_loss(query: &[f64], memory: &ClusterMemory, positive_label: u32) -> Result<f64> {
    memory.position(positive_label)?;
    let q = normalized(query.to_vec()).ok_or(Error::NonFiniteFeature)?;
    let mut tape = Tape::new();
    let qv = tape.constant(Tensor::row_vector(q));
    let loss = cluster_contrastive_loss_on(&mut tape, qv, memory, &[positive_label])?;
    Ok(tape.scalar(loss))
}

/// `m+ <- normalize(mu * m+ + (1 - mu) * f)`; every other centroid is untouched.
pub fn momentum_update_memory(memory: &mut ClusterMemory, query: &[f64], label: u32) -> Result<()> {
    let k = memory.position(label)?;
    let mu = memory.momentum;
    let mixed: Vec<f64> = memory.centroids[k].iter().zip(query).map(|(m, f)| mu * m + (1.0 - mu) * f).collect();
    if let Some(v) = normalized(mixed) {
        memory.centroids[k] = v;
    }
    Ok(())
}

/// One unit-norm embedding per target instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceMemory {
    entries: Vec<Vec<f64>>,
    pub threshold: f64,
    pub momentum: f64,
}

impl InstanceMemory {
    pub fn new(entries: Vec<Vec<f64>>, threshold: f64, momentum: f64) -> Result<Self> {
        let entries = entries
            .into_iter()
            .map(|e| normalized(e).ok_or(Error::NonFiniteFeature))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries, threshold, momentum })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Vec<f64>] {
        &self.entries
    }

    pub fn update(&mut self, row: usize, feature: &[f64]) {
        let mu = self.momentum;
        let mixed: Vec<f64> = self.entries[row].iter().zip(feature).map(|(m, f)| mu * m + (1.0 - mu) * f).collect();
        if let Some(v) = normalized(mixed) {
            self.entries[row] = v;
        }
    }

    fn as_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.entries)
    }
}

/// `v[i] = 1` iff `i != j` and row `i` lies closer than `threshold` to row `j`.
pub fn select_reliable_neighbors(memory: &InstanceMemory, j: usize, threshold: f64) -> Vec<bool> {
    let anchor = &memory.entries[j];
    memory.entries.iter().enumerate().map(|(i, m)| i != j && euclidean(anchor, m) < threshold).collect()
}

pub fn reliable_neighbor_masks(memory: &InstanceMemory, threshold: f64) -> Vec<Vec<bool>> {
    (0..memory.len()).map(|j| select_reliable_neighbors(memory, j, threshold)).collect()
}

/// Keep only neighbors that also share the anchor's label.
pub fn restrict_to_labels(masks: &[Vec<bool>], labels: &[u32]) -> Vec<Vec<bool>> {
    masks
        .iter()
        .enumerate()
        .map(|(j, m)| m.iter().enumerate().map(|(i, &v)| v && labels[i] == labels[j]).collect())
        .collect()
}

/// How the log-probabilities of one query's reliable neighbors are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeighborWeight {
    /// Plain sum over the neighbors.
    Unit,
    /// Each neighbor weighted by `1 / k` for a query with `k` neighbors.
    Normalized,
}

/// Neighbor invariance loss for a batch of queries. Query `b` sits at memory row
/// `rows[b]`; its candidate set is every other memory row and `masks[b]` marks
/// the reliable ones. Averaged over the batch; queries without neighbors add 0.
pub fn instance_invariance_loss_on(
    tape: &mut Tape,
    queries: Var,
    rows: &[usize],
    memory: &InstanceMemory,
    masks: &[Vec<bool>],
    tau: f64,
    weight: NeighborWeight,
) -> Result<Var> {
    let (b, d) = tape.shape(queries);
    let n = memory.len();
    if rows.len() != b || masks.len() != b {
        return Err(Error::ShapeMismatch(format!("{b} queries, {} rows, {} masks", rows.len(), masks.len())));
    }
    if masks.iter().any(|m| m.len() != n) || rows.iter().any(|&r| r >= n) {
        return Err(Error::ShapeMismatch(format!("masks / rows must index a memory of {n}")));
    }
    let active: Vec<usize> = (0..b).filter(|&q| masks[q].iter().enumerate().any(|(i, &v)| v && i != rows[q])).collect();
    if active.is_empty() {
        return Ok(tape.scalar_constant(0.0));
    }
    if memory.entries[0].len() != d {
        return Err(Error::DimensionMismatch { expected: memory.entries[0].len(), got: d });
    }
    let q = tape.select_rows(queries, &active);
    let mem = tape.constant(memory.as_tensor());
    let mem_t = tape.transpose(mem);
    let sims = tape.matmul(q, mem_t);
    let logits = tape.scale(sims, 1.0 / tau);
    let exclude_self = Tensor::from_fn(active.len(), n, |r, c| if c == rows[active[r]] { f64::NEG_INFINITY } else { 0.0 });
    let exclude_self = tape.constant(exclude_self);
    let logits = tape.add(logits, exclude_self);
    let log_p = tape.log_softmax_rows(logits);
    let index: Rc<[usize]> = active
        .iter()
        .enumerate()
        .flat_map(|(r, &qi)| {
            let j = rows[qi];
            masks[qi].iter().enumerate().filter(move |&(i, &v)| v && i != j).map(move |(i, _)| r * n + i)
        })
        .collect();
    let len = index.len();
    let mut picked = tape.gather(log_p, index, 1, len);
    if weight == NeighborWeight::Normalized {
        let w: Vec<f64> = active
            .iter()
            .flat_map(|&qi| {
                let j = rows[qi];
                let k = masks[qi].iter().enumerate().filter(|&(i, &v)| v && i != j).count();
                std::iter::repeat(1.0 / k as f64).take(k)
            })
            .collect();
        let w = tape.constant(Tensor::new(1, len, w));
        picked = tape.mul(picked, w);
    }
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / b as f64))
}

/// The neighbor invariance loss evaluated over the memory itself:
/// `-(1/N) sum_j sum_{i != j} v_j^i log p(i | m_j)`.
pub fn instance_invariance_loss(memory: &InstanceMemory, masks: &[Vec<bool>], tau: f64) -> Result<f64> {
    if memory.is_empty() {
        return Ok(0.0);
    }
    let mut tape = Tape::new();
    let q = tape.constant(memory.as_tensor());
    let rows: Vec<usize> = (0..memory.len()).collect();
    let loss = instance_invariance_loss_on(&mut tape, q, &rows, memory, masks, tau, NeighborWeight::Unit)?;
    Ok(tape.scalar(loss))
}

/// The five components of the training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_ins: f64,
    pub l_c_t: f64,
    pub l_c_s: f64,
    pub l_t_e: f64,
    pub l_s_e: f64,
}

impl LossTerms {
    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("l_ins", self.l_ins),
            ("l_c_t", self.l_c_t),
            ("l_c_s", self.l_c_s),
            ("l_t_e", self.l_t_e),
            ("l_s_e", self.l_s_e),
        ]
    }
}

/// Unit-weight sum of the five terms.
pub fn total_loss(terms: &LossTerms) -> Result<f64> {
    let mut total = 0.0;
    for (name, v) in terms.named() {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss(name));
        }
        total += v;
    }
    Ok(total)
}

pub fn total_loss_on(tape: &mut Tape, l_ins: Var, l_c_t: Var, l_c_s: Var, l_t_e: Var, l_s_e: Var) -> Result<Var> {
    let names = ["l_ins", "l_c_t", "l_c_s", "l_t_e", "l_s_e"];
    let vars = [l_ins, l_c_t, l_c_s, l_t_e, l_s_e];
    for (name, v) in names.iter().zip(vars) {
        if !tape.scalar(v).is_finite() {
            return Err(Error::NonFiniteLoss(name));
        }
    }
    let a = tape.add(l_ins, l_c_t);
    let b = tape.add(a, l_c_s);
    let c = tape.add(b, l_t_e);
    Ok(tape.add(c, l_s_e))
}

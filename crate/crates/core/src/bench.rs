//! Cost of prototype labeling against an all-pairs reference.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeler::{
    init_source_prototypes, label_with_banks, pairwise_reference, sample_random_prototypes, DistanceCounter,
};

pub const BENCH_SIZES: [usize; 4] = [500, 1000, 2000, 4000];
pub const BENCH_SOURCE_PROTOTYPES: usize = 20;
pub const BENCH_RANDOM_PROTOTYPES: usize = 300;
pub const BENCH_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub prototypes: usize,
    pub labeling_evaluations: u64,
    pub labeling_seconds: f64,
    pub pairwise_evaluations: u64,
    pub pairwise_seconds: f64,
}

pub const BENCH_HEADER: &str =
    "n\tprototypes\tlabeling_evaluations\tlabeling_seconds\tpairwise_evaluations\tpairwise_seconds";

impl BenchRow {
    pub fn tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.6}\t{}\t{:.6}",
            self.n,
            self.prototypes,
            self.labeling_evaluations,
            self.labeling_seconds,
            self.pairwise_evaluations,
            self.pairwise_seconds
        )
    }
}

fn unit_features(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// Labels `n` random unit features against 20 source and `min(300, n)` random
/// prototypes, then runs the all-pairs reference on the same features.
pub fn bench_size(n: usize, seed: u64) -> Result<BenchRow> {
    if n < 2 {
        return Err(Error::NotEnoughTargetFeatures { requested: 2, available: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source_feats = unit_features(BENCH_SOURCE_PROTOTYPES * 5, BENCH_DIM, &mut rng);
    let source_labels: Vec<u32> = (0..source_feats.len()).map(|i| (i % BENCH_SOURCE_PROTOTYPES) as u32).collect();
    let source = init_source_prototypes(&source_feats, &source_labels)?;
    let target = unit_features(n, BENCH_DIM, &mut rng);
    let random = sample_random_prototypes(&target, BENCH_RANDOM_PROTOTYPES.min(n), seed)?;

    let mut labeling = DistanceCounter::new();
    let t = Instant::now();
    label_with_banks(&target, &source, &random, &mut labeling)?;
    let labeling_seconds = t.elapsed().as_secs_f64();

    let mut pairwise = DistanceCounter::new();
    let t = Instant::now();
    pairwise_reference(&target, &mut pairwise);
    let pairwise_seconds = t.elapsed().as_secs_f64();

    Ok(BenchRow {
        n,
        prototypes: source.len() + random.len(),
        labeling_evaluations: labeling.evaluations(),
        labeling_seconds,
        pairwise_evaluations: pairwise.evaluations(),
        pairwise_seconds,
    })
}

/// One row per size; sizes below 2 come back as a note instead.
pub fn run_bench(sizes: &[usize], seed: u64) -> Vec<std::result::Result<BenchRow, String>> {
    sizes
        .iter()
        .map(|&n| match bench_size(n, seed) {
            Ok(row) => Ok(row),
            Err(e) => Err(format!("N={n} skipped: {e}")),
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

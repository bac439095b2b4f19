//! Retrieval and detection metrics.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::BBox;

pub const MATCH_IOU: f64 = 0.5;
/// Ranked hits kept per query in a report.
pub const REPORTED_RANKS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryImage {
    pub gt_boxes: Vec<BBox>,
    pub gt_ids: Vec<u32>,
    pub detections: Vec<Detection>,
}

/// A cropped person: its identity, the gallery image it was cut from, and its feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub identity: u32,
    pub image: usize,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedHit {
    pub image: usize,
    pub detection: usize,
    pub similarity: f64,
    pub matched: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub identity: u32,
    pub image: usize,
    pub average_precision: f64,
    pub top1_hit: bool,
    pub gallery_positives: usize,
    pub ranking: Vec<RankedHit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchMetrics {
    pub map: f64,
    pub top1: f64,
    pub queries_excluded: usize,
    pub per_query: Vec<QueryResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub top1: f64,
    pub det_ap: f64,
    pub det_recall: f64,
    pub queries_evaluated: usize,
    pub queries_excluded: usize,
    pub per_query: Vec<QueryResult>,
}

impl EvalReport {
    pub fn new(search: SearchMetrics, det_ap: f64, det_recall: f64) -> Self {
        Self {
            map: search.map,
            top1: search.top1,
            det_ap,
            det_recall,
            queries_evaluated: search.per_query.len(),
            queries_excluded: search.queries_excluded,
            per_query: search.per_query,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn by_score_desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Area under the monotone precision envelope; `hits` in ranked order.
fn enveloped_ap(hits: &[bool], total_positives: usize) -> f64 {
    if total_positives == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(hits.len());
    for (r, &h) in hits.iter().enumerate() {
        if h {
            tp += 1;
        }
        points.push((tp as f64 / total_positives as f64, tp as f64 / (r + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        let (recall, _) = points[i];
        if recall > prev_recall {
            let envelope = points[i..].iter().map(|p| p.1).fold(0.0, f64::max);
            ap += (recall - prev_recall) * envelope;
            prev_recall = recall;
        }
    }
    ap
}

/// Single-class detection AP and recall at IoU 0.5 over a set of images.
///
/// Predictions are matched greedily in descending score order to the best
/// still-unmatched ground-truth box of their image.
pub fn evaluate_detection(predictions: &[Vec<(BBox, f64)>], ground_truth: &[Vec<BBox>]) -> Result<(f64, f64)> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} prediction groups for {} images",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let total_gt: usize = ground_truth.iter().map(Vec::len).sum();
    if total_gt == 0 {
        return Err(Error::NoGroundTruth);
    }
    let mut order: Vec<(usize, usize)> =
        predictions.iter().enumerate().flat_map(|(i, p)| (0..p.len()).map(move |k| (i, k))).collect();
    order.sort_by(|a, b| by_score_desc(predictions[a.0][a.1].1, predictions[b.0][b.1].1));
    let mut taken: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let mut hits = Vec::with_capacity(order.len());
    for (i, k) in order {
        let b = &predictions[i][k].0;
        let best = ground_truth[i]
            .iter()
            .enumerate()
            .filter(|(g, _)| !taken[i][*g])
            .map(|(g, gt)| (g, b.iou(gt)))
            .filter(|&(_, iou)| iou >= MATCH_IOU)
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal));
        match best {
            Some((g, _)) => {
                taken[i][g] = true;
                hits.push(true);
            }
            None => hits.push(false),
        }
    }
    let matched = hits.iter().filter(|&&h| h).count();
    Ok((enveloped_ap(&hits, total_gt), matched as f64 / total_gt as f64))
}

/// Retrieval of each query identity among the detections of every other gallery image.
///
/// A detection is a hit when its image shows the identity and it overlaps that
/// person's box with IoU at least 0.5; only the first such detection per image
/// counts. AP divides by the number of gallery images showing the identity, so
/// persons the detector missed lower it. Queries whose identity appears in no
/// other image are excluded and counted.
pub fn search_metrics(queries: &[Query], gallery: &[GalleryImage]) -> SearchMetrics {
    let mut per_query = Vec::new();
    let mut excluded = 0;
    for q in queries {
        let positives = gallery
            .iter()
            .enumerate()
            .filter(|&(i, g)| i != q.image && g.gt_ids.contains(&q.identity))
            .count();
        if positives == 0 {
            excluded += 1;
            continue;
        }
        let mut ranked: Vec<(usize, usize, f64)> = gallery
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != q.image)
            .flat_map(|(i, g)| g.detections.iter().enumerate().map(move |(k, d)| (i, k, dot(&q.feature, &d.feature))))
            .collect();
        ranked.sort_by(|a, b| by_score_desc(a.2, b.2));
        let mut found = vec![false; gallery.len()];
        let mut hits = Vec::with_capacity(ranked.len());
        let mut ranking = Vec::new();
        for &(i, k, sim) in &ranked {
            let g = &gallery[i];
            let hit = !found[i]
                && g.gt_ids
                    .iter()
                    .zip(&g.gt_boxes)
                    .any(|(&id, b)| id == q.identity && g.detections[k].bbox.iou(b) >= MATCH_IOU);
            if hit {
                found[i] = true;
            }
            hits.push(hit);
            if ranking.len() < REPORTED_RANKS {
                ranking.push(RankedHit { image: i, detection: k, similarity: sim, matched: hit });
            }
        }
        let mut tp = 0;
        let mut ap = 0.0;
        for (r, &h) in hits.iter().enumerate() {
            if h {
                tp += 1;
                ap += tp as f64 / (r + 1) as f64;
            }
        }
        per_query.push(QueryResult {
            identity: q.identity,
            image: q.image,
            average_precision: ap / positives as f64,
            top1_hit: hits.first().copied().unwrap_or(false),
            gallery_positives: positives,
            ranking,
        });
    }
    let n = per_query.len().max(1) as f64;
    SearchMetrics {
        map: per_query.iter().map(|r| r.average_precision).sum::<f64>() / n,
        top1: per_query.iter().filter(|r| r.top1_hit).count() as f64 / n,
        queries_excluded: excluded,
        per_query,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64) -> BBox {
        BBox::new(x, 0.0, x + 10.0, 20.0)
    }

    #[test]
    fn detection_degenerate_cases() {
        let gt = vec![vec![b(0.0), b(30.0)]];
        let perfect = vec![vec![(b(0.0), 1.0), (b(30.0), 1.0)]];
        assert_eq!(evaluate_detection(&perfect, &gt).unwrap(), (1.0, 1.0));
        assert_eq!(evaluate_detection(&[vec![]], &gt).unwrap(), (0.0, 0.0));
        assert!(matches!(evaluate_detection(&[vec![]], &[vec![]]), Err(Error::NoGroundTruth)));
    }

    #[test]
    fn duplicate_detections_count_once() {
        let gt = vec![vec![b(0.0)]];
        let preds = vec![vec![(b(0.0), 0.9), (b(0.5), 0.8)]];
        let (ap, recall) = evaluate_detection(&preds, &gt).unwrap();
        assert_eq!((ap, recall), (1.0, 1.0));
    }

    #[test]
    fn query_without_gallery_positive_is_excluded() {
        let gallery = vec![GalleryImage { gt_boxes: vec![b(0.0)], gt_ids: vec![1], detections: vec![] }];
        let m = search_metrics(&[Query { identity: 1, image: 0, feature: vec![1.0] }], &gallery);
        assert_eq!(m.queries_excluded, 1);
        assert!(m.per_query.is_empty());
        assert_eq!(m.map, 0.0);
    }
}

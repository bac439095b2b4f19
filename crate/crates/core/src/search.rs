//! End-to-end person search on a scene split, plus the on-disk formats for
//! embeddings and pseudo labels.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate_detection, search_metrics, Detection, EvalReport, GalleryImage, Query};
use crate::labeler::{InstanceFeature, PseudoLabel};
use crate::model::Model;
use crate::scene::{BBox, SceneSample};
use crate::train::candidates_for;

const EMBEDDING_MAGIC: &[u8; 4] = b"EMB1";

/// Everything the metrics need, decoupled from the model that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchData {
    pub queries: Vec<Query>,
    pub gallery: Vec<GalleryImage>,
    /// Every scored candidate per image, for detection AP.
    pub proposals: Vec<Vec<(BBox, f64)>>,
}

/// Runs `model` over `scenes`. The first appearance of each identity becomes a
/// query (its ground-truth crop); gallery detections are the candidates scoring
/// at least the configured threshold.
pub fn build_search_data(model: &Model, scenes: &[SceneSample], cfg: &RunConfig) -> Result<SearchData> {
    let candidates = candidates_for(scenes, cfg);
    let threshold = cfg.labeling.score_threshold;
    let mut seen = HashSet::new();
    let mut data = SearchData { queries: Vec::new(), gallery: Vec::new(), proposals: Vec::new() };
    for (i, (scene, cands)) in scenes.iter().zip(&candidates).enumerate() {
        let boxes: Vec<BBox> = cands.iter().map(|c| c.bbox).collect();
        let out = model.infer(&scene.image, &boxes, scene.id)?;
        let mut detections = Vec::new();
        let mut proposals = Vec::new();
        for ((f, &score), &k) in out.features.iter().zip(&out.scores).zip(&out.kept) {
            proposals.push((boxes[k], score));
            if score >= threshold {
                detections.push(Detection { bbox: boxes[k], score, feature: f.vector.clone() });
            }
        }
        let fresh: Vec<usize> = (0..scene.boxes.len()).filter(|&p| seen.insert(scene.identities[p])).collect();
        if !fresh.is_empty() {
            let crops: Vec<BBox> = fresh.iter().map(|&p| scene.boxes[p]).collect();
            let (feats, _) = model.extract_instance_features(&out.map, &crops, scene.id)?;
            for f in feats {
                let p = fresh[f.box_id as usize];
                data.queries.push(Query { identity: scene.identities[p], image: i, feature: f.vector });
            }
        }
        data.gallery.push(GalleryImage {
            gt_boxes: scene.boxes.clone(),
            gt_ids: scene.identities.clone(),
            detections,
        });
        data.proposals.push(proposals);
    }
    Ok(data)
}

pub fn evaluate_search_data(data: &SearchData) -> Result<EvalReport> {
    let gt: Vec<Vec<BBox>> = data.gallery.iter().map(|g| g.gt_boxes.clone()).collect();
    let (ap, recall) = evaluate_detection(&data.proposals, &gt)?;
    Ok(EvalReport::new(search_metrics(&data.queries, &data.gallery), ap, recall))
}

pub fn evaluate_person_search(model: &Model, scenes: &[SceneSample], cfg: &RunConfig) -> Result<EvalReport> {
    evaluate_search_data(&build_search_data(model, scenes, cfg)?)
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Same queries, boxes and scores with every feature replaced by an
/// independent random unit vector: the retrieval floor of an untrained embedding.
pub fn random_embedding_baseline(data: &SearchData, seed: u64) -> SearchData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = data.clone();
    for q in &mut out.queries {
        q.feature = random_unit(q.feature.len(), &mut rng);
    }
    for g in &mut out.gallery {
        for d in &mut g.detections {
            d.feature = random_unit(d.feature.len(), &mut rng);
        }
    }
    out
}

/// `EMB1`, u32 dimension, then per instance u32 image id, u32 box id and the
/// vector as f32, all little-endian.
pub fn write_embeddings(path: &Path, features: &[InstanceFeature]) -> Result<()> {
    let dim = features.first().map_or(0, InstanceFeature::dim);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(EMBEDDING_MAGIC)?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    for f in features {
        if f.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: f.dim() });
        }
        w.write_all(&f.image_id.to_le_bytes())?;
        w.write_all(&f.box_id.to_le_bytes())?;
        for &v in &f.vector {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<Vec<InstanceFeature>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(Error::ShapeMismatch(format!("{} is not an embedding file", path.display())));
    }
    let word = |at: usize| u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]);
    let dim = word(4) as usize;
    let record = 8 + 4 * dim;
    let body = &bytes[8..];
    if body.len() % record != 0 {
        return Err(Error::ShapeMismatch(format!("{} trailing bytes", body.len() % record)));
    }
    let mut out = Vec::with_capacity(body.len() / record);
    for start in (8..bytes.len()).step_by(record) {
        let vector = (0..dim).map(|j| f32::from_bits(word(start + 8 + 4 * j)) as f64).collect();
        // Stored vectors are already unit length; renormalizing would move the f32 rounding.
        out.push(InstanceFeature { vector, image_id: word(start), box_id: word(start + 4) });
    }
    Ok(out)
}

pub const LABEL_HEADER: &str = "instance_id\tl_source\tl_random\td_source\td_random";

/// Tab-separated labels; instance ids read `<image_id>_<box_id>`.
pub fn write_labels(path: &Path, features: &[InstanceFeature], labels: &[PseudoLabel]) -> Result<()> {
    if features.len() != labels.len() {
        return Err(Error::InstancePredictionMismatch(format!("{} instances, {} labels", features.len(), labels.len())));
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{LABEL_HEADER}")?;
    for (f, l) in features.iter().zip(labels) {
        writeln!(w, "{}_{}\t{}\t{}\t{}\t{}", f.image_id, f.box_id, l.l_source, l.l_random, l.d_source, l.d_random)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<(String, PseudoLabel)>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(LABEL_HEADER) {
        return Err(Error::ShapeMismatch(format!("{} lacks the label header", path.display())));
    }
    let bad = |line: &str| Error::ShapeMismatch(format!("bad label line: {line}"));
    lines
        .map(|line| {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(bad(line));
            }
            let label = PseudoLabel {
                l_source: cols[1].parse().map_err(|_| bad(line))?,
                l_random: cols[2].parse().map_err(|_| bad(line))?,
                d_source: cols[3].parse().map_err(|_| bad(line))?,
                d_random: cols[4].parse().map_err(|_| bad(line))?,
            };
            Ok((cols[0].to_string(), label))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feature(i: u32) -> InstanceFeature {
        InstanceFeature::new(vec![0.5, -0.25, i as f64], i, i + 1)
    }

    #[test]
    fn embeddings_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let feats: Vec<_> = (0..3).map(feature).collect();
        write_embeddings(&path, &feats).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 8 + 3 * (8 + 12));
        let back = read_embeddings(&path).unwrap();
        for (a, b) in back.iter().zip(&feats) {
            assert_eq!((a.image_id, a.box_id), (b.image_id, b.box_id));
            assert!(a.vector.iter().zip(&b.vector).all(|(x, y)| (x - y).abs() < 1e-6));
        }
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.tsv");
        let feats: Vec<_> = (0..2).map(feature).collect();
        let labels = vec![
            PseudoLabel { l_source: 3, l_random: 9, d_source: 0.125, d_random: 1.5 },
            PseudoLabel { l_source: 0, l_random: 1, d_source: 0.1, d_random: 0.2 },
        ];
        write_labels(&path, &feats, &labels).unwrap();
        let back = read_labels(&path).unwrap();
        assert_eq!(back[1].0, "1_2");
        assert_eq!(back.into_iter().map(|(_, l)| l).collect::<Vec<_>>(), labels);
    }

    #[test]
    fn baseline_keeps_geometry_and_unit_norm() {
        let data = SearchData {
            queries: vec![Query { identity: 1, image: 0, feature: vec![1.0, 0.0] }],
            gallery: vec![GalleryImage {
                gt_boxes: vec![BBox::new(0.0, 0.0, 4.0, 4.0)],
                gt_ids: vec![1],
                detections: vec![Detection { bbox: BBox::new(0.0, 0.0, 4.0, 4.0), score: 0.9, feature: vec![0.0, 1.0] }],
            }],
            proposals: vec![vec![(BBox::new(0.0, 0.0, 4.0, 4.0), 0.9)]],
        };
        let b = random_embedding_baseline(&data, 1);
        assert_eq!(b.proposals, data.proposals);
        let n: f64 = b.gallery[0].detections[0].feature.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }
}

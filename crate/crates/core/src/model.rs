//! The person-search network: a small convolutional backbone at stride 8, the
//! attention block over its output map, region pooling, an embedding projection,
//! an objectness head, and the domain classifiers used during adaptation.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{BoundDomainClassifier, DomainClassifier};
use crate::attention::{AttentionBlock, BoundAttention, FeatureMap};
use crate::autograd::{Tape, Tensor, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::labeler::InstanceFeature;
use crate::nn::{BoundLinear, Conv2d, Linear};
use crate::scene::{BBox, RgbImage};

pub const STRIDE: usize = 8;

/// `(in, out, stride)` of each 3x3 convolution; the last two use the configured width.
fn backbone_plan(channels: usize) -> [(usize, usize, usize); 4] {
    [(3, 16, 2), (16, 32, 2), (32, channels, 2), (channels, channels, 1)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub input_height: usize,
    pub input_width: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub backbone: Vec<Conv2d>,
    pub attention: AttentionBlock,
    pub projection: Linear,
    pub detector: Linear,
    pub domain: DomainClassifier,
}

pub struct BoundModel {
    backbone: Vec<BoundLinear>,
    attention: Vec<BoundAttention>,
    projection: BoundLinear,
    detector: BoundLinear,
    pub domain: BoundDomainClassifier,
}

impl BoundModel {
    /// Same order as [`Model::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.backbone.iter().flat_map(BoundLinear::vars).collect();
        v.extend(self.attention.iter().flat_map(BoundAttention::vars));
        v.extend(self.projection.vars());
        v.extend(self.detector.vars());
        v.extend(self.domain.vars());
        v
    }
}

/// A box dropped because it covers no feature cell at stride 8.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedBox {
    pub index: usize,
    pub bbox: BBox,
}

/// Tape handles for one scene. Region outputs are `None` when no box survived pooling.
pub struct SceneVars {
    pub attended: Var,
    pub regions: Option<RegionVars>,
    pub kept: Vec<usize>,
    pub skipped: Vec<SkippedBox>,
}

pub struct RegionVars {
    /// `n x 2C` pooled features, top half then bottom half of each box.
    pub pooled: Var,
    /// `n x D`, unit rows.
    pub embeddings: Var,
    /// `n x 1` objectness in `(0, 1)`.
    pub scores: Var,
}

/// Plain-value view of one scene's forward pass.
#[derive(Clone, Debug)]
pub struct SceneInference {
    pub map: FeatureMap,
    pub features: Vec<InstanceFeature>,
    pub scores: Vec<f64>,
    pub kept: Vec<usize>,
    pub skipped: Vec<SkippedBox>,
}

/// Feature cells whose centres fall inside `b`, split into a top and a bottom half.
fn region_cells(b: &BBox, fh: usize, fw: usize) -> Option<(Vec<usize>, Vec<usize>)> {
    let centre = |i: usize| (i as f64 + 0.5) * STRIDE as f64;
    let ys: Vec<usize> = (0..fh).filter(|&y| centre(y) >= b.y1 && centre(y) < b.y2).collect();
    let xs: Vec<usize> = (0..fw).filter(|&x| centre(x) >= b.x1 && centre(x) < b.x2).collect();
    if ys.is_empty() || xs.is_empty() {
        return None;
    }
    let half = ys.len().div_ceil(2);
    let top = &ys[..half];
    let bottom = &ys[ys.len() - half..];
    let cells = |rows: &[usize]| rows.iter().flat_map(|&y| xs.iter().map(move |&x| y * fw + x)).collect();
    Some((cells(top), cells(bottom)))
}

impl Model {
    pub fn new(input_height: usize, input_width: usize, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let c = cfg.channels;
        let backbone: Vec<Conv2d> =
            backbone_plan(c).iter().map(|&(i, o, s)| Conv2d::new(i, o, 3, s, 1, rng)).collect();
        let mut model = Self {
            input_height,
            input_width,
            channels: c,
            embed_dim: cfg.embed_dim,
            backbone,
            attention: AttentionBlock { branches: Vec::new() },
            projection: Linear::new(2 * c, cfg.embed_dim, rng),
            detector: Linear::new(2 * c, 1, rng),
            domain: DomainClassifier::new(c, 2 * c, cfg.embed_dim, cfg.domain_hidden, rng),
        };
        let (fh, fw) = model.feature_size();
        model.attention = AttentionBlock::new(fh, fw, c, cfg.attention_branches, rng)?;
        Ok(model)
    }

    pub fn feature_size(&self) -> (usize, usize) {
        self.backbone.iter().fold((self.input_height, self.input_width), |(h, w), conv| conv.output_size(h, w))
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.backbone.iter().flat_map(Conv2d::tensors).collect();
        v.extend(self.attention.tensors());
        v.extend(self.projection.tensors());
        v.extend(self.detector.tensors());
        v.extend(self.domain.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.backbone.iter_mut().flat_map(Conv2d::tensors_mut).collect();
        v.extend(self.attention.tensors_mut());
        v.extend(self.projection.tensors_mut());
        v.extend(self.detector.tensors_mut());
        v.extend(self.domain.tensors_mut());
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        BoundModel {
            backbone: self.backbone.iter().map(|c| c.bind(tape, trainable)).collect(),
            attention: self.attention.bind(tape, trainable),
            projection: self.projection.bind(tape, trainable),
            detector: self.detector.bind(tape, trainable),
            domain: self.domain.bind(tape, trainable),
        }
    }

    fn check_image(&self, image: &RgbImage) -> Result<()> {
        if image.height() != self.input_height || image.width() != self.input_width {
            return Err(Error::DimensionMismatch {
                expected: self.input_height * self.input_width,
                got: image.height() * image.width(),
            });
        }
        Ok(())
    }

    /// Backbone then attention; returns the `(h*w) x C` map after attention.
    pub fn feature_map_on(&self, tape: &mut Tape, bound: &BoundModel, image: &RgbImage) -> Result<Var> {
        self.check_image(image)?;
        let mut x = tape.constant(image.to_tensor());
        let (mut h, mut w) = (self.input_height, self.input_width);
        for (conv, b) in self.backbone.iter().zip(&bound.backbone) {
            let (y, oh, ow) = conv.forward(tape, b, x, h, w);
            x = tape.relu(y);
            (h, w) = (oh, ow);
        }
        self.attention.forward(tape, x, &bound.attention)
    }

    /// Region pooling, projection and objectness for `boxes` over an attended map.
    pub fn regions_on(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        map: Var,
        boxes: &[BBox],
    ) -> (Option<RegionVars>, Vec<usize>, Vec<SkippedBox>) {
        let (fh, fw) = self.feature_size();
        let hw = fh * fw;
        let mut kept = Vec::new();
        let mut skipped = Vec::new();
        let mut pool = Vec::new();
        for (i, b) in boxes.iter().enumerate() {
            match region_cells(b, fh, fw) {
                Some((top, bottom)) => {
                    for cells in [top, bottom] {
                        let mut row = vec![0.0; hw];
                        let wgt = 1.0 / cells.len() as f64;
                        for c in cells {
                            row[c] = wgt;
                        }
                        pool.extend(row);
                    }
                    kept.push(i);
                }
                None => {
                    log::warn!("box {i} {b:?} covers no feature cell; skipped");
                    skipped.push(SkippedBox { index: i, bbox: *b });
                }
            }
        }
        if kept.is_empty() {
            return (None, kept, skipped);
        }
        let n = kept.len();
        let c = self.channels;
        let p = tape.constant(Tensor::new(2 * n, hw, pool));
        let halves = tape.matmul(p, map);
        // A row-major (2n x C) matrix read as (n x 2C).
        let index: Rc<[usize]> = (0..2 * n * c).collect();
        let pooled = tape.gather(halves, index, n, 2 * c);
        let projected = bound.projection.forward(tape, pooled);
        let embeddings = tape.normalize_rows(projected);
        let logits = bound.detector.forward(tape, pooled);
        let scores = tape.sigmoid(logits);
        (Some(RegionVars { pooled, embeddings, scores }), kept, skipped)
    }

    pub fn scene_on(&self, tape: &mut Tape, bound: &BoundModel, image: &RgbImage, boxes: &[BBox]) -> Result<SceneVars> {
        let attended = self.feature_map_on(tape, bound, image)?;
        let (regions, kept, skipped) = self.regions_on(tape, bound, attended, boxes);
        Ok(SceneVars { attended, regions, kept, skipped })
    }

    /// Region features for `boxes` over an already attended map.
    pub fn extract_instance_features(
        &self,
        map: &FeatureMap,
        boxes: &[BBox],
        image_id: u32,
    ) -> Result<(Vec<InstanceFeature>, Vec<SkippedBox>)> {
        let (fh, fw) = self.feature_size();
        if (map.height(), map.width(), map.channels()) != (fh, fw, self.channels) {
            return Err(Error::DimensionMismatch { expected: fh * fw * self.channels, got: map.tensor().len() });
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let m = tape.constant(map.tensor().clone());
        let (regions, kept, skipped) = self.regions_on(&mut tape, &bound, m, boxes);
        let features = match regions {
            Some(r) => tape
                .value(r.embeddings)
                .to_rows()
                .into_iter()
                .zip(&kept)
                .map(|(v, &i)| InstanceFeature::new(v, image_id, i as u32))
                .collect(),
            None => Vec::new(),
        };
        Ok((features, skipped))
    }

    /// Forward one scene without gradients.
    pub fn infer(&self, image: &RgbImage, boxes: &[BBox], image_id: u32) -> Result<SceneInference> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = self.scene_on(&mut tape, &bound, image, boxes)?;
        let (fh, fw) = self.feature_size();
        let map = FeatureMap::new(fh, fw, self.channels, tape.value(out.attended).clone())?;
        let (features, scores) = match &out.regions {
            Some(r) => (
                tape.value(r.embeddings)
                    .to_rows()
                    .into_iter()
                    .zip(&out.kept)
                    .map(|(v, &i)| InstanceFeature::new(v, image_id, i as u32))
                    .collect(),
                tape.value(r.scores).data().to_vec(),
            ),
            None => (Vec::new(), Vec::new()),
        };
        Ok(SceneInference { map, features, scores, kept: out.kept, skipped: out.skipped })
    }
}

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay:
/// `v <- m v + (g + wd w)`, `w <- w - lr v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, params: &[&Tensor]) -> Self {
        let velocity = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Self { lr, momentum, weight_decay, velocity }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters, {} gradients, {} velocity slots",
                params.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(Error::ShapeMismatch(format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
            }
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *w;
                *w -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (Model, RgbImage) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = ModelConfig { channels: 8, embed_dim: 6, attention_branches: 1, domain_hidden: 4 };
        let model = Model::new(40, 48, &cfg, &mut rng).unwrap();
        let px = (0..40 * 48 * 3).map(|_| rng.gen::<u8>()).collect();
        (model, RgbImage::new(40, 48, px).unwrap())
    }

    #[test]
    fn stride_eight_feature_map() {
        let (model, _) = toy();
        assert_eq!(model.feature_size(), (5, 6));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Model::new(96, 160, &ModelConfig::default(), &mut rng).unwrap();
        assert_eq!(m.feature_size(), (12, 20));
    }

    #[test]
    fn bound_vars_follow_tensor_order() {
        let (model, _) = toy();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let vars = bound.vars();
        let tensors = model.tensors();
        assert_eq!(vars.len(), tensors.len());
        for (v, t) in vars.iter().zip(tensors) {
            assert_eq!(tape.value(*v), t);
        }
    }

    #[test]
    fn features_are_unit_and_repeatable() {
        let (model, image) = toy();
        let b = BBox::new(4.0, 2.0, 30.0, 38.0);
        let out = model.infer(&image, &[b, b, BBox::new(46.0, 0.0, 47.0, 3.0)], 0).unwrap();
        assert_eq!(out.kept, vec![0, 1]);
        assert_eq!(out.skipped.len(), 1);
        assert_eq!(out.features[0].vector, out.features[1].vector);
        for f in &out.features {
            let n: f64 = f.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert!(out.scores.iter().all(|s| (0.0..=1.0).contains(s)));
        let (direct, _) = model.extract_instance_features(&out.map, &[b], 0).unwrap();
        assert_eq!(direct[0].vector, out.features[0].vector);
    }

    #[test]
    fn sgd_matches_hand_update() {
        let mut p = Tensor::new(1, 2, vec![1.0, -2.0]);
        let mut opt = Sgd::new(0.1, 0.9, 0.01, &[&p]);
        let g = Tensor::new(1, 2, vec![0.5, 0.5]);
        opt.step(vec![&mut p], &[g.clone()]).unwrap();
        // v = 0.5 + 0.01 * w
        assert!((p.get(0, 0) - (1.0 - 0.1 * 0.51)).abs() < 1e-15);
        let w0 = p.get(0, 0);
        opt.step(vec![&mut p], &[g]).unwrap();
        let v = 0.9 * 0.51 + 0.5 + 0.01 * w0;
        assert!((p.get(0, 0) - (w0 - 0.1 * v)).abs() < 1e-15);
    }
}

//! Adversarial domain alignment at image and instance level.
//!
//! Features reach the domain classifiers through a gradient-reversal node, so
//! minimizing the classification losses trains the classifiers while pushing
//! the feature extractor towards domain confusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::FeatureMap;
use crate::autograd::{sigmoid, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::labeler::InstanceFeature;
use crate::nn::{BoundLinear, Linear};

/// Clamp applied to every probability before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;
/// Domain tag of labeled source data.
pub const SOURCE: u8 = 0;
/// Domain tag of unlabeled target data.
pub const TARGET: u8 = 1;

pub fn gradient_reverse(tape: &mut Tape, x: Var) -> Var {
    tape.reverse_gradient(x, 1.0)
}

/// Weight given to the detection-branch term of the instance loss.
///
/// `sigmoid(4 * sign(nt - ns) * (max/min - 1))`, so equal domain sizes give
/// exactly one half and swapping the counts gives the complement.
pub fn balance_factor(n_source: i64, n_target: i64) -> Result<f64> {
    if n_source <= 0 || n_target <= 0 {
        return Err(Error::EmptyDomain);
    }
    let (hi, lo) = (n_source.max(n_target) as f64, n_source.min(n_target) as f64);
    let sign = (n_target - n_source).signum() as f64;
    Ok(sigmoid(4.0 * sign * (hi / lo - 1.0)))
}

/// Summed binary cross-entropy of every entry of `probs` against one label.
fn bce_sum_on(tape: &mut Tape, probs: Var, domain: u8) -> Var {
    let p = tape.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
    let target = if domain == TARGET {
        p
    } else {
        let neg = tape.neg(p);
        tape.add_scalar(neg, 1.0)
    };
    let logs = tape.ln(target);
    let s = tape.sum(logs);
    tape.neg(s)
}

/// Image-level loss over one probability (`1 x 1`) per image.
pub fn image_domain_loss_on(tape: &mut Tape, image_probs: &[Var], labels: &[u8]) -> Result<Var> {
    if image_probs.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} image predictions for {} domain labels",
            image_probs.len(),
            labels.len()
        )));
    }
    let mut total = tape.scalar_constant(0.0);
    for (&p, &d) in image_probs.iter().zip(labels) {
        let term = bce_sum_on(tape, p, d);
        total = tape.add(total, term);
    }
    Ok(total)
}

/// Image-level loss; each image's probability is the mean over its patch grid.
pub fn image_domain_loss(patch_predictions: &[Vec<f64>], labels: &[u8]) -> Result<f64> {
    let mut tape = Tape::new();
    let mut probs = Vec::with_capacity(patch_predictions.len());
    for grid in patch_predictions {
        if grid.is_empty() {
            return Err(Error::ShapeMismatch("empty patch grid".into()));
        }
        let mean = grid.iter().sum::<f64>() / grid.len() as f64;
        probs.push(tape.scalar_constant(mean));
    }
    let loss = image_domain_loss_on(&mut tape, &probs, labels)?;
    Ok(tape.scalar(loss))
}

/// Instance-level loss. `det[i]` / `reid[i]` hold the `k x 1` probabilities of
/// image `i`, or `None` when the image has no instances in that branch.
pub fn instance_domain_loss_on(
    tape: &mut Tape,
    det: &[Option<Var>],
    reid: &[Option<Var>],
    labels: &[u8],
    lambda: f64,
) -> Result<Var> {
    if det.len() != labels.len() || reid.len() != labels.len() {
        return Err(Error::InstancePredictionMismatch(format!(
            "{} det / {} reid groups for {} images",
            det.len(),
            reid.len(),
            labels.len()
        )));
    }
    let mut det_sum = tape.scalar_constant(0.0);
    let mut reid_sum = tape.scalar_constant(0.0);
    for ((d, r), &label) in det.iter().zip(reid).zip(labels) {
        if let Some(p) = d {
            let t = bce_sum_on(tape, *p, label);
            det_sum = tape.add(det_sum, t);
        }
        if let Some(p) = r {
            let t = bce_sum_on(tape, *p, label);
            reid_sum = tape.add(reid_sum, t);
        }
    }
    let a = tape.scale(det_sum, lambda);
    let b = tape.scale(reid_sum, 1.0 - lambda);
    Ok(tape.add(a, b))
}

#[derive(Clone, Debug)]
pub struct DomainBatch {
    pub image_features: Vec<FeatureMap>,
    pub instance_features_det: Vec<Vec<InstanceFeature>>,
    pub instance_features_reid: Vec<Vec<InstanceFeature>>,
    pub domain_labels: Vec<u8>,
}

impl DomainBatch {
    pub fn new(
        image_features: Vec<FeatureMap>,
        instance_features_det: Vec<Vec<InstanceFeature>>,
        instance_features_reid: Vec<Vec<InstanceFeature>>,
        domain_labels: Vec<u8>,
    ) -> Result<Self> {
        let n = image_features.len();
        if domain_labels.len() != n || instance_features_det.len() != n || instance_features_reid.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{n} images, {} labels, {} det groups, {} reid groups",
                domain_labels.len(),
                instance_features_det.len(),
                instance_features_reid.len()
            )));
        }
        if domain_labels.iter().any(|&d| d > 1) {
            return Err(Error::ShapeMismatch("domain labels must be 0 or 1".into()));
        }
        Ok(Self { image_features, instance_features_det, instance_features_reid, domain_labels })
    }
}

pub fn instance_domain_loss(
    batch: &DomainBatch,
    predictions_det: &[Vec<f64>],
    predictions_reid: &[Vec<f64>],
    lambda: f64,
) -> Result<f64> {
    let check = |groups: &[Vec<InstanceFeature>], preds: &[Vec<f64>], branch: &str| -> Result<()> {
        if groups.len() != preds.len() || groups.iter().zip(preds).any(|(g, p)| g.len() != p.len()) {
            return Err(Error::InstancePredictionMismatch(format!("{branch} branch")));
        }
        Ok(())
    };
    check(&batch.instance_features_det, predictions_det, "detection")?;
    check(&batch.instance_features_reid, predictions_reid, "reid")?;
    let mut tape = Tape::new();
    let column = |tape: &mut Tape, p: &Vec<f64>| {
        (!p.is_empty()).then(|| tape.constant(Tensor::new(p.len(), 1, p.clone())))
    };
    let det: Vec<_> = predictions_det.iter().map(|p| column(&mut tape, p)).collect();
    let reid: Vec<_> = predictions_reid.iter().map(|p| column(&mut tape, p)).collect();
    let loss = instance_domain_loss_on(&mut tape, &det, &reid, &batch.domain_labels, lambda)?;
    Ok(tape.scalar(loss))
}

/// Squared difference between each image probability and the mean of its
/// instance probabilities, summed over images. Images without instances add 0.
pub fn consistency_regularizer_on(tape: &mut Tape, image_probs: &[Var], instance_probs: &[Option<Var>]) -> Result<Var> {
    if image_probs.len() != instance_probs.len() {
        return Err(Error::ShapeMismatch("image / instance prediction count".into()));
    }
    let mut total = tape.scalar_constant(0.0);
    for (&p, inst) in image_probs.iter().zip(instance_probs) {
        let Some(inst) = inst else { continue };
        let m = tape.mean(*inst);
        let diff = tape.sub(p, m);
        let sq = tape.square(diff);
        total = tape.add(total, sq);
    }
    Ok(total)
}

pub fn consistency_regularizer(image_level: &[f64], instance_level: &[Vec<f64>]) -> Result<f64> {
    let mut tape = Tape::new();
    let img: Vec<_> = image_level.iter().map(|&p| tape.scalar_constant(p)).collect();
    let inst: Vec<_> = instance_level
        .iter()
        .map(|p| (!p.is_empty()).then(|| tape.constant(Tensor::new(p.len(), 1, p.clone()))))
        .collect();
    let loss = consistency_regularizer_on(&mut tape, &img, &inst)?;
    Ok(tape.scalar(loss))
}

/// Two 1x1 transforms with a rectifier between, one logit per row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainHead {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundDomainHead {
    hidden: BoundLinear,
    out: BoundLinear,
}

impl BoundDomainHead {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.hidden.vars();
        v.extend(self.out.vars());
        v
    }

    /// Per-row probabilities, `rows x 1`.
    pub fn probabilities(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.hidden.forward(tape, x);
        let h = tape.relu(h);
        let logit = self.out.forward(tape, h);
        tape.sigmoid(logit)
    }
}

impl DomainHead {
    pub fn new(inputs: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self { hidden: Linear::new_relu(inputs, hidden, rng), out: Linear::new(hidden, 1, rng) }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.hidden.tensors();
        v.extend(self.out.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.hidden.tensors_mut();
        v.extend(self.out.tensors_mut());
        v
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundDomainHead {
        BoundDomainHead { hidden: self.hidden.bind(tape, trainable), out: self.out.bind(tape, trainable) }
    }
}

/// Patch-level image classifier plus one instance classifier per task branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainClassifier {
    pub patch: DomainHead,
    pub det: DomainHead,
    pub reid: DomainHead,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundDomainClassifier {
    pub patch: BoundDomainHead,
    pub det: BoundDomainHead,
    pub reid: BoundDomainHead,
}

impl BoundDomainClassifier {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.patch.vars();
        v.extend(self.det.vars());
        v.extend(self.reid.vars());
        v
    }

    /// Image probability: mean of the per-patch sigmoids of a `(H*W) x C` map.
    pub fn image_probability(&self, tape: &mut Tape, map: Var) -> Var {
        let p = self.patch.probabilities(tape, map);
        tape.mean(p)
    }
}

impl DomainClassifier {
    pub fn new(map_channels: usize, det_dim: usize, reid_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            patch: DomainHead::new(map_channels, hidden, rng),
            det: DomainHead::new(det_dim, hidden, rng),
            reid: DomainHead::new(reid_dim, hidden, rng),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.patch.tensors();
        v.extend(self.det.tensors());
        v.extend(self.reid.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.patch.tensors_mut();
        v.extend(self.det.tensors_mut());
        v.extend(self.reid.tensors_mut());
        v
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundDomainClassifier {
        BoundDomainClassifier {
            patch: self.patch.bind(tape, trainable),
            det: self.det.bind(tape, trainable),
            reid: self.reid.bind(tape, trainable),
        }
    }
}

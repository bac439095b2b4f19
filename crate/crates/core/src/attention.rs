//! Covariance-pooled attention gate.
//!
//! The block aggregates second-order statistics along both the channel and
//! the spatial axis, lets the two aggregates interact through a pair of
//! grouped transforms (one with channel-distinct parameters, one with
//! spatially-distinct parameters), and turns the fused result into a sigmoid
//! gate that rescales the input map.
//!
//! Feature maps are `(H*W) x C` matrices in row-major spatial order.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{bind_tensor, group_norm, uniform_init};

/// Largest `H*W` for which the spatial covariance is materialized.
pub const SPATIAL_COVARIANCE_CAP: usize = 4096;
/// Preferred number of groups for both grouped transforms.
pub const DEFAULT_GROUPS: usize = 2;
const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    h: usize,
    w: usize,
    c: usize,
    data: Tensor,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, c: usize, data: Tensor) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::ShapeMismatch(format!("feature map dims must be positive, got {h}x{w}x{c}")));
        }
        if data.shape() != (h * w, c) {
            return Err(Error::ShapeMismatch(format!(
                "expected {}x{} data for a {h}x{w}x{c} map, got {:?}",
                h * w,
                c,
                data.shape()
            )));
        }
        if !data.is_finite() {
            return Err(Error::NonFiniteFeature);
        }
        Ok(Self { h, w, c, data })
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let data = Tensor::from_fn(h * w, c, |p, ch| f(p / w, p % w, ch));
        Self::new(h, w, c, data)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data.get(y * self.w + x, ch)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

/// Channel covariance `(1/HW) Xc^T Xc` and the per-channel spatial means.
fn channel_covariance_on(tape: &mut Tape, x: Var) -> (Var, Var) {
    let (hw, _) = tape.shape(x);
    let sums = tape.sum_rows(x);
    let means = tape.scale(sums, 1.0 / hw as f64);
    let neg = tape.neg(means);
    let centered = tape.add_row(x, neg);
    let ct = tape.transpose(centered);
    let cov = tape.matmul(ct, centered);
    (tape.scale(cov, 1.0 / hw as f64), means)
}

/// Spatial covariance `(1/C) Yc Yc^T` and the per-position channel means.
fn spatial_covariance_on(tape: &mut Tape, x: Var) -> (Var, Var) {
    let (_, c) = tape.shape(x);
    let sums = tape.sum_cols(x);
    let means = tape.scale(sums, 1.0 / c as f64);
    let wide = tape.broadcast_col(means, c);
    let centered = tape.sub(x, wide);
    let ct = tape.transpose(centered);
    let cov = tape.matmul(centered, ct);
    (tape.scale(cov, 1.0 / c as f64), means)
}

fn check_spatial_cap(positions: usize, cap: usize) -> Result<()> {
    if positions > cap {
        return Err(Error::SpatialCovarianceTooLarge { positions, cap });
    }
    Ok(())
}

pub fn cross_channel_covariance(x: &FeatureMap) -> Result<Tensor> {
    if !x.data.is_finite() {
        return Err(Error::NonFiniteFeature);
    }
    let mut tape = Tape::new();
    let v = tape.constant(x.data.clone());
    let (cov, _) = channel_covariance_on(&mut tape, v);
    Ok(tape.value(cov).clone())
}

pub fn cross_spatial_covariance(x: &FeatureMap) -> Result<Tensor> {
    cross_spatial_covariance_capped(x, SPATIAL_COVARIANCE_CAP)
}

pub fn cross_spatial_covariance_capped(x: &FeatureMap, cap: usize) -> Result<Tensor> {
    check_spatial_cap(x.positions(), cap)?;
    if !x.data.is_finite() {
        return Err(Error::NonFiniteFeature);
    }
    let mut tape = Tape::new();
    let v = tape.constant(x.data.clone());
    let (cov, _) = spatial_covariance_on(&mut tape, v);
    Ok(tape.value(cov).clone())
}

/// The two aggregated branches before cross-concatenation, each `HW x C`.
pub struct Aggregates {
    pub channel_level: Var,
    pub spatial_level: Var,
    pub channel_means: Var,
    pub position_means: Var,
    pub channel_covariance: Var,
    pub spatial_covariance: Var,
}

pub fn aggregate_branches_on(tape: &mut Tape, x: Var) -> Aggregates {
    let (hw, c) = tape.shape(x);
    let (cov_c, gap_c) = channel_covariance_on(tape, x);
    // gap_c is 1 x C; gap_c * cov_c equals (cov_c * gap_c^T)^T as cov_c is symmetric.
    let v = tape.matmul(gap_c, cov_c);
    let channel_level = tape.broadcast_row(v, hw);

    let (cov_s, gap_s) = spatial_covariance_on(tape, x);
    let u = tape.matmul(cov_s, gap_s);
    let spatial_level = tape.broadcast_col(u, c);

    Aggregates {
        channel_level,
        spatial_level,
        channel_means: gap_c,
        position_means: gap_s,
        channel_covariance: cov_c,
        spatial_covariance: cov_s,
    }
}

/// Interleave two `HW x C` maps channel by channel into `HW x 2C`.
pub fn interleave_on(tape: &mut Tape, a: Var, b: Var) -> Var {
    let (hw, c) = tape.shape(a);
    let cat = tape.concat_cols(&[a, b]);
    let index: Rc<[usize]> = (0..hw)
        .flat_map(|p| (0..2 * c).map(move |k| p * 2 * c + if k % 2 == 0 { k / 2 } else { c + k / 2 }))
        .collect();
    tape.gather(cat, index, hw, 2 * c)
}

pub fn aggregate_on(tape: &mut Tape, x: Var) -> Var {
    let agg = aggregate_branches_on(tape, x);
    interleave_on(tape, agg.channel_level, agg.spatial_level)
}

pub fn aggregate_information(x: &FeatureMap) -> Result<FeatureMap> {
    check_spatial_cap(x.positions(), SPATIAL_COVARIANCE_CAP)?;
    let mut tape = Tape::new();
    let v = tape.constant(x.data.clone());
    let out = aggregate_on(&mut tape, v);
    FeatureMap::new(x.h, x.w, 2 * x.c, tape.value(out).clone())
}

// ---------------------------------------------------------------------------
// Interaction
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub channel_groups: usize,
    pub spatial_groups: usize,
    pub alpha: Tensor,
    pub beta: Tensor,
    /// One `(2C/G) x (C/G)` block per channel group.
    pub channel_weights: Vec<Tensor>,
    pub channel_gamma: Tensor,
    pub channel_shift: Tensor,
    /// One `B x B` block per spatial group, `B = HW/G`.
    pub spatial_weights: Vec<Tensor>,
    pub spatial_gamma: Tensor,
    pub spatial_shift: Tensor,
}

#[derive(Clone, Debug)]
pub struct BoundAttention {
    alpha: Var,
    beta: Var,
    channel_weights: Vec<Var>,
    channel_gamma: Var,
    channel_shift: Var,
    spatial_weights: Vec<Var>,
    spatial_gamma: Var,
    spatial_shift: Var,
}

impl BoundAttention {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.alpha, self.beta];
        v.extend(&self.channel_weights);
        v.extend([self.channel_gamma, self.channel_shift]);
        v.extend(&self.spatial_weights);
        v.extend([self.spatial_gamma, self.spatial_shift]);
        v
    }
}

fn largest_divisor_up_to(n: usize, preferred: usize) -> usize {
    (1..=preferred.max(1)).rev().find(|g| n % g == 0).unwrap_or(1)
}

impl AttentionParams {
    /// Parameters with explicit group counts. `channel_groups` must divide C
    /// and `spatial_groups` must divide H*W.
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        channel_groups: usize,
        spatial_groups: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hw = height * width;
        if channels == 0 || hw == 0 {
            return Err(Error::ShapeMismatch(format!("attention over {height}x{width}x{channels}")));
        }
        if channel_groups == 0 || channels % channel_groups != 0 {
            return Err(Error::InvalidGrouping { groups: channel_groups, axis: channels });
        }
        if spatial_groups == 0 || hw % spatial_groups != 0 {
            return Err(Error::InvalidGrouping { groups: spatial_groups, axis: hw });
        }
        let cin = 2 * channels / channel_groups;
        let cout = channels / channel_groups;
        let block = hw / spatial_groups;
        Ok(Self {
            height,
            width,
            channels,
            channel_groups,
            spatial_groups,
            alpha: Tensor::filled(1, channels, 0.5),
            beta: Tensor::filled(1, channels, 0.5),
            channel_weights: (0..channel_groups).map(|_| uniform_init(cin, cout, cin, rng)).collect(),
            channel_gamma: Tensor::filled(1, channels, 1.0),
            channel_shift: Tensor::zeros(1, channels),
            spatial_weights: (0..spatial_groups).map(|_| uniform_init(block, block, block, rng)).collect(),
            spatial_gamma: Tensor::filled(1, hw, 1.0),
            spatial_shift: Tensor::zeros(1, hw),
        })
    }

    /// Default grouping: two groups wherever two divide the grouped axis, otherwise one.
    pub fn init(height: usize, width: usize, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            largest_divisor_up_to(channels, DEFAULT_GROUPS),
            largest_divisor_up_to(height * width, DEFAULT_GROUPS),
            rng,
        )
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.alpha, &self.beta];
        v.extend(&self.channel_weights);
        v.extend([&self.channel_gamma, &self.channel_shift]);
        v.extend(&self.spatial_weights);
        v.extend([&self.spatial_gamma, &self.spatial_shift]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.alpha, &mut self.beta];
        v.extend(self.channel_weights.iter_mut());
        v.extend([&mut self.channel_gamma, &mut self.channel_shift]);
        v.extend(self.spatial_weights.iter_mut());
        v.extend([&mut self.spatial_gamma, &mut self.spatial_shift]);
        v
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundAttention {
        BoundAttention {
            alpha: bind_tensor(tape, &self.alpha, trainable),
            beta: bind_tensor(tape, &self.beta, trainable),
            channel_weights: self.channel_weights.iter().map(|t| bind_tensor(tape, t, trainable)).collect(),
            channel_gamma: bind_tensor(tape, &self.channel_gamma, trainable),
            channel_shift: bind_tensor(tape, &self.channel_shift, trainable),
            spatial_weights: self.spatial_weights.iter().map(|t| bind_tensor(tape, t, trainable)).collect(),
            spatial_gamma: bind_tensor(tape, &self.spatial_gamma, trainable),
            spatial_shift: bind_tensor(tape, &self.spatial_shift, trainable),
        }
    }

    fn check_input(&self, hw: usize, channels: usize) -> Result<()> {
        if channels % 2 != 0 {
            return Err(Error::ExpectedEvenChannels(channels));
        }
        if hw != self.height * self.width || channels / 2 != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "parameters sized for {}x{}x{}, input has {hw} positions and {channels} channels",
                self.height, self.width, self.channels
            )));
        }
        Ok(())
    }
}

/// Channel-driven branch: grouped 1x1 transform over channels, shared over space.
fn channel_driven_on(tape: &mut Tape, xcs: Var, p: &BoundAttention, groups: usize) -> Var {
    let (_, c2) = tape.shape(xcs);
    let cin = c2 / groups;
    let cout = c2 / 2 / groups;
    let mut outs = Vec::with_capacity(groups);
    for (g, w) in p.channel_weights.iter().enumerate() {
        let part = tape.select_cols(xcs, g * cin, (g + 1) * cin);
        let y = tape.matmul(part, *w);
        let gamma = tape.select_cols(p.channel_gamma, g * cout, (g + 1) * cout);
        let shift = tape.select_cols(p.channel_shift, g * cout, (g + 1) * cout);
        let y = group_norm(tape, y, gamma, shift, NORM_EPS);
        outs.push(tape.relu(y));
    }
    tape.concat_cols(&outs)
}

/// Spatial-driven branch: positions split into contiguous blocks, each block
/// mixed by its own transform shared over channels; interleaved channel pairs
/// are then summed back to C rows.
fn spatial_driven_on(tape: &mut Tape, xcs: Var, p: &BoundAttention, groups: usize) -> Var {
    let (hw, c2) = tape.shape(xcs);
    let block = hw / groups;
    let z = tape.transpose(xcs);
    let mut outs = Vec::with_capacity(groups);
    for (g, w) in p.spatial_weights.iter().enumerate() {
        let part = tape.select_cols(z, g * block, (g + 1) * block);
        let y = tape.matmul(part, *w);
        let gamma = tape.select_cols(p.spatial_gamma, g * block, (g + 1) * block);
        let shift = tape.select_cols(p.spatial_shift, g * block, (g + 1) * block);
        let y = group_norm(tape, y, gamma, shift, NORM_EPS);
        outs.push(tape.relu(y));
    }
    let mixed = tape.concat_cols(&outs);
    let c = c2 / 2;
    let pairs = tape.constant(Tensor::from_fn(c, c2, |r, k| if k / 2 == r { 1.0 } else { 0.0 }));
    let summed = tape.matmul(pairs, mixed);
    tape.transpose(summed)
}

pub fn interact_on(tape: &mut Tape, xcs: Var, params: &AttentionParams, bound: &BoundAttention) -> Result<Var> {
    let (hw, c2) = tape.shape(xcs);
    params.check_input(hw, c2)?;
    let cd = channel_driven_on(tape, xcs, bound, params.channel_groups);
    let sd = spatial_driven_on(tape, xcs, bound, params.spatial_groups);
    let a = tape.mul_row(cd, bound.alpha);
    let b = tape.mul_row(sd, bound.beta);
    Ok(tape.add(a, b))
}

pub fn interact_information(xcs: &FeatureMap, params: &AttentionParams) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let x = tape.constant(xcs.data.clone());
    let bound = params.bind(&mut tape, false);
    let out = interact_on(&mut tape, x, params, &bound)?;
    FeatureMap::new(xcs.h, xcs.w, xcs.c / 2, tape.value(out).clone())
}

/// Gate values `sigmoid(interact(aggregate(x)))`.
pub fn gate_on(tape: &mut Tape, x: Var, params: &AttentionParams, bound: &BoundAttention) -> Result<Var> {
    let (hw, _) = tape.shape(x);
    check_spatial_cap(hw, SPATIAL_COVARIANCE_CAP)?;
    let xcs = aggregate_on(tape, x);
    let fused = interact_on(tape, xcs, params, bound)?;
    Ok(tape.sigmoid(fused))
}

pub fn apply_attention_on(tape: &mut Tape, x: Var, params: &AttentionParams, bound: &BoundAttention) -> Result<Var> {
    let gate = gate_on(tape, x, params, bound)?;
    Ok(tape.mul(x, gate))
}

pub fn apply_attention(x: &FeatureMap, params: &AttentionParams) -> Result<FeatureMap> {
    let mut tape = Tape::new();
    let v = tape.constant(x.data.clone());
    let bound = params.bind(&mut tape, false);
    let out = apply_attention_on(&mut tape, v, params, &bound)?;
    FeatureMap::new(x.h, x.w, x.c, tape.value(out).clone())
}

// ---------------------------------------------------------------------------
// Multi-branch block
// ---------------------------------------------------------------------------

/// Channels split into contiguous sub-features, each gated by its own parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlock {
    pub branches: Vec<AttentionParams>,
}

impl AttentionBlock {
    pub fn new(height: usize, width: usize, channels: usize, branches: usize, rng: &mut impl Rng) -> Result<Self> {
        if branches == 0 || channels % branches != 0 {
            return Err(Error::InvalidGrouping { groups: branches, axis: channels });
        }
        let per = channels / branches;
        let branches = (0..branches)
            .map(|_| AttentionParams::init(height, width, per, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { branches })
    }

    pub fn channels(&self) -> usize {
        self.branches.iter().map(|b| b.channels).sum()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.branches.iter().flat_map(AttentionParams::tensors).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.branches.iter_mut().flat_map(AttentionParams::tensors_mut).collect()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<BoundAttention> {
        self.branches.iter().map(|b| b.bind(tape, trainable)).collect()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, bound: &[BoundAttention]) -> Result<Var> {
        if self.branches.len() == 1 {
            return apply_attention_on(tape, x, &self.branches[0], &bound[0]);
        }
        let mut outs = Vec::with_capacity(self.branches.len());
        let mut start = 0;
        for (p, b) in self.branches.iter().zip(bound) {
            let part = tape.select_cols(x, start, start + p.channels);
            outs.push(apply_attention_on(tape, part, p, b)?);
            start += p.channels;
        }
        Ok(tape.concat_cols(&outs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap::from_fn(h, w, c, |_, _, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn two_pass_channel_cov(x: &FeatureMap) -> Vec<Vec<f64>> {
        let n = x.positions() as f64;
        let c = x.channels();
        let mean: Vec<f64> = (0..c).map(|k| (0..x.positions()).map(|p| x.tensor().get(p, k)).sum::<f64>() / n).collect();
        let mut out = vec![vec![0.0; c]; c];
        for (a, row) in out.iter_mut().enumerate() {
            for (b, v) in row.iter_mut().enumerate() {
                let mut s = 0.0;
                for p in 0..x.positions() {
                    s += (x.tensor().get(p, a) - mean[a]) * (x.tensor().get(p, b) - mean[b]);
                }
                *v = s / n;
            }
        }
        out
    }

    fn two_pass_spatial_cov(x: &FeatureMap) -> Vec<Vec<f64>> {
        let n = x.channels() as f64;
        let hw = x.positions();
        let mean: Vec<f64> = (0..hw).map(|p| x.tensor().row(p).iter().sum::<f64>() / n).collect();
        let mut out = vec![vec![0.0; hw]; hw];
        for (a, row) in out.iter_mut().enumerate() {
            for (b, v) in row.iter_mut().enumerate() {
                let mut s = 0.0;
                for k in 0..x.channels() {
                    s += (x.tensor().get(a, k) - mean[a]) * (x.tensor().get(b, k) - mean[b]);
                }
                *v = s / n;
            }
        }
        out
    }

    #[test]
    fn constant_map_has_zero_covariances() {
        let x = FeatureMap::from_fn(3, 4, 5, |_, _, _| 3.0).unwrap();
        assert!(cross_channel_covariance(&x).unwrap().data().iter().all(|v| v.abs() < 1e-14));
        assert!(cross_spatial_covariance(&x).unwrap().data().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn single_position_and_single_channel_give_zero() {
        let x = random_map(1, 1, 4, 1);
        assert!(cross_channel_covariance(&x).unwrap().data().iter().all(|v| *v == 0.0));
        let y = random_map(3, 3, 1, 2);
        assert!(cross_spatial_covariance(&y).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn covariances_match_two_pass_oracle() {
        let x = random_map(4, 4, 3, 5);
        let cov = cross_channel_covariance(&x).unwrap();
        for (r, row) in two_pass_channel_cov(&x).iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert!((cov.get(r, c) - v).abs() < 1e-10);
            }
        }
        let y = random_map(3, 3, 8, 6);
        let cov = cross_spatial_covariance(&y).unwrap();
        for (r, row) in two_pass_spatial_cov(&y).iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert!((cov.get(r, c) - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn spatial_cap_is_enforced() {
        let x = random_map(3, 3, 2, 7);
        let err = cross_spatial_covariance_capped(&x, 8).unwrap_err();
        assert!(err.to_string().contains("spatial covariance too large"));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let t = Tensor::from_fn(4, 2, |r, _| if r == 2 { f64::NAN } else { 1.0 });
        assert!(matches!(FeatureMap::new(2, 2, 2, t), Err(Error::NonFiniteFeature)));
    }

    #[test]
    fn aggregation_has_broadcast_structure() {
        let x = random_map(4, 4, 3, 8);
        let out = aggregate_information(&x).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (4, 4, 6));
        for ch in 0..6 {
            for p in 0..16 {
                if ch % 2 == 0 {
                    assert_eq!(out.tensor().get(p, ch), out.tensor().get(0, ch));
                } else {
                    assert_eq!(out.tensor().get(p, ch), out.tensor().get(p, 1));
                }
            }
        }
        let zero = FeatureMap::from_fn(4, 4, 3, |_, _, _| 0.0).unwrap();
        assert!(aggregate_information(&zero).unwrap().tensor().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn interaction_selects_channel_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_map(4, 4, 3, 10);
        let xcs = aggregate_information(&x).unwrap();
        let mut p = AttentionParams::init(4, 4, 3, &mut rng).unwrap();
        p.alpha = Tensor::filled(1, 3, 1.0);
        p.beta = Tensor::zeros(1, 3);
        let out = interact_information(&xcs, &p).unwrap();

        let mut tape = Tape::new();
        let xv = tape.constant(xcs.tensor().clone());
        let b = p.bind(&mut tape, false);
        let cd = channel_driven_on(&mut tape, xv, &b, p.channel_groups);
        assert_eq!(tape.value(cd), out.tensor());

        p.alpha = Tensor::zeros(1, 3);
        let out = interact_information(&xcs, &p).unwrap();
        assert!(out.tensor().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn interaction_rejects_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = AttentionParams::init(2, 2, 2, &mut rng).unwrap();
        let odd = random_map(2, 2, 3, 12);
        assert!(matches!(interact_information(&odd, &p), Err(Error::ExpectedEvenChannels(3))));
        assert!(matches!(
            AttentionParams::new(2, 2, 3, 2, 2, &mut rng),
            Err(Error::InvalidGrouping { groups: 2, axis: 3 })
        ));
        assert!(matches!(
            AttentionParams::new(3, 3, 4, 2, 2, &mut rng),
            Err(Error::InvalidGrouping { groups: 2, axis: 9 })
        ));
    }

    #[test]
    fn gate_shrinks_every_nonzero_entry() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random_map(5, 4, 6, 14);
        let p = AttentionParams::init(5, 4, 6, &mut rng).unwrap();
        let out = apply_attention(&x, &p).unwrap();
        for (o, i) in out.tensor().data().iter().zip(x.tensor().data()) {
            assert!(o.abs() < i.abs() || *i == 0.0);
        }
    }

    #[test]
    fn multi_branch_block_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let block = AttentionBlock::new(4, 4, 8, 2, &mut rng).unwrap();
        let x = random_map(4, 4, 8, 16);
        let mut tape = Tape::new();
        let xv = tape.constant(x.tensor().clone());
        let b = block.bind(&mut tape, false);
        let y = block.forward(&mut tape, xv, &b).unwrap();
        assert_eq!(tape.shape(y), (16, 8));
    }
}

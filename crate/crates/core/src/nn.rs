//! Small layer building blocks on top of the autograd tape.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use crate::autograd::{Tape, Tensor, Var, PAD};

/// Register `t` on the tape either as a trainable leaf or as a constant.
pub fn bind_tensor(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        tape.leaf(t.clone())
    } else {
        tape.constant(t.clone())
    }
}

/// Centered uniform draw with fan-in scaling.
pub fn uniform_init(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
}

/// He-uniform draw, for layers followed by a rectifier.
pub fn he_init(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
}

/// Normalize all entries of `x` jointly, then apply a per-column affine map.
pub fn group_norm(tape: &mut Tape, x: Var, gamma: Var, shift: Var, eps: f64) -> Var {
    let (rows, cols) = tape.shape(x);
    let mean = tape.mean(x);
    let mean = tape.broadcast_scalar(mean, rows, cols);
    let centered = tape.sub(x, mean);
    let sq = tape.square(centered);
    let var = tape.mean(sq);
    let var = tape.add_scalar(var, eps);
    let std = tape.sqrt(var);
    let std = tape.broadcast_scalar(std, rows, cols);
    let normed = tape.div(centered, std);
    let scaled = tape.mul_row(normed, gamma);
    tape.add_row(scaled, shift)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self { weight: uniform_init(inputs, outputs, inputs, rng), bias: Tensor::zeros(1, outputs) }
    }

    pub fn new_relu(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self { weight: he_init(inputs, outputs, inputs, rng), bias: Tensor::zeros(1, outputs) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundLinear {
        BoundLinear {
            weight: bind_tensor(tape, &self.weight, trainable),
            bias: bind_tensor(tape, &self.bias, trainable),
        }
    }
}

impl BoundLinear {
    pub fn vars(&self) -> Vec<Var> {
        vec![self.weight, self.bias]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let y = tape.matmul(x, self.weight);
        tape.add_row(y, self.bias)
    }
}

/// Square-kernel convolution over a `(H*W) x C` feature matrix via im2col.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Conv2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

thread_local! {
    static IM2COL: RefCell<HashMap<[usize; 6], Rc<[usize]>>> = RefCell::new(HashMap::new());
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = kernel * kernel * in_channels;
        Self {
            kernel,
            stride,
            padding,
            in_channels,
            out_channels,
            weight: he_init(fan_in, out_channels, fan_in, rng),
            bias: Tensor::zeros(1, out_channels),
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn im2col_index(&self, h: usize, w: usize) -> Rc<[usize]> {
        let key = [h, w, self.in_channels, self.kernel, self.stride, self.padding];
        IM2COL.with(|cache| {
            cache
                .borrow_mut()
                .entry(key)
                .or_insert_with(|| {
                    let (oh, ow) = self.output_size(h, w);
                    let (k, c) = (self.kernel, self.in_channels);
                    let mut index = Vec::with_capacity(oh * ow * k * k * c);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                                    let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                    let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                                    for ci in 0..c {
                                        index.push(if inside {
                                            (iy as usize * w + ix as usize) * c + ci
                                        } else {
                                            PAD
                                        });
                                    }
                                }
                            }
                        }
                    }
                    index.into()
                })
                .clone()
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundLinear {
        BoundLinear {
            weight: bind_tensor(tape, &self.weight, trainable),
            bias: bind_tensor(tape, &self.bias, trainable),
        }
    }

    /// Returns the output matrix and its spatial size.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundLinear, x: Var, h: usize, w: usize) -> (Var, usize, usize) {
        assert_eq!(tape.shape(x), (h * w, self.in_channels), "conv input shape");
        let (oh, ow) = self.output_size(h, w);
        let index = self.im2col_index(h, w);
        let cols = tape.gather(x, index, oh * ow, self.kernel * self.kernel * self.in_channels);
        (bound.forward(tape, cols), oh, ow)
    }
}

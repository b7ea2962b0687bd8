//! A small fully convolutional per-pixel classifier.

use std::hash::{DefaultHasher, Hasher};

use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Layer widths of a [`SegModel`]: `in_channels → hidden… → num_classes`,
/// every convolution `kernel_size × kernel_size` with same padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelArch {
    pub in_channels: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub kernel_size: usize,
}

impl ModelArch {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes < 2 || self.hidden.contains(&0) {
            return Err(Error::invalid(format!("invalid model architecture {self:?}")));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::invalid("kernel_size must be odd"));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.in_channels];
        w.extend(&self.hidden);
        w.push(self.num_classes);
        w
    }

    /// Shapes of the parameter tensors in [`SegModel::params`] order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let k = self.kernel_size;
        self.widths()
            .windows(2)
            .flat_map(|w| [vec![w[1], w[0], k, k], vec![w[1]]])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvLayer {
    weight: Tensor,
    bias: Tensor,
}

/// Convolution stack with ReLU after every layer except the last, which
/// emits `num_classes` logits per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    arch: ModelArch,
    layers: Vec<ConvLayer>,
}

/// Tape handles of a model's parameters, in [`SegModel::params`] order.
pub struct BoundModel {
    vars: Vec<Var>,
}

impl BoundModel {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients of every parameter after a backward pass; parameters the
    /// loss did not reach get zeros.
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
            })
            .collect()
    }
}

impl SegModel {
    /// Fan-in scaled uniform initialisation: weights in `±sqrt(6 / fan_in)`,
    /// biases in `±1 / sqrt(fan_in)`.
    pub fn init(arch: &ModelArch, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let k = arch.kernel_size;
        let layers = arch
            .widths()
            .windows(2)
            .map(|w| {
                let (cin, cout) = (w[0], w[1]);
                let fan_in = (cin * k * k) as f64;
                let wb = (6.0 / fan_in).sqrt();
                let bb = 1.0 / fan_in.sqrt();
                let weight = (0..cout * cin * k * k).map(|_| rng.random_range(-wb..wb)).collect();
                let bias = (0..cout).map(|_| rng.random_range(-bb..bb)).collect();
                ConvLayer {
                    weight: Tensor::new(vec![cout, cin, k, k], weight).expect("sized above"),
                    bias: Tensor::new(vec![cout], bias).expect("sized above"),
                }
            })
            .collect();
        Ok(SegModel {
            arch: arch.clone(),
            layers,
        })
    }

    /// Rebuilds a model from tensors in [`SegModel::params`] order.
    pub fn from_params(arch: &ModelArch, params: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        if params.len() != shapes.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (p, s) in params.iter().zip(&shapes) {
            if p.shape() != s.as_slice() {
                return Err(Error::invalid(format!(
                    "parameter shape {:?} does not match architecture {s:?}",
                    p.shape()
                )));
            }
        }
        let mut it = params.into_iter();
        let layers = (0..shapes.len() / 2)
            .map(|_| ConvLayer {
                weight: it.next().expect("counted"),
                bias: it.next().expect("counted"),
            })
            .collect();
        Ok(SegModel {
            arch: arch.clone(),
            layers,
        })
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("layers.{i}.weight"), format!("layers.{i}.bias")])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Hash of every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in self.params() {
            for &s in p.shape() {
                h.write_usize(s);
            }
            for v in p.data() {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    /// Records the parameters on `tape` as gradient-tracked leaves.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            vars: self.params().into_iter().map(|p| tape.param(p.clone())).collect(),
        }
    }

    /// Logits for `input` using parameters previously bound to `tape`.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundModel, input: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = input;
        for (i, w) in bound.vars.chunks(2).enumerate() {
            h = tape.conv2d(h, w[0], w[1])?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Gradient-free forward pass: `[B, in_channels, H, W] → [B, C, H, W]`.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let last = self.layers.len() - 1;
        let mut h = input.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = kernels::conv2d_forward(&h, &l.weight, &l.bias, false)?.0;
            if i < last {
                h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(h)
    }

    /// Per-pixel class probabilities.
    pub fn predict_probs(&self, input: &Tensor) -> Result<Tensor> {
        kernels::softmax_channels(&self.predict(input)?)
    }
}

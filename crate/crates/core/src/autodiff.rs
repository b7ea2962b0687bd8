//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Operations are recorded in evaluation order; [`Tape::backward`] walks the
//! tape in reverse and accumulates gradients into every leaf that was created
//! with `requires_grad`. Leaf gradients are additive across calls to
//! `backward` until [`Tape::zero_grad`] clears them.
//!
//! ```
//! use prevmatch::autodiff::Tape;
//! use prevmatch::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
//! let y = tape.scale(x, 2.0);
//! let loss = tape.sum(y);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
//! ```

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{LabelMap, PixelMask, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Relu(Var),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: LabelMap,
        mask: PixelMask,
        count: usize,
        probs: Tensor,
    },
    Nll {
        probs: Var,
        targets: LabelMap,
        mask: PixelMask,
        count: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, `None` before any backward pass
    /// reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (x, k, b) = (self.value(input), self.value(kernel), self.value(bias));
        let geom = ConvGeom::check(x, k, b)?;
        let (out, cols) = kernels::conv2d_forward(x, k, b, true)?;
        let op = Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
            cols: cols.unwrap_or_default(),
        };
        Ok(self.push(out, op, &[input, kernel, bias]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| v.max(0.0));
        self.push(out, Op::Relu(input), &[input])
    }

    pub fn softmax_channels(&mut self, logits: Var) -> Result<Var> {
        let out = kernels::softmax_channels(self.value(logits))?;
        Ok(self.push(out, Op::Softmax(logits), &[logits]))
    }

    /// Masked pixel-wise cross-entropy of `[B, C, H, W]` logits; returns the
    /// scalar loss and the number of masked-in pixels (its denominator).
    pub fn masked_cross_entropy(
        &mut self,
        logits: Var,
        targets: &LabelMap,
        mask: &PixelMask,
    ) -> Result<(Var, usize)> {
        let (loss, probs, count) = kernels::masked_ce_logits(self.value(logits), targets, mask)?;
        let op = Op::CrossEntropy {
            logits,
            targets: targets.clone(),
            mask: mask.clone(),
            count,
            probs,
        };
        Ok((self.push(Tensor::scalar(loss), op, &[logits]), count))
    }

    /// Masked mean of `−log p[target]` for a tensor that already holds
    /// per-pixel probabilities.
    pub fn masked_nll(
        &mut self,
        probs: Var,
        targets: &LabelMap,
        mask: &PixelMask,
    ) -> Result<(Var, usize)> {
        let (loss, count) = kernels::masked_nll_probs(self.value(probs), targets, mask)?;
        let op = Op::Nll {
            probs,
            targets: targets.clone(),
            mask: mask.clone(),
            count,
        };
        Ok((self.push(Tensor::scalar(loss), op, &[probs]), count))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::invalid(format!("{op}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Reverse pass from a scalar `loss`. Leaf gradients accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let contributions = self.local_grads(i, &g);
            for (v, cg) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut adj[v.0] {
                    Some(acc) => acc.iter_mut().zip(&cg).for_each(|(a, c)| *a += c),
                    slot => *slot = Some(cg),
                }
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, c)| *a += c),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &self.nodes[i].op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let grads = kernels::conv2d_backward(
                    geom,
                    self.value(*kernel).data(),
                    cols,
                    g,
                    [needs(*input), needs(*kernel), needs(*bias)],
                );
                [(*input, grads.input), (*kernel, grads.kernel), (*bias, grads.bias)]
                    .into_iter()
                    .filter_map(|(v, gr)| gr.map(|gr| (v, gr)))
                    .collect()
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                let gi = xs
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                vec![(*x, gi)]
            }
            Op::Softmax(x) => {
                vec![(*x, kernels::softmax_channels_backward(&self.nodes[i].value, g))]
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                count,
                probs,
            } => vec![(
                *logits,
                kernels::masked_ce_logits_backward(probs, targets, mask, *count, g[0]),
            )],
            Op::Nll {
                probs,
                targets,
                mask,
                count,
            } => vec![(
                *probs,
                kernels::masked_nll_probs_backward(self.value(*probs), targets, mask, *count, g[0]),
            )],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                vec![
                    (*a, g.iter().zip(vb).map(|(g, y)| g * y).collect()),
                    (*b, g.iter().zip(va).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::Scale(a, f) => vec![(*a, g.iter().map(|g| g * f).collect())],
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).numel()])],
        }
    }
}

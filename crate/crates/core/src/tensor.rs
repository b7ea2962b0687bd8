//! Dense row-major `f64` arrays and per-pixel integer/boolean maps.

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64` in row-major order.
///
/// Gradient bookkeeping does not live here: a `Tensor` is a plain value, and
/// a [`crate::autodiff::Tape`] attaches `requires_grad` and gradient buffers
/// to the tensors it records.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(format!("tensor shape {shape:?} has a zero dimension")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "tensor shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// One-element tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Shape as `[n0, n1, n2, n3]`, or a rank error naming `op`.
    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [a, b, c, d] => Ok([a, b, c, d]),
            _ => Err(Error::Rank {
                op,
                expected: 4,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn dims3(&self, op: &'static str) -> Result<[usize; 3]> {
        match self.shape[..] {
            [a, b, c] => Ok([a, b, c]),
            _ => Err(Error::Rank {
                op,
                expected: 3,
                shape: self.shape.clone(),
            }),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot stack an empty list"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::invalid(format!(
                    "stack: shape {:?} differs from {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    /// The `i`-th slice along the leading axis.
    pub fn index_outer(&self, i: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }
}

/// Per-pixel map of shape `[batch, height, width]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Grid<T> {
    batch: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

/// Class ids per pixel.
pub type LabelMap = Grid<u32>;
/// Per-pixel selection, e.g. the confidence mask of a pseudo-label.
pub type PixelMask = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn new(batch: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != batch * height * width {
            return Err(Error::invalid(format!(
                "grid [{batch}, {height}, {width}] needs {} elements, got {}",
                batch * height * width,
                data.len()
            )));
        }
        Ok(Grid {
            batch,
            height,
            width,
            data,
        })
    }

    pub fn filled(batch: usize, height: usize, width: usize, value: T) -> Self {
        Grid {
            batch,
            height,
            width,
            data: vec![value; batch * height * width],
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.batch, self.height, self.width]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, b: usize, y: usize, x: usize) -> &T {
        &self.data[(b * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, b: usize, y: usize, x: usize, v: T) {
        self.data[(b * self.height + y) * self.width + x] = v;
    }

    /// Concatenates maps of identical spatial size along the batch axis.
    pub fn concat(items: &[&Grid<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot concatenate an empty list"))?;
        let mut data = Vec::new();
        let mut batch = 0;
        for g in items {
            if g.height != first.height || g.width != first.width {
                return Err(Error::invalid("concat: spatial sizes differ"));
            }
            batch += g.batch;
            data.extend_from_slice(&g.data);
        }
        Grid::new(batch, first.height, first.width, data)
    }

    /// Item `b` as a batch-of-one map.
    pub fn item(&self, b: usize) -> Self {
        let n = self.height * self.width;
        Grid {
            batch: 1,
            height: self.height,
            width: self.width,
            data: self.data[b * n..(b + 1) * n].to_vec(),
        }
    }
}

impl PixelMask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }
}

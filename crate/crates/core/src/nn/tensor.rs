//! Minimal dense tensor: a contiguous row-major f64 buffer plus a shape.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {expect} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot view {} values as {shape:?}",
                self.data.len()
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Interpret as (N, C, H, W).
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Shape(format!("expected 4 dims, got {:?}", self.shape))),
        }
    }

    /// Interpret as (N, F), flattening any trailing dims.
    pub fn dims2_flat(&self) -> Result<(usize, usize)> {
        if self.shape.is_empty() {
            return Err(Error::Shape("scalar tensor has no batch dim".into()));
        }
        let n = self.shape[0];
        Ok((n, self.data.len() / n.max(1)))
    }

    #[inline]
    pub fn at4(&self, idx: (usize, usize, usize, usize), dims: (usize, usize, usize, usize)) -> f64 {
        let (_, c, h, w) = dims;
        self.data[((idx.0 * c + idx.1) * h + idx.2) * w + idx.3]
    }

    #[inline]
    pub fn at4_mut(
        &mut self,
        idx: (usize, usize, usize, usize),
        dims: (usize, usize, usize, usize),
    ) -> &mut f64 {
        let (_, c, h, w) = dims;
        &mut self.data[((idx.0 * c + idx.1) * h + idx.2) * w + idx.3]
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite value after {context}")));
        }
        Ok(())
    }
}

/// A learnable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Param {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

//! Dense n-dimensional f32 arrays with an optional gradient buffer.
//!
//! Data is stored row-major; image batches use the channels-last layout
//! `[B, H, W, C]`. A tensor consumed by several recorded operations
//! accumulates the sum of their gradient contributions in `grad`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], grad: None }
    }

    pub fn filled(shape: &[usize], value: f32) -> Tensor {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n], grad: None }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data, grad: None })
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor { shape: vec![1], data: vec![value], grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f32]> {
        self.grad.as_deref_mut()
    }

    /// Allocates the gradient buffer (zero-filled) if not already present.
    pub fn ensure_grad(&mut self) -> &mut [f32] {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self.grad.as_deref_mut().unwrap()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `contribution` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, contribution: &[f32]) {
        debug_assert_eq!(contribution.len(), self.data.len());
        let g = self.ensure_grad();
        for (gi, ci) in g.iter_mut().zip(contribution) {
            *gi += ci;
        }
    }

    /// Extent product check for 4-D image batches `[B, H, W, C]`.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[b, h, w, c] => Ok([b, h, w, c]),
            other => Err(Error::Shape(format!("expected 4-D tensor, got {other:?}"))),
        }
    }

    pub fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape.as_slice() {
            &[r, c] => Ok([r, c]),
            other => Err(Error::Shape(format!("expected 2-D tensor, got {other:?}"))),
        }
    }

    pub fn dims1(&self) -> Result<usize> {
        match self.shape.as_slice() {
            &[n] => Ok(n),
            other => Err(Error::Shape(format!("expected 1-D tensor, got {other:?}"))),
        }
    }

    /// Errors if any element is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{context}: element {pos} is {}",
                self.data[pos]
            )));
        }
        Ok(())
    }

    /// Row-major offset of a position in a `[B, H, W, C]` tensor.
    #[inline]
    pub fn offset4(shape: &[usize; 4], b: usize, h: usize, w: usize, c: usize) -> usize {
        ((b * shape[1] + h) * shape[2] + w) * shape[3] + c
    }
}

/// Largest absolute elementwise difference between two equally sized slices.
pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn grad_accumulation_is_additive() {
        let mut t = Tensor::zeros(&[3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn check_finite_flags_nan_and_inf() {
        let mut t = Tensor::zeros(&[2]);
        assert!(t.check_finite("ok").is_ok());
        t.data_mut()[1] = f32::NAN;
        assert!(matches!(t.check_finite("bad"), Err(Error::NonFinite(_))));
        t.data_mut()[1] = f32::INFINITY;
        assert!(t.check_finite("bad").is_err());
    }

    #[test]
    fn offset4_is_row_major() {
        let shape = [2, 4, 4, 3];
        assert_eq!(Tensor::offset4(&shape, 0, 0, 0, 0), 0);
        assert_eq!(Tensor::offset4(&shape, 0, 0, 0, 2), 2);
        assert_eq!(Tensor::offset4(&shape, 0, 0, 1, 0), 3);
        assert_eq!(Tensor::offset4(&shape, 0, 1, 0, 0), 12);
        assert_eq!(Tensor::offset4(&shape, 1, 0, 0, 0), 48);
    }
}

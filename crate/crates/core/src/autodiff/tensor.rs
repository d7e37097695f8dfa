use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: expected a {expected} tensor")]
    Dtype { op: &'static str, expected: &'static str },
    #[error("backward requested through a tensor that does not require gradients")]
    Detached,
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
}

/// Dense row-major tensor, real or complex. Complex data keeps the real and
/// imaginary parts in separate buffers of equal length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    re: Vec<f64>,
    im: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Real,
    Complex,
}

impl Tensor {
    pub fn real(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        check_len("real", shape, data.len())?;
        Ok(Self { shape: shape.to_vec(), re: data, im: None })
    }

    pub fn complex(shape: &[usize], re: Vec<f64>, im: Vec<f64>) -> Result<Self, TensorError> {
        check_len("complex", shape, re.len())?;
        check_len("complex", shape, im.len())?;
        Ok(Self { shape: shape.to_vec(), re, im: Some(im) })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), re: vec![0.0; shape.iter().product()], im: None }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        let n = other.len();
        Self {
            shape: other.shape.clone(),
            re: vec![0.0; n],
            im: other.im.as_ref().map(|_| vec![0.0; n]),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], re: vec![v], im: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn dtype(&self) -> Dtype {
        if self.im.is_some() {
            Dtype::Complex
        } else {
            Dtype::Real
        }
    }

    pub fn is_complex(&self) -> bool {
        self.im.is_some()
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn re_mut(&mut self) -> &mut [f64] {
        &mut self.re
    }

    pub fn im(&self) -> Option<&[f64]> {
        self.im.as_deref()
    }

    pub fn im_mut(&mut self) -> Option<&mut [f64]> {
        self.im.as_deref_mut()
    }

    /// Real data, or an error naming `op` for complex tensors.
    pub(crate) fn real_data(&self, op: &'static str) -> Result<&[f64], TensorError> {
        if self.im.is_some() {
            return Err(TensorError::Dtype { op, expected: "real" });
        }
        Ok(&self.re)
    }

    pub(crate) fn complex_data(&self, op: &'static str) -> Result<(&[f64], &[f64]), TensorError> {
        match &self.im {
            Some(im) => Ok((&self.re, im)),
            None => Err(TensorError::Dtype { op, expected: "complex" }),
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, re: Vec<f64>, im: Option<Vec<f64>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), re.len());
        Self { shape, re, im }
    }

    /// Same data, new shape of equal element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        check_len("reshape", shape, self.len())?;
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Sum of squares over all real components.
    pub fn norm_sq(&self) -> f64 {
        let mut s: f64 = self.re.iter().map(|v| v * v).sum();
        if let Some(im) = &self.im {
            s += im.iter().map(|v| v * v).sum::<f64>();
        }
        s
    }

    pub fn all_finite(&self) -> bool {
        self.re.iter().all(|v| v.is_finite())
            && self.im.as_ref().map_or(true, |im| im.iter().all(|v| v.is_finite()))
    }

    /// Elementwise `self += alpha * other` over every real component.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.re.iter_mut().zip(&other.re) {
            *a += alpha * b;
        }
        if let (Some(a), Some(b)) = (self.im.as_mut(), other.im.as_ref()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale_in_place(&mut self, alpha: f64) {
        self.re.iter_mut().for_each(|v| *v *= alpha);
        if let Some(im) = self.im.as_mut() {
            im.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    /// Iterates every real component, imaginary parts after real parts.
    pub fn components(&self) -> impl Iterator<Item = &f64> {
        self.re.iter().chain(self.im.iter().flatten())
    }

    pub fn components_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.re.iter_mut().chain(self.im.iter_mut().flatten())
    }

    pub fn n_components(&self) -> usize {
        self.re.len() * if self.im.is_some() { 2 } else { 1 }
    }
}

fn check_len(op: &'static str, shape: &[usize], len: usize) -> Result<(), TensorError> {
    let want: usize = shape.iter().product();
    if want != len {
        return Err(TensorError::Shape {
            op,
            detail: format!("shape {shape:?} holds {want} elements, got {len}"),
        });
    }
    Ok(())
}

//! Dense row-major tensors.

use crate::error::{Error, Result};

/// A dense, row-major tensor. Images and feature maps are `Tensor<f32>` laid
/// out as `[channels, height, width]`; logits use `Tensor<f64>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Copy + Default> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::default(); n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension of a `[C, H, W]` map.
    pub fn channels(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of spatial positions (product of all dimensions after the first).
    pub fn pixels(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// Contiguous slice holding channel `c` of a `[C, ...]` map.
    pub fn channel(&self, c: usize) -> &[T] {
        let d = self.pixels();
        &self.data[c * d..(c + 1) * d]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let d = self.pixels();
        &mut self.data[c * d..(c + 1) * d]
    }
}

impl Tensor<f32> {
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Tensor<f64> {
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

//! Channel-major `(C, H, W)` tensors used for renders, scores and seeds.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pixels per channel.
    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Same channel count, both spatial dims scaled by `k`.
    pub const fn scaled(&self, k: usize) -> Self {
        Self::new(self.channels, self.height * k, self.width * k)
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.channels, self.height, self.width)
    }
}

/// Dense real tensor with all entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl ScoreTensor {
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::config("shape", "every dimension must be positive"));
        }
        if data.len() != shape.len() {
            return Err(Error::Length {
                context: "tensor payload",
                expected: shape.len(),
                got: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("tensor payload"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        debug_assert!(!shape.is_empty() && value.is_finite());
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    /// Builds a tensor from `f(channel, row, col)`.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for i in 0..shape.height {
                for j in 0..shape.width {
                    data.push(f(c, i, j));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, i: usize, j: usize) -> usize {
        (c * self.shape.height + i) * self.shape.width + j
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.index(c, i, j)]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn ensure_shape(&self, expected: Shape, context: &'static str) -> Result<()> {
        if self.shape == expected {
            Ok(())
        } else {
            Err(Error::Dimension {
                context,
                expected,
                got: self.shape,
            })
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &Self,
        context: &'static str,
        mut f: impl FnMut(f64, f64) -> f64,
    ) -> Result<Self> {
        other.ensure_shape(self.shape, context)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, a: f64) -> Self {
        self.map(|v| a * v)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: f64, x: &Self) -> Result<()> {
        x.ensure_shape(self.shape, "axpy")?;
        for (s, &v) in self.data.iter_mut().zip(&x.data) {
            *s += a * v;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        other.ensure_shape(self.shape, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Reverses the width axis of every channel.
    pub fn flip_horizontal(&self) -> Self {
        let Shape { height, width, .. } = self.shape;
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(width) {
            row.reverse();
        }
        debug_assert_eq!(out.data.len() % (height * width), 0);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_payloads() {
        let s = Shape::new(1, 2, 2);
        assert!(matches!(
            ScoreTensor::from_vec(s, vec![0.0; 3]),
            Err(Error::Length { .. })
        ));
        assert!(matches!(
            ScoreTensor::from_vec(s, vec![0.0, f64::NAN, 0.0, 0.0]),
            Err(Error::NonFinite(_))
        ));
        assert!(ScoreTensor::from_vec(Shape::new(0, 2, 2), vec![]).is_err());
    }

    #[test]
    fn flip_minimal_row() {
        let x = ScoreTensor::from_vec(Shape::new(1, 1, 2), vec![1.0, 2.0]).unwrap();
        assert_eq!(x.flip_horizontal().data(), &[2.0, 1.0]);
    }

    #[test]
    fn flip_reverses_each_row_of_each_channel() {
        let x = ScoreTensor::from_fn(Shape::new(2, 2, 3), |c, i, j| (100 * c + 10 * i + j) as f64);
        let f = x.flip_horizontal();
        for c in 0..2 {
            for i in 0..2 {
                for j in 0..3 {
                    assert_eq!(f.get(c, i, j), x.get(c, i, 2 - j));
                }
            }
        }
    }
}

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{Generator, GeneratorKind, Pose, SuperRes};
use crate::tensor::{ScoreTensor, Shape};

/// θ is the low-resolution image itself; pose and latent are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectImage {
    shape: Shape,
    latent_dim: usize,
    sr: SuperRes,
}

impl DirectImage {
    pub fn new(shape: Shape, latent_dim: usize, sr: SuperRes) -> Self {
        Self { shape, latent_dim, sr }
    }
}

impl Generator for DirectImage {
    fn kind(&self) -> GeneratorKind {
        GeneratorKind::DirectImage
    }

    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn low_shape(&self) -> Shape {
        self.shape
    }

    fn body_len(&self) -> usize {
        self.shape.len()
    }

    fn super_res(&self) -> SuperRes {
        self.sr
    }

    fn render_low(&self, body: &[f64], _latent: &[f64], _pose: &Pose) -> ScoreTensor {
        ScoreTensor::from_vec(self.shape, body.to_vec()).expect("body length checked by caller")
    }

    fn backprop_low(&self, _body: &[f64], _latent: &[f64], _pose: &Pose, grad: &ScoreTensor, out: &mut [f64]) {
        for (o, g) in out.iter_mut().zip(grad.data()) {
            *o += g;
        }
    }

    fn init_body<R: Rng + ?Sized>(&self, _rng: &mut R) -> Vec<f64> {
        vec![0.0; self.shape.len()]
    }
}

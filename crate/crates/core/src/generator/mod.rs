//! Differentiable generator contract and the two toy implementations.
//!
//! A generator maps `(θ, latent, pose)` to a low-resolution render, then a
//! [`SuperRes`] stage produces the high-resolution render. Gradients enter at
//! either tap point and come back as a vector-Jacobian product over θ.

mod direct;
mod pose;
mod sr;
mod symmetric;

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::standard_normal_vec;
use crate::tensor::{ScoreTensor, Shape};

pub use direct::DirectImage;
pub use pose::{mirror_pose, Pose, DEFAULT_RADIUS, PITCH_SPAN};
pub use sr::{upsample_bilinear, upsample_bilinear_adjoint, SuperRes};
pub use symmetric::{SymmetricToy, SymmetricToyConfig};

/// Where a render-space gradient enters the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tap {
    PreSr,
    PostSr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    DirectImage,
    SymmetricToy,
}

impl GeneratorKind {
    pub fn code(self) -> u32 {
        match self {
            GeneratorKind::DirectImage => 1,
            GeneratorKind::SymmetricToy => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(GeneratorKind::DirectImage),
            2 => Some(GeneratorKind::SymmetricToy),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub low_res: ScoreTensor,
    pub high_res: ScoreTensor,
    pub pose: Pose,
}

impl RenderOutput {
    pub fn at(&self, tap: Tap) -> &ScoreTensor {
        match tap {
            Tap::PreSr => &self.low_res,
            Tap::PostSr => &self.high_res,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub theta: Vec<f64>,
    pub latent_dim: usize,
    pub truncation_psi: f64,
}

/// Flat gradient over θ; gradients from several views add.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient(Vec<f64>);

impl ParamGradient {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        Self(v)
    }

    pub fn dtheta(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn accumulate(&mut self, other: &ParamGradient) {
        debug_assert_eq!(self.0.len(), other.0.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn scale(&mut self, a: f64) {
        self.0.iter_mut().for_each(|v| *v *= a);
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.0.iter().map(|v| v * v).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

pub trait Generator {
    fn kind(&self) -> GeneratorKind;

    fn latent_dim(&self) -> usize;

    /// Shape of the pre-SR render.
    fn low_shape(&self) -> Shape;

    /// Number of parameters owned by the render body (θ minus the SR block).
    fn body_len(&self) -> usize;

    fn super_res(&self) -> SuperRes;

    fn render_low(&self, body: &[f64], latent: &[f64], pose: &Pose) -> ScoreTensor;

    /// Adds `gradᵀ · ∂render_low/∂body` into `out`.
    fn backprop_low(&self, body: &[f64], latent: &[f64], pose: &Pose, grad: &ScoreTensor, out: &mut [f64]);

    /// Initial body parameters.
    fn init_body<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64>;

    fn param_len(&self) -> usize {
        self.body_len() + self.super_res().param_len(self.low_shape().channels)
    }

    fn high_shape(&self) -> Shape {
        self.super_res().output_shape(self.low_shape())
    }

    fn tap_shape(&self, tap: Tap) -> Shape {
        match tap {
            Tap::PreSr => self.low_shape(),
            Tap::PostSr => self.high_shape(),
        }
    }

    fn init_params<R: Rng + ?Sized>(&self, rng: &mut R, truncation_psi: f64) -> GeneratorParams {
        let mut theta = self.init_body(rng);
        theta.extend(self.super_res().init_params(self.low_shape().channels));
        GeneratorParams {
            theta,
            latent_dim: self.latent_dim(),
            truncation_psi,
        }
    }

    /// Indices of θ belonging to convolution biases (frozen during training by default).
    fn conv_bias_indices(&self) -> core::ops::Range<usize> {
        let r = self.super_res().bias_offsets(self.low_shape().channels);
        self.body_len() + r.start..self.body_len() + r.end
    }

    fn check_inputs(&self, params: &GeneratorParams, latent: &[f64]) -> Result<()> {
        if params.theta.len() != self.param_len() {
            return Err(Error::Length {
                context: "generator parameters",
                expected: self.param_len(),
                got: params.theta.len(),
            });
        }
        if latent.len() != self.latent_dim() {
            return Err(Error::Length {
                context: "latent",
                expected: self.latent_dim(),
                got: latent.len(),
            });
        }
        Ok(())
    }

    fn render(&self, params: &GeneratorParams, latent: &[f64], pose: &Pose) -> Result<RenderOutput> {
        self.check_inputs(params, latent)?;
        let (body, sr_params) = params.theta.split_at(self.body_len());
        let low_res = self.render_low(body, latent, pose);
        let high_res = self.super_res().forward(&low_res, sr_params);
        Ok(RenderOutput {
            low_res,
            high_res,
            pose: *pose,
        })
    }

    /// Vector-Jacobian product `gradᵀ · ∂render_tap/∂θ`.
    fn inject_gradient(
        &self,
        params: &GeneratorParams,
        latent: &[f64],
        pose: &Pose,
        grad: &ScoreTensor,
        tap: Tap,
    ) -> Result<ParamGradient> {
        self.check_inputs(params, latent)?;
        grad.ensure_shape(self.tap_shape(tap), "inject_gradient")?;
        let body_len = self.body_len();
        let (body, sr_params) = params.theta.split_at(body_len);
        let mut out = vec![0.0; params.theta.len()];
        match tap {
            Tap::PreSr => self.backprop_low(body, latent, pose, grad, &mut out[..body_len]),
            Tap::PostSr => {
                let low = self.render_low(body, latent, pose);
                let (d_low, d_sr) = self.super_res().backward(&low, sr_params, grad);
                out[body_len..].copy_from_slice(&d_sr);
                self.backprop_low(body, latent, pose, &d_low, &mut out[..body_len]);
            }
        }
        Ok(ParamGradient(out))
    }
}

/// Runtime choice between the toy generators.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyGenerator {
    DirectImage(DirectImage),
    SymmetricToy(SymmetricToy),
}

macro_rules! dispatch {
    ($self:ident, $g:ident => $e:expr) => {
        match $self {
            AnyGenerator::DirectImage($g) => $e,
            AnyGenerator::SymmetricToy($g) => $e,
        }
    };
}

impl Generator for AnyGenerator {
    fn kind(&self) -> GeneratorKind {
        dispatch!(self, g => g.kind())
    }
    fn latent_dim(&self) -> usize {
        dispatch!(self, g => g.latent_dim())
    }
    fn low_shape(&self) -> Shape {
        dispatch!(self, g => g.low_shape())
    }
    fn body_len(&self) -> usize {
        dispatch!(self, g => g.body_len())
    }
    fn super_res(&self) -> SuperRes {
        dispatch!(self, g => g.super_res())
    }
    fn render_low(&self, body: &[f64], latent: &[f64], pose: &Pose) -> ScoreTensor {
        dispatch!(self, g => g.render_low(body, latent, pose))
    }
    fn backprop_low(&self, body: &[f64], latent: &[f64], pose: &Pose, grad: &ScoreTensor, out: &mut [f64]) {
        dispatch!(self, g => g.backprop_low(body, latent, pose, grad, out))
    }
    fn init_body<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        dispatch!(self, g => g.init_body(rng))
    }
}

/// Reverses the width axis, all channels.
pub fn flip_horizontal(x: &ScoreTensor) -> ScoreTensor {
    x.flip_horizontal()
}

/// Fixed 2× bilinear SR stage.
pub fn upsample_sr(low: &ScoreTensor) -> ScoreTensor {
    upsample_bilinear(low)
}

/// `psi · z` with `z ~ N(0, I)`.
pub fn sample_latent<R: Rng + ?Sized>(dim: usize, psi: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(psi > 0.0 && psi <= 1.0) {
        return Err(Error::config("truncation_psi", "must lie in (0, 1]"));
    }
    let mut z = standard_normal_vec(dim, rng);
    z.iter_mut().for_each(|v| *v *= psi);
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn latent_truncation_variance() {
        let mut rng = stream(8, Stream::Latent);
        let z = sample_latent(100_000, 0.8, &mut rng).unwrap();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / z.len() as f64;
        assert!((var / 0.64 - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn latent_psi_one_and_determinism() {
        let a = sample_latent(16, 1.0, &mut stream(3, Stream::Latent)).unwrap();
        let b = sample_latent(16, 1.0, &mut stream(3, Stream::Latent)).unwrap();
        let raw = standard_normal_vec(16, &mut stream(3, Stream::Latent));
        assert_eq!(a, b);
        assert_eq!(a, raw);
        assert!(sample_latent(4, 0.0, &mut stream(3, Stream::Latent)).is_err());
        assert!(sample_latent(4, 1.5, &mut stream(3, Stream::Latent)).is_err());
    }

    #[test]
    fn kind_codes_roundtrip() {
        for k in [GeneratorKind::DirectImage, GeneratorKind::SymmetricToy] {
            assert_eq!(GeneratorKind::from_code(k.code()), Some(k));
        }
        assert_eq!(GeneratorKind::from_code(0), None);
    }
}

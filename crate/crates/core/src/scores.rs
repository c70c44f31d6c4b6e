//! Score-model contract and closed-form score oracles.
//!
//! Sign convention: `score = ∇_{x_t} log p(x_t) = −ε̂ / √(1 − ᾱ_t)`.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::distill::grid_assemble;
use crate::error::{Error, Result};
use crate::generator::upsample_bilinear;
use crate::schedule::NoiseSchedule;
use crate::tensor::{ScoreTensor, Shape};

/// Classifier-free guidance weight used by default.
pub const DEFAULT_CFG_WEIGHT: f64 = 7.5;
/// Control-module guidance weight used by default.
pub const DEFAULT_CONTROL_WEIGHT: f64 = 1.0;

/// `−eps_hat / √(1 − ᾱ_t)`.
pub fn eps_to_score(eps_hat: &ScoreTensor, t: usize, s: &NoiseSchedule) -> Result<ScoreTensor> {
    let g = s.noise_scale(t)?;
    if g == 0.0 {
        return Err(Error::DegenerateTimestep { t });
    }
    Ok(eps_hat.map(|e| -e / g))
}

/// Inverse of [`eps_to_score`]: `−√(1 − ᾱ_t) · score`.
pub fn score_to_eps(score: &ScoreTensor, t: usize, s: &NoiseSchedule) -> Result<ScoreTensor> {
    let g = s.noise_scale(t)?;
    if g == 0.0 {
        return Err(Error::DegenerateTimestep { t });
    }
    Ok(score.map(|v| -g * v))
}

/// `uncond + w · (cond − uncond)`.
pub fn cfg_combine(cond: &ScoreTensor, uncond: &ScoreTensor, w: f64) -> Result<ScoreTensor> {
    uncond.zip_map(cond, "cfg_combine", |u, c| u + w * (c - u))
}

/// Diffused variance `ᾱ·var0 + 1 − ᾱ` of a Gaussian with per-entry variance `var0`.
fn diffused_var(alpha_bar: f64, var0: f64) -> f64 {
    alpha_bar * var0 + 1.0 - alpha_bar
}

/// Exact score of `x_t` when `x0 ~ N(mean, var0·I)`.
pub fn gaussian_score(
    x_t: &ScoreTensor,
    t: usize,
    mean: &ScoreTensor,
    var0: f64,
    s: &NoiseSchedule,
) -> Result<ScoreTensor> {
    if !(var0 > 0.0) {
        return Err(Error::config("var0", "must be positive"));
    }
    let ab = s.alpha_bar(t)?;
    let sa = libm::sqrt(ab);
    let var = diffused_var(ab, var0);
    mean.zip_map(x_t, "gaussian_score", |m, x| (sa * m - x) / var)
}

/// Exact score of `x_t` when `x0` follows an isotropic Gaussian mixture over whole tensors.
pub fn gmm_score(
    x_t: &ScoreTensor,
    t: usize,
    means: &[ScoreTensor],
    var0: f64,
    weights: &[f64],
    s: &NoiseSchedule,
) -> Result<ScoreTensor> {
    validate_mixture(means.len(), weights)?;
    if !(var0 > 0.0) {
        return Err(Error::config("var0", "must be positive"));
    }
    for m in means {
        m.ensure_shape(x_t.shape(), "gmm_score")?;
    }
    let ab = s.alpha_bar(t)?;
    let sa = libm::sqrt(ab);
    let var = diffused_var(ab, var0);

    // log-responsibilities; zero-weight components drop out
    let logits: Vec<Option<f64>> = means
        .iter()
        .zip(weights)
        .map(|(m, &w)| {
            (w > 0.0).then(|| {
                let d2: f64 = m
                    .data()
                    .iter()
                    .zip(x_t.data())
                    .map(|(mu, x)| {
                        let d = x - sa * mu;
                        d * d
                    })
                    .sum();
                libm::log(w) - d2 / (2.0 * var)
            })
        })
        .collect();
    let max = logits.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let unnorm: Vec<f64> = logits
        .iter()
        .map(|l| l.map_or(0.0, |l| libm::exp(l - max)))
        .collect();
    let z: f64 = unnorm.iter().sum();

    let mut out = ScoreTensor::zeros(x_t.shape());
    for (m, &r) in means.iter().zip(&unnorm) {
        if r == 0.0 {
            continue;
        }
        let r = r / z;
        let comp = m.zip_map(x_t, "gmm_score", |mu, x| (sa * mu - x) / var)?;
        out.axpy(r, &comp)?;
    }
    Ok(out)
}

pub fn validate_mixture(n: usize, weights: &[f64]) -> Result<()> {
    if n == 0 {
        return Err(Error::config("means", "mixture needs at least one component"));
    }
    if weights.len() != n {
        return Err(Error::Length {
            context: "mixture weights",
            expected: n,
            got: weights.len(),
        });
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::config("weights", "must be non-negative and finite"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::config("weights", "must sum to 1"));
    }
    Ok(())
}

/// How the views inside a scored tensor are arranged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewLayout {
    Single,
    /// 2×2 mosaic of equal tiles, row-major.
    Grid2x2,
}

/// One score evaluation request as seen by a score model.
#[derive(Debug, Clone, Copy)]
pub struct ScoreQuery<'a> {
    pub x_t: &'a ScoreTensor,
    pub t: usize,
    pub schedule: &'a NoiseSchedule,
    /// Pre-noise render used for depth conditioning.
    pub control: Option<&'a ScoreTensor>,
    pub cfg_weight: f64,
    pub layout: ViewLayout,
}

/// Anything that can answer `∇_{x_t} log p(x_t | y)`. Evaluated without gradients.
pub trait ScoreModel {
    type Error: From<Error>;

    fn score(&mut self, query: &ScoreQuery<'_>) -> Result<ScoreTensor, Self::Error>;
}

impl<S: ScoreModel + ?Sized> ScoreModel for &mut S {
    type Error = S::Error;

    fn score(&mut self, query: &ScoreQuery<'_>) -> Result<ScoreTensor, Self::Error> {
        (**self).score(query)
    }
}

/// Full description of a request to an external denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRequest {
    pub x_t: ScoreTensor,
    pub t: usize,
    pub prompt: String,
    pub negative_prompt: String,
    pub cfg_weight: f64,
    pub control_image: Option<ScoreTensor>,
    pub control_weight: f64,
}

impl ScoreRequest {
    pub fn validate(&self) -> Result<()> {
        if !(self.cfg_weight >= 0.0 && self.cfg_weight.is_finite()) {
            return Err(Error::config("cfg_weight", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.control_weight) {
            return Err(Error::config("control_weight", "must lie in [0, 1]"));
        }
        if let Some(c) = &self.control_image {
            c.ensure_shape(self.x_t.shape(), "control_image")?;
        }
        Ok(())
    }
}

/// Location of a target density, resolved per scored resolution.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    /// Same value in every entry, at any shape.
    Constant(f64),
    /// An image at the generator's low resolution; 2× views use its bilinear upsample.
    Image(ScoreTensor),
}

impl Target {
    /// The target at one view's shape.
    pub fn for_view(&self, view: Shape) -> Result<ScoreTensor> {
        match self {
            Target::Constant(v) => Ok(ScoreTensor::filled(view, *v)),
            Target::Image(img) => {
                let s = img.shape();
                if view == s {
                    Ok(img.clone())
                } else if view == s.scaled(2) {
                    Ok(upsample_bilinear(img))
                } else {
                    Err(Error::Dimension {
                        context: "oracle target",
                        expected: s,
                        got: view,
                    })
                }
            }
        }
    }

    /// The target laid out like the scored tensor.
    pub fn for_query(&self, shape: Shape, layout: ViewLayout) -> Result<ScoreTensor> {
        match layout {
            ViewLayout::Single => self.for_view(shape),
            ViewLayout::Grid2x2 => {
                if !shape.height.is_multiple_of(2) || !shape.width.is_multiple_of(2) {
                    return Err(Error::config("layout", "grid needs even height and width"));
                }
                let tile = self.for_view(Shape::new(shape.channels, shape.height / 2, shape.width / 2))?;
                grid_assemble(&[tile.clone(), tile.clone(), tile.clone(), tile])
            }
        }
    }
}

/// Score of `x0 ~ N(target, var0·I)`; ignores prompt and control inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOracle {
    pub target: Target,
    pub var0: f64,
}

impl ScoreModel for GaussianOracle {
    type Error = Error;

    fn score(&mut self, q: &ScoreQuery<'_>) -> Result<ScoreTensor> {
        let mean = self.target.for_query(q.x_t.shape(), q.layout)?;
        gaussian_score(q.x_t, q.t, &mean, self.var0, q.schedule)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmOracle {
    pub components: Vec<Target>,
    pub weights: Vec<f64>,
    pub var0: f64,
}

impl GmmOracle {
    pub fn new(components: Vec<Target>, weights: Vec<f64>, var0: f64) -> Result<Self> {
        validate_mixture(components.len(), &weights)?;
        if !(var0 > 0.0) {
            return Err(Error::config("var0", "must be positive"));
        }
        Ok(Self {
            components,
            weights,
            var0,
        })
    }
}

impl ScoreModel for GmmOracle {
    type Error = Error;

    fn score(&mut self, q: &ScoreQuery<'_>) -> Result<ScoreTensor> {
        let means = self
            .components
            .iter()
            .map(|c| c.for_query(q.x_t.shape(), q.layout))
            .collect::<Result<Vec<_>>>()?;
        gmm_score(q.x_t, q.t, &means, self.var0, &self.weights, q.schedule)
    }
}

/// Always zero.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ZeroScore;

impl ScoreModel for ZeroScore {
    type Error = Error;

    fn score(&mut self, q: &ScoreQuery<'_>) -> Result<ScoreTensor> {
        q.schedule.check(q.t)?;
        Ok(ScoreTensor::zeros(q.x_t.shape()))
    }
}

//! Gradient seeds and multi-view distillation steps.
//!
//! A *seed* is `dL/dx0` in render space; the optimizer descends on
//! `seedᵀ · ∂x0/∂θ`. For LD the seed is `−√ᾱ_t · score`, so descending on it
//! raises the render's log-likelihood under the score model.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{mirror_pose, Generator, GeneratorParams, ParamGradient, Pose, Tap};
use crate::rng::{standard_normal_tensor, StreamSet};
use crate::schedule::{NoiseSchedule, TimestepRange};
use crate::scores::{score_to_eps, ScoreModel, ScoreQuery, ViewLayout, DEFAULT_CFG_WEIGHT};
use crate::tensor::{ScoreTensor, Shape};

/// `ω · (eps_hat − eps)`.
pub fn sds_gradient(eps_hat: &ScoreTensor, eps: &ScoreTensor, omega: f64) -> Result<ScoreTensor> {
    eps_hat.zip_map(eps, "sds_gradient", |h, e| omega * (h - e))
}

/// LD seed `−√ᾱ_t · score`.
pub fn ld_seed(score: &ScoreTensor, t: usize, s: &NoiseSchedule) -> Result<ScoreTensor> {
    Ok(ld_seed_with_alpha_bar(score, s.alpha_bar(t)?))
}

pub fn ld_seed_with_alpha_bar(score: &ScoreTensor, alpha_bar: f64) -> ScoreTensor {
    let sa = libm::sqrt(alpha_bar);
    score.map(|v| -sa * v)
}

/// Per-singular-value damping, largest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RankWeights(Vec<f64>);

impl RankWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::config("rank_weights", "must not be empty"));
        }
        if w[0] != 1.0 {
            return Err(Error::config("rank_weights", "first weight must be 1"));
        }
        if w.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config("rank_weights", "entries must lie in [0, 1]"));
        }
        if w.windows(2).any(|p| p[1] > p[0]) {
            return Err(Error::config("rank_weights", "must be non-increasing"));
        }
        Ok(Self(w))
    }

    /// `diag(1, 0.75, 0.5, 0.25)` for 4-channel latents.
    pub fn four_channel() -> Self {
        Self(alloc::vec![1.0, 0.75, 0.5, 0.25])
    }

    /// Linear decay `1 − k/C`, which is [`Self::four_channel`] at `C = 4`.
    pub fn linear(channels: usize) -> Self {
        Self((0..channels).map(|k| 1.0 - k as f64 / channels as f64).collect())
    }

    pub fn ones(channels: usize) -> Self {
        Self(alloc::vec![1.0; channels])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for RankWeights {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<RankWeights> for Vec<f64> {
    fn from(w: RankWeights) -> Self {
        w.0
    }
}

/// SVD of the `C × (H·W)` view of `seed`, singular values rescaled by `rw`:
/// returns `U · diag(w) · Σ · Vᵀ`.
pub fn rank_weigh(seed: &ScoreTensor, rw: &RankWeights) -> Result<ScoreTensor> {
    let shape = seed.shape();
    if rw.0.len() != shape.channels {
        return Err(Error::Length {
            context: "rank_weights",
            expected: shape.channels,
            got: rw.0.len(),
        });
    }
    if !seed.is_finite() {
        return Err(Error::NonFinite("rank_weigh input"));
    }
    let rows = shape.channels;
    let n = shape.plane();
    let mut svd = RowSvd::new(seed.data(), rows, n)?;
    let order = svd.order();
    let mut weights = vec![0.0; rows];
    for (rank, &k) in order.iter().enumerate() {
        weights[k] = rw.0[rank];
    }
    // Qᵀ · diag(w) · A
    for (k, w) in weights.iter().enumerate() {
        for v in &mut svd.a[k * n..(k + 1) * n] {
            *v *= w;
        }
    }
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        let dst = &mut out[r * n..(r + 1) * n];
        for k in 0..rows {
            let q = svd.q[k * rows + r];
            if q != 0.0 {
                for (d, a) in dst.iter_mut().zip(&svd.a[k * n..(k + 1) * n]) {
                    *d += q * a;
                }
            }
        }
    }
    ScoreTensor::from_vec(shape, out)
}

/// One-sided Jacobi SVD of a short, wide row-major matrix `X`.
///
/// Plane rotations `Q` are applied from the left until the rows of `A = Q·X`
/// are mutually orthogonal. Then `X = Qᵀ·A`, the singular values are the row
/// norms of `A` and the left singular vectors are the columns of `Qᵀ`.
#[derive(Debug, Clone)]
pub struct RowSvd {
    a: Vec<f64>,
    q: Vec<f64>,
    rows: usize,
    cols: usize,
}

const JACOBI_MAX_SWEEPS: usize = 64;

impl RowSvd {
    pub fn new(x: &[f64], rows: usize, cols: usize) -> Result<Self> {
        if x.len() != rows * cols {
            return Err(Error::Length {
                context: "svd input",
                expected: rows * cols,
                got: x.len(),
            });
        }
        let mut q = vec![0.0; rows * rows];
        for k in 0..rows {
            q[k * rows + k] = 1.0;
        }
        let mut svd = Self { a: x.to_vec(), q, rows, cols };
        for _ in 0..JACOBI_MAX_SWEEPS {
            if !svd.sweep() {
                return Ok(svd);
            }
        }
        Err(Error::Numeric("svd did not converge"))
    }

    /// Returns whether any rotation was applied.
    fn sweep(&mut self) -> bool {
        let (m, n) = (self.rows, self.cols);
        let tol = f64::EPSILON * n as f64;
        // rows below this squared norm are rounding residue of a dependent row
        let floor = f64::EPSILON * f64::EPSILON * self.a.iter().map(|v| v * v).sum::<f64>();
        let mut rotated = false;
        for p in 0..m {
            for r in p + 1..m {
                let (head, tail) = self.a.split_at_mut(r * n);
                let ap = &mut head[p * n..(p + 1) * n];
                let ar = &mut tail[..n];
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for (x, y) in ap.iter().zip(ar.iter()) {
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if alpha <= floor || beta <= floor || libm::fabs(gamma) <= tol * libm::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = libm::copysign(1.0, zeta) / (libm::fabs(zeta) + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                for (x, y) in ap.iter_mut().zip(ar.iter_mut()) {
                    let (xp, yr) = (*x, *y);
                    *x = c * xp - s * yr;
                    *y = s * xp + c * yr;
                }
                let (head, tail) = self.q.split_at_mut(r * m);
                let qp = &mut head[p * m..(p + 1) * m];
                let qr = &mut tail[..m];
                for (x, y) in qp.iter_mut().zip(qr.iter_mut()) {
                    let (xp, yr) = (*x, *y);
                    *x = c * xp - s * yr;
                    *y = s * xp + c * yr;
                }
            }
        }
        rotated
    }

    /// Row indices of `A` by descending singular value.
    fn order(&self) -> Vec<usize> {
        let sv = self.unsorted_values();
        let mut idx: Vec<usize> = (0..self.rows).collect();
        idx.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
        idx
    }

    fn unsorted_values(&self) -> Vec<f64> {
        self.a
            .chunks(self.cols)
            .map(|row| libm::sqrt(row.iter().map(|v| v * v).sum::<f64>()))
            .collect()
    }

    /// Singular values, largest first.
    pub fn singular_values(&self) -> Vec<f64> {
        let sv = self.unsorted_values();
        self.order().into_iter().map(|k| sv[k]).collect()
    }
}

/// Places four equal tiles into a `(C, 2H, 2W)` mosaic: 0 1 on top, 2 3 below.
pub fn grid_assemble(views: &[ScoreTensor; 4]) -> Result<ScoreTensor> {
    let tile = views[0].shape();
    for v in &views[1..] {
        v.ensure_shape(tile, "grid_assemble")?;
    }
    let (h, w) = (tile.height, tile.width);
    Ok(ScoreTensor::from_fn(tile.scaled(2), |c, i, j| {
        let k = 2 * (i / h) + j / w;
        views[k].get(c, i % h, j % w)
    }))
}

/// Exact inverse of [`grid_assemble`].
pub fn grid_scatter(grid: &ScoreTensor) -> Result<[ScoreTensor; 4]> {
    let s = grid.shape();
    if !s.height.is_multiple_of(2) || !s.width.is_multiple_of(2) {
        return Err(Error::config("grid", "height and width must be even"));
    }
    let tile = Shape::new(s.channels, s.height / 2, s.width / 2);
    Ok(core::array::from_fn(|k| {
        let (oi, oj) = ((k / 2) * tile.height, (k % 2) * tile.width);
        ScoreTensor::from_fn(tile, |c, i, j| grid.get(c, oi + i, oj + j))
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    Sds,
    Ld,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillStepConfig {
    pub mode: DistillMode,
    pub t_range: TimestepRange,
    pub cfg_weight: f64,
    pub rank_weights: Option<RankWeights>,
    pub tap: Tap,
    /// SDS timestep weight ω(t), held constant.
    pub omega: f64,
    /// Halve the summed mirror-pair gradient.
    pub mirror_average: bool,
}

impl DistillStepConfig {
    pub fn mirror() -> Self {
        Self {
            mode: DistillMode::Ld,
            t_range: TimestepRange::MIRROR,
            cfg_weight: DEFAULT_CFG_WEIGHT,
            rank_weights: Some(RankWeights::four_channel()),
            tap: Tap::PostSr,
            omega: 1.0,
            mirror_average: false,
        }
    }

    pub fn grid() -> Self {
        Self {
            t_range: TimestepRange::GRID,
            tap: Tap::PreSr,
            ..Self::mirror()
        }
    }
}

/// Result of one distillation step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub grad: ParamGradient,
    /// Render-space seed after rank weighing (grid-shaped for grid steps).
    pub seed: ScoreTensor,
    pub t: usize,
}

/// Noise `x0` once, score once, and turn the score into a render-space seed.
fn score_seed<S: ScoreModel>(
    x0: &ScoreTensor,
    layout: ViewLayout,
    model: &mut S,
    schedule: &NoiseSchedule,
    cfg: &DistillStepConfig,
    streams: &mut StreamSet,
) -> Result<(ScoreTensor, usize), S::Error> {
    let t = schedule.sample_timestep(cfg.t_range, &mut streams.timestep);
    let eps = standard_normal_tensor(x0.shape(), &mut streams.noise);
    let x_t = schedule.forward_diffuse(x0, t, &eps)?;
    let score = model.score(&ScoreQuery {
        x_t: &x_t,
        t,
        schedule,
        control: Some(x0),
        cfg_weight: cfg.cfg_weight,
        layout,
    })?;
    score.ensure_shape(x_t.shape(), "score model output")?;
    if !score.is_finite() {
        return Err(Error::NonFinite("score model output").into());
    }
    let seed = match cfg.mode {
        DistillMode::Ld => ld_seed(&score, t, schedule)?,
        DistillMode::Sds => sds_gradient(&score_to_eps(&score, t, schedule)?, &eps, cfg.omega)?,
    };
    let seed = match &cfg.rank_weights {
        Some(rw) => rank_weigh(&seed, rw)?,
        None => seed,
    };
    Ok((seed, t))
}

/// One score evaluation at `pose` drives both `pose` and its mirror; the
/// mirror view receives the horizontally flipped seed.
pub fn mirror_ld_step<G: Generator, S: ScoreModel>(
    g: &G,
    params: &GeneratorParams,
    latent: &[f64],
    pose: &Pose,
    model: &mut S,
    schedule: &NoiseSchedule,
    cfg: &DistillStepConfig,
    streams: &mut StreamSet,
) -> Result<StepOutput, S::Error> {
    if cfg.tap != Tap::PostSr {
        return Err(Error::config("tap", "mirror steps inject at post_sr").into());
    }
    let x0 = g.render(params, latent, pose)?.high_res;
    let (seed, t) = score_seed(&x0, ViewLayout::Single, model, schedule, cfg, streams)?;
    let mut grad = g.inject_gradient(params, latent, pose, &seed, Tap::PostSr)?;
    let mirrored = g.inject_gradient(params, latent, &mirror_pose(pose), &seed.flip_horizontal(), Tap::PostSr)?;
    grad.accumulate(&mirrored);
    if cfg.mirror_average {
        grad.scale(0.5);
    }
    Ok(StepOutput { grad, seed, t })
}

/// Four views scored jointly as one 2×2 mosaic at the resolution of `cfg.tap`.
pub fn grid_ld_step<G: Generator, S: ScoreModel>(
    g: &G,
    params: &GeneratorParams,
    latent: &[f64],
    poses: &[Pose; 4],
    model: &mut S,
    schedule: &NoiseSchedule,
    cfg: &DistillStepConfig,
    streams: &mut StreamSet,
) -> Result<StepOutput, S::Error> {
    for i in 0..4 {
        for j in 0..i {
            if poses[i] == poses[j] {
                return Err(Error::config("poses", "grid poses must be distinct").into());
            }
        }
    }
    let mut tiles = Vec::with_capacity(4);
    for p in poses {
        let r = g.render(params, latent, p)?;
        tiles.push(match cfg.tap {
            Tap::PreSr => r.low_res,
            Tap::PostSr => r.high_res,
        });
    }
    let tiles: [ScoreTensor; 4] = tiles.try_into().expect("four renders");
    let x0 = grid_assemble(&tiles)?;
    let (seed, t) = score_seed(&x0, ViewLayout::Grid2x2, model, schedule, cfg, streams)?;
    let parts = grid_scatter(&seed)?;
    let mut grad = ParamGradient::zeros(params.theta.len());
    for (p, part) in poses.iter().zip(&parts) {
        grad.accumulate(&g.inject_gradient(params, latent, p, part, cfg.tap)?);
    }
    Ok(StepOutput { grad, seed, t })
}

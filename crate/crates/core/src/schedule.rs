//! Discrete DDPM forward process.
//!
//! Timesteps are 1-indexed: `t ∈ 1..=T`, with `alpha_bar(t) = ∏_{s≤t} (1 − β_s)`.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ScoreTensor;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 2e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    noise_scales: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β from `beta_start` to `beta_end` over `steps` timesteps.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if !(beta_start > 0.0 && beta_start < 1.0) {
            return Err(Error::config("beta_start", "must lie in (0, 1)"));
        }
        if !(beta_end >= beta_start && beta_end < 1.0) {
            return Err(Error::config("beta_end", "must lie in [beta_start, 1)"));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|k| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * k as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        // β this small rounds 1 − β to 1 and breaks strict monotonicity
        let mut prev = 1.0;
        for &a in &alpha_bars {
            if !(a < prev && a > 0.0) {
                return Err(Error::config(
                    "beta_start",
                    "schedule is not strictly decreasing in f64 (β too small or too large)",
                ));
            }
            prev = a;
        }
        let noise_scales = alpha_bars.iter().map(|a| libm::sqrt(1.0 - a)).collect();
        Ok(Self {
            betas,
            alpha_bars,
            noise_scales,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::TimestepOutOfRange {
                t,
                steps: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// `g(t) = √(1 − ᾱ_t)`.
    pub fn noise_scale(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.noise_scales[t - 1])
    }

    /// `√ᾱ_t`, the Jacobian `∂x_t/∂x_0`.
    pub fn signal_scale(&self, t: usize) -> Result<f64> {
        Ok(libm::sqrt(self.alpha_bar(t)?))
    }

    /// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · eps`.
    pub fn forward_diffuse(&self, x0: &ScoreTensor, t: usize, eps: &ScoreTensor) -> Result<ScoreTensor> {
        let a = self.signal_scale(t)?;
        let g = self.noise_scale(t)?;
        x0.zip_map(eps, "forward_diffuse", |x, e| a * x + g * e)
    }

    pub fn sample_timestep<R: Rng + ?Sized>(&self, range: TimestepRange, rng: &mut R) -> usize {
        range.sample(self.steps(), rng)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule constants are valid")
    }
}

/// Fractional timestep window `[lo, hi]` of the schedule length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct TimestepRange {
    lo: f64,
    hi: f64,
}

impl TimestepRange {
    /// Noise window for the mirror phase.
    pub const MIRROR: Self = Self { lo: 0.70, hi: 0.96 };
    /// Noise window for the grid phase.
    pub const GRID: Self = Self { lo: 0.30, hi: 0.80 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo >= 0.0 && lo < hi && hi <= 1.0) {
            return Err(Error::config("t_range", "need 0 <= lo < hi <= 1"));
        }
        Ok(Self { lo, hi })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    /// Uniform fraction in `[lo, hi]`, mapped to `round(frac · T)` clamped to `1..=T`.
    pub fn sample<R: Rng + ?Sized>(&self, steps: usize, rng: &mut R) -> usize {
        let frac = rng.random_range(self.lo..=self.hi);
        let t = libm::round(frac * steps as f64) as usize;
        t.clamp(1, steps)
    }
}

impl TryFrom<[f64; 2]> for TimestepRange {
    type Error = Error;

    fn try_from(v: [f64; 2]) -> Result<Self> {
        Self::new(v[0], v[1])
    }
}

impl From<TimestepRange> for [f64; 2] {
    fn from(r: TimestepRange) -> Self {
        [r.lo, r.hi]
    }
}

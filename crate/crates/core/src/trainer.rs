//! The distillation loop: phase scheduling, latent and pose sampling, Adam steps.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::distill::{grid_ld_step, mirror_ld_step, DistillStepConfig, StepOutput};
use crate::error::{Error, Result};
use crate::generator::{sample_latent, Generator, GeneratorParams, Pose};
use crate::optim::Adam;
use crate::rng::{stream, Stream, StreamSet};
use crate::schedule::NoiseSchedule;
use crate::scores::ScoreModel;

pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
pub const DEFAULT_TRUNCATION_PSI: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Mirror,
    Grid,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Mirror => "mirror",
            Phase::Grid => "grid",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Order in which mirror and grid iterations run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseSchedule {
    /// The first `ceil(N/2)` iterations are mirror steps, the rest grid steps.
    Sequential,
    /// Alternating blocks of `k` mirror then `k` grid iterations.
    Interleaved(usize),
}

impl Default for PhaseSchedule {
    fn default() -> Self {
        PhaseSchedule::Interleaved(1)
    }
}

impl PhaseSchedule {
    /// Phase of 0-based `iteration` out of `total`, given which phases are on.
    pub fn phase_at(self, iteration: u64, total: u64, mirror: bool, grid: bool) -> Option<Phase> {
        match (mirror, grid) {
            (false, false) => None,
            (true, false) => Some(Phase::Mirror),
            (false, true) => Some(Phase::Grid),
            (true, true) => Some(match self {
                PhaseSchedule::Sequential if iteration < total.div_ceil(2) => Phase::Mirror,
                PhaseSchedule::Sequential => Phase::Grid,
                PhaseSchedule::Interleaved(k) if (iteration / k.max(1) as u64).is_multiple_of(2) => Phase::Mirror,
                PhaseSchedule::Interleaved(_) => Phase::Grid,
            }),
        }
    }
}

/// How the four grid poses are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridPoses {
    /// Four independent pose draws.
    #[default]
    Independent,
    /// One random start yaw, then quarter turns.
    AzimuthSweep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub iterations: u64,
    pub learning_rate: f64,
    pub truncation_psi: f64,
    pub phase_schedule: PhaseSchedule,
    pub mirror: Option<DistillStepConfig>,
    pub grid: Option<DistillStepConfig>,
    pub grid_poses: GridPoses,
    pub freeze_conv_bias: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            learning_rate: DEFAULT_LEARNING_RATE,
            truncation_psi: DEFAULT_TRUNCATION_PSI,
            phase_schedule: PhaseSchedule::default(),
            mirror: Some(DistillStepConfig::mirror()),
            grid: Some(DistillStepConfig::grid()),
            grid_poses: GridPoses::default(),
            freeze_conv_bias: true,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if !(self.truncation_psi > 0.0 && self.truncation_psi <= 1.0) {
            return Err(Error::config("truncation_psi", "must lie in (0, 1]"));
        }
        if self.mirror.is_none() && self.grid.is_none() {
            return Err(Error::config("phases", "at least one of mirror and grid must be enabled"));
        }
        if matches!(self.phase_schedule, PhaseSchedule::Interleaved(0)) {
            return Err(Error::config("phase_schedule", "interleave block must be at least 1"));
        }
        for (field, cfg) in [("mirror", &self.mirror), ("grid", &self.grid)] {
            if let Some(c) = cfg {
                if !(c.cfg_weight >= 0.0 && c.cfg_weight.is_finite()) {
                    return Err(Error::config(field, "cfg_weight must be non-negative"));
                }
                if !c.omega.is_finite() {
                    return Err(Error::config(field, "omega must be finite"));
                }
            }
        }
        Ok(())
    }

    pub fn phase_at(&self, iteration: u64) -> Option<Phase> {
        self.phase_schedule
            .phase_at(iteration, self.iterations, self.mirror.is_some(), self.grid.is_some())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    pub phase: Phase,
    pub t: usize,
    pub seed_norm: f64,
    pub grad_norm: f64,
    pub step_norm: f64,
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub params: GeneratorParams,
    pub adam: Adam,
    pub iteration: u64,
    pub rng_positions: [u128; 4],
}

#[derive(Debug, Clone)]
pub struct Trainer<G> {
    generator: G,
    config: TrainerConfig,
    seed: u64,
    params: GeneratorParams,
    adam: Adam,
    streams: StreamSet,
    iteration: u64,
    frozen: Option<Vec<bool>>,
}

impl<G: Generator> Trainer<G> {
    pub fn new(generator: G, config: TrainerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = generator.init_params(&mut stream(seed, Stream::Init), config.truncation_psi);
        Self::assemble(generator, config, seed, params, None, 0, StreamSet::new(seed))
    }

    /// Starts from explicit parameters, for example a fixed initial image.
    pub fn with_params(generator: G, config: TrainerConfig, seed: u64, params: GeneratorParams) -> Result<Self> {
        config.validate()?;
        Self::assemble(generator, config, seed, params, None, 0, StreamSet::new(seed))
    }

    pub fn resume(generator: G, config: TrainerConfig, seed: u64, state: TrainerState) -> Result<Self> {
        config.validate()?;
        let streams = StreamSet::restore(seed, state.rng_positions);
        Self::assemble(generator, config, seed, state.params, Some(state.adam), state.iteration, streams)
    }

    fn assemble(
        generator: G,
        config: TrainerConfig,
        seed: u64,
        mut params: GeneratorParams,
        adam: Option<Adam>,
        iteration: u64,
        streams: StreamSet,
    ) -> Result<Self> {
        let n = generator.param_len();
        if params.theta.len() != n {
            return Err(Error::Length {
                context: "generator parameters",
                expected: n,
                got: params.theta.len(),
            });
        }
        params.truncation_psi = config.truncation_psi;
        let adam = adam.unwrap_or_else(|| Adam::new(n));
        if adam.len() != n {
            return Err(Error::Length {
                context: "adam state",
                expected: n,
                got: adam.len(),
            });
        }
        let bias = generator.conv_bias_indices();
        let frozen = (config.freeze_conv_bias && !bias.is_empty()).then(|| {
            let mut m = vec![false; n];
            m[bias].iter_mut().for_each(|b| *b = true);
            m
        });
        Ok(Self {
            generator,
            config,
            seed,
            params,
            adam,
            streams,
            iteration,
            frozen,
        })
    }

    pub fn generator(&self) -> &G {
        &self.generator
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &GeneratorParams {
        &self.params
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            params: self.params.clone(),
            adam: self.adam.clone(),
            iteration: self.iteration,
            rng_positions: self.streams.positions(),
        }
    }

    /// Runs one iteration. On error, parameters and optimizer state are unchanged.
    pub fn step<S: ScoreModel>(&mut self, model: &mut S, schedule: &NoiseSchedule) -> Result<StepRecord, S::Error> {
        let phase = self
            .config
            .phase_at(self.iteration)
            .ok_or_else(|| Error::config("phases", "no phase enabled"))?;
        let latent = sample_latent(self.generator.latent_dim(), self.config.truncation_psi, &mut self.streams.latent)?;
        let out: StepOutput = match phase {
            Phase::Mirror => {
                let cfg = self.config.mirror.as_ref().expect("mirror phase is enabled");
                let pose = Pose::sample(&mut self.streams.pose);
                mirror_ld_step(
                    &self.generator,
                    &self.params,
                    &latent,
                    &pose,
                    model,
                    schedule,
                    cfg,
                    &mut self.streams,
                )?
            }
            Phase::Grid => {
                let cfg = self.config.grid.as_ref().expect("grid phase is enabled");
                let poses = match self.config.grid_poses {
                    GridPoses::Independent => core::array::from_fn(|_| Pose::sample(&mut self.streams.pose)),
                    GridPoses::AzimuthSweep => Pose::sample_azimuth_sweep(&mut self.streams.pose),
                };
                grid_ld_step(
                    &self.generator,
                    &self.params,
                    &latent,
                    &poses,
                    model,
                    schedule,
                    cfg,
                    &mut self.streams,
                )?
            }
        };
        let step_norm = self.adam.update(
            &mut self.params.theta,
            &out.grad,
            self.config.learning_rate,
            self.frozen.as_deref(),
        )?;
        let record = StepRecord {
            iteration: self.iteration,
            phase,
            t: out.t,
            seed_norm: out.seed.norm(),
            grad_norm: out.grad.norm(),
            step_norm,
        };
        self.iteration += 1;
        Ok(record)
    }
}

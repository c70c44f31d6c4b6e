//! Central-difference check of the injected LD gradient.

use std::io::Write;

use ldistill_core::distill::ld_seed;
use ldistill_core::generator::{sample_latent, Generator, GeneratorParams, Pose, Tap};
use ldistill_core::rng::{standard_normal_tensor, StreamSet};
use ldistill_core::scores::{ScoreModel, ScoreQuery, ViewLayout};
use rand::Rng;

use crate::config::RunConfig;
use crate::error::RunError;
use crate::runner::{initial_params, Source};

pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub probe: usize,
    pub index: usize,
    pub tap: Tap,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub probes: Vec<Probe>,
    pub threshold: f64,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.threshold
    }

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["probe", "index", "tap", "analytic", "numeric", "rel_err"])?;
        for p in &self.probes {
            let tap = match p.tap {
                Tap::PreSr => "pre_sr",
                Tap::PostSr => "post_sr",
            };
            out.write_record([
                p.probe.to_string(),
                p.index.to_string(),
                tap.to_string(),
                format!("{:e}", p.analytic),
                format!("{:e}", p.numeric),
                format!("{:e}", p.rel_err),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// `|a − n| / max(|a|, |n|)`, zero when both vanish.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares the injected gradient of a fixed LD seed against central
/// differences of `⟨seed, render_tap(θ)⟩` at `probes` random coordinates, at
/// both taps. Needs an oracle score source.
pub fn gradcheck(cfg: &RunConfig, probes: usize, h: f64) -> Result<GradcheckReport, RunError> {
    if !cfg.is_oracle() {
        return Err(RunError::Unsupported("gradcheck needs a gaussian or gmm score source".into()));
    }
    let resolved = cfg.resolve()?;
    let g = resolved.generator;
    let schedule = resolved.schedule;
    let mut source = Source::from_config(cfg)?;
    let params = initial_params(cfg, &g);
    let mut streams = StreamSet::new(cfg.seed);
    let latent = sample_latent(g.latent_dim(), cfg.truncation_psi, &mut streams.latent)?;
    let pose = Pose::sample(&mut streams.pose);
    let render = g.render(&params, &latent, &pose)?;

    let mut out = Vec::with_capacity(2 * probes);
    for tap in [Tap::PreSr, Tap::PostSr] {
        let x0 = render.at(tap);
        let range = match tap {
            Tap::PreSr => cfg.grid.t_range,
            Tap::PostSr => cfg.mirror.t_range,
        };
        let t = schedule.sample_timestep(range, &mut streams.timestep);
        let eps = standard_normal_tensor(x0.shape(), &mut streams.noise);
        let x_t = schedule.forward_diffuse(x0, t, &eps)?;
        let score = source.score(&ScoreQuery {
            x_t: &x_t,
            t,
            schedule: &schedule,
            layout: ViewLayout::Single,
            control: Some(x0),
            cfg_weight: cfg.cfg_weight,
        })?;
        let seed = ld_seed(&score, t, &schedule)?;
        let analytic = g.inject_gradient(&params, &latent, &pose, &seed, tap)?;
        let objective = |theta: &[f64]| -> Result<f64, RunError> {
            let p = GeneratorParams {
                theta: theta.to_vec(),
                ..params.clone()
            };
            Ok(seed.dot(g.render(&p, &latent, &pose)?.at(tap))?)
        };
        let mut theta = params.theta.clone();
        let mut pick = streams.pose.clone();
        for k in 0..probes {
            let index = pick.random_range(0..theta.len());
            let orig = theta[index];
            theta[index] = orig + h;
            let plus = objective(&theta)?;
            theta[index] = orig - h;
            let minus = objective(&theta)?;
            theta[index] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.dtheta()[index];
            out.push(Probe {
                probe: k,
                index,
                tap,
                analytic: a,
                numeric,
                rel_err: relative_error(a, numeric),
            });
        }
    }
    Ok(GradcheckReport {
        probes: out,
        threshold: DEFAULT_THRESHOLD,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_cases() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1.0, 0.0), 1.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}

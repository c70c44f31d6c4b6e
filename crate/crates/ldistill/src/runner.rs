//! Run execution: output directory, CSV log, checkpoints and the JSON report.

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ldistill_core::generator::{AnyGenerator, Generator, GeneratorParams};
use ldistill_core::rng::{stream, Stream};
use ldistill_core::scores::{GaussianOracle, GmmOracle, ScoreModel, ScoreQuery};
use ldistill_core::trainer::{Phase, StepRecord, Trainer};
use ldistill_core::ScoreTensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::{InitSpec, RunConfig, ScoreSource};
use crate::error::RunError;
use crate::protocol::{BackendClient, BackendSource, ClientError};

pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "log.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const LOCK_FILE: &str = "run.lock";
pub const LOG_HEADER: [&str; 7] = ["iter", "phase", "t", "seed_norm", "grad_norm", "step_norm", "ms"];

/// Oracle or backend score source selected by the config.
#[derive(Debug)]
pub enum Source {
    Gaussian(GaussianOracle),
    Gmm(GmmOracle),
    Backend(BackendSource),
}

impl Source {
    pub fn from_config(cfg: &RunConfig) -> Result<Self, RunError> {
        if let Some(o) = cfg.gaussian_oracle() {
            return Ok(Source::Gaussian(o));
        }
        if let Some(o) = cfg.gmm_oracle() {
            return Ok(Source::Gmm(o?));
        }
        let ScoreSource::Backend { address, timeout_ms } = &cfg.score else {
            unreachable!("score sources are gaussian, gmm or backend")
        };
        let client = BackendClient::connect(address, Duration::from_millis(*timeout_ms))?;
        Ok(Source::Backend(BackendSource {
            client,
            prompt: cfg.prompt.text.clone(),
            negative_prompt: cfg.prompt.negative.clone(),
            control_weight: cfg.prompt.control_weight,
        }))
    }
}

impl ScoreModel for Source {
    type Error = ClientError;

    fn score(&mut self, q: &ScoreQuery<'_>) -> Result<ScoreTensor, ClientError> {
        match self {
            Source::Gaussian(o) => Ok(o.score(q)?),
            Source::Gmm(o) => Ok(o.score(q)?),
            Source::Backend(b) => b.score(q),
        }
    }
}

pub fn initial_params(cfg: &RunConfig, g: &AnyGenerator) -> GeneratorParams {
    let mut p = g.init_params(&mut stream(cfg.seed, Stream::Init), cfg.truncation_psi);
    if let InitSpec::Constant(v) = cfg.generator.init {
        p.theta[..g.body_len()].fill(v);
    }
    p
}

/// `sha256:<hex>` over the config echo and the stored f32 parameters.
pub fn content_digest(config_toml: &str, params_f32: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(config_toml.as_bytes());
    h.update([0u8]);
    h.update(params_f32);
    let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{hex}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PhaseCounts {
    pub mirror: u64,
    pub grid: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub record: StepRecord,
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub seed: u64,
    pub iterations_planned: u64,
    pub iterations_completed: u64,
    pub phase_counts: PhaseCounts,
    pub config: RunConfig,
    pub config_file: String,
    pub log_file: String,
    /// Relative to the run directory.
    pub checkpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last: Option<StepRecord>,
    pub digest: String,
    pub elapsed_ms: u64,
    #[serde(skip)]
    pub rows: Vec<LogRow>,
}

/// Exclusive claim on an output directory.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self, RunError> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(RunError::Busy(dir.to_owned())),
            Err(e) => Err(RunError::io(&path)(e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Runs `cfg` against its configured score source.
pub fn run(cfg: &RunConfig, out_dir: &Path) -> Result<RunReport, RunError> {
    cfg.resolve()?;
    let mut source = Source::from_config(cfg)?;
    run_with(cfg, out_dir, &mut source)
}

/// Runs `cfg` against an explicit score model.
pub fn run_with<S>(cfg: &RunConfig, out_dir: &Path, model: &mut S) -> Result<RunReport, RunError>
where
    S: ScoreModel,
    RunError: From<S::Error>,
{
    let resolved = cfg.resolve()?;
    fs::create_dir_all(out_dir.join(CHECKPOINT_DIR)).map_err(RunError::io(out_dir))?;
    let _lock = DirLock::acquire(out_dir)?;
    let config_toml = cfg.to_toml();
    fs::write(out_dir.join(CONFIG_FILE), &config_toml).map_err(RunError::io(out_dir.join(CONFIG_FILE)))?;

    let params = initial_params(cfg, &resolved.generator);
    let mut trainer = Trainer::with_params(resolved.generator, resolved.trainer, cfg.seed, params)?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log = csv::Writer::from_writer(File::create(&log_path).map_err(RunError::io(&log_path))?);
    let csv_err = |e: csv::Error| RunError::format(&log_path, e);
    log.write_record(LOG_HEADER).map_err(csv_err)?;

    let started = Instant::now();
    let mut counts = PhaseCounts::default();
    let mut rows = Vec::with_capacity(cfg.iterations as usize);
    let mut failure = None;
    while !trainer.is_done() {
        let t0 = Instant::now();
        let rec = match trainer.step(model, &resolved.schedule) {
            Ok(r) => r,
            Err(e) => {
                failure = Some(RunError::from(e));
                break;
            }
        };
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        match rec.phase {
            Phase::Mirror => counts.mirror += 1,
            Phase::Grid => counts.grid += 1,
        }
        log.write_record([
            rec.iteration.to_string(),
            rec.phase.to_string(),
            rec.t.to_string(),
            rec.seed_norm.to_string(),
            rec.grad_norm.to_string(),
            rec.step_norm.to_string(),
            format!("{ms:.3}"),
        ])
        .map_err(csv_err)?;
        rows.push(LogRow { record: rec, ms });
        let done = trainer.iteration();
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && !trainer.is_done() {
            let name = format!("iter_{done:08}.dgen");
            trainer = commit(trainer, &out_dir.join(CHECKPOINT_DIR).join(name))?;
            log::info!("iteration {done}: checkpoint written");
        }
    }
    log.flush().map_err(RunError::io(&log_path))?;

    let (status, name) = match failure {
        None => (RunStatus::Completed, "final.dgen"),
        Some(_) => (RunStatus::Failed, "last_good.dgen"),
    };
    let rel = format!("{CHECKPOINT_DIR}/{name}");
    let ck = Checkpoint::capture(&trainer);
    ck.save(&out_dir.join(&rel))?;
    let report = RunReport {
        status,
        error: failure.as_ref().map(ToString::to_string),
        seed: cfg.seed,
        iterations_planned: cfg.iterations,
        iterations_completed: trainer.iteration(),
        phase_counts: counts,
        config: cfg.clone(),
        config_file: CONFIG_FILE.into(),
        log_file: LOG_FILE.into(),
        checkpoint: rel,
        last: rows.last().map(|r| r.record),
        digest: content_digest(&config_toml, &ck.params_f32_bytes()),
        elapsed_ms: started.elapsed().as_millis() as u64,
        rows,
    };
    let report_path = out_dir.join(REPORT_FILE);
    let json = serde_json::to_string_pretty(&report).map_err(|e| RunError::format(&report_path, e))?;
    fs::write(&report_path, json + "\n").map_err(RunError::io(&report_path))?;
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Saves a checkpoint and continues from exactly what was stored.
fn commit<G: Generator + Clone>(trainer: Trainer<G>, path: &Path) -> Result<Trainer<G>, RunError> {
    let ck = Checkpoint::capture(&trainer);
    ck.save(path)?;
    let stored = Checkpoint::from_bytes(&ck.to_bytes(), trainer.config().truncation_psi)?;
    Ok(Trainer::resume(
        trainer.generator().clone(),
        trainer.config().clone(),
        trainer.seed(),
        stored.state,
    )?)
}

/// Reads a run directory's report.
pub fn load_report(run_dir: &Path) -> Result<RunReport, RunError> {
    let path = run_dir.join(REPORT_FILE);
    let text = fs::read_to_string(&path).map_err(RunError::io(&path))?;
    serde_json::from_str(&text).map_err(|e| RunError::format(&path, e))
}

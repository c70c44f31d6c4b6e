//! Post-run report: integrity check, loss curves, turntable renders and a summary.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use ldistill_core::generator::{Generator, Pose, DEFAULT_RADIUS};
use ldistill_core::trainer::StepRecord;
use ldistill_core::ScoreTensor;

use crate::checkpoint::Checkpoint;
use crate::config::{parse_config_str, ScoreSource};
use crate::error::RunError;
use crate::ppm::write_ppm;
use crate::runner::{content_digest, load_report, RunReport, LOG_FILE};

pub const TURNTABLE_VIEWS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutput {
    pub curves: PathBuf,
    pub renders: Vec<PathBuf>,
    pub summary: PathBuf,
    pub summary_text: String,
}

/// Yaw of turntable view `k`, wrapped into `(-π, π]`.
pub fn turntable_yaw(k: usize) -> f64 {
    let yaw = k as f64 * core::f64::consts::TAU / TURNTABLE_VIEWS as f64;
    if yaw > core::f64::consts::PI {
        yaw - core::f64::consts::TAU
    } else {
        yaw
    }
}

/// Rows of a run's `log.csv` without the timing column.
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>, RunError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| RunError::format(path, e))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| RunError::format(path, e))?;
        let field = |i: usize| rec.get(i).ok_or_else(|| RunError::format(path, format!("row has {} fields", rec.len())));
        let num = |i: usize| -> Result<f64, RunError> {
            field(i)?.parse().map_err(|e| RunError::format(path, format!("column {i}: {e}")))
        };
        let phase = match field(1)? {
            "mirror" => ldistill_core::trainer::Phase::Mirror,
            "grid" => ldistill_core::trainer::Phase::Grid,
            other => return Err(RunError::format(path, format!("unknown phase {other:?}"))),
        };
        rows.push(StepRecord {
            iteration: num(0)? as u64,
            phase,
            t: num(2)? as usize,
            seed_norm: num(3)?,
            grad_norm: num(4)?,
            step_norm: num(5)?,
        });
    }
    Ok(rows)
}

/// Builds the report for `run_dir` into `out_dir`. Fails with an integrity
/// error when the final checkpoint does not match the run's digest.
pub fn build_report(run_dir: &Path, out_dir: &Path) -> Result<ReportOutput, RunError> {
    let report = load_report(run_dir)?;
    let config_path = run_dir.join(&report.config_file);
    let config_text = fs::read_to_string(&config_path).map_err(RunError::io(&config_path))?;
    let cfg = parse_config_str(&config_text, std::iter::empty::<(String, String)>())?;
    let ck = Checkpoint::load(&run_dir.join(&report.checkpoint), cfg.truncation_psi)?;
    let digest = content_digest(&config_text, &ck.params_f32_bytes());
    if digest != report.digest {
        return Err(RunError::Integrity(format!(
            "{} digests to {digest}, report records {}",
            report.checkpoint, report.digest
        )));
    }
    let g = cfg.generator.build()?;
    ck.check_compatible(&g)?;
    let params = ck.state.params.clone();

    fs::create_dir_all(out_dir).map_err(RunError::io(out_dir))?;
    let rows = read_log(&run_dir.join(LOG_FILE))?;
    let curves = out_dir.join("curves.csv");
    write_curves(&curves, &rows)?;

    let latent = vec![0.0; g.latent_dim()];
    let mut renders = Vec::with_capacity(TURNTABLE_VIEWS);
    let mut frontal = None;
    for k in 0..TURNTABLE_VIEWS {
        let pose = Pose::new(turntable_yaw(k), 0.0, DEFAULT_RADIUS)?;
        let img = g.render(&params, &latent, &pose)?.high_res;
        let path = out_dir.join(format!("render_yaw_{k}.ppm"));
        write_ppm(&path, &img).map_err(RunError::io(&path))?;
        renders.push(path);
        if k == 0 {
            frontal = Some(img);
        }
    }

    let target_mse = match &cfg.score {
        ScoreSource::Gaussian { target, .. } => {
            let img = frontal.expect("at least one view");
            let t = target.image(g.low_shape(), img.shape())?;
            Some(mse(&img, &t))
        }
        _ => None,
    };
    let summary_text = summarize(&report, &rows, target_mse);
    let summary = out_dir.join("summary.txt");
    fs::write(&summary, &summary_text).map_err(RunError::io(&summary))?;
    Ok(ReportOutput {
        curves,
        renders,
        summary,
        summary_text,
    })
}

fn write_curves(path: &Path, rows: &[StepRecord]) -> Result<(), RunError> {
    let file = File::create(path).map_err(RunError::io(path))?;
    let mut w = csv::Writer::from_writer(file);
    let err = |e: csv::Error| RunError::format(path, e);
    w.write_record(["iter", "phase", "t", "seed_norm", "grad_norm", "step_norm"]).map_err(err)?;
    for r in rows {
        w.write_record([
            r.iteration.to_string(),
            r.phase.to_string(),
            r.t.to_string(),
            r.seed_norm.to_string(),
            r.grad_norm.to_string(),
            r.step_norm.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(RunError::io(path))
}

fn mse(a: &ScoreTensor, b: &ScoreTensor) -> f64 {
    let n = a.data().len().max(1) as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

fn summarize(report: &RunReport, rows: &[StepRecord], target_mse: Option<f64>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "status: {:?}", report.status);
    let _ = writeln!(s, "seed: {}", report.seed);
    let _ = writeln!(
        s,
        "iterations: {} of {} (mirror {}, grid {})",
        report.iterations_completed, report.iterations_planned, report.phase_counts.mirror, report.phase_counts.grid
    );
    let _ = writeln!(s, "digest: {}", report.digest);
    if let Some(e) = &report.error {
        let _ = writeln!(s, "error: {e}");
    }
    if rows.is_empty() {
        let _ = writeln!(s, "no updates");
    } else {
        let mean = |f: fn(&StepRecord) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
        let last = rows.last().expect("non-empty");
        let _ = writeln!(s, "mean seed_norm: {:.6e}", mean(|r| r.seed_norm));
        let _ = writeln!(s, "mean grad_norm: {:.6e}", mean(|r| r.grad_norm));
        let _ = writeln!(s, "final step_norm: {:.6e}", last.step_norm);
    }
    if let Some(m) = target_mse {
        let _ = writeln!(s, "frontal target_mse: {m:.6e}");
    }
    s
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ldistill::checkpoint::Checkpoint;
use ldistill::config::{parse_config_str, RunConfig};
use ldistill::echo::{EchoConfig, EchoServer, Fault};
use ldistill::report::{build_report, read_log};
use ldistill::runner::{initial_params, load_report, run, RunStatus, Source, LOCK_FILE};
use ldistill::RunError;
use ldistill_core::generator::{Generator, Pose, DEFAULT_RADIUS};
use ldistill_core::trainer::Trainer;
use ldistill_core::Shape;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_ldistill");

fn toy(iterations: u64, extra: &str) -> RunConfig {
    let text = format!(
        r#"
iterations = {iterations}
seed = 3
learning_rate = 1e-2
{extra}

[generator]
kind = "symmetric_toy"
channels = 3
height = 8
width = 8
grid = 4
latent_dim = 4
super_res = "learnable"

[score]
kind = "gmm"
means = [{{ constant = 0.5 }}, {{ constant = -0.5 }}]
var0 = 0.25
"#
    );
    parse_config_str(&text, std::iter::empty()).unwrap()
}

fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let p = dir.join("in.toml");
    fs::write(&p, cfg.to_toml()).unwrap();
    p
}

fn cli(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("RUST_LOG").output().unwrap()
}

fn stderr_line(out: &Output) -> serde_json::Value {
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {text}");
    serde_json::from_str(lines[0]).unwrap()
}

#[test]
fn run_directory_layout_and_log() {
    let dir = TempDir::new().unwrap();
    let cfg = toy(30, "checkpoint_every = 10");
    let report = run(&cfg, dir.path()).unwrap();
    for f in ["config.toml", "log.csv", "report.json", "checkpoints/final.dgen"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    for k in [10, 20] {
        assert!(dir.path().join(format!("checkpoints/iter_{k:08}.dgen")).is_file());
    }
    assert!(!dir.path().join("checkpoints/iter_00000030.dgen").exists());
    assert!(!dir.path().join(LOCK_FILE).exists());
    assert_eq!(report.status, RunStatus::Completed);
    assert_eq!(report.phase_counts.mirror + report.phase_counts.grid, 30);
    assert_eq!(report.phase_counts.mirror, 15);

    let rows = read_log(&dir.path().join("log.csv")).unwrap();
    assert_eq!(rows.len(), 30);
    let logged: Vec<_> = report.rows.iter().map(|r| r.record).collect();
    assert_eq!(rows, logged);
    let header = fs::read_to_string(dir.path().join("log.csv")).unwrap();
    assert!(header.starts_with("iter,phase,t,seed_norm,grad_norm,step_norm,ms\n"));

    let on_disk = load_report(dir.path()).unwrap();
    assert_eq!(on_disk.digest, report.digest);
    assert_eq!(on_disk.config, cfg);
}

#[test]
fn equal_seeds_give_equal_digests() {
    let cfg = toy(25, "checkpoint_every = 7");
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let ra = run(&cfg, a.path()).unwrap();
    let rb = run(&cfg, b.path()).unwrap();
    assert_eq!(ra.digest, rb.digest);
    assert_eq!(
        fs::read(a.path().join("checkpoints/final.dgen")).unwrap(),
        fs::read(b.path().join("checkpoints/final.dgen")).unwrap()
    );
    let mut other = cfg.clone();
    other.seed += 1;
    let c = TempDir::new().unwrap();
    assert_ne!(run(&other, c.path()).unwrap().digest, ra.digest);
}

#[test]
fn resuming_from_a_checkpoint_reproduces_the_tail() {
    let cfg = toy(40, "checkpoint_every = 20");
    let dir = TempDir::new().unwrap();
    run(&cfg, dir.path()).unwrap();
    let resolved = cfg.resolve().unwrap();
    let mid = Checkpoint::load(&dir.path().join("checkpoints/iter_00000020.dgen"), cfg.truncation_psi).unwrap();
    mid.check_compatible(&resolved.generator).unwrap();
    let mut trainer = Trainer::resume(resolved.generator, resolved.trainer, cfg.seed, mid.state).unwrap();
    let mut model = Source::from_config(&cfg).unwrap();
    let mut tail = Vec::new();
    while !trainer.is_done() {
        tail.push(trainer.step(&mut model, &resolved.schedule).unwrap());
    }
    let logged = read_log(&dir.path().join("log.csv")).unwrap();
    assert_eq!(tail, logged[20..]);
    let fin = Checkpoint::load(&dir.path().join("checkpoints/final.dgen"), cfg.truncation_psi).unwrap();
    assert_eq!(Checkpoint::capture(&trainer).params_f32_bytes(), fin.params_f32_bytes());
}

#[test]
fn zero_iteration_run_reports_no_updates() {
    let cfg = toy(0, "");
    let dir = TempDir::new().unwrap();
    let report = run(&cfg, dir.path()).unwrap();
    assert_eq!(report.iterations_completed, 0);
    assert!(report.last.is_none());
    let out = TempDir::new().unwrap();
    let r = build_report(dir.path(), out.path()).unwrap();
    assert!(r.summary_text.contains("no updates"));
    assert_eq!(fs::read_to_string(&r.curves).unwrap(), "iter,phase,t,seed_norm,grad_norm,step_norm\n");

    let g = cfg.resolve().unwrap().generator;
    let p = initial_params(&cfg, &g);
    let img = g
        .render(&p, &vec![0.0; g.latent_dim()], &Pose::new(0.0, 0.0, DEFAULT_RADIUS).unwrap())
        .unwrap()
        .high_res;
    let expect = ldistill::ppm::encode_ppm(&img);
    assert_eq!(fs::read(&r.renders[0]).unwrap(), expect);
}

#[test]
fn report_is_idempotent() {
    let cfg = toy(12, "");
    let dir = TempDir::new().unwrap();
    run(&cfg, dir.path()).unwrap();
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let ra = build_report(dir.path(), a.path()).unwrap();
    build_report(dir.path(), b.path()).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 10);
    for n in &names {
        assert_eq!(fs::read(a.path().join(n)).unwrap(), fs::read(b.path().join(n)).unwrap(), "{n:?}");
    }
    assert_eq!(ra.renders.len(), 8);
    // rerun into the same directory
    build_report(dir.path(), a.path()).unwrap();
    assert_eq!(fs::read(&ra.summary).unwrap(), fs::read(b.path().join("summary.txt")).unwrap());
}

#[test]
fn tampering_is_detected() {
    let dir = TempDir::new().unwrap();
    run(&toy(5, ""), dir.path()).unwrap();
    let cfg_path = dir.path().join("config.toml");
    let text = fs::read_to_string(&cfg_path).unwrap();
    fs::write(&cfg_path, text.replace("seed = 3", "seed = 4")).unwrap();
    let out = TempDir::new().unwrap();
    let e = build_report(dir.path(), out.path()).unwrap_err();
    assert!(matches!(e, RunError::Integrity(_)), "{e}");
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn busy_directory_is_refused() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join(LOCK_FILE), "").unwrap();
    let e = run(&toy(3, ""), dir.path()).unwrap_err();
    assert!(matches!(e, RunError::Busy(_)), "{e}");
    assert!(!dir.path().join("report.json").exists());
}

fn backend_config(addr: &str) -> RunConfig {
    let text = format!(
        r#"
iterations = 6

[generator]
kind = "direct_image"
channels = 4
height = 8
width = 8
super_res = "identity"

[score]
kind = "backend"
address = "{addr}"
timeout_ms = 2000

[grid]
enabled = false
"#
    );
    parse_config_str(&text, std::iter::empty()).unwrap()
}

#[test]
fn backend_run_through_the_echo_double() {
    let echo = EchoServer::spawn(EchoConfig::new(Shape::new(4, 8, 8))).unwrap();
    let cfg = backend_config(&echo.addr().to_string());
    let dir = TempDir::new().unwrap();
    let report = run(&cfg, dir.path()).unwrap();
    assert_eq!(report.iterations_completed, 6);
    assert!(report.rows.iter().all(|r| r.record.grad_norm > 0.0));
}

#[test]
fn backend_failure_keeps_last_good_state() {
    let echo = EchoServer::spawn(EchoConfig {
        fault: Fault::ErrorFrame("model not loaded".into()),
        ..EchoConfig::new(Shape::new(4, 8, 8))
    })
    .unwrap();
    let cfg = backend_config(&echo.addr().to_string());
    let dir = TempDir::new().unwrap();
    let e = run(&cfg, dir.path()).unwrap_err();
    assert_eq!(e.exit_code(), 4);
    let report = load_report(dir.path()).unwrap();
    assert_eq!(report.status, RunStatus::Failed);
    assert!(report.error.unwrap().contains("model not loaded"));
    assert_eq!(report.checkpoint, "checkpoints/last_good.dgen");
    let ck = Checkpoint::load(&dir.path().join(&report.checkpoint), cfg.truncation_psi).unwrap();
    assert_eq!(ck.state.iteration, 0);
    // a failed run still reports
    let out = TempDir::new().unwrap();
    assert!(build_report(dir.path(), out.path()).unwrap().summary_text.contains("model not loaded"));
}

#[test]
fn cli_success_paths() {
    let dir = TempDir::new().unwrap();
    let cfg_path = write_config(dir.path(), &toy(8, ""));
    let run_dir = dir.path().join("run");
    let out = cli(&["run", "-c", cfg_path.to_str().unwrap(), "-o", run_dir.to_str().unwrap(), "--seed", "9"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stderr.is_empty());
    let line: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(line["status"], "completed");
    assert_eq!(load_report(&run_dir).unwrap().seed, 9);

    let out = cli(&["report", run_dir.to_str().unwrap(), "-o", dir.path().join("rep").to_str().unwrap()]);
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains("iterations: 8 of 8"));

    let csv = dir.path().join("gc.csv");
    let out = cli(&["gradcheck", "-c", cfg_path.to_str().unwrap(), "-n", "10", "--out", csv.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 21);

    let out = cli(&["gradcheck", "-c", cfg_path.to_str().unwrap(), "-n", "0"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "probe,index,tap,analytic,numeric,rel_err\n");

    let echo = EchoServer::spawn(EchoConfig::new(Shape::new(4, 8, 8))).unwrap();
    let out = cli(&["ping", &echo.addr().to_string()]);
    assert!(out.status.success());
    let line: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(line["shape"], serde_json::json!([4, 8, 8]));
}

#[test]
fn cli_env_override_reaches_the_run() {
    let dir = TempDir::new().unwrap();
    let cfg_path = write_config(dir.path(), &toy(8, ""));
    let run_dir = dir.path().join("run");
    let out = Command::new(BIN)
        .args(["run", "-c", cfg_path.to_str().unwrap(), "-o", run_dir.to_str().unwrap()])
        .env("DISTILL_ITERATIONS", "4")
        .env("DISTILL_MIRROR__ENABLED", "false")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = load_report(&run_dir).unwrap();
    assert_eq!(r.iterations_completed, 4);
    assert_eq!(r.phase_counts.mirror, 0);
}

#[test]
fn cli_exit_codes_and_error_lines() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[generator]\nkind = \"direct_image\"\ncolour = 1\n[score]\nkind = \"gaussian\"\ntarget = { constant = 0.0 }\n").unwrap();
    let out = cli(&["run", "-c", bad.to_str().unwrap(), "-o", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let e = stderr_line(&out);
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("generator.colour"));

    let out = cli(&["run", "-c", "/nonexistent.toml", "-o", "/tmp/unused"]);
    assert_eq!(out.status.code(), Some(2));
    stderr_line(&out);

    let out = cli(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_line(&out)["error"], "usage");

    let cfg_path = write_config(dir.path(), &toy(2, ""));
    let busy = dir.path().join("busy");
    fs::create_dir_all(&busy).unwrap();
    fs::write(busy.join(LOCK_FILE), "").unwrap();
    let out = cli(&["run", "-c", cfg_path.to_str().unwrap(), "-o", busy.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_line(&out)["error"], "busy");

    let out = cli(&["report", dir.path().join("missing").to_str().unwrap(), "-o", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    stderr_line(&out);

    let closed = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().to_string()
    };
    let out = cli(&["ping", &closed, "--timeout-ms", "300"]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(stderr_line(&out)["error"], "transport");

    let bdir = dir.path().join("b");
    fs::create_dir_all(&bdir).unwrap();
    let backend = write_config(&bdir, &backend_config(&closed));
    let out = cli(&["gradcheck", "-c", backend.to_str().unwrap(), "-n", "3"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_line(&out)["error"], "unsupported");

    let out = cli(&["run", "-c", backend.to_str().unwrap(), "-o", dir.path().join("y").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    stderr_line(&out);
}

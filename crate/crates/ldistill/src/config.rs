//! Run configuration: TOML file, `DISTILL_` environment overrides, validation.
//!
//! The full key reference lives in `docs/config.md`.

use std::path::{Path, PathBuf};

use ldistill_core::distill::{DistillMode, DistillStepConfig, RankWeights};
use ldistill_core::generator::{
    AnyGenerator, DirectImage, GeneratorKind, SuperRes, SymmetricToy, SymmetricToyConfig, Tap,
};
use ldistill_core::rng::{standard_normal_tensor, stream, Stream};
use ldistill_core::schedule::{NoiseSchedule, TimestepRange, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use ldistill_core::scores::{validate_mixture, GaussianOracle, GmmOracle, Target, DEFAULT_CFG_WEIGHT, DEFAULT_CONTROL_WEIGHT};
use ldistill_core::trainer::{GridPoses, PhaseSchedule, TrainerConfig, DEFAULT_LEARNING_RATE, DEFAULT_TRUNCATION_PSI};
use ldistill_core::{ScoreTensor, Shape};
use serde::{Deserialize, Serialize};

/// Prefix of environment variables that override config keys.
pub const ENV_PREFIX: &str = "DISTILL_";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("syntax error: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("`{path}`: {message}")]
    Field { path: String, message: String },
    #[error("`{path}`: {reason}")]
    Invalid { path: String, reason: String },
}

impl ConfigError {
    fn invalid(path: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Key path the error refers to, when known.
    pub fn key_path(&self) -> Option<&str> {
        match self {
            ConfigError::Field { path, .. } | ConfigError::Invalid { path, .. } => Some(path),
            _ => None,
        }
    }
}

fn core_error(prefix: &str, e: ldistill_core::Error) -> ConfigError {
    match e {
        ldistill_core::Error::Config { field, reason } => ConfigError::invalid(join(prefix, field), reason),
        other => ConfigError::invalid(prefix, other.to_string()),
    }
}

fn join(prefix: &str, field: &str) -> String {
    if prefix.is_empty() {
        field.to_owned()
    } else {
        format!("{prefix}.{field}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorSpec,
    pub score: ScoreSource,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub prompt: PromptSpec,
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_cfg_weight")]
    pub cfg_weight: f64,
    #[serde(default)]
    pub phase_schedule: PhaseSchedule,
    #[serde(default)]
    pub mirror: MirrorSpec,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "default_psi")]
    pub truncation_psi: f64,
    /// Checkpoint period in iterations; 0 writes only the final checkpoint.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default = "yes")]
    pub freeze_conv_bias: bool,
}

fn default_iterations() -> u64 {
    10_000
}
fn default_learning_rate() -> f64 {
    DEFAULT_LEARNING_RATE
}
fn default_cfg_weight() -> f64 {
    DEFAULT_CFG_WEIGHT
}
fn default_psi() -> f64 {
    DEFAULT_TRUNCATION_PSI
}
fn default_control_weight() -> f64 {
    DEFAULT_CONTROL_WEIGHT
}
fn yes() -> bool {
    true
}
fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    #[serde(default = "four")]
    pub channels: usize,
    #[serde(default = "sixteen")]
    pub height: usize,
    #[serde(default = "sixteen")]
    pub width: usize,
    /// Feature-plane resolution of `symmetric_toy`.
    #[serde(default = "eight")]
    pub grid: usize,
    /// Defaults to 0 for `direct_image` and 8 for `symmetric_toy`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
    #[serde(default = "bilinear")]
    pub super_res: SuperRes,
    #[serde(default)]
    pub init: InitSpec,
}

fn four() -> usize {
    4
}
fn eight() -> usize {
    8
}
fn sixteen() -> usize {
    16
}
fn bilinear() -> SuperRes {
    SuperRes::Bilinear
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSpec {
    /// The generator's own initializer, seeded by the run seed.
    #[default]
    Default,
    /// Every render-body parameter set to one value.
    Constant(f64),
}

impl GeneratorSpec {
    pub fn shape(&self) -> Shape {
        Shape::new(self.channels, self.height, self.width)
    }

    pub fn build(&self) -> Result<AnyGenerator, ConfigError> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(ConfigError::invalid("generator", "channels, height and width must be positive"));
        }
        Ok(match self.kind {
            GeneratorKind::DirectImage => {
                AnyGenerator::DirectImage(DirectImage::new(self.shape(), self.latent_dim.unwrap_or(0), self.super_res))
            }
            GeneratorKind::SymmetricToy => AnyGenerator::SymmetricToy(
                SymmetricToy::new(SymmetricToyConfig {
                    channels: self.channels,
                    height: self.height,
                    width: self.width,
                    grid: self.grid,
                    latent_dim: self.latent_dim.unwrap_or(8),
                    sr: self.super_res,
                })
                .map_err(|e| core_error("generator", e))?,
            ),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScoreSource {
    Gaussian {
        target: TargetSpec,
        #[serde(default = "one")]
        var0: f64,
    },
    Gmm {
        means: Vec<TargetSpec>,
        /// Uniform when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
        #[serde(default = "one")]
        var0: f64,
    },
    Backend {
        address: String,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
}

fn default_timeout_ms() -> u64 {
    30_000
}

/// Location of an oracle density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    Constant(f64),
    /// Gaussian random image at the generator's low resolution.
    Random {
        seed: u64,
        #[serde(default = "one")]
        scale: f64,
        /// Average with the horizontal flip.
        #[serde(default = "yes")]
        symmetric: bool,
    },
}

impl TargetSpec {
    pub fn resolve(&self, low: Shape) -> Target {
        match *self {
            TargetSpec::Constant(v) => Target::Constant(v),
            TargetSpec::Random { seed, scale, symmetric } => {
                let img = standard_normal_tensor(low, &mut stream(seed, Stream::Init)).scale(scale);
                let img = if symmetric {
                    img.add(&img.flip_horizontal()).expect("same shape").scale(0.5)
                } else {
                    img
                };
                Target::Image(img)
            }
        }
    }

    /// The target evaluated at `shape`.
    pub fn image(&self, low: Shape, shape: Shape) -> Result<ScoreTensor, ConfigError> {
        self.resolve(low).for_view(shape).map_err(|e| core_error("score.target", e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}
fn default_beta_start() -> f64 {
    DEFAULT_BETA_START
}
fn default_beta_end() -> f64 {
    DEFAULT_BETA_END
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub negative: String,
    #[serde(default = "default_control_weight")]
    pub control_weight: f64,
}

impl Default for PromptSpec {
    fn default() -> Self {
        Self {
            text: String::new(),
            negative: String::new(),
            control_weight: DEFAULT_CONTROL_WEIGHT,
        }
    }
}

/// `"linear"` (1 − k/C), `"off"`, or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RankWeighting {
    Preset(RankPreset),
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankPreset {
    Linear,
    Off,
}

impl Default for RankWeighting {
    fn default() -> Self {
        RankWeighting::Preset(RankPreset::Linear)
    }
}

impl RankWeighting {
    fn resolve(&self, channels: usize, path: &str) -> Result<Option<RankWeights>, ConfigError> {
        match self {
            RankWeighting::Preset(RankPreset::Off) => Ok(None),
            RankWeighting::Preset(RankPreset::Linear) => Ok(Some(RankWeights::linear(channels))),
            RankWeighting::Explicit(w) => {
                if w.len() != channels {
                    return Err(ConfigError::invalid(
                        path,
                        format!("expected {channels} weights, one per channel, got {}", w.len()),
                    ));
                }
                RankWeights::new(w.clone()).map(Some).map_err(|e| match e {
                    ldistill_core::Error::Config { reason, .. } => ConfigError::invalid(path, reason),
                    other => ConfigError::invalid(path, other.to_string()),
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MirrorSpec {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "ld")]
    pub mode: DistillMode,
    #[serde(default = "mirror_range")]
    pub t_range: TimestepRange,
    #[serde(default)]
    pub rank_weights: RankWeighting,
    #[serde(default = "one")]
    pub omega: f64,
    #[serde(default)]
    pub average: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "ld")]
    pub mode: DistillMode,
    #[serde(default = "grid_range")]
    pub t_range: TimestepRange,
    #[serde(default)]
    pub rank_weights: RankWeighting,
    #[serde(default = "pre_sr")]
    pub tap: Tap,
    #[serde(default = "one")]
    pub omega: f64,
    #[serde(default)]
    pub poses: GridPoses,
}

fn ld() -> DistillMode {
    DistillMode::Ld
}
fn mirror_range() -> TimestepRange {
    TimestepRange::MIRROR
}
fn grid_range() -> TimestepRange {
    TimestepRange::GRID
}
fn pre_sr() -> Tap {
    Tap::PreSr
}

impl Default for MirrorSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            mode: DistillMode::Ld,
            t_range: TimestepRange::MIRROR,
            rank_weights: RankWeighting::default(),
            omega: 1.0,
            average: false,
        }
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            mode: DistillMode::Ld,
            t_range: TimestepRange::GRID,
            rank_weights: RankWeighting::default(),
            tap: Tap::PreSr,
            omega: 1.0,
            poses: GridPoses::default(),
        }
    }
}

/// Everything a run needs, built from a validated [`RunConfig`].
#[derive(Debug, Clone)]
pub struct Resolved {
    pub generator: AnyGenerator,
    pub schedule: NoiseSchedule,
    pub trainer: TrainerConfig,
}

impl RunConfig {
    /// A minimal config: generator kind and score source, everything else defaulted.
    pub fn minimal(kind: GeneratorKind, score: ScoreSource) -> Self {
        let mut table = toml::Table::new();
        let mut g = toml::Table::new();
        g.insert("kind".into(), toml::Value::try_from(kind).expect("kind serializes"));
        table.insert("generator".into(), toml::Value::Table(g));
        table.insert("score".into(), toml::Value::try_from(score).expect("score serializes"));
        from_table(table).expect("minimal config is valid")
    }

    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        let generator = self.generator.build()?;
        let schedule = NoiseSchedule::linear(self.schedule.steps, self.schedule.beta_start, self.schedule.beta_end)
            .map_err(|e| core_error("schedule", e))?;
        let channels = self.generator.channels;
        let mirror = self
            .mirror
            .enabled
            .then(|| -> Result<_, ConfigError> {
                Ok(DistillStepConfig {
                    mode: self.mirror.mode,
                    t_range: self.mirror.t_range,
                    cfg_weight: self.cfg_weight,
                    rank_weights: self.mirror.rank_weights.resolve(channels, "mirror.rank_weights")?,
                    tap: Tap::PostSr,
                    omega: self.mirror.omega,
                    mirror_average: self.mirror.average,
                })
            })
            .transpose()?;
        let grid = self
            .grid
            .enabled
            .then(|| -> Result<_, ConfigError> {
                Ok(DistillStepConfig {
                    mode: self.grid.mode,
                    t_range: self.grid.t_range,
                    cfg_weight: self.cfg_weight,
                    rank_weights: self.grid.rank_weights.resolve(channels, "grid.rank_weights")?,
                    tap: self.grid.tap,
                    omega: self.grid.omega,
                    mirror_average: false,
                })
            })
            .transpose()?;
        let trainer = TrainerConfig {
            iterations: self.iterations,
            learning_rate: self.learning_rate,
            truncation_psi: self.truncation_psi,
            phase_schedule: self.phase_schedule,
            mirror,
            grid,
            grid_poses: self.grid.poses,
            freeze_conv_bias: self.freeze_conv_bias,
        };
        trainer.validate().map_err(|e| core_error("", e))?;
        if !(0.0..=1.0).contains(&self.prompt.control_weight) {
            return Err(ConfigError::invalid("prompt.control_weight", "must lie in [0, 1]"));
        }
        self.check_score()?;
        Ok(Resolved { generator, schedule, trainer })
    }

    fn check_score(&self) -> Result<(), ConfigError> {
        match &self.score {
            ScoreSource::Gaussian { var0, .. } if !(*var0 > 0.0) => Err(ConfigError::invalid("score.var0", "must be positive")),
            ScoreSource::Gmm { means, weights, var0 } => {
                if !(*var0 > 0.0) {
                    return Err(ConfigError::invalid("score.var0", "must be positive"));
                }
                let w = self.mixture_weights(means.len(), weights.as_deref());
                validate_mixture(means.len(), &w).map_err(|e| core_error("score", e))
            }
            ScoreSource::Backend { address, timeout_ms } => {
                if address.is_empty() {
                    return Err(ConfigError::invalid("score.address", "must not be empty"));
                }
                if *timeout_ms == 0 {
                    return Err(ConfigError::invalid("score.timeout_ms", "must be positive"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn mixture_weights(&self, n: usize, weights: Option<&[f64]>) -> Vec<f64> {
        weights.map(<[f64]>::to_vec).unwrap_or_else(|| vec![1.0 / n.max(1) as f64; n])
    }

    pub fn is_oracle(&self) -> bool {
        !matches!(self.score, ScoreSource::Backend { .. })
    }

    pub fn gaussian_oracle(&self) -> Option<GaussianOracle> {
        match &self.score {
            ScoreSource::Gaussian { target, var0 } => Some(GaussianOracle {
                target: target.resolve(self.generator.shape()),
                var0: *var0,
            }),
            _ => None,
        }
    }

    pub fn gmm_oracle(&self) -> Option<Result<GmmOracle, ConfigError>> {
        match &self.score {
            ScoreSource::Gmm { means, weights, var0 } => {
                let low = self.generator.shape();
                let comps = means.iter().map(|m| m.resolve(low)).collect();
                let w = self.mixture_weights(means.len(), weights.as_deref());
                Some(GmmOracle::new(comps, w, *var0).map_err(|e| core_error("score", e)))
            }
            _ => None,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

/// Reads `path`, applies `DISTILL_*` overrides from the process environment and validates.
pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_owned(),
        source,
    })?;
    parse_config_str(&text, std::env::vars())
}

pub fn parse_config_str(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<RunConfig, ConfigError> {
    let mut table: toml::Table = toml::from_str(text)?;
    apply_env_overrides(&mut table, env)?;
    let cfg = from_table(table)?;
    cfg.resolve()?;
    Ok(cfg)
}

fn from_table(table: toml::Table) -> Result<RunConfig, ConfigError> {
    serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::Field {
            path,
            message: e.into_inner().to_string(),
        }
    })
}

/// `DISTILL_MIRROR__T_RANGE=[0.6,0.9]` sets `mirror.t_range`. Values are read
/// as TOML and fall back to plain strings.
pub fn apply_env_overrides(
    table: &mut toml::Table,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<(), ConfigError> {
    let mut vars: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(str::to_ascii_lowercase).collect();
        if path.iter().any(String::is_empty) {
            return Err(ConfigError::invalid(key, "malformed override key"));
        }
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or(toml::Value::String(raw));
        let (last, parents) = path.split_last().expect("non-empty path");
        let mut node = &mut *table;
        for p in parents {
            let entry = node
                .entry(p.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = match entry {
                toml::Value::Table(t) => t,
                _ => return Err(ConfigError::invalid(path.join("."), "override descends into a non-table value")),
            };
        }
        node.insert(last.clone(), value);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[generator]
kind = "symmetric_toy"

[score]
kind = "gaussian"
target = { constant = 0.5 }
"#;

    fn no_env() -> Vec<(String, String)> {
        Vec::new()
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let c = parse_config_str(MINIMAL, no_env()).unwrap();
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.cfg_weight, 7.5);
        assert_eq!(c.truncation_psi, 0.8);
        assert_eq!(c.mirror.t_range, TimestepRange::new(0.70, 0.96).unwrap());
        assert_eq!(c.grid.t_range, TimestepRange::new(0.30, 0.80).unwrap());
        assert_eq!(c.phase_schedule, PhaseSchedule::Interleaved(1));
        assert_eq!(c.prompt.control_weight, 1.0);
        assert_eq!(c.prompt.negative, "");
        let r = c.resolve().unwrap();
        assert_eq!(r.trainer.mirror.unwrap().rank_weights, Some(RankWeights::four_channel()));
        assert_eq!(r.schedule.steps(), 1000);
        assert_eq!(RunConfig::minimal(GeneratorKind::SymmetricToy, c.score.clone()), c);
    }

    #[test]
    fn type_mismatch_names_key() {
        let text = format!("learning_rate = \"fast\"\n{MINIMAL}");
        let e = parse_config_str(&text, no_env()).unwrap_err();
        assert_eq!(e.key_path(), Some("learning_rate"), "{e}");
        let text = MINIMAL.replace("[score]", "[mirror]\nt_range = [0.1, \"x\"]\n[score]");
        let e = parse_config_str(&text, no_env()).unwrap_err();
        assert!(e.key_path().unwrap().starts_with("mirror.t_range"), "{e}");
    }

    #[test]
    fn unknown_and_missing_keys_rejected() {
        let e = parse_config_str(&format!("learning_rat = 1.0\n{MINIMAL}"), no_env()).unwrap_err();
        assert!(e.to_string().contains("learning_rat"), "{e}");
        let e = parse_config_str(&MINIMAL.replace("kind = \"symmetric_toy\"", "kind = \"symmetric_toy\"\ncolour = 1"), no_env()).unwrap_err();
        assert_eq!(e.key_path(), Some("generator.colour"), "{e}");
        assert!(e.to_string().contains("colour"));
        let e = parse_config_str("[generator]\nkind = \"direct_image\"\n", no_env()).unwrap_err();
        assert!(e.to_string().contains("score"), "{e}");
        let e = parse_config_str(&MINIMAL.replace("target = { constant = 0.5 }", ""), no_env()).unwrap_err();
        assert_eq!(e.key_path(), Some("score"), "{e}");
        assert!(e.to_string().contains("target"));
    }

    #[test]
    fn semantic_validation_names_key() {
        let bad = [
            ("learning_rate = 0.0\n", "learning_rate"),
            ("truncation_psi = 1.5\n", "truncation_psi"),
            ("[mirror]\nrank_weights = [1.0, 0.5]\n", "mirror.rank_weights"),
            ("[grid]\nrank_weights = [1.0, 0.9, 0.95, 0.1]\n", "grid.rank_weights"),
            ("[mirror]\nenabled = false\n[grid]\nenabled = false\n", "phases"),
            ("[schedule]\nbeta_end = 2.0\n", "schedule.beta_end"),
        ];
        for (prefix, key) in bad {
            let e = parse_config_str(&format!("{prefix}{MINIMAL}"), no_env()).unwrap_err();
            assert_eq!(e.key_path(), Some(key), "{prefix}: {e}");
        }
        let e = parse_config_str(&MINIMAL.replace("kind = \"gaussian\"\ntarget = { constant = 0.5 }", "kind = \"gmm\"\nmeans = [{ constant = 1.0 }]\nweights = [0.5]"), no_env())
            .unwrap_err();
        assert!(e.key_path().unwrap().starts_with("score"), "{e}");
    }

    #[test]
    fn env_overrides_apply_by_key_path() {
        let env = vec![
            ("DISTILL_LEARNING_RATE".to_string(), "0.01".to_string()),
            ("DISTILL_MIRROR__T_RANGE".to_string(), "[0.3, 0.5]".to_string()),
            ("DISTILL_PROMPT__TEXT".to_string(), "a statue".to_string()),
            ("DISTILL_GRID__ENABLED".to_string(), "false".to_string()),
            ("OTHER".to_string(), "1".to_string()),
        ];
        let c = parse_config_str(MINIMAL, env).unwrap();
        assert_eq!(c.learning_rate, 0.01);
        assert_eq!(c.mirror.t_range, TimestepRange::new(0.3, 0.5).unwrap());
        assert_eq!(c.prompt.text, "a statue");
        assert!(!c.grid.enabled);
        let e = parse_config_str(MINIMAL, vec![("DISTILL_SEED".to_string(), "many".to_string())]).unwrap_err();
        assert_eq!(e.key_path(), Some("seed"));
        assert!(parse_config_str(MINIMAL, vec![("DISTILL_A____B".to_string(), "1".to_string())]).is_err());
    }

    #[test]
    fn full_config_roundtrips() {
        let text = r#"
iterations = 50
seed = 9
learning_rate = 0.01
cfg_weight = 3.0
phase_schedule = { interleaved = 2 }
truncation_psi = 0.7
checkpoint_every = 10
freeze_conv_bias = false

[generator]
kind = "direct_image"
channels = 3
height = 8
width = 6
latent_dim = 0
super_res = "learnable"
init = { constant = 0.25 }

[score]
kind = "gmm"
means = [{ constant = -2.0 }, { random = { seed = 4, scale = 0.5 } }]
weights = [0.25, 0.75]
var0 = 0.25

[schedule]
steps = 500

[prompt]
text = "bronze bust"
negative = "blurry"
control_weight = 0.5

[mirror]
mode = "sds"
t_range = [0.2, 0.4]
rank_weights = "off"
average = true

[grid]
tap = "post_sr"
rank_weights = [1.0, 0.5, 0.0]
poses = "azimuth_sweep"
"#;
        let c = parse_config_str(text, no_env()).unwrap();
        let again = parse_config_str(&c.to_toml(), no_env()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.phase_schedule, PhaseSchedule::Interleaved(2));
        let seq = parse_config_str(&format!("phase_schedule = \"sequential\"\n{MINIMAL}"), no_env()).unwrap();
        assert_eq!(seq.phase_schedule, PhaseSchedule::Sequential);
    }

    #[test]
    fn random_target_is_symmetric_and_seeded() {
        let low = Shape::new(2, 4, 6);
        let t = TargetSpec::Random { seed: 3, scale: 1.0, symmetric: true }.image(low, low).unwrap();
        assert_eq!(t, t.flip_horizontal());
        let u = TargetSpec::Random { seed: 3, scale: 1.0, symmetric: true }.image(low, low.scaled(2)).unwrap();
        assert_eq!(u.shape(), low.scaled(2));
    }
}

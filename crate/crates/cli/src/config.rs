//! Run configuration: a TOML file with `model`, `smc`, `schedule`, `io` and
//! optional `study` sections.
//!
//! Parsing rejects unknown keys; validation reports the dotted path of the
//! offending key (for example `model.box.state`).

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use prml::models::{ar1, stochastic_volatility, Ar1Maps, Bounds, GridModel, ParamLayout, StochVolMaps, TruncatedGaussModel};
use prml::param::{ParamBox, ParameterPoint};
use prml::schedule::StepSchedule;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            message: message.into(),
        }
    }

    fn missing(key: &str) -> Self {
        Self::new(key, "missing")
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config key `{}`: {}", self.key, self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Ar1,
    StochasticVolatility,
}

impl Family {
    pub fn parameter_names(self) -> &'static [&'static str] {
        match self {
            Family::Ar1 => &Ar1Maps::NAMES,
            Family::StochasticVolatility => &StochVolMaps::NAMES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSection {
    pub state: Option<[f64; 2]>,
    pub obs: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub family: Option<Family>,
    #[serde(rename = "box")]
    pub bounds: Option<BoxSection>,
    #[serde(default)]
    pub constants: BTreeMap<String, f64>,
    #[serde(default)]
    pub free: Vec<String>,
    #[serde(default)]
    pub theta0: Vec<f64>,
    #[serde(default)]
    pub param_box: Vec<[f64; 2]>,
    /// Parameter used to simulate data; defaults to `theta0`.
    pub truth: Option<Vec<f64>>,
    /// Restrict the state space to this many equally spaced points.
    pub grid_points: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmcSection {
    pub particles: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub scale: Option<f64>,
    pub exponent: Option<f64>,
    #[serde(default)]
    pub offset: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoSection {
    pub observations: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    /// Particle counts, strictly increasing.
    #[serde(default)]
    pub particles: Vec<usize>,
    pub seeds: Option<usize>,
    pub tail_fraction: Option<f64>,
    /// Step at which the fixed-parameter score is compared with the oracle.
    pub horizon: Option<usize>,
    /// Repeat the bias study at half the horizon (default true).
    pub horizon_check: Option<bool>,
    /// Fixed parameter of the bias study; defaults to `model.truth`.
    pub theta: Option<Vec<f64>>,
    /// Seed of the simulated observation record used by the bias study.
    pub record_seed: Option<u64>,
    /// Length and seed of the held-out stream for oracle evaluation.
    pub held_out: Option<usize>,
    pub held_out_seed: Option<u64>,
    /// Oracle evaluations per tail window.
    pub evaluations: Option<usize>,
    /// Steps of each tail-study run (simulated from `model.truth`).
    pub steps: Option<usize>,
    /// Existing fit trace to analyse instead of running fits.
    pub trace: Option<PathBuf>,
}

/// The file as written, before validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub model: Option<ModelSection>,
    pub smc: Option<SmcSection>,
    pub schedule: Option<ScheduleSection>,
    #[serde(default)]
    pub io: IoSection,
    pub study: Option<StudySection>,
}

/// A validated configuration. Relative paths are resolved against `base_dir`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub raw: RawConfig,
    pub base_dir: PathBuf,
    pub family: Family,
    pub state_box: Bounds,
    pub obs_box: Bounds,
    pub layout: ParamLayout,
    pub start: ParameterPoint,
    pub truth: Vec<f64>,
    pub particles: usize,
    pub seed: u64,
    pub schedule: StepSchedule,
}

/// A model built from a configuration.
#[derive(Debug, Clone)]
pub enum BuiltModel {
    Continuous(TruncatedGaussModel),
    Grid(GridModel),
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::new(error_key(&e), e.message().to_string()))
    }

    /// Canonical TOML text of this configuration.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("configuration is always serialisable")
    }
}

fn error_key(e: &toml::de::Error) -> String {
    // serde reports the missing or unknown field in the message; the span
    // locates it but carries no path, so fall back to the message.
    let m = e.message();
    if let Some(rest) = m.split('`').nth(1) {
        rest.to_string()
    } else {
        "<file>".to_string()
    }
}

fn interval(key: &str, v: Option<[f64; 2]>) -> Result<Bounds, ConfigError> {
    let [lo, hi] = v.ok_or_else(|| ConfigError::missing(key))?;
    Bounds::interval(lo, hi).map_err(|e| ConfigError::new(key, e.to_string()))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("<file>", format!("cannot read {}: {e}", path.display())))?;
        let raw = RawConfig::parse(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::validate(raw, base)
    }

    pub fn validate(raw: RawConfig, base_dir: PathBuf) -> Result<Self, ConfigError> {
        let model = raw.model.as_ref().ok_or_else(|| ConfigError::missing("model"))?;
        let family = model.family.ok_or_else(|| ConfigError::missing("model.family"))?;
        let boxes = model.bounds.as_ref().ok_or_else(|| ConfigError::missing("model.box"))?;
        let state_box = interval("model.box.state", boxes.state)?;
        let obs_box = interval("model.box.obs", boxes.obs)?;
        let names = family.parameter_names();
        for k in model.constants.keys() {
            if !names.contains(&k.as_str()) {
                return Err(ConfigError::new(
                    format!("model.constants.{k}"),
                    format!("unknown parameter; {family:?} has {names:?}"),
                ));
            }
        }
        let layout = ParamLayout::new(names, &model.free, &model.constants)
            .map_err(|e| ConfigError::new("model.free", e.to_string()))?;
        let d = layout.free_dim();
        if model.theta0.len() != d {
            return Err(ConfigError::new(
                "model.theta0",
                format!("expected {d} values (one per free parameter), got {}", model.theta0.len()),
            ));
        }
        if model.param_box.len() != d {
            return Err(ConfigError::new(
                "model.param_box",
                format!("expected {d} intervals, got {}", model.param_box.len()),
            ));
        }
        let bounds = ParamBox::new(
            model.param_box.iter().map(|b| b[0]).collect(),
            model.param_box.iter().map(|b| b[1]).collect(),
        )
        .map_err(|e| ConfigError::new("model.param_box", e.to_string()))?;
        if !bounds.contains(&model.theta0) {
            return Err(ConfigError::new("model.theta0", "initial parameter lies outside model.param_box"));
        }
        let start = ParameterPoint::new(model.theta0.clone(), bounds)
            .map_err(|e| ConfigError::new("model.theta0", e.to_string()))?;
        let truth = model.truth.clone().unwrap_or_else(|| model.theta0.clone());
        if truth.len() != d {
            return Err(ConfigError::new("model.truth", format!("expected {d} values, got {}", truth.len())));
        }
        if model.grid_points == Some(0) {
            return Err(ConfigError::new("model.grid_points", "must be positive"));
        }
        let smc = raw.smc.as_ref().ok_or_else(|| ConfigError::missing("smc"))?;
        let particles = smc.particles.ok_or_else(|| ConfigError::missing("smc.particles"))?;
        if particles == 0 {
            return Err(ConfigError::new("smc.particles", "must be positive"));
        }
        let sched = raw.schedule.as_ref().ok_or_else(|| ConfigError::missing("schedule"))?;
        let schedule = StepSchedule::new(
            sched.scale.ok_or_else(|| ConfigError::missing("schedule.scale"))?,
            sched.exponent.ok_or_else(|| ConfigError::missing("schedule.exponent"))?,
            sched.offset,
        )
        .map_err(|e| ConfigError::new("schedule", e.to_string()))?;
        if let Some(study) = &raw.study {
            if study.particles.windows(2).any(|w| w[0] >= w[1]) || study.particles.contains(&0) {
                return Err(ConfigError::new("study.particles", "must be positive and strictly increasing"));
            }
            if let Some(s) = study.seeds {
                if s < prml::diagnostics::MIN_SEEDS {
                    return Err(ConfigError::new(
                        "study.seeds",
                        format!("at least {} seeds are required, got {s}", prml::diagnostics::MIN_SEEDS),
                    ));
                }
            }
            if let Some(f) = study.tail_fraction {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(ConfigError::new("study.tail_fraction", "must lie in (0, 1]"));
                }
            }
            if let Some(t) = &study.theta {
                if t.len() != d {
                    return Err(ConfigError::new("study.theta", format!("expected {d} values, got {}", t.len())));
                }
            }
        }
        Ok(Self {
            family,
            state_box,
            obs_box,
            layout,
            start,
            truth,
            particles,
            seed: smc.seed,
            schedule,
            base_dir,
            raw,
        })
    }

    pub fn model_section(&self) -> &ModelSection {
        self.raw.model.as_ref().expect("validated")
    }

    pub fn study(&self) -> Option<&StudySection> {
        self.raw.study.as_ref()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn observations_path(&self) -> Option<PathBuf> {
        self.raw.io.observations.as_deref().map(|p| self.resolve(p))
    }

    pub fn output_path(&self) -> Option<PathBuf> {
        self.raw.io.output.as_deref().map(|p| self.resolve(p))
    }

    pub fn continuous_model(&self) -> Result<TruncatedGaussModel, ConfigError> {
        let built = match self.family {
            Family::Ar1 => ar1(self.layout.clone(), self.state_box.clone(), self.obs_box.clone()),
            Family::StochasticVolatility => {
                stochastic_volatility(self.layout.clone(), self.state_box.clone(), self.obs_box.clone())
            }
        };
        built.map_err(|e| ConfigError::new("model", e.to_string()))
    }

    pub fn build_model(&self) -> Result<BuiltModel, ConfigError> {
        let base = self.continuous_model()?;
        match self.model_section().grid_points {
            Some(m) => GridModel::uniform(base, m)
                .map(BuiltModel::Grid)
                .map_err(|e| ConfigError::new("model.grid_points", e.to_string())),
            None => Ok(BuiltModel::Continuous(base)),
        }
    }
}

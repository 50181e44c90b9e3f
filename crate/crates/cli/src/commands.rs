//! The `simulate`, `fit` and `study` commands.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use prml::diagnostics::{
    self, bias_vs_particles, horizon_sensitivity, tail_gradient_stats, BiasStudyResult, GradientOracle, HeldOutGrid, HeldOutKalman,
    TailRow, TailStudyResult, DEFAULT_TAIL_EVALUATIONS, DEFAULT_TAIL_FRACTION,
};
use prml::models::{simulate, Ar1Maps, GridModel, StateSpaceModel};
use prml::oracle::KalmanOracle;
use prml::rml::{run_with, ParticleScore, RunOptions, RunSummary, TraceRecord};
use prml::rng::RngStream;

use crate::config::{BuiltModel, Family, RunConfig};

/// Command-line values that take precedence over the configuration.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub particles: Option<usize>,
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyKind {
    Bias,
    Tail,
}

/// Stream tags separating the uses of one seed.
const SIMULATION_STREAM: u64 = 11;
const RECORD_STREAM: u64 = 12;
const HELD_OUT_STREAM: u64 = 13;

/// Read a headerless comma-separated file, one row per time step.
pub fn read_observations(path: &Path, obs_dim: usize) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open observations {}", path.display()))?;
    let mut rows = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec.with_context(|| format!("{}: row {}", path.display(), k + 1))?;
        if rec.len() != obs_dim {
            bail!(
                "{}: row {} has {} columns, expected {} (observation dimension)",
                path.display(),
                k + 1,
                rec.len(),
                obs_dim
            );
        }
        let row = rec
            .iter()
            .map(|v| v.parse::<f64>().with_context(|| format!("{}: row {}: not a number: {v:?}", path.display(), k + 1)))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_rows(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("cannot write {}", path.display()))?);
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| format!("{v:?}")).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// `obs.csv` -> `obs.states.csv`.
pub fn states_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = out.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_else(|| "csv".into());
    out.with_file_name(format!("{stem}.states.{ext}"))
}

/// Simulated observations and states (as coordinates).
pub fn simulate_data(cfg: &RunConfig, theta: &[f64], steps: usize, stream: RngStream) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    match cfg.build_model()? {
        BuiltModel::Continuous(m) => {
            let t = simulate(&m, theta, steps, stream)?;
            Ok((t.observations, t.states))
        }
        BuiltModel::Grid(g) => {
            let t = simulate(&g, theta, steps, stream)?;
            let states = t.states.iter().map(|&i| g.points()[i].clone()).collect();
            Ok((t.observations, states))
        }
    }
}

pub fn cmd_simulate(cfg: &RunConfig, ov: &Overrides) -> Result<PathBuf> {
    let steps = ov
        .steps
        .or(cfg.raw.io.steps)
        .ok_or_else(|| anyhow!("number of steps missing: pass --steps or set io.steps"))?;
    let seed = ov.seed.unwrap_or(cfg.seed);
    let out = ov
        .out
        .clone()
        .or_else(|| cfg.observations_path())
        .ok_or_else(|| anyhow!("output path missing: pass --out or set io.observations"))?;
    let (obs, states) = simulate_data(cfg, &cfg.truth, steps, RngStream::new(seed).derive(SIMULATION_STREAM))?;
    write_rows(&out, &obs)?;
    write_rows(&states_path(&out), &states)?;
    Ok(out)
}

fn load_observations(cfg: &RunConfig, ov: &Overrides, obs_dim: usize) -> Result<Vec<Vec<f64>>> {
    let path = cfg
        .observations_path()
        .ok_or_else(|| anyhow!("config key `io.observations`: missing"))?;
    let mut obs = read_observations(&path, obs_dim)?;
    if let Some(t) = ov.steps {
        if t > obs.len() {
            bail!("--steps {t} exceeds the {} observations in {}", obs.len(), path.display());
        }
        obs.truncate(t);
    }
    Ok(obs)
}

fn fit_streaming<M: StateSpaceModel>(
    model: &M,
    cfg: &RunConfig,
    obs: &[Vec<f64>],
    particles: usize,
    seed: u64,
    mut sink: impl FnMut(&TraceRecord) -> Result<()>,
) -> Result<RunSummary> {
    let options = RunOptions {
        particles,
        seed,
        record_wall_time: false,
    };
    let mut err = None;
    let summary = run_with(model, &cfg.start, cfg.schedule, obs, options, &mut ParticleScore::new(model), |r| {
        sink(r).map_err(|e| {
            let msg = e.to_string();
            err = Some(e);
            prml::Error::Invalid(msg)
        })
    });
    match (summary, err) {
        (_, Some(e)) => Err(e),
        (s, None) => Ok(s?),
    }
}

fn fit_any(
    cfg: &RunConfig,
    obs: &[Vec<f64>],
    particles: usize,
    seed: u64,
    sink: impl FnMut(&TraceRecord) -> Result<()>,
) -> Result<RunSummary> {
    match cfg.build_model()? {
        BuiltModel::Continuous(m) => fit_streaming(&m, cfg, obs, particles, seed, sink),
        BuiltModel::Grid(g) => fit_streaming(&g, cfg, obs, particles, seed, sink),
    }
}

fn obs_dim(cfg: &RunConfig) -> usize {
    cfg.obs_box.dim()
}

/// Run the estimator on the configured observations, writing the trace.
pub fn cmd_fit(cfg: &RunConfig, ov: &Overrides) -> Result<(RunSummary, PathBuf)> {
    let obs = load_observations(cfg, ov, obs_dim(cfg))?;
    let out = ov
        .out
        .clone()
        .or_else(|| cfg.output_path())
        .ok_or_else(|| anyhow!("trace path missing: pass --out or set io.output"))?;
    let mut w = BufWriter::new(File::create(&out).with_context(|| format!("cannot write {}", out.display()))?);
    let particles = ov.particles.unwrap_or(cfg.particles);
    let seed = ov.seed.unwrap_or(cfg.seed);
    let summary = fit_any(cfg, &obs, particles, seed, |r| {
        writeln!(w, "{}", r.to_json_line())?;
        Ok(())
    })?;
    w.flush()?;
    Ok((summary, out))
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read trace {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(k, l)| TraceRecord::from_json_line(l).with_context(|| format!("{}: line {}", path.display(), k + 1)))
        .collect()
}

pub enum StudyOutcome {
    /// The study at the configured horizon and, unless disabled, at half of it.
    Bias {
        main: BiasStudyResult,
        half_horizon: Option<BiasStudyResult>,
    },
    Tail(TailStudyResult),
}

fn seed_list(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|k| base.wrapping_add(k)).collect()
}

pub fn run_bias_study(cfg: &RunConfig, ov: &Overrides) -> Result<(BiasStudyResult, Option<BiasStudyResult>)> {
    let study = cfg.study().ok_or_else(|| anyhow!("config key `study`: missing"))?;
    let grid: GridModel = match cfg.build_model()? {
        BuiltModel::Grid(g) => g,
        BuiltModel::Continuous(_) => bail!(
            "unsupported study: the bias study needs an exact score, available only for grid models (set model.grid_points)"
        ),
    };
    let horizon = study.horizon.unwrap_or(50);
    let particles = if study.particles.is_empty() {
        bail!("config key `study.particles`: missing")
    } else {
        study.particles.clone()
    };
    let seeds = study.seeds.ok_or_else(|| anyhow!("config key `study.seeds`: missing"))?;
    let theta = study.theta.clone().unwrap_or_else(|| cfg.truth.clone());
    let base = ov.seed.unwrap_or(cfg.seed);
    let record = match cfg.observations_path() {
        Some(p) => read_observations(&p, obs_dim(cfg))?,
        None => {
            let rs = study.record_seed.unwrap_or(base);
            simulate(&grid, &cfg.truth, horizon + 1, RngStream::new(rs).derive(RECORD_STREAM))?.observations
        }
    };
    let seeds = seed_list(base, seeds);
    if study.horizon_check.unwrap_or(true) && horizon >= 2 {
        let mut both = horizon_sensitivity(&grid, &theta, &record, horizon, &particles, &seeds)?;
        let main = both.pop().expect("two horizons");
        Ok((main, both.pop()))
    } else {
        Ok((bias_vs_particles(&grid, &theta, &record, horizon, &particles, &seeds)?, None))
    }
}

fn held_out_oracle(cfg: &RunConfig) -> Result<Box<dyn GradientOracle>> {
    let study = cfg.study().ok_or_else(|| anyhow!("config key `study`: missing"))?;
    let len = study.held_out.unwrap_or(100_000);
    let seed = study.held_out_seed.unwrap_or(cfg.seed);
    let (obs, _) = simulate_data(cfg, &cfg.truth, len, RngStream::new(seed).derive(HELD_OUT_STREAM))?;
    match (cfg.build_model()?, cfg.family) {
        (BuiltModel::Grid(model), _) => Ok(Box::new(HeldOutGrid {
            model,
            observations: obs,
        })),
        (BuiltModel::Continuous(_), Family::Ar1) => {
            let maps = Ar1Maps::new(cfg.layout.clone())?;
            let (phi, sv, _) = maps.constants(&cfg.truth);
            let prior_var = if phi.abs() < 1.0 { sv * sv / (1.0 - phi * phi) } else { sv * sv };
            Ok(Box::new(HeldOutKalman {
                oracle: KalmanOracle::new(maps, 0.0, prior_var)?,
                observations: obs,
            }))
        }
        (BuiltModel::Continuous(_), family) => {
            bail!("unsupported study: no exact oracle for the {family:?} family without a grid")
        }
    }
}

pub fn run_tail_study(cfg: &RunConfig, ov: &Overrides) -> Result<TailStudyResult> {
    let study = cfg.study().ok_or_else(|| anyhow!("config key `study`: missing"))?;
    let fraction = study.tail_fraction.unwrap_or(DEFAULT_TAIL_FRACTION);
    let evaluations = study.evaluations.unwrap_or(DEFAULT_TAIL_EVALUATIONS);
    let runs: Vec<(usize, Vec<TraceRecord>)> = if let Some(p) = &study.trace {
        let particles = ov.particles.unwrap_or(cfg.particles);
        vec![(particles, read_trace(&cfg.resolve(p))?)]
    } else if let (false, Some(steps)) = (study.particles.is_empty(), ov.steps.or(study.steps)) {
        let seed = ov.seed.unwrap_or(cfg.seed);
        let (obs, _) = simulate_data(cfg, &cfg.truth, steps, RngStream::new(seed).derive(SIMULATION_STREAM))?;
        let mut runs = Vec::new();
        for &n in &study.particles {
            let mut trace = Vec::with_capacity(steps);
            fit_any(cfg, &obs, n, seed, |r| {
                trace.push(r.clone());
                Ok(())
            })?;
            runs.push((n, trace));
        }
        runs
    } else {
        bail!("the tail study needs either a fit trace (study.trace) or run parameters (study.particles and study.steps)")
    };
    let oracle = held_out_oracle(cfg)?;
    let rows = runs
        .iter()
        .map(|(n, trace)| tail_gradient_stats(trace, oracle.as_ref(), fraction, evaluations, *n))
        .collect::<prml::Result<Vec<TailRow>>>()?;
    Ok(TailStudyResult {
        tail_fraction: fraction,
        rows,
    })
}

/// Run a study and write its table (CSV at the output path, JSON lines next to it).
pub fn cmd_study(cfg: &RunConfig, kind: StudyKind, ov: &Overrides) -> Result<(StudyOutcome, PathBuf)> {
    let out = ov
        .out
        .clone()
        .or_else(|| cfg.output_path())
        .ok_or_else(|| anyhow!("table path missing: pass --out or set io.output"))?;
    let jsonl = out.with_extension("jsonl");
    let outcome = match kind {
        StudyKind::Bias => {
            let (main, half_horizon) = run_bias_study(cfg, ov)?;
            diagnostics::write_bias_csv(File::create(&out)?, &main)?;
            diagnostics::write_rows_jsonl(BufWriter::new(File::create(&jsonl)?), &main.rows)?;
            if let Some(half) = &half_horizon {
                diagnostics::write_bias_csv(File::create(half_horizon_path(&out))?, half)?;
            }
            StudyOutcome::Bias { main, half_horizon }
        }
        StudyKind::Tail => {
            let res = run_tail_study(cfg, ov)?;
            diagnostics::write_tail_csv(File::create(&out)?, &res)?;
            diagnostics::write_rows_jsonl(BufWriter::new(File::create(&jsonl)?), &res.rows)?;
            StudyOutcome::Tail(res)
        }
    };
    Ok((outcome, out))
}

/// `bias.csv` -> `bias.half_horizon.csv`.
pub fn half_horizon_path(table: &Path) -> PathBuf {
    let stem = table.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    table.with_file_name(format!("{stem}.half_horizon.csv"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sibling_state_file() {
        assert_eq!(states_path(Path::new("/tmp/a/obs.csv")), PathBuf::from("/tmp/a/obs.states.csv"));
        assert_eq!(states_path(Path::new("obs")), PathBuf::from("obs.states.csv"));
    }
}

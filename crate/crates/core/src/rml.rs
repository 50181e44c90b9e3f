//! Online estimation driver.
//!
//! Each step consumes the pending observation `Y_n` and the next one
//! `Y_{n+1}`: particles and derivative weights are moved through `Y_n` at the
//! current parameter, the score increment is evaluated against `Y_{n+1}`, and
//! the parameter takes a projected step `theta + alpha_n H`.

use std::io::Write;
use std::time::Instant;

use nalgebra::DVector;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::models::StateSpaceModel;
use crate::param::{ParamBox, ParameterPoint};
use crate::rng::{KeyedStreams, RngStream};
use crate::schedule::StepSchedule;
use crate::smc::{ObservationTerms, ParticleSystem, build_observation_terms, gradient_estimate};

/// Stream tag for particle randomness within a run.
const PARTICLE_STREAM: u64 = 1;

/// Score increment together with an optional weight-degeneracy diagnostic.
#[derive(Debug, Clone)]
pub struct ScoreOutput {
    pub score: DVector<f64>,
    /// Effective sample size of the normalised observation weights.
    pub ess: Option<f64>,
}

/// Source of the score increment used by the parameter step.
pub trait ScoreSource<S> {
    fn score(&mut self, theta: &[f64], particles: &ParticleSystem<S>, y_next: &[f64]) -> Result<ScoreOutput>;
}

/// The particle estimate `W C + D`.
pub struct ParticleScore<'a, M> {
    model: &'a M,
}

impl<'a, M> ParticleScore<'a, M> {
    pub fn new(model: &'a M) -> Self {
        Self { model }
    }
}

impl<M: StateSpaceModel> ScoreSource<M::State> for ParticleScore<'_, M> {
    fn score(&mut self, theta: &[f64], particles: &ParticleSystem<M::State>, y_next: &[f64]) -> Result<ScoreOutput> {
        let terms: ObservationTerms = build_observation_terms(self.model, theta, particles.positions(), y_next)
            .map_err(|e| match e {
                Error::Degeneracy { what, log_mass, .. } => Error::Degeneracy {
                    step: particles.step(),
                    what,
                    log_mass,
                },
                other => other.at_step(particles.step()),
            })?;
        let inv_n = 1.0 / particles.len() as f64;
        let ess = 1.0 / terms.c.iter().map(|c| (c + inv_n).powi(2)).sum::<f64>();
        Ok(ScoreOutput {
            score: gradient_estimate(particles.weights(), &terms),
            ess: Some(ess),
        })
    }
}

/// A score computed from the parameter alone, e.g. an exact gradient. The
/// particle system is still propagated but ignored.
pub struct InjectedScore<F> {
    f: F,
}

impl<F> InjectedScore<F> {
    pub fn new(f: F) -> Self {
        Self { f }
    }
}

impl<S: Clone, F> ScoreSource<S> for InjectedScore<F>
where
    F: FnMut(&[f64], usize) -> Result<DVector<f64>>,
{
    fn score(&mut self, theta: &[f64], particles: &ParticleSystem<S>, _y_next: &[f64]) -> Result<ScoreOutput> {
        Ok(ScoreOutput {
            score: (self.f)(theta, particles.step())?,
            ess: None,
        })
    }
}

/// One completed parameter update.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct TraceRecord {
    pub n: usize,
    pub theta: Vec<f64>,
    pub score: Vec<f64>,
    pub step_size: f64,
    pub theta_next: Vec<f64>,
    pub projected: bool,
    pub centered_weight_norm: f64,
    #[serde(default)]
    pub ess: Option<f64>,
    #[serde(default)]
    pub wall_time: Option<f64>,
}

fn push_number(out: &mut String, v: f64) {
    use std::fmt::Write as _;
    if v.is_finite() {
        let _ = write!(out, "{v:.16e}");
    } else {
        out.push_str("null");
    }
}

fn push_vector(out: &mut String, v: &[f64]) {
    out.push('[');
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_number(out, *x);
    }
    out.push(']');
}

impl TraceRecord {
    /// One JSON object without trailing newline; every real number carries 17
    /// significant digits so that the line parses back to the same bits.
    pub fn to_json_line(&self) -> String {
        let mut s = String::with_capacity(256);
        s.push_str(&format!("{{\"n\":{},\"theta\":", self.n));
        push_vector(&mut s, &self.theta);
        s.push_str(",\"score\":");
        push_vector(&mut s, &self.score);
        s.push_str(",\"step_size\":");
        push_number(&mut s, self.step_size);
        s.push_str(",\"theta_next\":");
        push_vector(&mut s, &self.theta_next);
        s.push_str(&format!(",\"projected\":{}", self.projected));
        s.push_str(",\"centered_weight_norm\":");
        push_number(&mut s, self.centered_weight_norm);
        if let Some(ess) = self.ess {
            s.push_str(",\"ess\":");
            push_number(&mut s, ess);
        }
        if let Some(t) = self.wall_time {
            s.push_str(",\"wall_time\":");
            push_number(&mut s, t);
        }
        s.push('}');
        s
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Invalid(format!("malformed trace line: {e}")))
    }
}

/// Parameter, particles and observation buffer of a running estimation.
#[derive(Debug, Clone)]
pub struct RmlState<S> {
    parameter: ParameterPoint,
    particles: ParticleSystem<S>,
    schedule: StepSchedule,
    pending: Vec<f64>,
    projection_hits: u64,
}

impl<S: Clone> RmlState<S> {
    /// `first_observation` is `Y_0`; it fills the buffer without a parameter update.
    pub fn new(
        parameter: ParameterPoint,
        particles: ParticleSystem<S>,
        schedule: StepSchedule,
        first_observation: Vec<f64>,
    ) -> Result<Self> {
        if !parameter.is_inside() {
            return Err(Error::Invalid("initial parameter lies outside its box".into()));
        }
        if particles.weights().nrows() != parameter.dim() {
            return Err(Error::Dimension {
                context: "weight rows vs parameter dimension",
                expected: parameter.dim(),
                actual: particles.weights().nrows(),
            });
        }
        Ok(Self {
            parameter,
            particles,
            schedule,
            pending: first_observation,
            projection_hits: 0,
        })
    }

    pub fn parameter(&self) -> &ParameterPoint {
        &self.parameter
    }

    pub fn particles(&self) -> &ParticleSystem<S> {
        &self.particles
    }

    pub fn step(&self) -> usize {
        self.particles.step()
    }

    pub fn projection_hits(&self) -> u64 {
        self.projection_hits
    }
}

/// One step of the recursion; returns the trace record of the update.
pub fn rml_step<M, E>(
    model: &M,
    state: &mut RmlState<M::State>,
    y_next: &[f64],
    streams: &KeyedStreams,
    estimator: &mut E,
) -> Result<TraceRecord>
where
    M: StateSpaceModel,
    E: ScoreSource<M::State>,
{
    let n = state.step();
    if y_next.len() != model.obs_dim() {
        return Err(Error::Dimension {
            context: "observation",
            expected: model.obs_dim(),
            actual: y_next.len(),
        });
    }
    if !model.contains_obs(y_next) {
        return Err(Error::ObservationOutsideBox { step: n + 1 });
    }
    let theta = state.parameter.theta.clone();
    state.particles.advance(model, &theta, &state.pending, streams)?;
    let out = estimator.score(&theta, &state.particles, y_next)?;
    if out.score.iter().any(|h| !h.is_finite()) {
        return Err(Error::NonFinite("score estimate").at_step(n));
    }
    let alpha = state.schedule.step_size(n as u64);
    let mut next: Vec<f64> = theta.iter().zip(out.score.iter()).map(|(t, h)| t + alpha * h).collect();
    let projected = state.parameter.bounds.clamp_in_place(&mut next);
    if projected {
        state.projection_hits += 1;
    }
    state.parameter.theta.clone_from(&next);
    state.pending = y_next.to_vec();
    Ok(TraceRecord {
        n,
        theta,
        score: out.score.iter().copied().collect(),
        step_size: alpha,
        theta_next: next,
        projected,
        centered_weight_norm: state.particles.centered_norm(),
        ess: out.ess,
        wall_time: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub particles: usize,
    pub seed: u64,
    pub record_wall_time: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub theta: Vec<f64>,
    pub steps: usize,
    pub projection_hits: u64,
}

/// Run the estimator over `observations` (at least two), handing each trace
/// record to `sink` as soon as it is produced.
pub fn run_with<M, E, F>(
    model: &M,
    start: &ParameterPoint,
    schedule: StepSchedule,
    observations: &[Vec<f64>],
    options: RunOptions,
    estimator: &mut E,
    mut sink: F,
) -> Result<RunSummary>
where
    M: StateSpaceModel,
    E: ScoreSource<M::State>,
    F: FnMut(&TraceRecord) -> Result<()>,
{
    if observations.len() < 2 {
        return Err(Error::Invalid(format!(
            "need at least two observations, got {}",
            observations.len()
        )));
    }
    if start.dim() != model.param_dim() {
        return Err(Error::Dimension {
            context: "initial parameter",
            expected: model.param_dim(),
            actual: start.dim(),
        });
    }
    if options.particles == 0 {
        return Err(Error::Invalid("particle count must be positive".into()));
    }
    for (k, y) in observations.iter().enumerate() {
        if y.len() != model.obs_dim() {
            return Err(Error::Dimension {
                context: "observation row",
                expected: model.obs_dim(),
                actual: y.len(),
            });
        }
        if !model.contains_obs(y) {
            return Err(Error::ObservationOutsideBox { step: k });
        }
    }
    let streams = KeyedStreams::new(RngStream::new(options.seed).derive(PARTICLE_STREAM));
    let particles = ParticleSystem::initial(model, options.particles, &streams)?;
    let mut state = RmlState::new(start.clone(), particles, schedule, observations[0].clone())?;
    for y in &observations[1..] {
        let clock = options.record_wall_time.then(Instant::now);
        let mut rec = rml_step(model, &mut state, y, &streams, estimator)?;
        rec.wall_time = clock.map(|c| c.elapsed().as_secs_f64());
        sink(&rec)?;
    }
    Ok(RunSummary {
        theta: state.parameter.theta.clone(),
        steps: observations.len() - 1,
        projection_hits: state.projection_hits,
    })
}

/// Particle-driven run collecting the whole trace in memory.
pub fn run<M: StateSpaceModel>(
    model: &M,
    start: &ParameterPoint,
    schedule: StepSchedule,
    observations: &[Vec<f64>],
    options: RunOptions,
) -> Result<(RunSummary, Vec<TraceRecord>)> {
    let mut trace = Vec::with_capacity(observations.len().saturating_sub(1));
    let summary = run_with(
        model,
        start,
        schedule,
        observations,
        options,
        &mut ParticleScore::new(model),
        |r| {
            trace.push(r.clone());
            Ok(())
        },
    )?;
    Ok((summary, trace))
}

/// Write records as line-delimited JSON.
pub fn write_trace<W: Write>(out: &mut W, records: &[TraceRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{}", r.to_json_line())?;
    }
    Ok(())
}

/// Check a trace against the projected update: every record must satisfy
/// `theta_next = project(theta + step_size * score)` and chain into the next
/// record's `theta`. Returns the largest discrepancy found.
pub fn replay_discrepancy(records: &[TraceRecord], bounds: &ParamBox) -> Result<f64> {
    let mut worst = 0.0f64;
    for (k, r) in records.iter().enumerate() {
        if r.theta.len() != bounds.dim() || r.score.len() != bounds.dim() || r.theta_next.len() != bounds.dim() {
            return Err(Error::Dimension {
                context: "trace record",
                expected: bounds.dim(),
                actual: r.theta.len(),
            });
        }
        let mut replay: Vec<f64> = r.theta.iter().zip(&r.score).map(|(t, h)| t + r.step_size * h).collect();
        bounds.clamp_in_place(&mut replay);
        for (a, b) in replay.iter().zip(&r.theta_next) {
            worst = worst.max((a - b).abs());
        }
        if let Some(next) = records.get(k + 1) {
            if next.n != r.n + 1 {
                return Err(Error::Invalid(format!("trace index jumps from {} to {}", r.n, next.n)));
            }
            for (a, b) in next.theta.iter().zip(&r.theta_next) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(worst)
}

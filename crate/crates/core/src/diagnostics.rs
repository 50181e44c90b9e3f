//! Desk-scale studies of the estimator: particle bias of the score at a
//! fixed parameter as a function of the particle count, and tail statistics
//! of a recursive run measured with an exact oracle.

use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{GridModel, StateSpaceModel};
use crate::oracle::{grid_run, KalmanOracle};
use crate::rml::TraceRecord;
use crate::rng::{KeyedStreams, RngStream};
use crate::smc::ParticleSystem;

pub const MIN_SEEDS: usize = 10;
pub const DEFAULT_TAIL_FRACTION: f64 = 0.1;
/// Oracle evaluations per tail window when none is requested.
pub const DEFAULT_TAIL_EVALUATIONS: usize = 200;
const TAIL_BATCHES: usize = 10;

/// Exact average log-likelihood and gradient at a parameter value.
#[derive(Debug, Clone)]
pub struct OracleValue {
    pub average_log_likelihood: f64,
    pub gradient: DVector<f64>,
}

/// Anything that can evaluate the average log-likelihood and its gradient exactly.
pub trait GradientOracle: Sync {
    fn param_dim(&self) -> usize;
    fn evaluate(&self, theta: &[f64]) -> Result<OracleValue>;
}

/// Kalman oracle over a fixed held-out observation stream.
#[derive(Debug, Clone)]
pub struct HeldOutKalman {
    pub oracle: KalmanOracle,
    pub observations: Vec<Vec<f64>>,
}

impl GradientOracle for HeldOutKalman {
    fn param_dim(&self) -> usize {
        self.oracle.param_dim()
    }

    fn evaluate(&self, theta: &[f64]) -> Result<OracleValue> {
        let e = self.oracle.evaluate_summary(theta, &self.observations)?;
        Ok(OracleValue {
            average_log_likelihood: e.average_log_likelihood,
            gradient: e.gradient,
        })
    }
}

/// Exact grid filter over a fixed held-out observation stream.
#[derive(Debug, Clone)]
pub struct HeldOutGrid {
    pub model: GridModel,
    pub observations: Vec<Vec<f64>>,
}

impl GradientOracle for HeldOutGrid {
    fn param_dim(&self) -> usize {
        self.model.param_dim()
    }

    fn evaluate(&self, theta: &[f64]) -> Result<OracleValue> {
        let run = grid_run(&self.model, theta, &self.observations)?;
        let t = self.observations.len() as f64;
        let mut g = DVector::zeros(self.param_dim());
        for s in &run.scores {
            g += s;
        }
        Ok(OracleValue {
            average_log_likelihood: run.log_likelihood / t,
            gradient: g / t,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub n_particles: usize,
    pub mean_estimate: Vec<f64>,
    pub reference: Vec<f64>,
    pub bias_norm: f64,
    pub stderr: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasStudyResult {
    pub horizon: usize,
    pub rows: Vec<BiasRow>,
    /// Least-squares slope of `log bias` against `log N`; absent when fewer
    /// than two rows have positive bias.
    pub slope: Option<f64>,
}

/// Bias of a score estimator against a fixed reference.
///
/// `estimate(n, seed)` returns one draw of the estimator with `n` particles;
/// every particle count is run over the same seeds, in order.
pub fn bias_study<F>(
    particles: &[usize],
    seeds: &[u64],
    horizon: usize,
    reference: &DVector<f64>,
    mut estimate: F,
) -> Result<BiasStudyResult>
where
    F: FnMut(usize, u64) -> Result<DVector<f64>>,
{
    if seeds.len() < MIN_SEEDS {
        return Err(Error::Invalid(format!(
            "bias study needs at least {MIN_SEEDS} seeds, got {}",
            seeds.len()
        )));
    }
    if particles.is_empty() || particles.windows(2).any(|w| w[0] >= w[1]) || particles[0] == 0 {
        return Err(Error::Invalid(
            "particle counts must be positive and strictly increasing".into(),
        ));
    }
    let d = reference.len();
    let mut rows = Vec::with_capacity(particles.len());
    for &n in particles {
        let draws = seeds
            .iter()
            .map(|&s| {
                let h = estimate(n, s)?;
                if h.len() != d {
                    return Err(Error::Dimension {
                        context: "score estimate",
                        expected: d,
                        actual: h.len(),
                    });
                }
                Ok(h)
            })
            .collect::<Result<Vec<_>>>()?;
        let (mean, bias, stderr) = bias_and_stderr(&draws, reference);
        rows.push(BiasRow {
            n_particles: n,
            mean_estimate: mean.iter().copied().collect(),
            reference: reference.iter().copied().collect(),
            bias_norm: bias.norm(),
            stderr,
            seeds: seeds.len(),
        });
    }
    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.bias_norm > 0.0)
        .map(|r| ((r.n_particles as f64).ln(), r.bias_norm.ln()))
        .collect();
    let slope = if points.len() >= 2 { Some(ols_slope(&points)) } else { None };
    Ok(BiasStudyResult {
        horizon,
        rows,
        slope,
    })
}

/// Sample mean, its offset from `reference`, and the standard error of the
/// offset's norm.
///
/// The error projects the covariance of the mean onto the bias direction;
/// with zero bias it falls back to the root total variance.
fn bias_and_stderr(draws: &[DVector<f64>], reference: &DVector<f64>) -> (DVector<f64>, DVector<f64>, f64) {
    let s = draws.len() as f64;
    let d = reference.len();
    // Averaging differences keeps the bias exactly zero when every draw
    // equals the reference.
    let mut bias = DVector::zeros(d);
    for h in draws {
        bias += h - reference;
    }
    bias /= s;
    let mean = reference + &bias;
    let norm = bias.norm();
    let var = |u: &DVector<f64>| -> f64 {
        draws.iter().map(|h| (h - &mean).dot(u).powi(2)).sum::<f64>() / (s - 1.0)
    };
    let v = if norm > 0.0 {
        var(&(&bias / norm))
    } else {
        (0..d)
            .map(|p| {
                let mut e = DVector::zeros(d);
                e[p] = 1.0;
                var(&e)
            })
            .sum()
    };
    (mean, bias, (v / s).sqrt())
}

fn ols_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Particle score at step `horizon` of a fixed-parameter run over
/// `observations` (which must hold at least `horizon + 1` entries).
pub fn fixed_parameter_score<M: StateSpaceModel>(
    model: &M,
    theta: &[f64],
    observations: &[Vec<f64>],
    horizon: usize,
    particles: usize,
    seed: u64,
) -> Result<DVector<f64>> {
    if observations.len() <= horizon {
        return Err(Error::Invalid(format!(
            "score at step {horizon} needs {} observations, got {}",
            horizon + 1,
            observations.len()
        )));
    }
    let streams = KeyedStreams::new(RngStream::new(seed));
    let mut system = ParticleSystem::initial(model, particles, &streams)?;
    for y in &observations[..horizon] {
        system.advance(model, theta, y, &streams)?;
    }
    system.score(model, theta, &observations[horizon])
}

/// Bias of the particle score on a grid model against the exact grid score,
/// conditionally on a fixed observation record.
pub fn bias_vs_particles(
    model: &GridModel,
    theta: &[f64],
    observations: &[Vec<f64>],
    horizon: usize,
    particles: &[usize],
    seeds: &[u64],
) -> Result<BiasStudyResult> {
    if observations.len() <= horizon {
        return Err(Error::Invalid(format!(
            "bias study at step {horizon} needs {} observations, got {}",
            horizon + 1,
            observations.len()
        )));
    }
    let exact = grid_run(model, theta, &observations[..=horizon])?;
    let reference = exact.scores[horizon].clone();
    bias_study(particles, seeds, horizon, &reference, |n, seed| {
        fixed_parameter_score(model, theta, observations, horizon, n, seed)
    })
}

/// The same bias study at the horizon and at half of it, to check that the
/// horizon is long enough for the bias to have settled.
pub fn horizon_sensitivity(
    model: &GridModel,
    theta: &[f64],
    observations: &[Vec<f64>],
    horizon: usize,
    particles: &[usize],
    seeds: &[u64],
) -> Result<Vec<BiasStudyResult>> {
    let mut horizons = vec![horizon / 2, horizon];
    horizons.dedup();
    horizons
        .into_iter()
        .map(|h| bias_vs_particles(model, theta, observations, h, particles, seeds))
        .collect()
}

/// Records `[start, end)` of a trace forming its tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TailWindow {
    pub start: usize,
    pub end: usize,
}

impl TailWindow {
    /// The last `ceil(fraction * len)` records.
    pub fn last_fraction(len: usize, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Invalid(format!("tail fraction {fraction} must lie in (0, 1]")));
        }
        let size = (fraction * len as f64).ceil() as usize;
        if size == 0 {
            return Err(Error::Invalid("tail window is empty".into()));
        }
        Ok(Self {
            start: len - size,
            end: len,
        })
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub n_particles: usize,
    pub mean_gradient_norm: f64,
    /// Batch-means standard error of `mean_gradient_norm`.
    pub stderr: f64,
    /// `max - min` of the oracle average log-likelihood over the window.
    pub loglik_oscillation: f64,
    pub window: TailWindow,
    pub evaluations: usize,
    pub projection_hits_tail: usize,
    pub projection_hits_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailStudyResult {
    pub tail_fraction: f64,
    pub rows: Vec<TailRow>,
}

/// Oracle statistics over the tail of one trace.
///
/// The iterate used for record `n` is its post-update value `theta_next`.
/// At most `evaluations` evenly spaced records of the window are evaluated.
pub fn tail_gradient_stats<O: GradientOracle + ?Sized>(
    trace: &[TraceRecord],
    oracle: &O,
    tail_fraction: f64,
    evaluations: usize,
    n_particles: usize,
) -> Result<TailRow> {
    let window = TailWindow::last_fraction(trace.len(), tail_fraction)?;
    let tail = &trace[window.start..window.end];
    let stride = tail.len().div_ceil(evaluations.max(1));
    let mut norms = Vec::new();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for rec in tail.iter().step_by(stride) {
        let v = oracle.evaluate(&rec.theta_next)?;
        norms.push(v.gradient.norm());
        lo = lo.min(v.average_log_likelihood);
        hi = hi.max(v.average_log_likelihood);
    }
    let mean = norms.iter().sum::<f64>() / norms.len() as f64;
    Ok(TailRow {
        n_particles,
        mean_gradient_norm: mean,
        stderr: batch_means_stderr(&norms),
        loglik_oscillation: hi - lo,
        window,
        evaluations: norms.len(),
        projection_hits_tail: tail.iter().filter(|r| r.projected).count(),
        projection_hits_total: trace.iter().filter(|r| r.projected).count(),
    })
}

/// Standard error of the mean of a correlated series from non-overlapping
/// batch means; falls back to the iid formula for short series.
pub fn batch_means_stderr(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let batches = TAIL_BATCHES.min(n);
    let size = n / batches;
    let means: Vec<f64> = (0..batches)
        .map(|b| xs[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (batches as f64 - 1.0);
    (var / batches as f64).sqrt()
}

pub fn write_bias_csv<W: Write>(out: W, result: &BiasStudyResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = result.rows.first().map_or(0, |r| r.reference.len());
    let mut header = vec![
        "n_particles".to_string(),
        "bias_norm".to_string(),
        "stderr".to_string(),
        "seeds".to_string(),
    ];
    for p in 0..d {
        header.push(format!("mean_estimate_{p}"));
        header.push(format!("reference_{p}"));
    }
    w.write_record(&header).map_err(csv_error)?;
    for r in &result.rows {
        let mut rec = vec![
            r.n_particles.to_string(),
            exact(r.bias_norm),
            exact(r.stderr),
            r.seeds.to_string(),
        ];
        for p in 0..d {
            rec.push(exact(r.mean_estimate[p]));
            rec.push(exact(r.reference[p]));
        }
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::Invalid(format!("writing table: {e}")))
}

pub fn write_tail_csv<W: Write>(out: W, result: &TailStudyResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "n_particles",
        "mean_gradient_norm",
        "stderr",
        "loglik_oscillation",
        "tail_start",
        "tail_end",
        "evaluations",
        "projection_hits_tail",
        "projection_hits_total",
    ])
    .map_err(csv_error)?;
    for r in &result.rows {
        w.write_record([
            r.n_particles.to_string(),
            exact(r.mean_gradient_norm),
            exact(r.stderr),
            exact(r.loglik_oscillation),
            r.window.start.to_string(),
            r.window.end.to_string(),
            r.evaluations.to_string(),
            r.projection_hits_tail.to_string(),
            r.projection_hits_total.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::Invalid(format!("writing table: {e}")))
}

/// One JSON object per row.
pub fn write_rows_jsonl<W: Write, T: Serialize>(mut out: W, rows: &[T]) -> Result<()> {
    for r in rows {
        let line = serde_json::to_string(r).map_err(|e| Error::Invalid(format!("encoding row: {e}")))?;
        writeln!(out, "{line}").map_err(|e| Error::Invalid(format!("writing rows: {e}")))?;
    }
    Ok(())
}

fn exact(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_error(e: csv::Error) -> Error {
    Error::Invalid(format!("writing table: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<(f64, f64)> = [50.0f64, 100.0, 200.0].iter().map(|n| (n.ln(), (3.0 / n).ln())).collect();
        assert!((ols_slope(&pts) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn tail_window_takes_the_last_tenth() {
        let w = TailWindow::last_fraction(95, 0.1).unwrap();
        assert_eq!((w.start, w.end), (85, 95));
        assert!(TailWindow::last_fraction(0, 0.1).is_err());
        assert!(TailWindow::last_fraction(10, 0.0).is_err());
    }

    #[test]
    fn batch_means_of_constant_series_is_zero() {
        assert_eq!(batch_means_stderr(&[2.0; 50]), 0.0);
        assert_eq!(batch_means_stderr(&[1.0]), 0.0);
    }

    #[test]
    fn injected_reference_has_zero_bias() {
        let r = DVector::from_vec(vec![0.3, -1.0]);
        let seeds: Vec<u64> = (0..10).collect();
        let res = bias_study(&[10, 20], &seeds, 5, &r, |_, _| Ok(r.clone())).unwrap();
        assert!(res.rows.iter().all(|row| row.bias_norm == 0.0));
        assert_eq!(res.slope, None);
    }

    #[test]
    fn too_few_seeds_rejected() {
        let r = DVector::from_vec(vec![0.0]);
        let seeds: Vec<u64> = (0..9).collect();
        assert!(bias_study(&[10], &seeds, 1, &r, |_, _| Ok(r.clone())).is_err());
    }
}

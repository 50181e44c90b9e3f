//! Exact references for the particle scheme.
//!
//! * Grid recursions: on a [`GridModel`] the filter, the predictor and their
//!   parameter derivatives are finite vectors, and every update is a handful
//!   of dense matrix products. Measures are stored as masses per grid point, so
//!   `xi` sums to one and every column sum of `zeta` is zero.
//! * Tangent Kalman filter: exact log-likelihood and gradient for the
//!   untruncated linear-Gaussian AR(1) model.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::models::{Ar1Maps, GridModel, ObservationColumn, StateSpaceModel, TransitionTable};

/// Filter (or predictor) on a grid together with its parameter derivative.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFilterState {
    /// Probability of each grid point.
    pub xi: DVector<f64>,
    /// `d x M` derivative of `xi`.
    pub zeta: DMatrix<f64>,
}

impl GridFilterState {
    /// Uniform distribution with zero derivative.
    pub fn uniform(size: usize, param_dim: usize) -> Self {
        Self {
            xi: DVector::from_element(size, 1.0 / size as f64),
            zeta: DMatrix::zeros(param_dim, size),
        }
    }

    pub fn new(xi: DVector<f64>, zeta: DMatrix<f64>) -> Result<Self> {
        if zeta.ncols() != xi.len() {
            return Err(Error::Dimension {
                context: "grid derivative columns",
                expected: xi.len(),
                actual: zeta.ncols(),
            });
        }
        if xi.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::Invalid("grid filter masses must be finite and non-negative".into()));
        }
        Ok(Self { xi, zeta })
    }

    pub fn total_variation(&self, other: &Self) -> f64 {
        0.5 * (&self.xi - &other.xi).abs().sum()
    }
}

/// Result of one predictor step: the next predictor pair, the score
/// increment, and the log of the predictive density of the observation.
#[derive(Debug, Clone)]
pub struct PredictorStep {
    pub next: GridFilterState,
    pub score: DVector<f64>,
    pub log_evidence: f64,
}

/// Predictor recursion with precomputed kernel and observation terms.
///
/// With `q` the observation densities and `P` the transition masses:
/// `xi' = P^T (q . xi) / <q, xi>`, the score is
/// `H = (zeta q + dq xi) / <q, xi>`, and
/// `zeta' = [ (zeta . q) P + (xi . dq) P + (xi . q) dP ] / <q, xi> - H xi'^T`.
pub fn predictor_step(table: &TransitionTable, obs: &ObservationColumn, s: &GridFilterState) -> PredictorStep {
    let d = s.zeta.nrows();
    let weighted = s.xi.component_mul(&obs.density);
    let norm = weighted.sum();
    assert!(norm > 0.0, "grid predictor normaliser vanished");
    let score = (&s.zeta * &obs.density + &obs.ddensity * &s.xi) / norm;
    let xi_next = table.mass.tr_mul(&weighted) / norm;
    let mut h = DMatrix::zeros(d, s.xi.len());
    for p in 0..d {
        // Row p of the derivative flow, as a column vector over source points.
        let src: DVector<f64> = s.zeta.row(p).transpose().component_mul(&obs.density)
            + s.xi.component_mul(&obs.ddensity.row(p).transpose());
        let row = table.mass.tr_mul(&src) + table.dmass[p].tr_mul(&weighted);
        h.row_mut(p).copy_from(&(row / norm).transpose());
    }
    let zeta_next = h - &score * xi_next.transpose();
    PredictorStep {
        next: GridFilterState {
            xi: xi_next,
            zeta: zeta_next,
        },
        score,
        log_evidence: norm.ln(),
    }
}

/// Filter recursion with precomputed kernel and observation terms:
/// `f~ = q . (P^T xi) / <q, P^T xi>` and `g~ = h~ - f~ H~` with
/// `h~ = [ q . (P^T zeta) + dq . (P^T xi) + q . (dP^T xi) ] / <q, P^T xi>`.
pub fn filter_step(table: &TransitionTable, obs: &ObservationColumn, s: &GridFilterState) -> (GridFilterState, DVector<f64>) {
    let d = s.zeta.nrows();
    let moved = table.mass.tr_mul(&s.xi);
    let unnorm = moved.component_mul(&obs.density);
    let norm = unnorm.sum();
    assert!(norm > 0.0, "grid filter normaliser vanished");
    let f = unnorm / norm;
    let mut h = DMatrix::zeros(d, s.xi.len());
    for p in 0..d {
        let moved_zeta = table.mass.tr_mul(&s.zeta.row(p).transpose());
        let moved_dxi = table.dmass[p].tr_mul(&s.xi);
        let row = moved_zeta.component_mul(&obs.density)
            + moved.component_mul(&obs.ddensity.row(p).transpose())
            + moved_dxi.component_mul(&obs.density);
        h.row_mut(p).copy_from(&(row / norm).transpose());
    }
    let total: DVector<f64> = h.column_sum();
    let g = h - &total * f.transpose();
    (GridFilterState { xi: f, zeta: g }, total)
}

/// One exact filter update `(xi, zeta) -> (F~(xi), G~(xi, zeta))` for
/// observation `y`.
pub fn grid_filter_update(gm: &GridModel, theta: &[f64], y: &[f64], s: &GridFilterState) -> Result<GridFilterState> {
    check_state(gm, s)?;
    let table = gm.cached_table(theta)?;
    let obs = gm.observation_column(theta, y)?;
    Ok(filter_step(&table, &obs, s).0)
}

/// One exact predictor update for observation `y`.
pub fn grid_predictor_update(gm: &GridModel, theta: &[f64], y: &[f64], s: &GridFilterState) -> Result<GridFilterState> {
    check_state(gm, s)?;
    let table = gm.cached_table(theta)?;
    let obs = gm.observation_column(theta, y)?;
    Ok(predictor_step(&table, &obs, s).next)
}

/// Exact score increment for observation `y` given the predictor pair `s`.
pub fn grid_gradient(gm: &GridModel, theta: &[f64], y: &[f64], s: &GridFilterState) -> Result<DVector<f64>> {
    check_state(gm, s)?;
    let obs = gm.observation_column(theta, y)?;
    let norm = s.xi.dot(&obs.density);
    Ok((&s.zeta * &obs.density + &obs.ddensity * &s.xi) / norm)
}

fn check_state(gm: &GridModel, s: &GridFilterState) -> Result<()> {
    if s.xi.len() != gm.size() || s.zeta.ncols() != gm.size() || s.zeta.nrows() != gm.param_dim() {
        return Err(Error::Dimension {
            context: "grid filter state",
            expected: gm.size(),
            actual: s.xi.len(),
        });
    }
    Ok(())
}

/// Exact predictor pairs before each observation and the per-step scores.
#[derive(Debug, Clone)]
pub struct GridRun {
    /// `predictors[n]` conditions on `ys[..n]`; the last entry on all of `ys`.
    pub predictors: Vec<GridFilterState>,
    pub scores: Vec<DVector<f64>>,
    pub log_likelihood: f64,
}

/// Run the predictor recursion from the uniform initial law over `ys`.
pub fn grid_run(gm: &GridModel, theta: &[f64], ys: &[Vec<f64>]) -> Result<GridRun> {
    let table = gm.transition_table(theta)?;
    let mut s = GridFilterState::uniform(gm.size(), gm.param_dim());
    let mut predictors = Vec::with_capacity(ys.len() + 1);
    let mut scores = Vec::with_capacity(ys.len());
    let mut ll = 0.0;
    for (n, y) in ys.iter().enumerate() {
        let obs = gm.observation_column(theta, y).map_err(|e| e.at_step(n))?;
        let step = predictor_step(&table, &obs, &s);
        predictors.push(std::mem::replace(&mut s, step.next));
        scores.push(step.score);
        ll += step.log_evidence;
    }
    predictors.push(s);
    Ok(GridRun {
        predictors,
        scores,
        log_likelihood: ll,
    })
}

/// Exact `log q(y_0..y_{n-1})` under the uniform initial law, and its gradient.
pub fn grid_log_likelihood(gm: &GridModel, theta: &[f64], ys: &[Vec<f64>]) -> Result<(f64, DVector<f64>)> {
    let run = grid_run(gm, theta, ys)?;
    let mut grad = DVector::zeros(gm.param_dim());
    for s in &run.scores {
        grad += s;
    }
    Ok((run.log_likelihood, grad))
}

/// Exact average log-likelihood and gradient of the linear-Gaussian AR(1)
/// model, from the Kalman filter and its tangent (sensitivity) recursion.
///
/// The prior of the first observed state is `N(prior_mean, prior_var)` and
/// does not depend on the parameters. Truncation of the boxes is ignored.
#[derive(Debug, Clone)]
pub struct KalmanOracle {
    maps: Ar1Maps,
    prior_mean: f64,
    prior_var: f64,
}

#[derive(Debug, Clone)]
pub struct KalmanEvaluation {
    pub average_log_likelihood: f64,
    pub gradient: DVector<f64>,
    /// Per-observation gradient contributions, `d` entries per step.
    pub step_scores: Vec<f64>,
}

impl KalmanOracle {
    pub fn new(maps: Ar1Maps, prior_mean: f64, prior_var: f64) -> Result<Self> {
        if !(prior_var > 0.0 && prior_var.is_finite() && prior_mean.is_finite()) {
            return Err(Error::Invalid(format!(
                "prior variance must be positive, got {prior_var}"
            )));
        }
        Ok(Self {
            maps,
            prior_mean,
            prior_var,
        })
    }

    pub fn param_dim(&self) -> usize {
        self.maps.layout().free_dim()
    }

    pub fn evaluate(&self, theta: &[f64], ys: &[Vec<f64>]) -> Result<KalmanEvaluation> {
        self.run(theta, ys, true)
    }

    /// Same as [`evaluate`](Self::evaluate) without the per-step scores.
    pub fn evaluate_summary(&self, theta: &[f64], ys: &[Vec<f64>]) -> Result<KalmanEvaluation> {
        self.run(theta, ys, false)
    }

    fn run(&self, theta: &[f64], ys: &[Vec<f64>], keep_steps: bool) -> Result<KalmanEvaluation> {
        let d = self.param_dim();
        if theta.len() != d {
            return Err(Error::Dimension {
                context: "parameter vector",
                expected: d,
                actual: theta.len(),
            });
        }
        if ys.is_empty() {
            return Err(Error::Invalid("Kalman oracle needs at least one observation".into()));
        }
        let (phi, sv, sw) = self.maps.constants(theta);
        let (q, r) = (sv * sv, sw * sw);
        let free = self.maps.free_indices();
        // Parameter derivatives of phi, Q = sigma_v^2 and R = sigma_w^2.
        let mut dphi = vec![0.0; d];
        let mut dq = vec![0.0; d];
        let mut dr = vec![0.0; d];
        if let Some(p) = free[0] {
            dphi[p] = 1.0;
        }
        if let Some(p) = free[1] {
            dq[p] = 2.0 * sv;
        }
        if let Some(p) = free[2] {
            dr[p] = 2.0 * sw;
        }
        let (mut m, mut pv) = (self.prior_mean, self.prior_var);
        let mut dm = vec![0.0; d];
        let mut dp = vec![0.0; d];
        let mut ll = 0.0;
        let mut grad = vec![0.0; d];
        let mut steps = if keep_steps { Vec::with_capacity(d * ys.len()) } else { Vec::new() };
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        for (n, y) in ys.iter().enumerate() {
            if y.len() != 1 {
                return Err(Error::Dimension {
                    context: "observation",
                    expected: 1,
                    actual: y.len(),
                });
            }
            let e = y[0] - m;
            let s = pv + r;
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::ModelEvaluation(format!(
                    "innovation variance {s} at step {n} is not positive"
                )));
            }
            ll += -0.5 * (ln_2pi + s.ln() + e * e / s);
            let k = pv / s;
            let mf = m + k * e;
            let pf = pv * r / s;
            for p in 0..d {
                let de = -dm[p];
                let ds = dp[p] + dr[p];
                let g = -0.5 * (ds / s + 2.0 * e * de / s - e * e * ds / (s * s));
                grad[p] += g;
                if keep_steps {
                    steps.push(g);
                }
                let dk = (dp[p] * s - pv * ds) / (s * s);
                let dmf = dm[p] + dk * e + k * de;
                let dpf = (dp[p] * r + pv * dr[p]) / s - pv * r * ds / (s * s);
                dm[p] = dphi[p] * mf + phi * dmf;
                dp[p] = 2.0 * phi * dphi[p] * pf + phi * phi * dpf + dq[p];
            }
            m = phi * mf;
            pv = phi * phi * pf + q;
        }
        let t = ys.len() as f64;
        Ok(KalmanEvaluation {
            average_log_likelihood: ll / t,
            gradient: DVector::from_vec(grad) / t,
            step_scores: steps,
        })
    }
}

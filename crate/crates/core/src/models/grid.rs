//! Finite-grid restriction of a truncated Gaussian model.
//!
//! The state space becomes `M` points of the box, the reference measure is
//! the counting measure with uniform atom weight `volume / M`, and the
//! transition density is the continuous one restricted to the grid and
//! renormalised so that rows carry unit mass. Observations keep the
//! continuous observation density.

use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::gauss::TruncatedGaussModel;
use super::StateSpaceModel;
use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;

#[derive(Debug)]
pub struct GridModel {
    base: TruncatedGaussModel,
    points: Vec<Vec<f64>>,
    atom: f64,
    // Last transition table built, keyed by the parameter it was built at.
    cache: Mutex<Option<(Vec<f64>, Arc<TransitionTable>)>>,
}

impl Clone for GridModel {
    fn clone(&self) -> Self {
        Self {
            base: self.base.clone(),
            points: self.points.clone(),
            atom: self.atom,
            cache: Mutex::new(None),
        }
    }
}

/// Transition kernel on the grid at one parameter value.
///
/// `mass[(i, j)]` is the probability of moving from point `i` to point `j`
/// (rows sum to one); `dmass[p]` its derivative in `theta_p`. The density
/// with respect to the atom-weighted counting measure is `mass / atom`.
#[derive(Debug, Clone)]
pub struct TransitionTable {
    pub mass: DMatrix<f64>,
    pub dmass: Vec<DMatrix<f64>>,
    pub log_density: DMatrix<f64>,
    pub grad_log_density: Vec<DMatrix<f64>>,
}

/// Observation densities at every grid point for one observation.
#[derive(Debug, Clone)]
pub struct ObservationColumn {
    pub density: DVector<f64>,
    /// `d x M`: gradients of the densities (not of their logs).
    pub ddensity: DMatrix<f64>,
    pub log_density: DVector<f64>,
    pub grad_log_density: DMatrix<f64>,
}

impl GridModel {
    pub fn new(base: TruncatedGaussModel, points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Invalid("grid needs at least one point".into()));
        }
        for (i, g) in points.iter().enumerate() {
            if !base.state_box().contains(g) {
                return Err(Error::Invalid(format!("grid point {i} lies outside the state box")));
            }
        }
        let atom = base.state_box().volume() / points.len() as f64;
        Ok(Self {
            base,
            points,
            atom,
            cache: Mutex::new(None),
        })
    }

    /// `m` equally spaced cell centres of a one-dimensional state box.
    pub fn uniform(base: TruncatedGaussModel, m: usize) -> Result<Self> {
        if base.state_dim() != 1 {
            return Err(Error::Unsupported(
                "uniform grids are only built for one-dimensional states".into(),
            ));
        }
        if m == 0 {
            return Err(Error::Invalid("grid needs at least one point".into()));
        }
        let (lo, hi) = (base.state_box().lower()[0], base.state_box().upper()[0]);
        let h = (hi - lo) / m as f64;
        let points = (0..m).map(|k| vec![lo + (k as f64 + 0.5) * h]).collect();
        Self::new(base, points)
    }

    pub fn base(&self) -> &TruncatedGaussModel {
        &self.base
    }

    pub fn size(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn atom(&self) -> f64 {
        self.atom
    }

    pub fn transition_table(&self, theta: &[f64]) -> Result<TransitionTable> {
        let m = self.size();
        let d = self.base.param_dim();
        let mut table = TransitionTable {
            mass: DMatrix::zeros(m, m),
            dmass: vec![DMatrix::zeros(m, m); d],
            log_density: DMatrix::zeros(m, m),
            grad_log_density: vec![DMatrix::zeros(m, m); d],
        };
        let mut lp = vec![0.0; m];
        let mut grads = vec![0.0; d * m];
        for i in 0..m {
            for k in 0..m {
                lp[k] = self.base.log_trans(
                    theta,
                    &self.points[i],
                    &self.points[k],
                    Some(&mut grads[k * d..(k + 1) * d]),
                )?;
            }
            let norm = log_sum_exp(&lp);
            if !norm.is_finite() {
                return Err(Error::ModelEvaluation(format!(
                    "grid transition row {i} has no mass"
                )));
            }
            let mut mean_grad = vec![0.0; d];
            for k in 0..m {
                let w = (lp[k] - norm).exp();
                table.mass[(i, k)] = w;
                table.log_density[(i, k)] = lp[k] - norm - self.atom.ln();
                for p in 0..d {
                    mean_grad[p] += w * grads[k * d + p];
                }
            }
            for k in 0..m {
                for p in 0..d {
                    let g = grads[k * d + p] - mean_grad[p];
                    table.grad_log_density[p][(i, k)] = g;
                    table.dmass[p][(i, k)] = table.mass[(i, k)] * g;
                }
            }
        }
        Ok(table)
    }

    pub fn observation_column(&self, theta: &[f64], y: &[f64]) -> Result<ObservationColumn> {
        let m = self.size();
        let d = self.base.param_dim();
        let mut col = ObservationColumn {
            density: DVector::zeros(m),
            ddensity: DMatrix::zeros(d, m),
            log_density: DVector::zeros(m),
            grad_log_density: DMatrix::zeros(d, m),
        };
        let mut g = vec![0.0; d];
        for i in 0..m {
            let lq = self.base.log_obs(theta, &self.points[i], y, Some(&mut g))?;
            let q = lq.exp();
            col.log_density[i] = lq;
            col.density[i] = q;
            for p in 0..d {
                col.grad_log_density[(p, i)] = g[p];
                col.ddensity[(p, i)] = q * g[p];
            }
        }
        Ok(col)
    }

    fn check_index(&self, i: usize) -> Result<&Vec<f64>> {
        self.points
            .get(i)
            .ok_or_else(|| Error::Invalid(format!("grid index {i} out of range {}", self.size())))
    }

    /// Transition table at `theta`, reusing the previous one when the
    /// parameter has not changed.
    pub fn cached_table(&self, theta: &[f64]) -> Result<Arc<TransitionTable>> {
        let mut guard = self.cache.lock().unwrap_or_else(|e| e.into_inner());
        if let Some((key, table)) = guard.as_ref() {
            if key.as_slice() == theta {
                return Ok(Arc::clone(table));
            }
        }
        let table = Arc::new(self.transition_table(theta)?);
        *guard = Some((theta.to_vec(), Arc::clone(&table)));
        Ok(table)
    }
}

pub struct GridSources {
    n: usize,
    param_dim: usize,
    rows: Vec<usize>,
    table: Arc<TransitionTable>,
    log_q: Vec<f64>,
    grad_log_q: Vec<f64>,
}

impl StateSpaceModel for GridModel {
    type State = usize;
    type Sources = GridSources;

    fn param_dim(&self) -> usize {
        self.base.param_dim()
    }

    fn obs_dim(&self) -> usize {
        self.base.obs_dim()
    }

    fn contains_state(&self, x: &usize) -> bool {
        *x < self.size()
    }

    fn contains_obs(&self, y: &[f64]) -> bool {
        self.base.contains_obs(y)
    }

    fn log_trans(
        &self,
        theta: &[f64],
        x: &usize,
        x_next: &usize,
        grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        self.check_index(*x)?;
        self.check_index(*x_next)?;
        let table = self.cached_table(theta)?;
        if let Some(g) = grad {
            for (p, gp) in g.iter_mut().enumerate().take(self.param_dim()) {
                *gp = table.grad_log_density[p][(*x, *x_next)];
            }
        }
        Ok(table.log_density[(*x, *x_next)])
    }

    fn log_obs(
        &self,
        theta: &[f64],
        x: &usize,
        y: &[f64],
        grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        let g = self.check_index(*x)?;
        self.base.log_obs(theta, g, y, grad)
    }

    fn sample_trans<R: Rng + ?Sized>(&self, theta: &[f64], x: &usize, rng: &mut R) -> Result<usize> {
        self.check_index(*x)?;
        let table = self.cached_table(theta)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, w) in table.mass.row(*x).iter().enumerate() {
            acc += w;
            if u < acc {
                return Ok(k);
            }
        }
        Ok(self.size() - 1)
    }

    fn sample_obs<R: Rng + ?Sized>(&self, theta: &[f64], x: &usize, rng: &mut R) -> Result<Vec<f64>> {
        let g = self.check_index(*x)?;
        self.base.sample_obs(theta, g, rng)
    }

    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(0..self.size())
    }

    fn discrete_index(&self, x: &usize) -> Option<usize> {
        Some(*x)
    }

    fn prepare_sources(&self, theta: &[f64], sources: &[usize], y: &[f64]) -> Result<GridSources> {
        let d = self.param_dim();
        let n = sources.len();
        let table = self.cached_table(theta)?;
        let mut log_q = vec![0.0; n];
        let mut grad_log_q = vec![0.0; d * n];
        let mut g = vec![0.0; d];
        for (i, &s) in sources.iter().enumerate() {
            log_q[i] = self.log_obs(theta, &s, y, Some(&mut g))?;
            for p in 0..d {
                grad_log_q[p * n + i] = g[p];
            }
        }
        Ok(GridSources {
            n,
            param_dim: d,
            rows: sources.to_vec(),
            table,
            log_q,
            grad_log_q,
        })
    }

    fn fill_log_r(&self, src: &GridSources, x_next: &usize, log_r: &mut [f64], grad: &mut [f64]) {
        let n = src.n;
        for (i, &row) in src.rows.iter().enumerate() {
            log_r[i] = src.table.log_density[(row, *x_next)] + src.log_q[i];
            for p in 0..src.param_dim {
                grad[p * n + i] = src.table.grad_log_density[p][(row, *x_next)] + src.grad_log_q[p * n + i];
            }
        }
    }
}

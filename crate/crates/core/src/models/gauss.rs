//! Additive Gaussian noise models truncated to compact boxes:
//!
//! ```text
//! X' = A(x) + B(x) V,   Y = C(x) + D(x) W,   V, W standard normal,
//! ```
//!
//! with diagonal `B`, `D`. The densities are the untruncated Gaussian
//! densities restricted to the state box `X` (resp. observation box `Y`) and
//! renormalised over it; the normalisers factor per coordinate and are
//! evaluated in closed form from error-function differences.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use smallvec::{smallvec, SmallVec};

use super::{Bounds, StateSpaceModel};
use crate::error::{Error, Result};
use crate::numeric::{log_normal_mass, LN_SQRT_2PI};

/// Location, diagonal scale and their parameter derivatives at one point.
/// Derivative layout: `dmean[k * d + p] = d mean_k / d theta_p`.
#[derive(Debug, Clone, Default)]
pub struct MapEval {
    pub mean: Coords,
    pub scale: Coords,
    pub dmean: Coords,
    pub dscale: Coords,
}

/// Inline storage for small per-point vectors.
pub type Coords = SmallVec<[f64; 8]>;

impl MapEval {
    pub fn zeros(dim: usize, param_dim: usize) -> Self {
        Self {
            mean: smallvec![0.0; dim],
            scale: smallvec![0.0; dim],
            dmean: smallvec![0.0; dim * param_dim],
            dscale: smallvec![0.0; dim * param_dim],
        }
    }
}

/// The maps `(A, B)` and `(C, D)` of an additive-noise model with diagonal scales.
pub trait DiagonalMaps: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    /// Fill `A_theta(x)`, `diag B_theta(x)` and their derivatives.
    fn transition(&self, theta: &[f64], x: &[f64], out: &mut MapEval);
    /// Fill `C_theta(x)`, `diag D_theta(x)` and their derivatives.
    fn observation(&self, theta: &[f64], x: &[f64], out: &mut MapEval);
}

/// Truncated additive-Gaussian state-space model.
#[derive(Debug, Clone)]
pub struct TruncatedGaussModel {
    maps: Arc<dyn DiagonalMaps>,
    state_box: Bounds,
    obs_box: Bounds,
    rejection_cap: usize,
}

/// Log density of a diagonal Gaussian truncated to `bounds`, plus gradient.
///
/// Returns `(log density, log normaliser)` contributions summed over
/// coordinates; `grad` (if given) is accumulated, not overwritten.
fn truncated_log_density(
    ev: &MapEval,
    bounds: &Bounds,
    point: &[f64],
    param_dim: usize,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let dim = bounds.dim();
    let mut log_det = 0.0;
    for &s in &ev.scale {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::ModelEvaluation(format!(
                "scale must be positive and finite, got {s}"
            )));
        }
        log_det += s.ln();
    }
    if log_det < -690.8 {
        // |det| below 1e-300
        return Err(Error::ModelEvaluation(format!(
            "degenerate scale: log|det| = {log_det}"
        )));
    }
    if !bounds.contains(point) {
        return Ok(f64::NEG_INFINITY);
    }
    let mut total = 0.0;
    let mut grad = grad;
    for k in 0..dim {
        let (m, s) = (ev.mean[k], ev.scale[k]);
        let z = (point[k] - m) / s;
        let a = (bounds.lower()[k] - m) / s;
        let b = (bounds.upper()[k] - m) / s;
        let log_z = log_normal_mass(a, b);
        if !log_z.is_finite() {
            return Err(Error::ModelEvaluation(format!(
                "truncation mass vanished in coordinate {k} (mean {m}, scale {s})"
            )));
        }
        total += -0.5 * z * z - LN_SQRT_2PI - s.ln() - log_z;
        if let Some(g) = grad.as_deref_mut() {
            let pa = (-0.5 * a * a - LN_SQRT_2PI - log_z).exp();
            let pb = (-0.5 * b * b - LN_SQRT_2PI - log_z).exp();
            for (p, gp) in g.iter_mut().enumerate().take(param_dim) {
                let dm = ev.dmean[k * param_dim + p];
                let ds = ev.dscale[k * param_dim + p];
                let dlog_z = (-dm * (pb - pa) - ds * (b * pb - a * pa)) / s;
                *gp += z * (dm + z * ds) / s - ds / s - dlog_z;
            }
        }
    }
    Ok(total)
}

fn check_finite(what: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

impl TruncatedGaussModel {
    pub fn new(maps: Arc<dyn DiagonalMaps>, state_box: Bounds, obs_box: Bounds) -> Result<Self> {
        if state_box.dim() != maps.state_dim() {
            return Err(Error::Dimension {
                context: "state box",
                expected: maps.state_dim(),
                actual: state_box.dim(),
            });
        }
        if obs_box.dim() != maps.obs_dim() {
            return Err(Error::Dimension {
                context: "observation box",
                expected: maps.obs_dim(),
                actual: obs_box.dim(),
            });
        }
        Ok(Self {
            maps,
            state_box,
            obs_box,
            rejection_cap: super::DEFAULT_REJECTION_CAP,
        })
    }

    pub fn with_rejection_cap(mut self, cap: usize) -> Self {
        self.rejection_cap = cap.max(1);
        self
    }

    pub fn maps(&self) -> &dyn DiagonalMaps {
        &*self.maps
    }

    pub fn state_box(&self) -> &Bounds {
        &self.state_box
    }

    pub fn obs_box(&self) -> &Bounds {
        &self.obs_box
    }

    pub fn state_dim(&self) -> usize {
        self.maps.state_dim()
    }

    fn eval_transition(&self, theta: &[f64], x: &[f64]) -> MapEval {
        let mut ev = MapEval::zeros(self.maps.state_dim(), self.maps.param_dim());
        self.maps.transition(theta, x, &mut ev);
        ev
    }

    fn eval_observation(&self, theta: &[f64], x: &[f64]) -> MapEval {
        let mut ev = MapEval::zeros(self.maps.obs_dim(), self.maps.param_dim());
        self.maps.observation(theta, x, &mut ev);
        ev
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.maps.param_dim() {
            return Err(Error::Dimension {
                context: "parameter vector",
                expected: self.maps.param_dim(),
                actual: theta.len(),
            });
        }
        check_finite("parameter vector", theta)
    }

    fn rejection_draw<R: Rng + ?Sized>(
        &self,
        ev: &MapEval,
        bounds: &Bounds,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let dim = bounds.dim();
        let mut out = vec![0.0; dim];
        for _ in 0..self.rejection_cap {
            for k in 0..dim {
                let v: f64 = rng.sample(StandardNormal);
                out[k] = ev.mean[k] + ev.scale[k] * v;
            }
            if bounds.contains(&out) {
                return Ok(out);
            }
        }
        Err(Error::RejectionCap {
            attempts: self.rejection_cap,
        })
    }
}

/// Old-particle data for the interaction kernel, stored coordinate-major so
/// that column fills run over contiguous memory.
pub struct GaussSources {
    n: usize,
    state_dim: usize,
    param_dim: usize,
    mean: Vec<f64>,
    inv_scale: Vec<f64>,
    base: Vec<f64>,
    grad_base: Vec<f64>,
    dmean_over_s: Vec<f64>,
    dscale_over_s: Vec<f64>,
}

impl StateSpaceModel for TruncatedGaussModel {
    type State = Vec<f64>;
    type Sources = GaussSources;

    fn param_dim(&self) -> usize {
        self.maps.param_dim()
    }

    fn obs_dim(&self) -> usize {
        self.maps.obs_dim()
    }

    fn contains_state(&self, x: &Vec<f64>) -> bool {
        self.state_box.contains(x)
    }

    fn contains_obs(&self, y: &[f64]) -> bool {
        self.obs_box.contains(y)
    }

    fn log_trans(
        &self,
        theta: &[f64],
        x: &Vec<f64>,
        x_next: &Vec<f64>,
        grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        self.check_theta(theta)?;
        check_finite("state", x)?;
        check_finite("next state", x_next)?;
        let ev = self.eval_transition(theta, x);
        let d = self.param_dim();
        let grad = grad.map(|g| {
            g[..d].fill(0.0);
            g
        });
        truncated_log_density(&ev, &self.state_box, x_next, d, grad)
    }

    fn log_obs(
        &self,
        theta: &[f64],
        x: &Vec<f64>,
        y: &[f64],
        grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        self.check_theta(theta)?;
        check_finite("state", x)?;
        check_finite("observation", y)?;
        let ev = self.eval_observation(theta, x);
        let d = self.param_dim();
        let grad = grad.map(|g| {
            g[..d].fill(0.0);
            g
        });
        truncated_log_density(&ev, &self.obs_box, y, d, grad)
    }

    fn sample_trans<R: Rng + ?Sized>(
        &self,
        theta: &[f64],
        x: &Vec<f64>,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let ev = self.eval_transition(theta, x);
        self.rejection_draw(&ev, &self.state_box, rng)
    }

    fn sample_obs<R: Rng + ?Sized>(
        &self,
        theta: &[f64],
        x: &Vec<f64>,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let ev = self.eval_observation(theta, x);
        self.rejection_draw(&ev, &self.obs_box, rng)
    }

    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.state_box
            .lower()
            .iter()
            .zip(self.state_box.upper())
            .map(|(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
            .collect()
    }

    fn prepare_sources(&self, theta: &[f64], sources: &[Vec<f64>], y: &[f64]) -> Result<GaussSources> {
        self.check_theta(theta)?;
        let n = sources.len();
        let dx = self.state_dim();
        let d = self.param_dim();
        let mut out = GaussSources {
            n,
            state_dim: dx,
            param_dim: d,
            mean: vec![0.0; dx * n],
            inv_scale: vec![0.0; dx * n],
            base: vec![0.0; n],
            grad_base: vec![0.0; d * n],
            dmean_over_s: vec![0.0; d * dx * n],
            dscale_over_s: vec![0.0; d * dx * n],
        };
        let mut gq = vec![0.0; d];
        let mut ev = MapEval::zeros(dx, d);
        for (i, x) in sources.iter().enumerate() {
            let lq = self.log_obs(theta, x, y, Some(&mut gq))?;
            ev.dmean.fill(0.0);
            ev.dscale.fill(0.0);
            self.maps.transition(theta, x, &mut ev);
            let mut base = lq - dx as f64 * LN_SQRT_2PI;
            for p in 0..d {
                out.grad_base[p * n + i] = gq[p];
            }
            for k in 0..dx {
                let (m, s) = (ev.mean[k], ev.scale[k]);
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::ModelEvaluation(format!(
                        "transition scale must be positive, got {s}"
                    )));
                }
                let a = (self.state_box.lower()[k] - m) / s;
                let b = (self.state_box.upper()[k] - m) / s;
                let log_z = log_normal_mass(a, b);
                if !log_z.is_finite() {
                    return Err(Error::ModelEvaluation(format!(
                        "transition truncation mass vanished (mean {m}, scale {s})"
                    )));
                }
                base -= s.ln() + log_z;
                out.mean[k * n + i] = m;
                out.inv_scale[k * n + i] = 1.0 / s;
                let pa = (-0.5 * a * a - LN_SQRT_2PI - log_z).exp();
                let pb = (-0.5 * b * b - LN_SQRT_2PI - log_z).exp();
                for p in 0..d {
                    let dm = ev.dmean[k * d + p];
                    let ds = ev.dscale[k * d + p];
                    let dlog_z = (-dm * (pb - pa) - ds * (b * pb - a * pa)) / s;
                    out.grad_base[p * n + i] -= ds / s + dlog_z;
                    out.dmean_over_s[(p * dx + k) * n + i] = dm / s;
                    out.dscale_over_s[(p * dx + k) * n + i] = ds / s;
                }
            }
            out.base[i] = base;
        }
        Ok(out)
    }

    fn fill_log_r(&self, src: &GaussSources, x_next: &Vec<f64>, log_r: &mut [f64], grad: &mut [f64]) {
        let n = src.n;
        let (dx, d) = (src.state_dim, src.param_dim);
        let log_r = &mut log_r[..n];
        let grad = &mut grad[..d * n];
        let inside = self.state_box.contains(x_next);
        if !inside {
            log_r.fill(f64::NEG_INFINITY);
            grad[..d * n].copy_from_slice(&src.grad_base);
            return;
        }
        if dx == 1 {
            // One pass per output row, without copying the bases first.
            let xk = x_next[0];
            for ((lr, (m, is)), b) in log_r.iter_mut().zip(src.mean.iter().zip(&src.inv_scale)).zip(&src.base) {
                let z = (xk - m) * is;
                *lr = b - 0.5 * z * z;
            }
            for p in 0..d {
                let rows = p * n..(p + 1) * n;
                let (dmos, dsos) = (&src.dmean_over_s[rows.clone()], &src.dscale_over_s[rows.clone()]);
                let gb = &src.grad_base[rows.clone()];
                let g = &mut grad[rows];
                for i in 0..n {
                    let z = (xk - src.mean[i]) * src.inv_scale[i];
                    g[i] = gb[i] + z * (dmos[i] + z * dsos[i]);
                }
            }
            return;
        }
        log_r.copy_from_slice(&src.base);
        grad[..d * n].copy_from_slice(&src.grad_base);
        for k in 0..dx {
            let xk = x_next[k];
            let mean = &src.mean[k * n..(k + 1) * n];
            let inv = &src.inv_scale[k * n..(k + 1) * n];
            for ((lr, m), is) in log_r.iter_mut().zip(mean).zip(inv) {
                let z = (xk - m) * is;
                *lr -= 0.5 * z * z;
            }
            for p in 0..d {
                let dmos = &src.dmean_over_s[(p * dx + k) * n..(p * dx + k + 1) * n];
                let dsos = &src.dscale_over_s[(p * dx + k) * n..(p * dx + k + 1) * n];
                let g = &mut grad[p * n..(p + 1) * n];
                for i in 0..n {
                    let z = (xk - mean[i]) * inv[i];
                    g[i] += z * (dmos[i] + z * dsos[i]);
                }
            }
        }
    }
}

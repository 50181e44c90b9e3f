//! State-space models: transition density `p_theta(x'|x)`, observation density
//! `q_theta(y|x)`, their parameter gradients, and samplers.
//!
//! Densities are evaluated in log space. The particle interaction kernel works
//! column by column: for a fixed new particle it needs `log r(x'|y, x_i) =
//! log p(x'|x_i) + log q(y|x_i)` and its gradient for every old particle
//! `x_i`. Models prepare whatever depends on the old particles alone once per
//! step ([`StateSpaceModel::prepare_sources`]) and then fill columns cheaply.

mod gauss;
mod grid;
mod instances;
mod simulate;

pub use gauss::{DiagonalMaps, MapEval, TruncatedGaussModel};
pub use grid::{GridModel, ObservationColumn, TransitionTable};
pub use instances::{ar1, stochastic_volatility, Ar1Maps, ParamLayout, StochVolMaps};
pub use simulate::{simulate, Trajectory, DEFAULT_REJECTION_CAP};

use rand::Rng;

use crate::error::Result;

/// Axis-aligned compact box in state or observation space.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        use crate::error::Error;
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::InvalidBox(format!(
                "bounds need matching non-empty lower/upper, got {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidBox(format!(
                    "coordinate {i}: need finite lower < upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo], vec![hi])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *lo <= *v && *v <= *hi)
    }

    /// Lebesgue volume of the box.
    pub fn volume(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| hi - lo)
            .product()
    }
}

/// A parameterised state-space model with compact state space.
///
/// Gradients are always with respect to the full parameter vector `theta` of
/// length [`param_dim`](Self::param_dim) and are written into caller-provided
/// slices.
pub trait StateSpaceModel: Sync {
    type State: Clone + Send + Sync + std::fmt::Debug;
    /// Per-step data derived from a set of old particles and one observation.
    type Sources: Send + Sync;

    fn param_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;

    fn contains_state(&self, x: &Self::State) -> bool;
    fn contains_obs(&self, y: &[f64]) -> bool;

    /// `log p_theta(x_next | x)`, `-inf` when `x_next` lies outside the state
    /// space. When `grad` is given it receives `grad_theta log p`.
    fn log_trans(
        &self,
        theta: &[f64],
        x: &Self::State,
        x_next: &Self::State,
        grad: Option<&mut [f64]>,
    ) -> Result<f64>;

    /// `log q_theta(y | x)`, `-inf` outside the observation box.
    fn log_obs(
        &self,
        theta: &[f64],
        x: &Self::State,
        y: &[f64],
        grad: Option<&mut [f64]>,
    ) -> Result<f64>;

    fn sample_trans<R: Rng + ?Sized>(
        &self,
        theta: &[f64],
        x: &Self::State,
        rng: &mut R,
    ) -> Result<Self::State>;

    fn sample_obs<R: Rng + ?Sized>(
        &self,
        theta: &[f64],
        x: &Self::State,
        rng: &mut R,
    ) -> Result<Vec<f64>>;

    /// Draw from the initial particle distribution (uniform on the state space).
    fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Self::State;

    /// Index of `x` in a finite state space, if the model has one. Particles
    /// sharing an index are interchangeable in the interaction kernel.
    fn discrete_index(&self, _x: &Self::State) -> Option<usize> {
        None
    }

    /// Precompute everything the interaction kernel needs from `sources` and `y`.
    fn prepare_sources(
        &self,
        theta: &[f64],
        sources: &[Self::State],
        y: &[f64],
    ) -> Result<Self::Sources>;

    /// Fill `log_r[i] = log p(x_next | x_i) + log q(y | x_i)` and
    /// `grad[k * n + i] = d/dtheta_k log r(x_next | y, x_i)` for the `n`
    /// prepared sources.
    fn fill_log_r(
        &self,
        sources: &Self::Sources,
        x_next: &Self::State,
        log_r: &mut [f64],
        grad: &mut [f64],
    );
}

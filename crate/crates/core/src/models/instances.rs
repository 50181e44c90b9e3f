//! Shipped model instances: a truncated Gaussian AR(1) and a truncated
//! stochastic-volatility model.
//!
//! Each instance has a fixed list of named constants. A [`ParamLayout`] marks
//! which of them are estimated (and at which position of `theta`); the rest are
//! held at fixed values.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::gauss::{DiagonalMaps, MapEval, TruncatedGaussModel};
use super::Bounds;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Slot {
    Free(usize),
    Fixed(f64),
}

/// Mapping between a family's named constants and the free parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    names: Vec<&'static str>,
    slots: Vec<Slot>,
    free: usize,
}

impl ParamLayout {
    /// `free` lists the estimated names in `theta` order; every other name
    /// must appear in `fixed`.
    pub fn new(
        names: &[&'static str],
        free: &[String],
        fixed: &BTreeMap<String, f64>,
    ) -> Result<Self> {
        for f in free.iter().chain(fixed.keys()) {
            if !names.contains(&f.as_str()) {
                return Err(Error::Config(format!(
                    "unknown parameter '{f}', expected one of {names:?}"
                )));
            }
        }
        let mut slots = Vec::with_capacity(names.len());
        for name in names {
            let pos = free.iter().position(|f| f == name);
            if free.iter().filter(|f| f == name).count() > 1 {
                return Err(Error::Config(format!("parameter '{name}' listed twice as free")));
            }
            match (pos, fixed.get(*name)) {
                (Some(_), Some(_)) => {
                    return Err(Error::Config(format!(
                        "parameter '{name}' is both free and fixed"
                    )))
                }
                (Some(p), None) => slots.push(Slot::Free(p)),
                (None, Some(v)) if v.is_finite() => slots.push(Slot::Fixed(*v)),
                (None, Some(v)) => {
                    return Err(Error::Config(format!("fixed value of '{name}' is {v}")))
                }
                (None, None) => {
                    return Err(Error::Config(format!(
                        "parameter '{name}' needs a fixed value or must be free"
                    )))
                }
            }
        }
        Ok(Self {
            names: names.to_vec(),
            slots,
            free: free.len(),
        })
    }

    pub fn free_dim(&self) -> usize {
        self.free
    }

    pub fn names(&self) -> &[&'static str] {
        &self.names
    }

    /// Names of the free parameters in `theta` order.
    pub fn free_names(&self) -> Vec<&'static str> {
        let mut out = vec![""; self.free];
        for (name, slot) in self.names.iter().zip(&self.slots) {
            if let Slot::Free(p) = slot {
                out[*p] = name;
            }
        }
        out
    }

    #[inline]
    fn value(&self, theta: &[f64], k: usize) -> f64 {
        match self.slots[k] {
            Slot::Free(p) => theta[p],
            Slot::Fixed(v) => v,
        }
    }

    #[inline]
    fn free_index(&self, k: usize) -> Option<usize> {
        match self.slots[k] {
            Slot::Free(p) => Some(p),
            Slot::Fixed(_) => None,
        }
    }
}

/// `X' = phi x + sigma_v V`, `Y = x + sigma_w W`.
#[derive(Debug, Clone)]
pub struct Ar1Maps {
    layout: ParamLayout,
}

impl Ar1Maps {
    pub const NAMES: [&'static str; 3] = ["phi", "sigma_v", "sigma_w"];
    const PHI: usize = 0;
    const SIGMA_V: usize = 1;
    const SIGMA_W: usize = 2;

    pub fn new(layout: ParamLayout) -> Result<Self> {
        if layout.names() != Self::NAMES {
            return Err(Error::Config("layout does not belong to the AR(1) family".into()));
        }
        Ok(Self { layout })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// `(phi, sigma_v, sigma_w)` at `theta`.
    pub fn constants(&self, theta: &[f64]) -> (f64, f64, f64) {
        (
            self.layout.value(theta, Self::PHI),
            self.layout.value(theta, Self::SIGMA_V),
            self.layout.value(theta, Self::SIGMA_W),
        )
    }

    /// Free index of each constant, in `NAMES` order.
    pub fn free_indices(&self) -> [Option<usize>; 3] {
        [0, 1, 2].map(|k| self.layout.free_index(k))
    }
}

impl DiagonalMaps for Ar1Maps {
    fn state_dim(&self) -> usize {
        1
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn param_dim(&self) -> usize {
        self.layout.free_dim()
    }

    fn transition(&self, theta: &[f64], x: &[f64], out: &mut MapEval) {
        let phi = self.layout.value(theta, Self::PHI);
        out.mean[0] = phi * x[0];
        out.scale[0] = self.layout.value(theta, Self::SIGMA_V);
        out.dmean.fill(0.0);
        out.dscale.fill(0.0);
        if let Some(p) = self.layout.free_index(Self::PHI) {
            out.dmean[p] = x[0];
        }
        if let Some(p) = self.layout.free_index(Self::SIGMA_V) {
            out.dscale[p] = 1.0;
        }
    }

    fn observation(&self, theta: &[f64], x: &[f64], out: &mut MapEval) {
        out.mean[0] = x[0];
        out.scale[0] = self.layout.value(theta, Self::SIGMA_W);
        out.dmean.fill(0.0);
        out.dscale.fill(0.0);
        if let Some(p) = self.layout.free_index(Self::SIGMA_W) {
            out.dscale[p] = 1.0;
        }
    }
}

/// `X' = phi x + sigma V`, `Y = beta exp(x / 2) W`.
#[derive(Debug, Clone)]
pub struct StochVolMaps {
    layout: ParamLayout,
}

impl StochVolMaps {
    pub const NAMES: [&'static str; 3] = ["phi", "sigma", "beta"];
    const PHI: usize = 0;
    const SIGMA: usize = 1;
    const BETA: usize = 2;

    pub fn new(layout: ParamLayout) -> Result<Self> {
        if layout.names() != Self::NAMES {
            return Err(Error::Config(
                "layout does not belong to the stochastic-volatility family".into(),
            ));
        }
        Ok(Self { layout })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }
}

impl DiagonalMaps for StochVolMaps {
    fn state_dim(&self) -> usize {
        1
    }

    fn obs_dim(&self) -> usize {
        1
    }

    fn param_dim(&self) -> usize {
        self.layout.free_dim()
    }

    fn transition(&self, theta: &[f64], x: &[f64], out: &mut MapEval) {
        out.mean[0] = self.layout.value(theta, Self::PHI) * x[0];
        out.scale[0] = self.layout.value(theta, Self::SIGMA);
        out.dmean.fill(0.0);
        out.dscale.fill(0.0);
        if let Some(p) = self.layout.free_index(Self::PHI) {
            out.dmean[p] = x[0];
        }
        if let Some(p) = self.layout.free_index(Self::SIGMA) {
            out.dscale[p] = 1.0;
        }
    }

    fn observation(&self, theta: &[f64], x: &[f64], out: &mut MapEval) {
        let vol = (0.5 * x[0]).exp();
        out.mean[0] = 0.0;
        out.scale[0] = self.layout.value(theta, Self::BETA) * vol;
        out.dmean.fill(0.0);
        out.dscale.fill(0.0);
        if let Some(p) = self.layout.free_index(Self::BETA) {
            out.dscale[p] = vol;
        }
    }
}

/// Truncated Gaussian AR(1) on the boxes `state_box`, `obs_box`.
pub fn ar1(layout: ParamLayout, state_box: Bounds, obs_box: Bounds) -> Result<TruncatedGaussModel> {
    TruncatedGaussModel::new(Arc::new(Ar1Maps::new(layout)?), state_box, obs_box)
}

/// Truncated stochastic-volatility model on the boxes `state_box`, `obs_box`.
pub fn stochastic_volatility(
    layout: ParamLayout,
    state_box: Bounds,
    obs_box: Bounds,
) -> Result<TruncatedGaussModel> {
    TruncatedGaussModel::new(Arc::new(StochVolMaps::new(layout)?), state_box, obs_box)
}

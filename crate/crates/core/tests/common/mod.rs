#![allow(dead_code)]

use std::collections::BTreeMap;

use prml::models::{ar1, stochastic_volatility, Ar1Maps, Bounds, GridModel, ParamLayout, StochVolMaps, TruncatedGaussModel};

pub fn layout(names: &[&'static str], free: &[&str], fixed: &[(&str, f64)]) -> ParamLayout {
    let fixed: BTreeMap<String, f64> = fixed.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    let free: Vec<String> = free.iter().map(|s| s.to_string()).collect();
    ParamLayout::new(names, &free, &fixed).unwrap()
}

/// AR(1) with every constant free: theta = (phi, sigma_v, sigma_w).
pub fn ar1_full(x: (f64, f64), y: (f64, f64)) -> TruncatedGaussModel {
    let l = layout(&Ar1Maps::NAMES, &["phi", "sigma_v", "sigma_w"], &[]);
    ar1(l, Bounds::interval(x.0, x.1).unwrap(), Bounds::interval(y.0, y.1).unwrap()).unwrap()
}

/// AR(1) estimating phi only.
pub fn ar1_phi(sigma_v: f64, sigma_w: f64, x: (f64, f64), y: (f64, f64)) -> TruncatedGaussModel {
    let l = layout(&Ar1Maps::NAMES, &["phi"], &[("sigma_v", sigma_v), ("sigma_w", sigma_w)]);
    ar1(l, Bounds::interval(x.0, x.1).unwrap(), Bounds::interval(y.0, y.1).unwrap()).unwrap()
}

/// AR(1) with no free parameter.
pub fn ar1_fixed(phi: f64, sigma_v: f64, sigma_w: f64, x: (f64, f64), y: (f64, f64)) -> TruncatedGaussModel {
    let l = layout(&Ar1Maps::NAMES, &[], &[("phi", phi), ("sigma_v", sigma_v), ("sigma_w", sigma_w)]);
    ar1(l, Bounds::interval(x.0, x.1).unwrap(), Bounds::interval(y.0, y.1).unwrap()).unwrap()
}

/// Stochastic volatility with every constant free: theta = (phi, sigma, beta).
pub fn sv_full(x: (f64, f64), y: (f64, f64)) -> TruncatedGaussModel {
    let l = layout(&StochVolMaps::NAMES, &["phi", "sigma", "beta"], &[]);
    stochastic_volatility(l, Bounds::interval(x.0, x.1).unwrap(), Bounds::interval(y.0, y.1).unwrap()).unwrap()
}

pub fn grid(base: TruncatedGaussModel, m: usize) -> GridModel {
    GridModel::uniform(base, m).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-8)
}

/// `X' = 0.5 x + 0.8 V`, `Y = x + W`, with one declared parameter that
/// enters nothing.
#[derive(Debug)]
pub struct Inert;

impl prml::models::DiagonalMaps for Inert {
    fn state_dim(&self) -> usize {
        1
    }
    fn obs_dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        1
    }
    fn transition(&self, _theta: &[f64], x: &[f64], out: &mut prml::models::MapEval) {
        out.mean[0] = 0.5 * x[0];
        out.scale[0] = 0.8;
        out.dmean.fill(0.0);
        out.dscale.fill(0.0);
    }
    fn observation(&self, _theta: &[f64], x: &[f64], out: &mut prml::models::MapEval) {
        out.mean[0] = x[0];
        out.scale[0] = 1.0;
        out.dmean.fill(0.0);
        out.dscale.fill(0.0);
    }
}

pub fn inert(x: (f64, f64), y: (f64, f64)) -> TruncatedGaussModel {
    TruncatedGaussModel::new(
        std::sync::Arc::new(Inert),
        Bounds::interval(x.0, x.1).unwrap(),
        Bounds::interval(y.0, y.1).unwrap(),
    )
    .unwrap()
}

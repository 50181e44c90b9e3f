//! Fixtures shared by the benchmarks.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use prml::models::{ar1, simulate, Ar1Maps, Bounds, GridModel, ParamLayout, TruncatedGaussModel};
use prml::rng::RngStream;

/// AR(1) with `phi` free, unit state noise and observation noise 0.8.
pub fn ar1_phi() -> TruncatedGaussModel {
    let fixed = BTreeMap::from([("sigma_v".to_string(), 1.0), ("sigma_w".to_string(), 0.8)]);
    let layout = ParamLayout::new(&Ar1Maps::NAMES, &["phi".to_string()], &fixed).expect("valid layout");
    ar1(layout, Bounds::interval(-6.0, 6.0).unwrap(), Bounds::interval(-10.0, 10.0).unwrap()).expect("valid model")
}

pub fn grid(points: usize) -> GridModel {
    GridModel::uniform(ar1_phi(), points).expect("valid grid")
}

/// Two particle clouds, weights and an observation for one interaction step.
pub struct InteractionCase {
    pub old: Vec<Vec<f64>>,
    pub new: Vec<Vec<f64>>,
    pub weights: DMatrix<f64>,
    pub obs: Vec<f64>,
}

pub fn interaction_case(n: usize, seed: u64) -> InteractionCase {
    let model = ar1_phi();
    let path = simulate(&model, &[0.7], 2 * n + 1, RngStream::new(seed)).expect("simulation");
    let old: Vec<Vec<f64>> = path.states[..n].to_vec();
    let new: Vec<Vec<f64>> = path.states[n..2 * n].to_vec();
    let weights = DMatrix::from_fn(1, n, |_, j| (j as f64 / n as f64) - 0.5);
    InteractionCase {
        old,
        new,
        weights,
        obs: path.observations[0].clone(),
    }
}

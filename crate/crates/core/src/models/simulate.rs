use super::StateSpaceModel;
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Maximum number of proposals tried when sampling a truncated density.
pub const DEFAULT_REJECTION_CAP: usize = 100_000;

/// A simulated path: states `X_0..X_T` and observations `Y_1..Y_T`, with
/// `observations[k]` drawn given `states[k + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<S> {
    pub states: Vec<S>,
    pub observations: Vec<Vec<f64>>,
}

/// Simulate `steps` transitions of `model` at `theta`. `X_0` is drawn from the
/// model's initial distribution.
pub fn simulate<M: StateSpaceModel>(
    model: &M,
    theta: &[f64],
    steps: usize,
    stream: RngStream,
) -> Result<Trajectory<M::State>> {
    if steps == 0 {
        return Err(Error::Invalid("simulation needs at least one step".into()));
    }
    let mut rng = stream.rng();
    let mut states = Vec::with_capacity(steps + 1);
    let mut observations = Vec::with_capacity(steps);
    let mut x = model.sample_initial(&mut rng);
    for n in 0..steps {
        let next = model.sample_trans(theta, &x, &mut rng).map_err(|e| e.at_step(n))?;
        let y = model.sample_obs(theta, &next, &mut rng).map_err(|e| e.at_step(n))?;
        observations.push(y);
        states.push(std::mem::replace(&mut x, next));
    }
    states.push(x);
    Ok(Trajectory {
        states,
        observations,
    })
}

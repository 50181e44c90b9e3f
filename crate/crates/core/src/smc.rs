//! Particle approximation of the filter and its parameter derivative.
//!
//! A [`ParticleSystem`] carries positions `X_1..X_N` and a `d x N` weight
//! matrix `W` whose column `i` approximates the derivative contribution of
//! particle `i`. One step of the scheme:
//!
//! 1. draw new positions from the mixture `sum_j p(.|X_j) q(y|X_j)`,
//! 2. update `W' = W A + B`, where `A[i][j] = r(X'_j|y,X_i) / sum_k r(X'_j|y,X_k)`
//!    with `r(x'|y,x) = p(x'|x) q(y|x)` and `B_j = sum_i A[i][j] grad log r(X'_j|y,X_i)`,
//! 3. the score increment for the next observation is `H = W C + D` with
//!    `C_i = q_i / sum q - 1/N`, `D = sum_i grad q_i / sum q`.
//!
//! [`build_interaction`] and [`update_weights`] materialise `A` and `B`. The
//! production path [`ParticleSystem::advance`] never forms `A`: each column is
//! consumed as soon as it is built, and particles sharing a discrete state are
//! merged before the quadratic loop.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::models::StateSpaceModel;
use crate::numeric::{exp_nonpositive, lane_max, lane_sum, log_sum_exp};
use crate::rng::KeyedStreams;

/// Natural-log mass below which a column (or the observation weights) is
/// declared degenerate.
pub const DEGENERACY_LOG_MASS: f64 = -700.0;

#[derive(Debug, Clone)]
pub struct ParticleSystem<S> {
    positions: Vec<S>,
    weights: DMatrix<f64>,
    step: usize,
}

/// `A` (`N x N`, column-stochastic) and `B` (`d x N`).
#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// `C` (length `N`, sums to zero) and `D` (length `d`).
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTerms {
    pub c: DVector<f64>,
    pub d: DVector<f64>,
}

impl<S: Clone> ParticleSystem<S> {
    /// System at step 0 with zero derivative weights.
    pub fn new(positions: Vec<S>, param_dim: usize) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Invalid("particle system needs at least one particle".into()));
        }
        let n = positions.len();
        Ok(Self {
            positions,
            weights: DMatrix::zeros(param_dim, n),
            step: 0,
        })
    }

    pub fn with_weights(positions: Vec<S>, weights: DMatrix<f64>, step: usize) -> Result<Self> {
        if positions.is_empty() || weights.ncols() != positions.len() {
            return Err(Error::Dimension {
                context: "weight matrix columns",
                expected: positions.len(),
                actual: weights.ncols(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("weight matrix"));
        }
        Ok(Self {
            positions,
            weights,
            step,
        })
    }

    /// `n` particles drawn independently from the model's initial law.
    pub fn initial<M>(model: &M, n: usize, streams: &KeyedStreams) -> Result<Self>
    where
        M: StateSpaceModel<State = S>,
    {
        let positions = (0..n)
            .map(|i| {
                let mut rng = streams.particle(u64::MAX, i as u64);
                model.sample_initial(&mut rng)
            })
            .collect();
        Self::new(positions, model.param_dim())
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[S] {
        &self.positions
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Frobenius norm of `W (I - e e^T / N)`, i.e. of the weights with their
    /// row means removed.
    pub fn centered_norm(&self) -> f64 {
        let n = self.len() as f64;
        let mut total = 0.0;
        for row in self.weights.row_iter() {
            let mean = row.sum() / n;
            total += row.iter().map(|w| (w - mean).powi(2)).sum::<f64>();
        }
        total.sqrt()
    }

    /// Propagate the particles and their weights through one observation.
    pub fn advance<M>(
        &mut self,
        model: &M,
        theta: &[f64],
        y: &[f64],
        streams: &KeyedStreams,
    ) -> Result<()>
    where
        M: StateSpaceModel<State = S>,
    {
        let step = self.step;
        let new_positions = propagate(model, theta, &self.positions, y, step, streams)?;
        let weights = advance_weights(model, theta, &self.positions, &self.weights, &new_positions, y)
            .map_err(|e| e.at_step(step))?;
        self.positions = new_positions;
        self.weights = weights;
        self.step += 1;
        Ok(())
    }

    /// Score increment `W C + D` for observation `y` at the current positions.
    pub fn score<M>(&self, model: &M, theta: &[f64], y: &[f64]) -> Result<DVector<f64>>
    where
        M: StateSpaceModel<State = S>,
    {
        let terms =
            build_observation_terms(model, theta, &self.positions, y).map_err(|e| match e {
                Error::Degeneracy { what, log_mass, .. } => Error::Degeneracy {
                    step: self.step,
                    what,
                    log_mass,
                },
                other => other.at_step(self.step),
            })?;
        Ok(gradient_estimate(&self.weights, &terms))
    }
}

fn observation_log_weights<M: StateSpaceModel>(
    model: &M,
    theta: &[f64],
    positions: &[M::State],
    y: &[f64],
    mut grads: Option<&mut [f64]>,
) -> Result<Vec<f64>> {
    let d = model.param_dim();
    let mut out = Vec::with_capacity(positions.len());
    // Discrete states repeat; evaluate each distinct one once.
    let mut seen: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    for (i, x) in positions.iter().enumerate() {
        if let Some(first) = model.discrete_index(x).and_then(|k| seen.get(&k).copied()) {
            out.push(out[first]);
            if let Some(g) = grads.as_deref_mut() {
                g.copy_within(first * d..(first + 1) * d, i * d);
            }
            continue;
        }
        let lq = match grads.as_deref_mut() {
            Some(g) => model.log_obs(theta, x, y, Some(&mut g[i * d..(i + 1) * d]))?,
            None => model.log_obs(theta, x, y, None)?,
        };
        out.push(lq);
        if let Some(k) = model.discrete_index(x) {
            seen.insert(k, i);
        }
    }
    Ok(out)
}

/// Cumulative selection probabilities for weights `exp(log_weights)`.
fn ancestor_table(log_weights: &[f64], step: usize) -> Result<Vec<f64>> {
    let total = log_sum_exp(log_weights);
    if !(total >= DEGENERACY_LOG_MASS) {
        return Err(Error::Degeneracy {
            step,
            what: "observation",
            log_mass: total,
        });
    }
    let mut acc = 0.0;
    Ok(log_weights
        .iter()
        .map(|lw| {
            acc += (lw - total).exp();
            acc
        })
        .collect())
}

#[inline]
fn pick_ancestor<R: rand::Rng>(cumulative: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * cumulative[cumulative.len() - 1];
    cumulative.partition_point(|c| *c <= u).min(cumulative.len() - 1)
}

/// Ancestor indices drawn independently with probabilities proportional to
/// `exp(log_weights)`; draw `i` uses the stream of particle `i` at `step`,
/// exactly as [`propagate`] does.
pub fn draw_ancestors(log_weights: &[f64], step: usize, streams: &KeyedStreams) -> Result<Vec<usize>> {
    let cumulative = ancestor_table(log_weights, step)?;
    Ok((0..log_weights.len())
        .map(|i| pick_ancestor(&cumulative, &mut streams.particle(step as u64, i as u64)))
        .collect())
}

/// Draw `N` new positions from the mixture `sum_j p(.|x_j) q(y|x_j)`: pick an
/// ancestor with probability proportional to `q(y|x_j)`, then move it with the
/// transition kernel. Particle `i` uses its own stream, so the result does not
/// depend on evaluation order.
pub fn propagate<M: StateSpaceModel>(
    model: &M,
    theta: &[f64],
    positions: &[M::State],
    y: &[f64],
    step: usize,
    streams: &KeyedStreams,
) -> Result<Vec<M::State>> {
    if !model.contains_obs(y) {
        return Err(Error::ObservationOutsideBox { step });
    }
    let log_q = observation_log_weights(model, theta, positions, y, None).map_err(|e| e.at_step(step))?;
    let cumulative = ancestor_table(&log_q, step)?;
    (0..positions.len())
        .map(|i| {
            let mut rng = streams.particle(step as u64, i as u64);
            let j = pick_ancestor(&cumulative, &mut rng);
            model
                .sample_trans(theta, &positions[j], &mut rng)
                .map_err(|e| e.at_step(step))
        })
        .collect()
}

/// Dense `A` and `B` for the transition from `old` to `new` under `y`.
pub fn build_interaction<M: StateSpaceModel>(
    model: &M,
    theta: &[f64],
    old: &[M::State],
    new: &[M::State],
    y: &[f64],
) -> Result<Interaction> {
    let n = old.len();
    let d = model.param_dim();
    if new.len() != n {
        return Err(Error::Dimension {
            context: "new positions",
            expected: n,
            actual: new.len(),
        });
    }
    let sources = model.prepare_sources(theta, old, y)?;
    let mut log_r = vec![0.0; n];
    let mut grad = vec![0.0; d * n];
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(d, n);
    for (j, x_next) in new.iter().enumerate() {
        model.fill_log_r(&sources, x_next, &mut log_r, &mut grad);
        let mass = log_sum_exp(&log_r);
        if !(mass >= DEGENERACY_LOG_MASS) {
            return Err(Error::Degeneracy {
                step: 0,
                what: "interaction column",
                log_mass: mass,
            });
        }
        for i in 0..n {
            let w = (log_r[i] - mass).exp();
            a[(i, j)] = w;
            for p in 0..d {
                b[(p, j)] += w * grad[p * n + i];
            }
        }
    }
    Ok(Interaction { a, b })
}

/// `C` and `D` for observation `y` at `positions`.
pub fn build_observation_terms<M: StateSpaceModel>(
    model: &M,
    theta: &[f64],
    positions: &[M::State],
    y: &[f64],
) -> Result<ObservationTerms> {
    let n = positions.len();
    let d = model.param_dim();
    let mut grads = vec![0.0; n * d];
    let log_q = observation_log_weights(model, theta, positions, y, Some(&mut grads))?;
    let total = log_sum_exp(&log_q);
    if !(total >= DEGENERACY_LOG_MASS) {
        return Err(Error::Degeneracy {
            step: 0,
            what: "observation",
            log_mass: total,
        });
    }
    let inv_n = 1.0 / n as f64;
    let mut c = DVector::zeros(n);
    let mut dv = DVector::zeros(d);
    for i in 0..n {
        let w = (log_q[i] - total).exp();
        c[i] = w - inv_n;
        for p in 0..d {
            dv[p] += w * grads[i * d + p];
        }
    }
    Ok(ObservationTerms { c, d: dv })
}

/// `W A + B`.
pub fn update_weights(w: &DMatrix<f64>, m: &Interaction) -> DMatrix<f64> {
    w * &m.a + &m.b
}

/// `W C + D`.
pub fn gradient_estimate(w: &DMatrix<f64>, t: &ObservationTerms) -> DVector<f64> {
    w * &t.c + &t.d
}

/// Particles sharing a discrete state, merged: representative states, counts,
/// and summed weight columns (`d x K`, row-major).
struct Groups<S> {
    states: Vec<S>,
    log_counts: Vec<f64>,
    weight_sums: Vec<f64>,
}

fn group_discrete<M: StateSpaceModel>(
    model: &M,
    positions: &[M::State],
    weights: &DMatrix<f64>,
) -> Option<(Groups<M::State>, Vec<usize>)> {
    let d = weights.nrows();
    let mut slot_of = std::collections::HashMap::new();
    let mut states = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::with_capacity(positions.len());
    for (i, x) in positions.iter().enumerate() {
        let key = model.discrete_index(x)?;
        let k = *slot_of.entry(key).or_insert_with(|| {
            states.push(x.clone());
            counts.push(0.0);
            columns.push(vec![0.0; d]);
            states.len() - 1
        });
        counts[k] += 1.0;
        for p in 0..d {
            columns[k][p] += weights[(p, i)];
        }
        labels.push(k);
    }
    let kk = states.len();
    let mut weight_sums = vec![0.0; d * kk];
    for k in 0..kk {
        for p in 0..d {
            weight_sums[p * kk + k] = columns[k][p];
        }
    }
    Some((
        Groups {
            states,
            log_counts: counts.iter().map(|c| c.ln()).collect(),
            weight_sums,
        },
        labels,
    ))
}

/// `W A + B` for the transition `old -> new` under `y`, without forming `A`.
///
/// Each column is normalised against its own maximum and reduced with
/// fixed-order lane sums, so the result is bit-stable for given inputs. When
/// the model has a discrete state space, old particles at the same state are
/// merged (their contributions to every column are identical up to weight)
/// and columns of new particles at the same state are computed once.
pub fn advance_weights<M: StateSpaceModel>(
    model: &M,
    theta: &[f64],
    old: &[M::State],
    weights: &DMatrix<f64>,
    new: &[M::State],
    y: &[f64],
) -> Result<DMatrix<f64>> {
    let n = old.len();
    let d = model.param_dim();
    if weights.nrows() != d || weights.ncols() != n {
        return Err(Error::Dimension {
            context: "weight matrix",
            expected: d * n,
            actual: weights.nrows() * weights.ncols(),
        });
    }
    if let Some((groups, _)) = group_discrete(model, old, weights) {
        return advance_grouped(model, theta, &groups, new, y, d);
    }
    let sources = model.prepare_sources(theta, old, y)?;
    // Row-major copy so every parameter's weights are contiguous.
    let mut w_rows = vec![0.0; d * n];
    for p in 0..d {
        for i in 0..n {
            w_rows[p * n + i] = weights[(p, i)];
        }
    }
    let mut log_r = vec![0.0; n];
    let mut grad = vec![0.0; d * n];
    let mut e = vec![0.0; n];
    let mut lanes = vec![[0.0f64; LANES]; d + 1];
    let mut out = DMatrix::zeros(d, new.len());
    for (j, x_next) in new.iter().enumerate() {
        model.fill_log_r(&sources, x_next, &mut log_r, &mut grad);
        fused_column(&log_r, &w_rows, &grad, &mut e, &mut lanes)?;
        let col = 1.0 / lanes[0].iter().sum::<f64>();
        for p in 0..d {
            out[(p, j)] = lanes[p + 1].iter().sum::<f64>() * col;
        }
    }
    Ok(out)
}

const LANES: usize = 8;

/// Weights of one column: `e = exp(log_r - max)`, then `lanes[0]`
/// accumulates `e` and `lanes[p + 1]` accumulates `e * (w + grad)` for row `p`.
#[inline]
fn fused_column(
    log_r: &[f64],
    w_rows: &[f64],
    grad: &[f64],
    e: &mut [f64],
    lanes: &mut [[f64; LANES]],
) -> Result<()> {
    let n = log_r.len();
    let max = lane_max(log_r);
    for (ei, lr) in e.iter_mut().zip(log_r) {
        *ei = exp_nonpositive(lr - max);
    }
    for l in lanes.iter_mut() {
        *l = [0.0; LANES];
    }
    let (sum_lane, rest) = lanes.split_first_mut().expect("at least one lane");
    let full = n / LANES * LANES;
    for start in (0..full).step_by(LANES) {
        let ec: &[f64; LANES] = e[start..start + LANES].try_into().expect("full chunk");
        for l in 0..LANES {
            sum_lane[l] += ec[l];
        }
        for (p, acc) in rest.iter_mut().enumerate() {
            let off = p * n + start;
            let w: &[f64; LANES] = w_rows[off..off + LANES].try_into().expect("full chunk");
            let g: &[f64; LANES] = grad[off..off + LANES].try_into().expect("full chunk");
            for l in 0..LANES {
                acc[l] += ec[l] * (w[l] + g[l]);
            }
        }
    }
    for i in full..n {
        sum_lane[0] += e[i];
        for (p, acc) in rest.iter_mut().enumerate() {
            acc[0] += e[i] * (w_rows[p * n + i] + grad[p * n + i]);
        }
    }
    let mass = max + sum_lane.iter().sum::<f64>().ln();
    if !(mass >= DEGENERACY_LOG_MASS) {
        return Err(Error::Degeneracy {
            step: 0,
            what: "interaction column",
            log_mass: mass,
        });
    }
    Ok(())
}

/// Fill `e` with `exp(log_r - max)` and return the reciprocal column sum.
#[inline]
fn normalised_column(log_r: &[f64], e: &mut [f64]) -> Result<f64> {
    let max = lane_max(log_r);
    for (ei, lr) in e.iter_mut().zip(log_r) {
        *ei = exp_nonpositive(lr - max);
    }
    let sum = lane_sum(e);
    let mass = max + sum.ln();
    if !(mass >= DEGENERACY_LOG_MASS) {
        return Err(Error::Degeneracy {
            step: 0,
            what: "interaction column",
            log_mass: mass,
        });
    }
    Ok(1.0 / sum)
}

fn advance_grouped<M: StateSpaceModel>(
    model: &M,
    theta: &[f64],
    groups: &Groups<M::State>,
    new: &[M::State],
    y: &[f64],
    d: usize,
) -> Result<DMatrix<f64>> {
    let k = groups.states.len();
    let sources = model.prepare_sources(theta, &groups.states, y)?;
    let mut log_r = vec![0.0; k];
    let mut grad = vec![0.0; d * k];
    let mut e = vec![0.0; k];
    let mut done: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    let mut out = DMatrix::zeros(d, new.len());
    for (j, x_next) in new.iter().enumerate() {
        let key = model
            .discrete_index(x_next)
            .ok_or_else(|| Error::Invalid("new particle has no discrete index".into()))?;
        if let Some(&first) = done.get(&key) {
            for p in 0..d {
                out[(p, j)] = out[(p, first)];
            }
            continue;
        }
        model.fill_log_r(&sources, x_next, &mut log_r, &mut grad);
        for (lr, lc) in log_r.iter_mut().zip(&groups.log_counts) {
            *lr += lc;
        }
        let col = normalised_column(&log_r, &mut e)?;
        for p in 0..d {
            let mut num = 0.0;
            for c in 0..k {
                // weight_sums / count is the mean weight of the group; e already
                // carries the count.
                let mean_w = groups.weight_sums[p * k + c] * (-groups.log_counts[c]).exp();
                num += e[c] * (mean_w + grad[p * k + c]);
            }
            out[(p, j)] = num * col;
        }
        done.insert(key, j);
    }
    Ok(out)
}

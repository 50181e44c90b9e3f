//! Column-stochastic matrices: Dobrushin's ergodicity coefficient and norms
//! of centred products, the contraction tools behind the stability of the
//! derivative weights.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};

const COLUMN_SUM_TOL: f64 = 1e-10;

/// Square matrix with non-negative entries whose columns sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnStochasticMatrix(DMatrix<f64>);

impl ColumnStochasticMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::Dimension {
                context: "stochastic matrix (square)",
                expected: m.nrows(),
                actual: m.ncols(),
            });
        }
        if m.iter().any(|v| !(*v >= 0.0 && *v <= 1.0 + COLUMN_SUM_TOL)) {
            return Err(Error::Invalid("stochastic matrix entries must lie in [0, 1]".into()));
        }
        for (j, col) in m.column_iter().enumerate() {
            let s = col.sum();
            if (s - 1.0).abs() > COLUMN_SUM_TOL {
                return Err(Error::Invalid(format!("column {j} sums to {s}")));
            }
        }
        Ok(Self(m))
    }

    /// `e e^T / N`.
    pub fn uniform(n: usize) -> Self {
        Self(DMatrix::from_element(n, n, 1.0 / n as f64))
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    /// Random matrix with every entry at least `alpha / N`: a convex mix of the
    /// uniform matrix (weight `alpha`) and independent uniformly normalised columns.
    pub fn random_floored<R: Rng + ?Sized>(n: usize, alpha: f64, rng: &mut R) -> Self {
        let mut m = DMatrix::zeros(n, n);
        for j in 0..n {
            let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>().powi(3)).collect();
            let total: f64 = raw.iter().sum::<f64>().max(f64::MIN_POSITIVE);
            for i in 0..n {
                m[(i, j)] = alpha / n as f64 + (1.0 - alpha) * raw[i] / total;
            }
        }
        Self(m)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn product(&self, other: &Self) -> Self {
        Self(&self.0 * &other.0)
    }
}

/// `tau(A) = 1 - min_{j', j''} sum_i min(A[i][j'], A[i][j''])`.
pub fn dobrushin_tau(a: &ColumnStochasticMatrix) -> f64 {
    let m = a.matrix();
    let n = m.ncols();
    let mut min_overlap = f64::INFINITY;
    for j1 in 0..n {
        for j2 in (j1 + 1)..n {
            let overlap: f64 = m.column(j1).iter().zip(m.column(j2).iter()).map(|(x, y)| x.min(*y)).sum();
            min_overlap = min_overlap.min(overlap);
        }
    }
    if n == 1 {
        return 0.0;
    }
    (1.0 - min_overlap).clamp(0.0, 1.0)
}

/// Half the largest L1 distance between two columns; equal to [`dobrushin_tau`].
pub fn dobrushin_tau_l1(a: &ColumnStochasticMatrix) -> f64 {
    let m = a.matrix();
    let n = m.ncols();
    let mut worst = 0.0f64;
    for j1 in 0..n {
        for j2 in (j1 + 1)..n {
            let dist: f64 = m.column(j1).iter().zip(m.column(j2).iter()).map(|(x, y)| (x - y).abs()).sum();
            worst = worst.max(0.5 * dist);
        }
    }
    worst
}

/// `I - e e^T / N`.
pub fn centering(n: usize) -> DMatrix<f64> {
    DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64)
}

/// Frobenius norm of `A_1 A_2 ... A_n (I - e e^T / N)`.
pub fn lambda_product_norm(matrices: &[ColumnStochasticMatrix]) -> Result<f64> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::Invalid("empty matrix product".into()))?;
    let n = first.dim();
    let mut acc = centering(n);
    for a in matrices.iter().rev() {
        if a.dim() != n {
            return Err(Error::Dimension {
                context: "matrix product",
                expected: n,
                actual: a.dim(),
            });
        }
        acc = a.matrix() * acc;
    }
    Ok(acc.norm())
}

/// Apply `A_1 ... A_n` to a vector (rightmost factor first).
pub fn apply_product(matrices: &[ColumnStochasticMatrix], v: &DVector<f64>) -> DVector<f64> {
    matrices.iter().rev().fold(v.clone(), |acc, a| a.matrix() * acc)
}

/// Constants `(K, beta)` of the geometric product bound for entries at
/// least `alpha / N`: `K = 4 N / beta`, `beta = 1 - alpha`.
pub fn product_bound_constants(n: usize, alpha: f64) -> (f64, f64) {
    let beta = 1.0 - alpha;
    (4.0 * n as f64 / beta, beta)
}

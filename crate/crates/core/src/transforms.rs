//! Bijections from unconstrained reals to positive scalars and to Cholesky
//! factors of correlation matrices, with their log-Jacobians.
//!
//! The correlation map takes `K(K-1)/2` raw values ordered row-wise over the
//! strict lower triangle, `(1,0), (2,0), (2,1), (3,0), ...`. Each raw value is
//! squashed to a partial correlation `z = tanh(u)` and the factor is built row
//! by row:
//!
//! ```text
//! W[i][j] = z[i][j] * sqrt(prod_{k<j} (1 - z[i][k]^2))   (j < i)
//! W[i][i] = sqrt(prod_{k<i} (1 - z[i][k]^2))
//! ```
//!
//! The log-Jacobian reported for this map is with respect to the free
//! off-diagonal entries of `psi = W W^T`, which is what the LKJ density is
//! defined over. It reduces to `sum_{i>k} (K - k)/2 * ln(1 - z[i][k]^2)`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln sigmoid(x) = -softplus(-x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn inv_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// `ln(1 - tanh(u)^2) = -2 ln cosh(u)`, stable for large `|u|`.
pub fn log_one_minus_tanh_sq(u: f64) -> f64 {
    let a = u.abs();
    2.0 * (std::f64::consts::LN_2 - a - (-2.0 * a).exp().ln_1p())
}

pub fn n_corr_params(k: usize) -> usize {
    k * k.saturating_sub(1) / 2
}

/// Position of `(i, j)`, `j < i`, in the row-wise raw vector.
pub fn corr_index(i: usize, j: usize) -> usize {
    i * (i - 1) / 2 + j
}

fn corr_dim(n_raw: usize) -> Result<usize> {
    let mut k = 1;
    while n_corr_params(k) < n_raw {
        k += 1;
    }
    if n_corr_params(k) != n_raw {
        return Err(Error::invalid(format!(
            "{n_raw} raw values do not form a strict lower triangle"
        )));
    }
    Ok(k)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformKind {
    Positive,
    CorrelationCholesky,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Constrained {
    Positive(Vec<f64>),
    CorrelationCholesky(DMatrix<f64>),
}

/// Maps raw values to the constrained space and returns the log absolute
/// determinant of the Jacobian of the map.
pub fn transform_unconstrained(kind: TransformKind, raw: &[f64]) -> Result<(Constrained, f64)> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("raw values must be finite"));
    }
    match kind {
        TransformKind::Positive => {
            let vals = raw.iter().map(|u| softplus(*u)).collect();
            let lj = raw.iter().map(|u| log_sigmoid(*u)).sum();
            Ok((Constrained::Positive(vals), lj))
        }
        TransformKind::CorrelationCholesky => {
            let k = corr_dim(raw.len())?;
            let chol = CorrCholesky::new(k, raw);
            let lj = chol.log_jacobian();
            Ok((Constrained::CorrelationCholesky(chol.factor), lj))
        }
    }
}

/// Inverse of [`transform_unconstrained`].
pub fn unconstrain(value: &Constrained) -> Result<Vec<f64>> {
    match value {
        Constrained::Positive(v) => {
            if v.iter().any(|x| !(*x > 0.0)) {
                return Err(Error::invalid("positive transform needs strictly positive values"));
            }
            Ok(v.iter().map(|x| inv_softplus(*x)).collect())
        }
        Constrained::CorrelationCholesky(w) => {
            let k = w.nrows();
            let mut raw = vec![0.0; n_corr_params(k)];
            for i in 1..k {
                let mut remaining: f64 = 1.0;
                for j in 0..i {
                    let z = w[(i, j)] / remaining.sqrt();
                    if !(z.abs() < 1.0) {
                        return Err(Error::invalid("not the Cholesky factor of a correlation matrix"));
                    }
                    raw[corr_index(i, j)] = z.atanh();
                    remaining -= w[(i, j)] * w[(i, j)];
                }
            }
            Ok(raw)
        }
    }
}

/// Cholesky factor of a correlation matrix built from raw values, keeping
/// what the backward pass needs.
#[derive(Clone, Debug)]
pub struct CorrCholesky {
    pub k: usize,
    pub factor: DMatrix<f64>,
    z: Vec<f64>,
    log_1mz2: Vec<f64>,
}

impl CorrCholesky {
    pub fn new(k: usize, raw: &[f64]) -> Self {
        debug_assert_eq!(raw.len(), n_corr_params(k));
        let z: Vec<f64> = raw.iter().map(|u| u.tanh()).collect();
        let log_1mz2: Vec<f64> = raw.iter().map(|u| log_one_minus_tanh_sq(*u)).collect();
        let mut factor = DMatrix::zeros(k, k);
        if k > 0 {
            factor[(0, 0)] = 1.0;
        }
        for i in 1..k {
            let mut log_rem: f64 = 0.0;
            for j in 0..i {
                let idx = corr_index(i, j);
                factor[(i, j)] = z[idx] * (0.5 * log_rem).exp();
                log_rem += log_1mz2[idx];
            }
            factor[(i, i)] = (0.5 * log_rem).exp();
        }
        Self { k, factor, z, log_1mz2 }
    }

    /// `ln |d offdiag(psi) / d raw|`.
    pub fn log_jacobian(&self) -> f64 {
        let mut lj = 0.0;
        for i in 1..self.k {
            for j in 0..i {
                lj += 0.5 * (self.k - j) as f64 * self.log_1mz2[corr_index(i, j)];
            }
        }
        lj
    }

    /// Gradient of [`Self::log_jacobian`] with respect to the raw values.
    pub fn log_jacobian_grad(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.z.len()];
        for i in 1..self.k {
            for j in 0..i {
                let idx = corr_index(i, j);
                g[idx] = -((self.k - j) as f64) * self.z[idx];
            }
        }
        g
    }

    /// `ln det psi = 2 sum ln W_ii`.
    pub fn log_det(&self) -> f64 {
        self.log_1mz2.iter().sum()
    }

    pub fn log_det_grad(&self) -> Vec<f64> {
        self.z.iter().map(|z| -2.0 * z).collect()
    }

    pub fn correlation(&self) -> DMatrix<f64> {
        let mut psi = &self.factor * self.factor.transpose();
        for i in 0..self.k {
            psi[(i, i)] = 1.0;
        }
        psi
    }

    /// Pulls a gradient with respect to the factor entries (lower triangle
    /// including the diagonal) back to the raw values.
    pub fn backward(&self, grad_factor: &DMatrix<f64>) -> Vec<f64> {
        let mut g = vec![0.0; self.z.len()];
        for i in 1..self.k {
            // tail[j] = sum_{m=j+1..=i} G[i][m] * W[i][m]
            let mut tail = 0.0;
            let diag = grad_factor[(i, i)] * self.factor[(i, i)];
            tail += diag;
            for j in (0..i).rev() {
                let idx = corr_index(i, j);
                let z = self.z[idx];
                // sqrt(prod_{k<j}(1 - z_k^2)): the factor multiplying z[i][j].
                let radius = if z != 0.0 {
                    self.factor[(i, j)] / z
                } else {
                    let mut s = 0.0;
                    for m in 0..j {
                        s += self.log_1mz2[corr_index(i, m)];
                    }
                    (0.5 * s).exp()
                };
                let one_m_z2 = self.log_1mz2[idx].exp();
                g[idx] = grad_factor[(i, j)] * radius * one_m_z2 - z * tail;
                tail += grad_factor[(i, j)] * self.factor[(i, j)];
            }
        }
        g
    }
}

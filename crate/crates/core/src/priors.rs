//! Prior log-densities and samplers: diagonal Gaussian, half-Cauchy, LKJ.

use std::f64::consts::{LN_2, PI};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;

use crate::error::{Error, Result};
use crate::model::validate_correlation;

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Hyperparameters of the hierarchical prior. Prior covariances are diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub lambda0: Vec<f64>,
    pub xi0_diag: Vec<f64>,
    pub mu0: Vec<f64>,
    pub sigma0_diag: Vec<f64>,
    pub halfcauchy_scale: f64,
    pub lkj_eta: f64,
    /// Variance of the per-occasion shift around the network output.
    pub sigma_c: f64,
}

impl PriorConfig {
    /// Vague defaults: zero means, variance 100, half-Cauchy(10), LKJ(2).
    pub fn default_for(n_fixed: usize, n_random: usize) -> Self {
        Self {
            lambda0: vec![0.0; n_fixed],
            xi0_diag: vec![100.0; n_fixed],
            mu0: vec![0.0; n_random],
            sigma0_diag: vec![100.0; n_random],
            halfcauchy_scale: 10.0,
            lkj_eta: 2.0,
            sigma_c: 0.1,
        }
    }

    pub fn validate(&self, n_fixed: usize, n_random: usize) -> Result<()> {
        let checks = [
            ("lambda0", self.lambda0.len(), n_fixed),
            ("xi0_diag", self.xi0_diag.len(), n_fixed),
            ("mu0", self.mu0.len(), n_random),
            ("sigma0_diag", self.sigma0_diag.len(), n_random),
        ];
        for (name, got, expected) in checks {
            if got != expected {
                return Err(Error::dims(format!("prior {name}"), expected, got));
            }
        }
        let positive = self
            .xi0_diag
            .iter()
            .chain(&self.sigma0_diag)
            .chain([&self.halfcauchy_scale, &self.lkj_eta, &self.sigma_c]);
        if positive.into_iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("prior scales and lkj_eta must be strictly positive"));
        }
        Ok(())
    }
}

/// Gaussian log-density with diagonal covariance.
pub fn log_mvn_diag(x: &[f64], mean: &[f64], var_diag: &[f64]) -> Result<f64> {
    if mean.len() != x.len() {
        return Err(Error::dims("mean", x.len(), mean.len()));
    }
    if var_diag.len() != x.len() {
        return Err(Error::dims("variance", x.len(), var_diag.len()));
    }
    let mut lp = 0.0;
    for ((xi, mi), vi) in x.iter().zip(mean).zip(var_diag) {
        if !(*vi > 0.0) {
            return Err(Error::invalid(format!("non-positive variance {vi}")));
        }
        let d = xi - mi;
        lp -= 0.5 * (LN_2PI + vi.ln() + d * d / vi);
    }
    Ok(lp)
}

/// Half-Cauchy log-density; `-inf` outside the support.
pub fn log_half_cauchy(x: f64, scale: f64) -> f64 {
    if x < 0.0 {
        return f64::NEG_INFINITY;
    }
    let r = x / scale;
    LN_2 - PI.ln() - scale.ln() - (r * r).ln_1p()
}

/// Log of the LKJ normalizing integral `c_K(eta)` over `K x K` correlation
/// matrices, so that the density is `det(psi)^(eta - 1) / c_K(eta)`.
pub fn lkj_log_normalizer(k: usize, eta: f64) -> f64 {
    let mut acc = 0.0;
    for i in 1..k {
        let m = (k - i) as f64;
        let b = eta + (m - 1.0) / 2.0;
        acc += (2.0 * eta - 2.0 + m) * m * LN_2 + m * ln_beta(b, b);
    }
    acc
}

/// LKJ log-density of a correlation matrix.
pub fn log_lkj(psi: &DMatrix<f64>, eta: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(Error::invalid("lkj eta must be positive"));
    }
    validate_correlation(psi)?;
    let chol = psi.clone().cholesky().expect("validated above");
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok((eta - 1.0) * log_det - lkj_log_normalizer(psi.nrows(), eta))
}

fn check_cholesky(chol: &DMatrix<f64>) -> Result<()> {
    let k = chol.nrows();
    if chol.ncols() != k {
        return Err(Error::dims("cholesky factor columns", k, chol.ncols()));
    }
    for i in 0..k {
        if !(chol[(i, i)] > 0.0) {
            return Err(Error::invalid(format!("cholesky diagonal {i} is not positive")));
        }
        for j in i + 1..k {
            if chol[(i, j)] != 0.0 {
                return Err(Error::invalid("cholesky factor is not lower triangular"));
            }
        }
    }
    Ok(())
}

/// `mean + chol * eps` for caller-supplied standard normal draws.
pub fn mvn_from_standard(mean: &[f64], chol: &DMatrix<f64>, eps: &[f64]) -> Result<Vec<f64>> {
    if chol.nrows() != mean.len() {
        return Err(Error::dims("cholesky factor", mean.len(), chol.nrows()));
    }
    if eps.len() != mean.len() {
        return Err(Error::dims("standard normal draws", mean.len(), eps.len()));
    }
    check_cholesky(chol)?;
    Ok((0..mean.len())
        .map(|i| mean[i] + (0..=i).map(|j| chol[(i, j)] * eps[j]).sum::<f64>())
        .collect())
}

pub fn sample_mvn<R: Rng + ?Sized>(
    mean: &[f64],
    chol: &DMatrix<f64>,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let eps: Vec<f64> = (0..mean.len()).map(|_| rng.sample(StandardNormal)).collect();
    mvn_from_standard(mean, chol, &eps)
}

/// `|s tan(pi u / 2)|` with `u ~ U(0, 1)`.
pub fn sample_half_cauchy<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> Result<f64> {
    if !(scale > 0.0) {
        return Err(Error::invalid("half-Cauchy scale must be positive"));
    }
    let u: f64 = rng.random();
    Ok((scale * (PI * u / 2.0).tan()).abs())
}

/// Draws the Cholesky factor of an LKJ(eta) correlation matrix with the
/// onion construction.
pub fn sample_lkj_cholesky<R: Rng + ?Sized>(
    k: usize,
    eta: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if k == 0 {
        return Err(Error::invalid("correlation dimension must be at least 1"));
    }
    if !(eta > 0.0) {
        return Err(Error::invalid("lkj eta must be positive"));
    }
    let mut chol = DMatrix::zeros(k, k);
    chol[(0, 0)] = 1.0;
    if k == 1 {
        return Ok(chol);
    }
    let mut b = eta + (k as f64 - 2.0) / 2.0;
    let beta = Beta::new(b, b).map_err(|e| Error::invalid(e.to_string()))?;
    let r12 = 2.0 * beta.sample(rng) - 1.0;
    chol[(1, 0)] = r12;
    chol[(1, 1)] = (1.0 - r12 * r12).sqrt();
    for row in 2..k {
        b -= 0.5;
        let y = Beta::new(row as f64 / 2.0, b)
            .map_err(|e| Error::invalid(e.to_string()))?
            .sample(rng);
        let mut u: Vec<f64> = (0..row).map(|_| rng.sample(StandardNormal)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        u.iter_mut().for_each(|v| *v *= y.sqrt() / norm);
        for (j, v) in u.into_iter().enumerate() {
            chol[(row, j)] = v;
        }
        chol[(row, row)] = (1.0 - y).sqrt();
    }
    Ok(chol)
}

pub fn sample_lkj<R: Rng + ?Sized>(k: usize, eta: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    let chol = sample_lkj_cholesky(k, eta, rng)?;
    let mut psi = &chol * chol.transpose();
    // Rows of the factor have unit norm; pin the diagonal against rounding.
    for i in 0..k {
        psi[(i, i)] = 1.0;
    }
    Ok(psi)
}

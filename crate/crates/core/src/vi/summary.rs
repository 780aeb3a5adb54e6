//! Posterior summaries of the population-level parameters.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::rng::task_rng;
use crate::transforms::{softplus, CorrCholesky};

use super::VariationalState;

/// Draws used for the scale and correlation rows.
const SUMMARY_DRAWS: usize = 4000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// Central 95% credible interval.
    pub lower: f64,
    pub upper: f64,
    pub stars: String,
}

/// Significance code from the posterior mass on the opposite side of zero,
/// under a Gaussian approximation.
pub fn stars_for(mean: f64, sd: f64) -> &'static str {
    let tail = if sd > 0.0 {
        Normal::standard().cdf(-mean.abs() / sd)
    } else if mean != 0.0 {
        0.0
    } else {
        0.5
    };
    if tail < 0.0005 {
        "***"
    } else if tail < 0.005 {
        "**"
    } else if tail < 0.025 {
        "*"
    } else {
        ""
    }
}

fn gaussian_row(name: String, mean: f64, sd: f64) -> SummaryRow {
    let z = 1.959_963_984_540_054;
    SummaryRow {
        stars: stars_for(mean, sd).to_string(),
        lower: mean - z * sd,
        upper: mean + z * sd,
        name,
        mean,
        sd,
    }
}

fn empirical_row(name: String, mut draws: Vec<f64>) -> SummaryRow {
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    draws.sort_by(f64::total_cmp);
    let q = |p: f64| draws[((p * (n - 1.0)).round() as usize).min(draws.len() - 1)];
    SummaryRow {
        stars: stars_for(mean, sd).to_string(),
        lower: q(0.025),
        upper: q(0.975),
        name,
        mean,
        sd,
    }
}

/// One row per fixed coefficient, random-coefficient mean, random-coefficient
/// standard deviation (`sd(name)`) and correlation (`corr(a,b)`).
pub fn posterior_summary(state: &VariationalState) -> Vec<SummaryRow> {
    let lay = &state.layout;
    let (l, k) = (lay.n_fixed, lay.n_random);
    let names = &state.column_names;
    let phi = &state.phi;
    let mut rows = Vec::with_capacity(l + 2 * k + lay.n_corr());
    for (i, (m, r)) in lay.alpha_mean().zip(lay.alpha_raw()).enumerate() {
        rows.push(gaussian_row(names[i].clone(), phi[m], softplus(phi[r])));
    }
    for (i, (m, r)) in lay.zeta_mean().zip(lay.zeta_raw()).enumerate() {
        rows.push(gaussian_row(names[l + i].clone(), phi[m], softplus(phi[r])));
    }
    if k == 0 {
        return rows;
    }

    let mut rng = task_rng(0, "posterior-summary");
    let tau_m = &phi[lay.tau_mean()];
    let tau_s = state.scale(lay.tau_raw());
    let psi_m = &phi[lay.psi_mean()];
    let psi_s = state.scale(lay.psi_raw());
    let mut tau_draws = vec![Vec::with_capacity(SUMMARY_DRAWS); k];
    let mut corr_draws = vec![Vec::with_capacity(SUMMARY_DRAWS); lay.n_corr()];
    for _ in 0..SUMMARY_DRAWS {
        for i in 0..k {
            let e: f64 = rng.sample(StandardNormal);
            tau_draws[i].push(softplus(tau_m[i] + tau_s[i] * e));
        }
        if k >= 2 {
            let u: Vec<f64> = psi_m
                .iter()
                .zip(&psi_s)
                .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let corr = CorrCholesky::new(k, &u).correlation();
            let mut c = 0;
            for i in 1..k {
                for j in 0..i {
                    corr_draws[c].push(corr[(i, j)]);
                    c += 1;
                }
            }
        }
    }
    for (i, d) in tau_draws.into_iter().enumerate() {
        rows.push(empirical_row(format!("sd({})", names[l + i]), d));
    }
    let mut c = 0;
    for i in 1..k {
        for j in 0..i {
            let name = format!("corr({},{})", names[l + i], names[l + j]);
            rows.push(empirical_row(name, std::mem::take(&mut corr_draws[c])));
            c += 1;
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn star_codes() {
        assert_eq!(stars_for(0.0, 1.0), "");
        assert_eq!(stars_for(10.0, 0.1), "***");
        assert_eq!(stars_for(-10.0, 0.1), "***");
        // Tail masses 0.0227, 0.0043, 0.00023.
        assert_eq!(stars_for(2.0, 1.0), "*");
        assert_eq!(stars_for(2.63, 1.0), "**");
        assert_eq!(stars_for(3.5, 1.0), "***");
        assert_eq!(stars_for(1.9, 1.0), "");
    }
}

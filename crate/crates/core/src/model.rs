//! Choice data, taste parameters and the multinomial logit kernel.
//!
//! Parameter vectors are always laid out fixed-first: `[alpha, beta]`, and
//! every attribute matrix stores its columns in the same order.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Concatenation of shared (`fixed`) and individual-specific (`random`)
/// taste coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TasteVector {
    pub fixed: Vec<f64>,
    pub random: Vec<f64>,
}

impl TasteVector {
    pub fn new(fixed: Vec<f64>, random: Vec<f64>) -> Result<Self> {
        if fixed.is_empty() && random.is_empty() {
            return Err(Error::invalid("taste vector needs at least one coefficient"));
        }
        Ok(Self { fixed, random })
    }

    /// Splits a concatenated vector after the first `n_fixed` entries.
    pub fn from_concat(values: &[f64], n_fixed: usize) -> Result<Self> {
        if n_fixed > values.len() {
            return Err(Error::dims("fixed block", values.len(), n_fixed));
        }
        Self::new(values[..n_fixed].to_vec(), values[n_fixed..].to_vec())
    }

    pub fn len(&self) -> usize {
        self.fixed.len() + self.random.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.fixed);
        out.extend_from_slice(&self.random);
        out
    }
}

/// Declared kind of a context dimension; scenario enumeration only walks
/// binary dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextKind {
    Binary,
    Continuous,
}

/// Per-occasion context values (binary indicators as 0/1).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContextVector(pub Vec<f64>);

impl ContextVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Additive shift applied to a full taste vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextShift {
    pub mu: Vec<f64>,
}

/// One decision: `J` alternatives described by a `J x (L+K)` attribute matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceOccasion {
    pub occasion_id: u64,
    pub alt_ids: Vec<String>,
    pub attributes: DMatrix<f64>,
    pub availability: Vec<bool>,
    /// `ln PS` per alternative, when the path-size term is kept outside the
    /// taste vector.
    pub log_path_size: Option<Vec<f64>>,
    pub context: ContextVector,
    pub chosen: usize,
}

impl ChoiceOccasion {
    pub fn n_alternatives(&self) -> usize {
        self.attributes.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.attributes.nrows();
        let ctx = format!("occasion {}", self.occasion_id);
        if self.availability.len() != j {
            return Err(Error::dims(format!("{ctx} availability"), j, self.availability.len()));
        }
        if self.alt_ids.len() != j {
            return Err(Error::dims(format!("{ctx} alternative ids"), j, self.alt_ids.len()));
        }
        if let Some(ps) = &self.log_path_size {
            if ps.len() != j {
                return Err(Error::dims(format!("{ctx} path size"), j, ps.len()));
            }
            if ps.iter().any(|v| !v.is_finite()) {
                return Err(Error::data(format!("{ctx}: non-finite path size")));
            }
        }
        if self.availability.iter().filter(|a| **a).count() < 2 {
            return Err(Error::data(format!("{ctx}: fewer than two available alternatives")));
        }
        if self.chosen >= j || !self.availability[self.chosen] {
            return Err(Error::data(format!("{ctx}: chosen alternative is not available")));
        }
        if self.attributes.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!("{ctx}: non-finite attribute")));
        }
        if self.context.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!("{ctx}: non-finite context value")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Individual {
    pub id: String,
    pub occasions: Vec<ChoiceOccasion>,
}

/// Panel of decision makers with their choice occasions.
#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceDataset {
    pub individuals: Vec<Individual>,
    /// Labels of the `L + K` parameter columns, fixed block first.
    pub column_names: Vec<String>,
    /// Number of fixed-coefficient columns (`L`).
    pub n_fixed: usize,
    pub context_names: Vec<String>,
    pub context_kinds: Vec<ContextKind>,
    pub variable_choice_set: bool,
}

impl ChoiceDataset {
    pub fn n_params(&self) -> usize {
        self.column_names.len()
    }

    pub fn n_random(&self) -> usize {
        self.column_names.len() - self.n_fixed
    }

    pub fn n_context(&self) -> usize {
        self.context_names.len()
    }

    pub fn n_individuals(&self) -> usize {
        self.individuals.len()
    }

    pub fn n_occasions(&self) -> usize {
        self.individuals.iter().map(|i| i.occasions.len()).sum()
    }

    pub fn occasions(&self) -> impl Iterator<Item = &ChoiceOccasion> {
        self.individuals.iter().flat_map(|i| i.occasions.iter())
    }

    pub fn validate(&self) -> Result<()> {
        if self.individuals.is_empty() {
            return Err(Error::data("dataset has no individuals"));
        }
        if self.column_names.is_empty() {
            return Err(Error::data("dataset has no parameter columns"));
        }
        if self.n_fixed > self.column_names.len() {
            return Err(Error::dims("fixed columns", self.column_names.len(), self.n_fixed));
        }
        if self.context_kinds.len() != self.context_names.len() {
            return Err(Error::dims(
                "context kinds",
                self.context_names.len(),
                self.context_kinds.len(),
            ));
        }
        let p = self.n_params();
        let c = self.n_context();
        let mut n_alts: Option<usize> = None;
        for ind in &self.individuals {
            if ind.occasions.is_empty() {
                return Err(Error::data(format!("individual {} has no occasions", ind.id)));
            }
            for occ in &ind.occasions {
                occ.validate()?;
                if occ.attributes.ncols() != p {
                    return Err(Error::dims(
                        format!("occasion {} attribute columns", occ.occasion_id),
                        p,
                        occ.attributes.ncols(),
                    ));
                }
                if occ.context.len() != c {
                    return Err(Error::dims(
                        format!("occasion {} context", occ.occasion_id),
                        c,
                        occ.context.len(),
                    ));
                }
                for (k, kind) in self.context_kinds.iter().enumerate() {
                    let v = occ.context.0[k];
                    if *kind == ContextKind::Binary && v != 0.0 && v != 1.0 {
                        return Err(Error::data(format!(
                            "occasion {}: binary context '{}' has value {v}",
                            occ.occasion_id, self.context_names[k]
                        )));
                    }
                }
                let j = occ.n_alternatives();
                match n_alts {
                    None => n_alts = Some(j),
                    Some(prev) if prev != j && !self.variable_choice_set => {
                        return Err(Error::data(format!(
                            "occasion {} has {j} alternatives, expected {prev} (choice set not declared variable)",
                            occ.occasion_id
                        )));
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

/// Population-level distribution of the random coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct PopulationParams {
    pub alpha: Vec<f64>,
    pub zeta: Vec<f64>,
    pub tau: Vec<f64>,
    pub psi: DMatrix<f64>,
}

impl PopulationParams {
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        if self.zeta.len() != self.tau.len() {
            return Err(Error::dims("tau", self.zeta.len(), self.tau.len()));
        }
        assemble_covariance(&self.tau, &self.psi)
    }
}

/// Checks that `psi` is a symmetric, unit-diagonal, positive definite matrix.
pub fn validate_correlation(psi: &DMatrix<f64>) -> Result<()> {
    let k = psi.nrows();
    if psi.ncols() != k {
        return Err(Error::dims("correlation matrix columns", k, psi.ncols()));
    }
    for i in 0..k {
        if (psi[(i, i)] - 1.0).abs() > 1e-10 {
            return Err(Error::invalid(format!(
                "psi[{i},{i}] = {} is not a unit diagonal",
                psi[(i, i)]
            )));
        }
        for j in 0..i {
            if !psi[(i, j)].is_finite() || (psi[(i, j)] - psi[(j, i)]).abs() > 1e-10 {
                return Err(Error::invalid(format!("psi is not symmetric at ({i},{j})")));
            }
        }
    }
    if psi.clone().cholesky().is_none() {
        return Err(Error::invalid("psi is not positive definite (Cholesky failed)"));
    }
    Ok(())
}

/// `Omega = diag(tau) * psi * diag(tau)`.
pub fn assemble_covariance(tau: &[f64], psi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = tau.len();
    if psi.nrows() != k {
        return Err(Error::dims("psi rows", k, psi.nrows()));
    }
    if let Some((i, t)) = tau.iter().enumerate().find(|(_, t)| !(**t > 0.0 && t.is_finite())) {
        return Err(Error::invalid(format!("tau[{i}] = {t} must be strictly positive")));
    }
    validate_correlation(psi)?;
    Ok(DMatrix::from_fn(k, k, |i, j| tau[i] * psi[(i, j)] * tau[j]))
}

/// `eta + shift`, componentwise.
pub fn apply_context_shift(eta: &TasteVector, shift: &ContextShift) -> Result<TasteVector> {
    if shift.mu.len() != eta.len() {
        return Err(Error::dims("context shift", eta.len(), shift.mu.len()));
    }
    if shift.mu.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("context shift has non-finite entries"));
    }
    let l = eta.fixed.len();
    let fixed = eta.fixed.iter().zip(&shift.mu[..l]).map(|(a, b)| a + b).collect();
    let random = eta.random.iter().zip(&shift.mu[l..]).map(|(a, b)| a + b).collect();
    Ok(TasteVector { fixed, random })
}

/// Systematic utilities `V_j = eta . x_j (+ beta_ps ln PS_j)` on a
/// concatenated parameter slice. Unavailable alternatives get `-inf`.
pub fn utilities(occ: &ChoiceOccasion, eta: &[f64], beta_ps: Option<f64>) -> Result<Vec<f64>> {
    let p = occ.attributes.ncols();
    if eta.len() != p {
        return Err(Error::dims("taste vector", p, eta.len()));
    }
    let ps = match (beta_ps, &occ.log_path_size) {
        (Some(b), Some(ln_ps)) => Some((b, ln_ps)),
        (None, None) => None,
        (Some(_), None) => {
            return Err(Error::invalid("beta_ps supplied but occasion has no path-size values"))
        }
        (None, Some(_)) => {
            return Err(Error::invalid("occasion has path-size values but no beta_ps was supplied"))
        }
    };
    let x = &occ.attributes;
    let mut v = Vec::with_capacity(x.nrows());
    for j in 0..x.nrows() {
        if !occ.availability[j] {
            v.push(f64::NEG_INFINITY);
            continue;
        }
        let mut u = 0.0;
        for (k, e) in eta.iter().enumerate() {
            u += x[(j, k)] * e;
        }
        if let Some((b, ln_ps)) = ps {
            u += b * ln_ps[j];
        }
        if !u.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite utility for alternative {j} of occasion {}",
                occ.occasion_id
            )));
        }
        v.push(u);
    }
    Ok(v)
}

pub fn systematic_utility(
    occ: &ChoiceOccasion,
    eta: &TasteVector,
    beta_ps: Option<f64>,
) -> Result<Vec<f64>> {
    utilities(occ, &eta.to_vec(), beta_ps)
}

fn max_available(utilities: &[f64], availability: &[bool]) -> Result<f64> {
    if utilities.len() != availability.len() {
        return Err(Error::dims("availability", utilities.len(), availability.len()));
    }
    let m = utilities
        .iter()
        .zip(availability)
        .filter(|(_, a)| **a)
        .map(|(u, _)| *u)
        .fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return Err(Error::invalid("no available alternatives"));
    }
    if !m.is_finite() {
        return Err(Error::numerical("non-finite utility"));
    }
    Ok(m)
}

/// Softmax over available alternatives; unavailable ones get probability 0.
pub fn mnl_probabilities(utilities: &[f64], availability: &[bool]) -> Result<Vec<f64>> {
    let m = max_available(utilities, availability)?;
    let mut p: Vec<f64> = utilities
        .iter()
        .zip(availability)
        .map(|(u, a)| if *a { (u - m).exp() } else { 0.0 })
        .collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    Ok(p)
}

/// Max over available utilities and the sum of `exp(u_j - max)` over the
/// other available alternatives (the maximiser itself contributes exactly 1).
fn split_max(utilities: &[f64], availability: &[bool]) -> Result<(f64, f64)> {
    let m = max_available(utilities, availability)?;
    let top = utilities
        .iter()
        .zip(availability)
        .position(|(u, a)| *a && *u == m)
        .unwrap_or(0);
    let rest = utilities
        .iter()
        .zip(availability)
        .enumerate()
        .filter(|(j, (_, a))| **a && *j != top)
        .map(|(_, (u, _))| (u - m).exp())
        .sum();
    Ok((m, rest))
}

/// `log sum_j exp(u_j)` over available alternatives.
pub fn log_sum_exp(utilities: &[f64], availability: &[bool]) -> Result<f64> {
    let (m, rest) = split_max(utilities, availability)?;
    Ok(m + rest.ln_1p())
}

/// `log p_chosen`, accurate even when the probability rounds to 1.
pub fn log_choice_probability(utilities: &[f64], availability: &[bool], chosen: usize) -> Result<f64> {
    let (m, rest) = split_max(utilities, availability)?;
    Ok((utilities[chosen] - m) - rest.ln_1p())
}

/// Log MNL probability of the observed choice at taste vector `eta_nt`.
pub fn choice_log_likelihood(
    occ: &ChoiceOccasion,
    eta_nt: &TasteVector,
    beta_ps: Option<f64>,
) -> Result<f64> {
    let v = systematic_utility(occ, eta_nt, beta_ps)?;
    log_choice_probability(&v, &occ.availability, occ.chosen)
}

/// Log-likelihood of the observed choice plus its gradient with respect to
/// the concatenated taste vector, `X^T (e_y - p)`.
pub fn log_likelihood_and_gradient(
    occ: &ChoiceOccasion,
    eta: &[f64],
    beta_ps: Option<f64>,
) -> Result<(f64, Vec<f64>)> {
    let v = utilities(occ, eta, beta_ps)?;
    let p = mnl_probabilities(&v, &occ.availability)?;
    // ln(p_y) underflows for very unlikely choices; use log-sum-exp instead.
    let ll = log_choice_probability(&v, &occ.availability, occ.chosen)?;
    let x = &occ.attributes;
    let mut grad = vec![0.0; eta.len()];
    for j in 0..x.nrows() {
        let w = if j == occ.chosen { 1.0 - p[j] } else { -p[j] };
        if w == 0.0 {
            continue;
        }
        for (k, g) in grad.iter_mut().enumerate() {
            *g += w * x[(j, k)];
        }
    }
    Ok((ll, grad))
}

/// One route: a list of `(link id, link length)`.
pub type Route = Vec<(u64, f64)>;

/// Path-size overlap factor of every route in a choice set:
/// `PS_i = sum_{a in i} (l_a / L_i) / N_a`, where `N_a` counts the routes
/// using link `a`.
pub fn path_size(choice_set: &[Route]) -> Result<Vec<f64>> {
    let mut usage: HashMap<u64, usize> = HashMap::new();
    for (i, route) in choice_set.iter().enumerate() {
        if route.is_empty() {
            return Err(Error::invalid(format!("route {i} is empty")));
        }
        if let Some((link, len)) = route.iter().find(|(_, l)| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::invalid(format!(
                "route {i}: link {link} has non-positive length {len}"
            )));
        }
        let mut links: Vec<u64> = route.iter().map(|(a, _)| *a).collect();
        links.sort_unstable();
        links.dedup();
        for a in links {
            *usage.entry(a).or_insert(0) += 1;
        }
    }
    Ok(choice_set
        .iter()
        .map(|route| {
            let total: f64 = route.iter().map(|(_, l)| *l).sum();
            route
                .iter()
                .map(|(a, l)| (l / total) * (1.0 / usage[a] as f64))
                .sum()
        })
        .collect())
}

/// `ln PS` per route, ready for use as a utility column.
pub fn log_path_size(choice_set: &[Route]) -> Result<Vec<f64>> {
    Ok(path_size(choice_set)?.into_iter().map(f64::ln).collect())
}

//! Monte Carlo ELBO and its pathwise gradient.
//!
//! Each latent is drawn as `mean + softplus(raw) * eps`; gradients are pushed
//! back by hand through the MNL likelihood, the hierarchical Gaussian prior
//! on the random coefficients, the scale/correlation transforms and the
//! context network. Gaussian entropies are analytic. Per-individual terms
//! (likelihood, `beta_n` and `mu_t` priors and entropies) are scaled by
//! `N / |batch|`; global terms enter at full weight.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{log_likelihood_and_gradient, ChoiceDataset};
use crate::network::Mode;
use crate::priors::{lkj_log_normalizer, log_half_cauchy, PriorConfig, LN_2PI};
use crate::rng::{streams, DrawKey};
use crate::transforms::{log_sigmoid, sigmoid, softplus, CorrCholesky};

use super::VariationalState;

/// `mean + scale * eps`.
pub fn reparameterize(mean: &[f64], scale: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if scale.len() != mean.len() {
        return Err(Error::dims("scale", mean.len(), scale.len()));
    }
    if eps.len() != mean.len() {
        return Err(Error::dims("eps", mean.len(), eps.len()));
    }
    Ok(mean.iter().zip(scale).zip(eps).map(|((m, s), e)| m + s * e).collect())
}

/// Components of one ELBO estimate (already minibatch-scaled).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ElboTerms {
    pub log_lik: f64,
    /// Priors on alpha, zeta, tau and psi, including transform Jacobians.
    pub prior_global: f64,
    pub prior_beta: f64,
    pub prior_mu: f64,
    pub entropy: f64,
}

impl ElboTerms {
    /// `E_q[log p(y, z)]`.
    pub fn log_joint(&self) -> f64 {
        self.log_lik + self.prior_global + self.prior_beta + self.prior_mu
    }

    pub fn total(&self) -> f64 {
        self.log_joint() + self.entropy
    }

    fn check(&self) -> Result<()> {
        let named = [
            ("log-likelihood", self.log_lik),
            ("global prior", self.prior_global),
            ("random-coefficient prior", self.prior_beta),
            ("context-shift prior", self.prior_mu),
            ("entropy", self.entropy),
        ];
        for (name, v) in named {
            if !v.is_finite() {
                return Err(Error::numerical(format!("non-finite ELBO term: {name} = {v}")));
            }
        }
        Ok(())
    }

    fn add_scaled(&mut self, other: &ElboTerms, w: f64) {
        self.log_lik += w * other.log_lik;
        self.prior_global += w * other.prior_global;
        self.prior_beta += w * other.prior_beta;
        self.prior_mu += w * other.prior_mu;
        self.entropy += w * other.entropy;
    }
}

/// Gradient with respect to `phi` and the network weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboGradient {
    pub phi: Vec<f64>,
    pub net: Vec<f64>,
}

impl ElboGradient {
    fn check(&self, state: &VariationalState) -> Result<()> {
        if let Some(i) = self.phi.iter().position(|g| !g.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite gradient for {}",
                state.layout.param_name(i)
            )));
        }
        if let (Some(i), Some(net)) = (self.net.iter().position(|g| !g.is_finite()), &state.net) {
            return Err(Error::numerical(format!("non-finite gradient for {}", net.param_name(i))));
        }
        Ok(())
    }
}

fn normals<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

const GAUSS_ENTROPY_CONST: f64 = 0.5 * (LN_2PI + 1.0);

/// Global latents for one Monte Carlo sample.
struct GlobalDraw {
    alpha: Vec<f64>,
    zeta: Vec<f64>,
    tau_u: Vec<f64>,
    tau: Vec<f64>,
    corr: CorrCholesky,
    /// `diag(tau) * W`, row-major `K x K`.
    chol: Vec<f64>,
    eps_alpha: Vec<f64>,
    eps_zeta: Vec<f64>,
    eps_tau: Vec<f64>,
    eps_psi: Vec<f64>,
}

/// Per-individual contribution for one sample (unscaled).
struct LocalContribution {
    terms: ElboTerms,
    g_alpha: Vec<f64>,
    g_zeta: Vec<f64>,
    g_chol: Vec<f64>,
    g_net: Vec<f64>,
    /// Gradient of the individual's `q_beta` block (`mean`, `raw`).
    g_beta: Vec<f64>,
    /// Gradient of every `q_mu` block of the individual, in occasion order.
    g_mu: Vec<f64>,
}

fn draw_globals(state: &VariationalState, key: DrawKey, sample: u64) -> GlobalDraw {
    let lay = &state.layout;
    let (l, k) = (lay.n_fixed, lay.n_random);
    let mut rng = key.stream(sample, streams::GLOBAL);
    let eps_alpha = normals(&mut rng, l);
    let eps_zeta = normals(&mut rng, k);
    let eps_tau = normals(&mut rng, k);
    let eps_psi = normals(&mut rng, lay.n_corr());
    let phi = &state.phi;
    let draw = |mean: std::ops::Range<usize>, raw: std::ops::Range<usize>, eps: &[f64]| -> Vec<f64> {
        phi[mean]
            .iter()
            .zip(&phi[raw])
            .zip(eps)
            .map(|((m, r), e)| m + softplus(*r) * e)
            .collect()
    };
    let alpha = draw(lay.alpha_mean(), lay.alpha_raw(), &eps_alpha);
    let zeta = draw(lay.zeta_mean(), lay.zeta_raw(), &eps_zeta);
    let tau_u = draw(lay.tau_mean(), lay.tau_raw(), &eps_tau);
    let psi_u = draw(lay.psi_mean(), lay.psi_raw(), &eps_psi);
    let tau: Vec<f64> = tau_u.iter().map(|u| softplus(*u)).collect();
    let corr = CorrCholesky::new(k, &psi_u);
    let mut chol = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            chol[i * k + j] = tau[i] * corr.factor[(i, j)];
        }
    }
    GlobalDraw {
        alpha,
        zeta,
        tau_u,
        tau,
        corr,
        chol,
        eps_alpha,
        eps_zeta,
        eps_tau,
        eps_psi,
    }
}

struct Eval<'a> {
    data: &'a ChoiceDataset,
    state: &'a VariationalState,
    priors: &'a PriorConfig,
    key: DrawKey,
    want_grad: bool,
}

impl Eval<'_> {
    fn local(&self, n: usize, sample: u64, g: &GlobalDraw) -> Result<LocalContribution> {
        let state = self.state;
        let lay = &state.layout;
        let (l, k, p) = (lay.n_fixed, lay.n_random, lay.n_params());
        let phi = &state.phi;
        let ind = &self.data.individuals[n];
        let mut rng_latent = self.key.stream(sample, streams::latent(n));
        let mut rng_dropout = self.key.stream(sample, streams::dropout(n));
        let n_net = state.net.as_ref().map_or(0, |net| net.n_params());
        let mut out = LocalContribution {
            terms: ElboTerms::default(),
            g_alpha: vec![0.0; l],
            g_zeta: vec![0.0; k],
            g_chol: vec![0.0; k * k],
            g_net: vec![0.0; if self.want_grad { n_net } else { 0 }],
            g_beta: vec![0.0; 2 * k],
            g_mu: vec![0.0; if lay.n_mu > 0 { 2 * p * ind.occasions.len() } else { 0 }],
        };

        // Random coefficients and their hierarchical prior.
        let mut beta = Vec::new();
        let mut eps_beta = Vec::new();
        let mut g_beta_val = vec![0.0; k];
        if k > 0 {
            eps_beta = normals(&mut rng_latent, k);
            let (mr, rr) = (lay.beta_mean(n), lay.beta_raw(n));
            beta = phi[mr]
                .iter()
                .zip(&phi[rr])
                .zip(&eps_beta)
                .map(|((m, r), e)| m + softplus(*r) * e)
                .collect();
            // v = L^{-1} (beta - zeta), a = L^{-T} v.
            let lc = &g.chol;
            let mut v = vec![0.0; k];
            for i in 0..k {
                let mut s = beta[i] - g.zeta[i];
                for j in 0..i {
                    s -= lc[i * k + j] * v[j];
                }
                v[i] = s / lc[i * k + i];
            }
            let log_diag: f64 = (0..k).map(|i| lc[i * k + i].ln()).sum();
            out.terms.prior_beta =
                -0.5 * k as f64 * LN_2PI - log_diag - 0.5 * v.iter().map(|x| x * x).sum::<f64>();
            if self.want_grad {
                let mut a = vec![0.0; k];
                for i in (0..k).rev() {
                    let mut s = v[i];
                    for j in i + 1..k {
                        s -= lc[j * k + i] * a[j];
                    }
                    a[i] = s / lc[i * k + i];
                }
                for i in 0..k {
                    g_beta_val[i] -= a[i];
                    out.g_zeta[i] += a[i];
                    for j in 0..=i {
                        out.g_chol[i * k + j] += a[i] * v[j];
                    }
                    out.g_chol[i * k + i] -= 1.0 / lc[i * k + i];
                }
            }
        }

        let collapse = lay.n_mu == 0;
        let mut eta = vec![0.0; p];
        for (t_local, occ) in ind.occasions.iter().enumerate() {
            if occ.log_path_size.is_some() {
                return Err(Error::invalid(
                    "path-size values must enter the model as an attribute column",
                ));
            }
            eta[..l].copy_from_slice(&g.alpha);
            eta[l..].copy_from_slice(&beta);
            let mut shift_cache = None;
            let mut mu_draw = None;
            if let Some(net) = &state.net {
                let (o, cache) = net.forward(occ.context.as_slice(), Mode::Train, &mut rng_dropout)?;
                eta.iter_mut().zip(&o).for_each(|(e, s)| *e += s);
                shift_cache = Some(cache);
                if !collapse {
                    let t = state.occasion_offsets[n] + t_local;
                    let eps = normals(&mut rng_latent, p);
                    let (dr, rr) = (lay.mu_delta(t), lay.mu_raw(t));
                    let x: Vec<f64> = phi[dr]
                        .iter()
                        .zip(&phi[rr])
                        .zip(&eps)
                        .map(|((d, r), e)| d + softplus(*r) * e)
                        .collect();
                    let sc = self.priors.sigma_c;
                    out.terms.prior_mu += x
                        .iter()
                        .map(|xi| -0.5 * (LN_2PI + sc.ln() + xi * xi / sc))
                        .sum::<f64>();
                    eta.iter_mut().zip(&x).for_each(|(e, s)| *e += s);
                    mu_draw = Some((t_local, x, eps));
                }
            }
            let (ll, g_eta) = log_likelihood_and_gradient(occ, &eta, None)?;
            out.terms.log_lik += ll;
            if !self.want_grad {
                continue;
            }
            out.g_alpha.iter_mut().zip(&g_eta[..l]).for_each(|(a, b)| *a += b);
            g_beta_val.iter_mut().zip(&g_eta[l..]).for_each(|(a, b)| *a += b);
            if let (Some(net), Some(cache)) = (&state.net, &shift_cache) {
                net.backward_into(cache, &g_eta, &mut out.g_net)?;
            }
            if let Some((t_local, x, eps)) = mu_draw {
                let t = state.occasion_offsets[n] + t_local;
                let rr = lay.mu_raw(t);
                let sc = self.priors.sigma_c;
                let base = 2 * p * t_local;
                for i in 0..p {
                    let gx = g_eta[i] - x[i] / sc;
                    out.g_mu[base + i] += gx;
                    out.g_mu[base + p + i] += gx * eps[i] * sigmoid(phi[rr.start + i]);
                }
            }
        }
        if self.want_grad && k > 0 {
            let rr = lay.beta_raw(n);
            for i in 0..k {
                out.g_beta[i] += g_beta_val[i];
                out.g_beta[k + i] += g_beta_val[i] * eps_beta[i] * sigmoid(phi[rr.start + i]);
            }
        }
        Ok(out)
    }

    /// Analytic entropy of an individual's local factors, with its gradient
    /// written into the `q_beta` / `q_mu` raw slots.
    fn local_entropy(&self, n: usize, grad: Option<&mut [f64]>, weight: f64) -> f64 {
        let lay = &self.state.layout;
        let phi = &self.state.phi;
        let mut ranges = Vec::new();
        if lay.n_random > 0 {
            ranges.push(lay.beta_raw(n));
        }
        if lay.n_mu > 0 {
            let start = self.state.occasion_offsets[n];
            for t in start..start + self.data.individuals[n].occasions.len() {
                ranges.push(lay.mu_raw(t));
            }
        }
        entropy_over(phi, &ranges, grad, weight)
    }
}

fn entropy_over(
    phi: &[f64],
    ranges: &[std::ops::Range<usize>],
    mut grad: Option<&mut [f64]>,
    weight: f64,
) -> f64 {
    let mut h = 0.0;
    for r in ranges {
        for i in r.clone() {
            let s = softplus(phi[i]);
            h += s.ln() + GAUSS_ENTROPY_CONST;
            if let Some(g) = grad.as_deref_mut() {
                g[i] += weight * sigmoid(phi[i]) / s;
            }
        }
    }
    h
}

/// Settings shared by the ELBO entry points.
#[derive(Clone, Copy, Debug)]
pub struct ElboOptions {
    pub mc_samples: usize,
    pub parallel: bool,
}

fn check_batch(data: &ChoiceDataset, batch: &[usize]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("minibatch is empty"));
    }
    let mut seen = vec![false; data.n_individuals()];
    for &n in batch {
        if n >= seen.len() {
            return Err(Error::invalid(format!("minibatch index {n} out of range")));
        }
        if std::mem::replace(&mut seen[n], true) {
            return Err(Error::invalid(format!("individual {n} appears twice in the minibatch")));
        }
    }
    Ok(())
}

/// ELBO estimate over a minibatch of individuals and, optionally, its
/// gradient. Draws are addressed by `key`, so the value and gradient
/// computed with the same key use the same random numbers.
pub fn elbo_and_gradient(
    data: &ChoiceDataset,
    batch: &[usize],
    state: &VariationalState,
    priors: &PriorConfig,
    key: DrawKey,
    opts: ElboOptions,
    want_grad: bool,
) -> Result<(ElboTerms, Option<ElboGradient>)> {
    check_batch(data, batch)?;
    state.check_dataset(data)?;
    let lay = &state.layout;
    priors.validate(lay.n_fixed, lay.n_random)?;
    if opts.mc_samples == 0 {
        return Err(Error::invalid("mc_samples must be positive"));
    }
    let (l, k) = (lay.n_fixed, lay.n_random);
    let phi = &state.phi;
    let n_net = state.net.as_ref().map_or(0, |n| n.n_params());
    let mut grad = ElboGradient {
        phi: vec![0.0; if want_grad { phi.len() } else { 0 }],
        net: vec![0.0; if want_grad { n_net } else { 0 }],
    };
    let weight = data.n_individuals() as f64 / batch.len() as f64;
    let s_inv = 1.0 / opts.mc_samples as f64;
    let eval = Eval { data, state, priors, key, want_grad };
    let mut terms = ElboTerms::default();

    for sample in 0..opts.mc_samples as u64 {
        let g = draw_globals(state, key, sample);
        let mut sample_terms = ElboTerms::default();

        // Global priors.
        let mut g_alpha = vec![0.0; l];
        let mut g_zeta = vec![0.0; k];
        let mut g_tau_u = vec![0.0; k];
        let mut g_psi_u = vec![0.0; lay.n_corr()];
        for i in 0..l {
            let d = g.alpha[i] - priors.lambda0[i];
            let v = priors.xi0_diag[i];
            sample_terms.prior_global -= 0.5 * (LN_2PI + v.ln() + d * d / v);
            g_alpha[i] -= d / v;
        }
        for i in 0..k {
            let d = g.zeta[i] - priors.mu0[i];
            let v = priors.sigma0_diag[i];
            sample_terms.prior_global -= 0.5 * (LN_2PI + v.ln() + d * d / v);
            g_zeta[i] -= d / v;
            let (u, tau, s0) = (g.tau_u[i], g.tau[i], priors.halfcauchy_scale);
            sample_terms.prior_global += log_half_cauchy(tau, s0) + log_sigmoid(u);
            let sig = sigmoid(u);
            g_tau_u[i] += -2.0 * tau / (s0 * s0 + tau * tau) * sig + (1.0 - sig);
        }
        if k >= 2 {
            let nu = priors.lkj_eta;
            sample_terms.prior_global += (nu - 1.0) * g.corr.log_det() - lkj_log_normalizer(k, nu)
                + g.corr.log_jacobian();
            if want_grad {
                let gd = g.corr.log_det_grad();
                let gj = g.corr.log_jacobian_grad();
                for i in 0..g_psi_u.len() {
                    g_psi_u[i] += (nu - 1.0) * gd[i] + gj[i];
                }
            }
        }

        let locals: Vec<Result<LocalContribution>> = if opts.parallel {
            batch.par_iter().map(|&n| eval.local(n, sample, &g)).collect()
        } else {
            batch.iter().map(|&n| eval.local(n, sample, &g)).collect()
        };

        let mut g_chol = vec![0.0; k * k];
        for (&n, local) in batch.iter().zip(locals) {
            let local = local?;
            sample_terms.add_scaled(&local.terms, weight);
            if !want_grad {
                continue;
            }
            let w = weight * s_inv;
            g_alpha.iter_mut().zip(&local.g_alpha).for_each(|(a, b)| *a += weight * b);
            g_zeta.iter_mut().zip(&local.g_zeta).for_each(|(a, b)| *a += weight * b);
            g_chol.iter_mut().zip(&local.g_chol).for_each(|(a, b)| *a += weight * b);
            grad.net.iter_mut().zip(&local.g_net).for_each(|(a, b)| *a += w * b);
            if k > 0 {
                let start = lay.beta_mean(n).start;
                grad.phi[start..start + 2 * k]
                    .iter_mut()
                    .zip(&local.g_beta)
                    .for_each(|(a, b)| *a += w * b);
            }
            if lay.n_mu > 0 {
                let start = lay.mu_delta(state.occasion_offsets[n]).start;
                grad.phi[start..start + local.g_mu.len()]
                    .iter_mut()
                    .zip(&local.g_mu)
                    .for_each(|(a, b)| *a += w * b);
            }
        }
        terms.add_scaled(&sample_terms, s_inv);
        if !want_grad {
            continue;
        }

        // diag(tau) W -> tau and W.
        let mut g_factor = nalgebra::DMatrix::zeros(k, k);
        for i in 0..k {
            let mut gt = 0.0;
            for j in 0..=i {
                gt += g_chol[i * k + j] * g.corr.factor[(i, j)];
                g_factor[(i, j)] = g.tau[i] * g_chol[i * k + j];
            }
            g_tau_u[i] += gt * sigmoid(g.tau_u[i]);
        }
        if k >= 2 {
            for (a, b) in g_psi_u.iter_mut().zip(g.corr.backward(&g_factor)) {
                *a += b;
            }
        }

        let mut chain = |mean: std::ops::Range<usize>, raw: std::ops::Range<usize>, gz: &[f64], eps: &[f64]| {
            for (i, (m, r)) in mean.zip(raw).enumerate() {
                grad.phi[m] += s_inv * gz[i];
                grad.phi[r] += s_inv * gz[i] * eps[i] * sigmoid(phi[r]);
            }
        };
        chain(lay.alpha_mean(), lay.alpha_raw(), &g_alpha, &g.eps_alpha);
        chain(lay.zeta_mean(), lay.zeta_raw(), &g_zeta, &g.eps_zeta);
        chain(lay.tau_mean(), lay.tau_raw(), &g_tau_u, &g.eps_tau);
        chain(lay.psi_mean(), lay.psi_raw(), &g_psi_u, &g.eps_psi);
    }

    // Analytic entropies.
    let global_raw = [lay.alpha_raw(), lay.zeta_raw(), lay.tau_raw(), lay.psi_raw()];
    let gslot = if want_grad { Some(grad.phi.as_mut_slice()) } else { None };
    terms.entropy += entropy_over(phi, &global_raw, gslot, 1.0);
    for &n in batch {
        let gslot = if want_grad { Some(grad.phi.as_mut_slice()) } else { None };
        terms.entropy += weight * eval.local_entropy(n, gslot, weight);
    }

    terms.check()?;
    if want_grad {
        grad.check(state)?;
        Ok((terms, Some(grad)))
    } else {
        Ok((terms, None))
    }
}

/// ELBO estimate on a minibatch of individuals.
pub fn elbo_estimate(
    data: &ChoiceDataset,
    batch: &[usize],
    state: &VariationalState,
    priors: &PriorConfig,
    mc_samples: usize,
    key: DrawKey,
) -> Result<f64> {
    let opts = ElboOptions { mc_samples, parallel: false };
    Ok(elbo_and_gradient(data, batch, state, priors, key, opts, false)?.0.total())
}

/// Pathwise gradient of [`elbo_estimate`] under the same draws.
pub fn elbo_gradients(
    data: &ChoiceDataset,
    batch: &[usize],
    state: &VariationalState,
    priors: &PriorConfig,
    mc_samples: usize,
    key: DrawKey,
) -> Result<ElboGradient> {
    let opts = ElboOptions { mc_samples, parallel: false };
    let (_, g) = elbo_and_gradient(data, batch, state, priors, key, opts, true)?;
    Ok(g.expect("gradient requested"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reparameterize_examples() {
        assert_eq!(reparameterize(&[1.0, 2.0], &[3.0, 4.0], &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(reparameterize(&[0.0], &[1.0], &[-0.7]).unwrap(), vec![-0.7]);
        assert_eq!(reparameterize(&[2.0], &[3.0], &[0.5]).unwrap(), vec![3.5]);
        assert!(reparameterize(&[2.0], &[3.0, 1.0], &[0.5]).is_err());
    }
}

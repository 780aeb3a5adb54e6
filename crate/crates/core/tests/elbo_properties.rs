//! Statistical and limiting properties of the ELBO estimator.

use cmmnl_core::model::{assemble_covariance, choice_log_likelihood, ChoiceDataset, TasteVector};
use cmmnl_core::priors::{log_half_cauchy, log_lkj, log_mvn_diag, PriorConfig, LN_2PI};
use cmmnl_core::rng::DrawKey;
use cmmnl_core::simulate::{generate_mmnl, AttributeDist, AttributeSpec, SimSpec};
use cmmnl_core::transforms::{inv_softplus, log_sigmoid, softplus, transform_unconstrained, Constrained, TransformKind};
use cmmnl_core::vi::{elbo_and_gradient, elbo_gradients, ElboOptions, ModelKind, VariationalState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn panel(n: usize, t: usize, l: usize, k: usize, seed: u64) -> ChoiceDataset {
    let attributes = (0..l + k)
        .map(|i| AttributeSpec { name: format!("x{i}"), dist: AttributeDist::default() })
        .collect();
    let spec = SimSpec {
        n_individuals: n,
        occasions_per_individual: t,
        n_alternatives: 3,
        attributes,
        true_alpha: vec![0.5; l],
        true_zeta: vec![-0.4; k],
        true_tau: vec![0.7; k],
        true_psi: vec![],
        context: vec![],
        shift: Default::default(),
        sigma_c: 0.0,
        seed,
    };
    generate_mmnl(&spec).unwrap().0
}

fn random_means(state: &mut VariationalState, raw_scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lay = state.layout.clone();
    let raw = inv_softplus(raw_scale);
    let means = [lay.alpha_mean(), lay.zeta_mean(), lay.tau_mean(), lay.psi_mean()];
    for r in means {
        for i in r {
            state.phi[i] = rng.random_range(-0.8..0.8);
        }
    }
    for r in [lay.alpha_raw(), lay.zeta_raw(), lay.tau_raw(), lay.psi_raw()] {
        state.phi[r].iter_mut().for_each(|v| *v = raw);
    }
    for n in 0..lay.n_individuals {
        for i in lay.beta_mean(n) {
            state.phi[i] = rng.random_range(-1.0..1.0);
        }
        state.phi[lay.beta_raw(n)].iter_mut().for_each(|v| *v = raw);
    }
}

fn full_batch(data: &ChoiceDataset) -> Vec<usize> {
    (0..data.n_individuals()).collect()
}

/// Log joint density in unconstrained coordinates at the variational means,
/// computed with dense linear algebra.
fn log_joint_at_means(data: &ChoiceDataset, state: &VariationalState, priors: &PriorConfig) -> f64 {
    let lay = &state.layout;
    let alpha = &state.phi[lay.alpha_mean()];
    let zeta = &state.phi[lay.zeta_mean()];
    let u = &state.phi[lay.tau_mean()];
    let tau: Vec<f64> = u.iter().map(|x| softplus(*x)).collect();
    let (psi, psi_jac) = match transform_unconstrained(TransformKind::CorrelationCholesky, &state.phi[lay.psi_mean()]).unwrap() {
        (Constrained::CorrelationCholesky(w), j) => (&w * w.transpose(), j),
        _ => unreachable!(),
    };
    let k = lay.n_random;
    let mut lp = log_mvn_diag(alpha, &priors.lambda0, &priors.xi0_diag).unwrap()
        + log_mvn_diag(zeta, &priors.mu0, &priors.sigma0_diag).unwrap();
    for (ui, ti) in u.iter().zip(&tau) {
        lp += log_half_cauchy(*ti, priors.halfcauchy_scale) + log_sigmoid(*ui);
    }
    if k >= 2 {
        lp += log_lkj(&psi, priors.lkj_eta).unwrap() + psi_jac;
    }
    let omega = assemble_covariance(&tau, &psi).unwrap();
    let inv = omega.clone().try_inverse().unwrap();
    let log_det = omega.determinant().ln();
    for (n, ind) in data.individuals.iter().enumerate() {
        let beta = &state.phi[lay.beta_mean(n)];
        let r = nalgebra::DVector::from_iterator(k, beta.iter().zip(zeta).map(|(b, z)| b - z));
        lp += -0.5 * (k as f64 * LN_2PI + log_det + (r.transpose() * &inv * &r)[(0, 0)]);
        let eta = TasteVector::new(alpha.to_vec(), beta.to_vec()).unwrap();
        for occ in &ind.occasions {
            lp += choice_log_likelihood(occ, &eta, None).unwrap();
        }
    }
    lp
}

#[test]
fn point_mass_family_recovers_log_joint() {
    let data = panel(6, 3, 1, 3, 2);
    let priors = PriorConfig::default_for(1, 3);
    let mut state = VariationalState::init(&data, ModelKind::Mmnl, None, true, 0.1).unwrap();
    random_means(&mut state, 1e-6, 7);
    let opts = ElboOptions { mc_samples: 1, parallel: false };
    let (terms, _) = elbo_and_gradient(&data, &full_batch(&data), &state, &priors, DrawKey::new(1, 0), opts, false).unwrap();
    let direct = log_joint_at_means(&data, &state, &priors);
    assert!((terms.log_joint() - direct).abs() < 1e-3, "{} vs {direct}", terms.log_joint());
}

#[test]
fn half_batches_are_unbiased_for_the_full_batch() {
    let data = panel(8, 2, 1, 1, 3);
    let priors = PriorConfig::default_for(1, 1);
    let mut state = VariationalState::init(&data, ModelKind::Mmnl, None, true, 0.1).unwrap();
    random_means(&mut state, 0.5, 8);
    let opts = ElboOptions { mc_samples: 1, parallel: false };
    let full = full_batch(&data);
    let (a, b) = full.split_at(4);
    let reps = 1000u64;
    let mut full_vals = Vec::new();
    let mut half_vals = Vec::new();
    for r in 0..reps {
        let eval = |batch: &[usize], step: u64| {
            elbo_and_gradient(&data, batch, &state, &priors, DrawKey::new(r, step), opts, false)
                .unwrap()
                .0
                .total()
        };
        full_vals.push(eval(&full, 0));
        half_vals.push(0.5 * (eval(a, 1) + eval(b, 2)));
    }
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (m, var / v.len() as f64)
    };
    let (mf, vf) = stats(&full_vals);
    let (mh, vh) = stats(&half_vals);
    let se = (vf + vh).sqrt();
    assert!((mf - mh).abs() < 3.0 * se, "full {mf} vs halves {mh} (se {se})");
}

#[test]
fn duplicating_individuals_doubles_the_likelihood_term() {
    let data = panel(5, 3, 1, 2, 4);
    let mut doubled = data.clone();
    for ind in &data.individuals {
        let mut copy = ind.clone();
        copy.id = format!("{}-copy", ind.id);
        doubled.individuals.push(copy);
    }
    let priors = PriorConfig::default_for(1, 2);
    let mut state = VariationalState::init(&data, ModelKind::Mmnl, None, true, 0.1).unwrap();
    random_means(&mut state, 1e-9, 9);
    let mut state2 = VariationalState::init(&doubled, ModelKind::Mmnl, None, true, 0.1).unwrap();
    let lay = state.layout.clone();
    let lay2 = state2.layout.clone();
    state2.phi[..lay.n_global()].copy_from_slice(&state.phi[..lay.n_global()]);
    for n in 0..10 {
        let src = lay.beta_mean(n % 5).start..lay.beta_raw(n % 5).end;
        let dst = lay2.beta_mean(n).start..lay2.beta_raw(n).end;
        let block = state.phi[src].to_vec();
        state2.phi[dst].copy_from_slice(&block);
    }
    let opts = ElboOptions { mc_samples: 1, parallel: false };
    let key = DrawKey::new(3, 3);
    let one = elbo_and_gradient(&data, &full_batch(&data), &state, &priors, key, opts, false).unwrap().0;
    let two = elbo_and_gradient(&doubled, &full_batch(&doubled), &state2, &priors, key, opts, false).unwrap().0;
    assert!((two.log_lik / one.log_lik - 2.0).abs() < 1e-6);
}

#[test]
fn doubling_mc_samples_halves_gradient_variance() {
    let data = panel(4, 2, 1, 1, 5);
    let priors = PriorConfig::default_for(1, 1);
    let mut state = VariationalState::init(&data, ModelKind::Mmnl, None, true, 0.1).unwrap();
    random_means(&mut state, 0.4, 10);
    let batch = full_batch(&data);
    let total_variance = |mc: usize, offset: u64| {
        let reps = 1000;
        let grads: Vec<Vec<f64>> = (0..reps)
            .map(|r| elbo_gradients(&data, &batch, &state, &priors, mc, DrawKey::new(offset + r, 0)).unwrap().phi)
            .collect();
        let d = grads[0].len();
        (0..d)
            .map(|i| {
                let m = grads.iter().map(|g| g[i]).sum::<f64>() / reps as f64;
                grads.iter().map(|g| (g[i] - m).powi(2)).sum::<f64>() / (reps - 1) as f64
            })
            .sum::<f64>()
    };
    let ratio = total_variance(2, 50_000) / total_variance(1, 0);
    assert!((ratio - 0.5).abs() < 0.1, "variance ratio {ratio}");
}

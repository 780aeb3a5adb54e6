//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use cmmnl_core::model::ChoiceDataset;
use cmmnl_core::network::ContextNetwork;
use cmmnl_core::priors::PriorConfig;
use cmmnl_core::rng::DrawKey;
use cmmnl_core::simulate::{
    generate_cmmnl, AttributeDist, AttributeSpec, ContextDist, ContextSpec, ShiftSpec, SimSpec,
};
use cmmnl_core::vi::{elbo_estimate, elbo_gradients, ModelKind, VariationalState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Three individuals with two occasions each, two context dimensions.
pub fn tiny(l: usize, k: usize) -> ChoiceDataset {
    let p = l + k;
    let attributes = (0..p)
        .map(|i| AttributeSpec { name: format!("x{i}"), dist: AttributeDist::default() })
        .collect();
    let spec = SimSpec {
        n_individuals: 3,
        occasions_per_individual: 2,
        n_alternatives: 3,
        attributes,
        true_alpha: vec![0.4; l],
        true_zeta: vec![-0.3; k],
        true_tau: vec![0.6; k],
        true_psi: vec![],
        context: vec![
            ContextSpec { name: "rain".into(), dist: ContextDist::Exponential { rate: 1.0, p_positive: 0.7 } },
            ContextSpec { name: "commute".into(), dist: ContextDist::Bernoulli { p: 0.5 } },
        ],
        shift: ShiftSpec::Linear { matrix: vec![vec![0.2, -0.1]; p] },
        sigma_c: 0.05,
        seed: 11,
    };
    generate_cmmnl(&spec).unwrap().0
}

/// Random variational parameters and network weights, away from kinks.
pub fn randomized_state(data: &ChoiceDataset, kind: ModelKind, collapse: bool, hidden: usize, seed: u64) -> VariationalState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = (kind == ModelKind::Cmmnl).then(|| {
        let widths = [data.n_context(), hidden, data.n_params()];
        let mut net = ContextNetwork::init(&widths, 0.25, &mut rng).unwrap();
        for w in net.params_mut() {
            *w = rng.random_range(-0.8..0.8);
        }
        net
    });
    let mut state = VariationalState::init(data, kind, net, collapse, 0.3).unwrap();
    for v in state.phi.iter_mut() {
        *v = rng.random_range(-0.6..0.6);
    }
    state
}

/// Five-point central difference.
pub fn fd<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// One compared gradient entry.
pub struct GradCheck {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Compares every variational and network gradient entry with a five-point
/// central difference of the ELBO under the same draws.
pub fn gradient_checks(data: &ChoiceDataset, mut state: VariationalState, mc: usize) -> Vec<GradCheck> {
    let priors = PriorConfig::default_for(data.n_fixed, data.n_random());
    let key = DrawKey::new(5, 9);
    let batch: Vec<usize> = vec![0, 2];
    let grad = elbo_gradients(data, &batch, &state, &priors, mc, key).unwrap();
    let h = 1e-3;
    let mut out = Vec::new();
    for i in 0..state.phi.len() {
        let x0 = state.phi[i];
        let numeric = fd(
            |x| {
                state.phi[i] = x;
                elbo_estimate(data, &batch, &state, &priors, mc, key).unwrap()
            },
            x0,
            h,
        );
        state.phi[i] = x0;
        out.push(GradCheck {
            name: state.layout.param_name(i),
            analytic: grad.phi[i],
            numeric,
            rel_err: rel_err(grad.phi[i], numeric),
        });
    }
    if let Some(net) = state.net.clone() {
        for i in 0..net.n_params() {
            let x0 = net.params()[i];
            let numeric = fd(
                |x| {
                    state.net.as_mut().unwrap().params_mut()[i] = x;
                    elbo_estimate(data, &batch, &state, &priors, mc, key).unwrap()
                },
                x0,
                h,
            );
            state.net.as_mut().unwrap().params_mut()[i] = x0;
            out.push(GradCheck {
                name: net.param_name(i),
                analytic: grad.net[i],
                numeric,
                rel_err: rel_err(grad.net[i], numeric),
            });
        }
    }
    out
}

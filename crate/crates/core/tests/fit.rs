//! End-to-end optimisation behaviour.

use std::time::Instant;

use cmmnl_core::model::ChoiceDataset;
use cmmnl_core::priors::PriorConfig;
use cmmnl_core::simulate::{
    generate_mmnl, AttributeDist, AttributeSpec, ContextDist, ContextSpec, SimSpec,
};
use cmmnl_core::vi::{posterior_summary, svi_fit, FitConfig, ModelKind, NetworkSpec};

fn attrs(n: usize) -> Vec<AttributeSpec> {
    (0..n)
        .map(|i| AttributeSpec { name: format!("x{i}"), dist: AttributeDist::default() })
        .collect()
}

fn mnl_spec(seed: u64) -> SimSpec {
    SimSpec {
        n_individuals: 500,
        occasions_per_individual: 10,
        n_alternatives: 3,
        attributes: attrs(3),
        true_alpha: vec![1.0, -0.5, 0.25],
        true_zeta: vec![],
        true_tau: vec![],
        true_psi: vec![],
        context: vec![],
        shift: Default::default(),
        sigma_c: 0.0,
        seed,
    }
}

fn small_mmnl(seed: u64) -> ChoiceDataset {
    let spec = SimSpec {
        n_individuals: 40,
        occasions_per_individual: 5,
        n_alternatives: 3,
        attributes: attrs(3),
        true_alpha: vec![0.5],
        true_zeta: vec![-1.0, 1.0],
        true_tau: vec![0.5, 0.5],
        true_psi: vec![],
        context: vec![
            ContextSpec { name: "rain".into(), dist: ContextDist::Bernoulli { p: 0.5 } },
            ContextSpec { name: "commute".into(), dist: ContextDist::Bernoulli { p: 0.5 } },
        ],
        shift: Default::default(),
        sigma_c: 0.0,
        seed,
    };
    generate_mmnl(&spec).unwrap().0
}

fn quick_fit() -> FitConfig {
    FitConfig { max_steps: 300, window: 20, patience: 5, batch_size: 16, seed: 4, ..FitConfig::default() }
}

#[test]
fn mnl_recovers_generating_coefficients() {
    let spec = mnl_spec(21);
    let (data, truth) = generate_mmnl(&spec).unwrap();
    let priors = PriorConfig::default_for(3, 0);
    let fit = FitConfig { learning_rate: 0.02, seed: 1, ..FitConfig::default() };
    let start = Instant::now();
    let result = svi_fit(&data, &priors, ModelKind::Mnl, &fit, None).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let means = result.state.alpha_mean();
    eprintln!("mnl: {means:?} vs {:?} in {elapsed:.2}s, {} steps, {:?}", truth.alpha, result.state.step_count, result.status);
    for (m, t) in means.iter().zip(&truth.alpha) {
        assert!((m - t).abs() < 0.05, "{m} vs {t}");
    }
    let trace = &result.trace.rows;
    assert!(trace.last().unwrap().windowed_elbo > trace[0].windowed_elbo);
    assert_eq!(posterior_summary(&result.state).len(), 3);
}

#[test]
fn fixed_seed_reproduces_the_trace() {
    let data = small_mmnl(1);
    let priors = PriorConfig::default_for(1, 2);
    let a = svi_fit(&data, &priors, ModelKind::Mmnl, &quick_fit(), None).unwrap();
    let b = svi_fit(&data, &priors, ModelKind::Mmnl, &quick_fit(), None).unwrap();
    assert!(a.trace.same_trajectory(&b.trace));
    assert_eq!(a.state, b.state);
    let other = FitConfig { seed: 5, ..quick_fit() };
    let c = svi_fit(&data, &priors, ModelKind::Mmnl, &other, None).unwrap();
    assert!(!a.trace.same_trajectory(&c.trace));
}

#[test]
fn thread_count_does_not_change_results() {
    let data = small_mmnl(2);
    let priors = PriorConfig::default_for(1, 2);
    let net = NetworkSpec { hidden: vec![4], dropout: 0.1 };
    let seq = svi_fit(&data, &priors, ModelKind::Cmmnl, &quick_fit(), Some(&net)).unwrap();
    let par_cfg = FitConfig { threads: 3, ..quick_fit() };
    let par = svi_fit(&data, &priors, ModelKind::Cmmnl, &par_cfg, Some(&net)).unwrap();
    assert!(seq.trace.same_trajectory(&par.trace));
    assert_eq!(seq.state.phi, par.state.phi);
}

#[test]
fn frozen_zero_network_follows_the_mixed_logit_trajectory() {
    let data = small_mmnl(3);
    let priors = PriorConfig::default_for(1, 2);
    let mmnl = svi_fit(&data, &priors, ModelKind::Mmnl, &quick_fit(), None).unwrap();
    let frozen = FitConfig { net_learning_rate: Some(0.0), ..quick_fit() };
    let net = NetworkSpec { hidden: vec![8], dropout: 0.2 };
    let cmmnl = svi_fit(&data, &priors, ModelKind::Cmmnl, &frozen, Some(&net)).unwrap();
    assert!(mmnl.trace.same_trajectory(&cmmnl.trace));
    assert_eq!(mmnl.state.phi, cmmnl.state.phi);
}

#[test]
fn trace_csv_round_trip() {
    let data = small_mmnl(4);
    let priors = PriorConfig::default_for(1, 2);
    let res = svi_fit(&data, &priors, ModelKind::Mmnl, &quick_fit(), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.csv");
    res.trace.save(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("step,windowed_elbo,learning_rate,wall_seconds\n"));
    let back = cmmnl_core::vi::TraceLog::load(&path).unwrap();
    assert!(back.same_trajectory(&res.trace));
}

#[test]
fn invalid_inputs_are_rejected() {
    let data = small_mmnl(5);
    let priors = PriorConfig::default_for(1, 2);
    assert!(svi_fit(&data, &priors, ModelKind::Mnl, &quick_fit(), None).is_err());
    let bad = FitConfig { patience: 400, ..quick_fit() };
    assert!(svi_fit(&data, &priors, ModelKind::Mmnl, &bad, None).is_err());
    let wrong_priors = PriorConfig::default_for(2, 1);
    assert!(svi_fit(&data, &wrong_priors, ModelKind::Mmnl, &quick_fit(), None).is_err());
}

#[test]
fn divergence_keeps_the_trace() {
    let data = small_mmnl(6);
    let priors = PriorConfig::default_for(1, 2);
    let wild = FitConfig { learning_rate: 1e6, ..quick_fit() };
    match svi_fit(&data, &priors, ModelKind::Mmnl, &wild, None) {
        Err(cmmnl_core::Error::Diverged { trace, .. }) => assert!(trace.rows.len() < 300),
        other => panic!("expected divergence, got {:?}", other.map(|r| r.status)),
    }
}

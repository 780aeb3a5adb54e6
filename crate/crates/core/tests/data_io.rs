//! CSV round trips, corruption fuzzing, interaction columns and scaling.

use cmmnl_core::data::{
    build_interactions, read_choice_csv, standardize, write_choice_csv, write_context_csv, Coefficient,
    InteractionDecl, ModelConfig, StandardizeDecl,
};
use cmmnl_core::model::ChoiceDataset;
use cmmnl_core::simulate::{
    generate_cmmnl, generate_mmnl, AttributeDist, AttributeSpec, ContextDist, ContextSpec, ShiftSpec, SimSpec,
};
use cmmnl_core::vi::ModelKind;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec(seed: u64) -> SimSpec {
    SimSpec {
        n_individuals: 6,
        occasions_per_individual: 3,
        n_alternatives: 3,
        attributes: vec![
            AttributeSpec { name: "asc_b".into(), dist: AttributeDist::Asc { alternative: 1 } },
            AttributeSpec { name: "tc".into(), dist: AttributeDist::Uniform { low: 1.0, high: 9.0 } },
            AttributeSpec { name: "tt".into(), dist: AttributeDist::Normal { mean: 30.0, sd: 7.5 } },
        ],
        true_alpha: vec![0.3],
        true_zeta: vec![-0.2, -0.05],
        true_tau: vec![0.1, 0.02],
        true_psi: vec![],
        context: vec![
            ContextSpec { name: "rain".into(), dist: ContextDist::Exponential { rate: 0.5, p_positive: 0.4 } },
            ContextSpec { name: "commute".into(), dist: ContextDist::Bernoulli { p: 0.5 } },
        ],
        shift: ShiftSpec::RainCommute { rain: 0, commute: 1, effect: vec![0.1, 0.0, -0.01], mitigation: 0.5 },
        sigma_c: 0.01,
        seed,
    }
}

fn to_text(data: &ChoiceDataset) -> (String, String) {
    let mut c = Vec::new();
    let mut x = Vec::new();
    write_choice_csv(data, &mut c).unwrap();
    write_context_csv(data, &mut x).unwrap();
    (String::from_utf8(c).unwrap(), String::from_utf8(x).unwrap())
}

fn read(choices: &str, context: &str, cfg: &ModelConfig) -> cmmnl_core::Result<ChoiceDataset> {
    read_choice_csv(choices.as_bytes(), Some(context.as_bytes()), cfg)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn simulate_output_round_trips(seed in 0u64..10_000) {
        let (data, _) = generate_cmmnl(&spec(seed)).unwrap();
        let cfg = ModelConfig::for_dataset(&data, ModelKind::Cmmnl);
        let (c, x) = to_text(&data);
        let back = read(&c, &x, &cfg).unwrap();
        prop_assert_eq!(&back, &data);
        let (c2, x2) = to_text(&back);
        prop_assert_eq!(c, c2);
        prop_assert_eq!(x, x2);
    }
}

#[test]
fn declared_asc_matches_written_indicator() {
    let (data, _) = generate_mmnl(&SimSpec { shift: ShiftSpec::None, ..spec(1) }).unwrap();
    let mut cfg = ModelConfig::for_dataset(&data, ModelKind::Mmnl);
    cfg.attributes.remove(0);
    cfg.ascs.push(cmmnl_core::data::AscDecl {
        name: "asc_b".into(),
        alternative: "alt2".into(),
        coefficient: Coefficient::Fixed,
    });
    let (c, x) = to_text(&data);
    assert_eq!(read(&c, &x, &cfg).unwrap(), data);
}

/// Applies one corruption to a line of the choices or context file.
fn corrupt(kind: usize, choices: &str, context: &str, rng: &mut ChaCha8Rng) -> (String, String) {
    let mut c: Vec<String> = choices.lines().map(String::from).collect();
    let mut x: Vec<String> = context.lines().map(String::from).collect();
    match kind {
        // Drop the chosen flag of a chosen row.
        0 => {
            let rows: Vec<usize> = (1..c.len()).filter(|i| c[*i].split(',').nth(3) == Some("1")).collect();
            let i = rows[rng.random_range(0..rows.len())];
            let mut f: Vec<&str> = c[i].split(',').collect();
            f[3] = "0";
            c[i] = f.join(",");
        }
        // Orphan context id.
        1 => x.push(format!("999999,{}", vec!["0"; x[0].split(',').count() - 1].join(","))),
        // NaN attribute cell.
        2 => {
            let i = rng.random_range(1..c.len());
            let mut f: Vec<String> = c[i].split(',').map(String::from).collect();
            let col = rng.random_range(5..f.len());
            f[col] = "NaN".into();
            c[i] = f.join(",");
        }
        // Missing context row.
        3 => {
            let i = rng.random_range(1..x.len());
            x.remove(i);
        }
        // Duplicate (occasion, alternative).
        4 => {
            let i = rng.random_range(1..c.len());
            let row = c[i].replace(",1,1,", ",0,1,");
            c.insert(i + 1, row);
        }
        // Non-numeric context cell.
        5 => {
            let i = rng.random_range(1..x.len());
            x[i] = format!("{},wet,1", x[i].split(',').next().unwrap());
        }
        // Second chosen row.
        _ => {
            let rows: Vec<usize> = (1..c.len()).filter(|i| c[*i].split(',').nth(3) == Some("0")).collect();
            let i = rows[rng.random_range(0..rows.len())];
            let mut f: Vec<&str> = c[i].split(',').collect();
            f[3] = "1";
            c[i] = f.join(",");
        }
    }
    (c.join("\n") + "\n", x.join("\n") + "\n")
}

#[test]
fn every_corruption_is_rejected() {
    let (data, _) = generate_cmmnl(&spec(3)).unwrap();
    let cfg = ModelConfig::for_dataset(&data, ModelKind::Cmmnl);
    let (c, x) = to_text(&data);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..140 {
        let kind = trial % 7;
        let (bad_c, bad_x) = corrupt(kind, &c, &x, &mut rng);
        let res = read(&bad_c, &bad_x, &cfg);
        assert!(res.is_err(), "corruption {kind} (trial {trial}) was accepted");
        let msg = res.unwrap_err().to_string();
        assert!(msg.contains("line") || msg.contains("occasion"), "{msg}");
    }
}

#[test]
fn interaction_columns() {
    let (data, _) = generate_cmmnl(&spec(4)).unwrap();
    let decls = vec![
        InteractionDecl { attribute: "tc".into(), context: "commute".into(), coefficient: Coefficient::Fixed },
        InteractionDecl { attribute: "tt".into(), context: "rain".into(), coefficient: Coefficient::Random },
        InteractionDecl { attribute: "asc_b".into(), context: "commute".into(), coefficient: Coefficient::Fixed },
    ];
    let wide = build_interactions(&data, &decls).unwrap();
    assert_eq!(wide.n_params(), data.n_params() + 3);
    assert_eq!(wide.column_names, vec!["asc_b", "tc_x_commute", "asc_b_x_commute", "tc", "tt", "tt_x_rain"]);
    assert_eq!(wide.n_fixed, 3);
    for (o, w) in data.occasions().zip(wide.occasions()) {
        let commute = o.context.0[1];
        let rain = o.context.0[0];
        for r in 0..o.n_alternatives() {
            let tc = o.attributes[(r, 1)];
            assert_eq!(w.attributes[(r, 1)], if commute == 1.0 { tc } else { 0.0 });
            assert_eq!(w.attributes[(r, 5)], o.attributes[(r, 2)] * rain);
            assert_eq!(w.attributes[(r, 3)], tc);
        }
    }
    let mut zeros = data.clone();
    zeros.individuals.iter_mut().flat_map(|i| i.occasions.iter_mut()).for_each(|o| o.context.0[1] = 0.0);
    let wide0 = build_interactions(&zeros, &decls[..1]).unwrap();
    assert!(wide0.occasions().all(|o| o.attributes.column(1).iter().all(|v| *v == 0.0)));
    let clash = vec![decls[0].clone(), decls[0].clone()];
    assert!(build_interactions(&data, &clash).is_err());
}

#[test]
fn standardization() {
    let (data, _) = generate_cmmnl(&spec(5)).unwrap();
    let decl = StandardizeDecl { attributes: vec!["tt".into(), "asc_b".into()], context: vec!["rain".into()] };
    let (z, record) = standardize(&data, &decl).unwrap();
    let col: Vec<f64> = z.occasions().flat_map(|o| o.attributes.column(2).iter().copied().collect::<Vec<_>>()).collect();
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 1e-12 && (sd - 1.0).abs() < 1e-12);
    let (again, _) = standardize(&z, &StandardizeDecl { attributes: vec!["tt".into()], context: vec![] }).unwrap();
    for (a, b) in z.occasions().zip(again.occasions()) {
        for r in 0..a.n_alternatives() {
            assert!((a.attributes[(r, 2)] - b.attributes[(r, 2)]).abs() < 1e-12);
        }
    }
    let s = &record.attributes.iter().find(|s| s.name == "tt").unwrap();
    assert!((record.original_coefficient("tt", 0.5) - 0.5 / s.sd).abs() < 1e-15);
    assert_eq!(record.original_coefficient("tc", 0.5), 0.5);
    let rain = record.context.iter().find(|s| s.name == "rain").unwrap();
    assert!((record.context_to_model("rain", rain.mean)).abs() < 1e-15);
    // Utility differences are unchanged once the coefficient is rescaled.
    let o = data.occasions().next().unwrap();
    let oz = z.occasions().next().unwrap();
    let beta = -0.05;
    let dv = beta * (o.attributes[(0, 2)] - o.attributes[(1, 2)]);
    let dvz = (beta * s.sd) * (oz.attributes[(0, 2)] - oz.attributes[(1, 2)]);
    assert!((dv - dvz).abs() < 1e-12);

    let mut constant = data.clone();
    constant.individuals.iter_mut().flat_map(|i| i.occasions.iter_mut()).for_each(|o| o.context.0[0] = 2.0);
    let (_, rec) = standardize(&constant, &StandardizeDecl { attributes: vec![], context: vec!["rain".into()] }).unwrap();
    assert_eq!(rec.skipped, vec!["rain".to_string()]);
}

#[test]
fn mean_five_sd_two_column() {
    let (mut data, _) = generate_mmnl(&SimSpec { shift: ShiftSpec::None, ..spec(6) }).unwrap();
    let mut i = 0usize;
    for occ in data.individuals.iter_mut().flat_map(|i| i.occasions.iter_mut()) {
        for r in 0..occ.attributes.nrows() {
            occ.attributes[(r, 1)] = if i.is_multiple_of(2) { 3.0 } else { 7.0 };
            i += 1;
        }
    }
    let (z, rec) = standardize(&data, &StandardizeDecl { attributes: vec!["tc".into()], context: vec![] }).unwrap();
    assert_eq!(rec.attributes[0].mean, 5.0);
    assert_eq!(rec.attributes[0].sd, 2.0);
    assert!(z.occasions().all(|o| o.attributes.column(1).iter().all(|v| v.abs() == 1.0)));
}

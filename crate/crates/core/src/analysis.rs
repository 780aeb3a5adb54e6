//! Fit metrics, predictions and context scenario analysis on a fitted state.
//!
//! Everything here evaluates the network in eval mode and never touches the
//! optimiser, so repeated calls on the same state give identical output.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::ColumnScaling;
use crate::error::{Error, Result};
use crate::model::{choice_log_likelihood, mnl_probabilities, utilities, ChoiceDataset, ContextKind, TasteVector};
use crate::vi::VariationalState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitMetrics {
    /// Plug-in log-likelihood at the posterior means.
    pub log_likelihood: f64,
    pub pct_correct: f64,
    pub avg_choice_prob: f64,
    pub wall_seconds: f64,
    pub n_obs: usize,
    pub n_individuals: usize,
    pub n_utility_params: usize,
}

/// Plug-in taste vector for an occasion: the individual's mean (population
/// mean for individuals the state has not seen) plus the network shift.
fn plug_in_eta(state: &VariationalState, individual: &str, context: &[f64]) -> Result<Vec<f64>> {
    let mut eta = match state.individual_index(individual) {
        Some(n) => state.individual_mean(n),
        None => state.population_mean(),
    };
    let shift = state.expected_shift(context)?;
    eta.iter_mut().zip(&shift).for_each(|(e, s)| *e += s);
    Ok(eta)
}

/// Predicted choice probabilities of one occasion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccasionPrediction {
    pub individual_id: String,
    pub occasion_id: u64,
    pub alt_ids: Vec<String>,
    pub probabilities: Vec<f64>,
    pub chosen: usize,
}

pub fn predict(data: &ChoiceDataset, state: &VariationalState) -> Result<Vec<OccasionPrediction>> {
    check_columns(data, state)?;
    let mut out = Vec::with_capacity(data.n_occasions());
    for ind in &data.individuals {
        for occ in &ind.occasions {
            let eta = plug_in_eta(state, &ind.id, occ.context.as_slice())?;
            let v = utilities(occ, &eta, None)?;
            out.push(OccasionPrediction {
                individual_id: ind.id.clone(),
                occasion_id: occ.occasion_id,
                alt_ids: occ.alt_ids.clone(),
                probabilities: mnl_probabilities(&v, &occ.availability)?,
                chosen: occ.chosen,
            });
        }
    }
    Ok(out)
}

pub fn write_predictions<W: Write>(preds: &[OccasionPrediction], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["individual_id", "occasion_id", "alt_id", "probability", "chosen"])?;
    for p in preds {
        for (j, alt) in p.alt_ids.iter().enumerate() {
            w.write_record([
                p.individual_id.clone(),
                p.occasion_id.to_string(),
                alt.clone(),
                p.probabilities[j].to_string(),
                u8::from(j == p.chosen).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn check_columns(data: &ChoiceDataset, state: &VariationalState) -> Result<()> {
    if data.column_names != state.column_names || data.n_fixed != state.layout.n_fixed {
        return Err(Error::invalid("dataset columns differ from the fitted model"));
    }
    if let Some(net) = &state.net {
        if net.input_width() != data.n_context() {
            return Err(Error::dims("context columns", net.input_width(), data.n_context()));
        }
    }
    Ok(())
}

/// Log-likelihood, hit rate and mean probability of the chosen alternative
/// at plug-in parameters. A tie for the largest probability counts as a hit
/// only when the chosen alternative is the first maximiser.
pub fn compute_metrics(data: &ChoiceDataset, state: &VariationalState, wall_seconds: f64) -> Result<FitMetrics> {
    check_columns(data, state)?;
    let mut ll = 0.0;
    let mut hits = 0usize;
    let mut prob_sum = 0.0;
    for ind in &data.individuals {
        for occ in &ind.occasions {
            let eta = plug_in_eta(state, &ind.id, occ.context.as_slice())?;
            ll += choice_log_likelihood(occ, &TasteVector::from_concat(&eta, data.n_fixed)?, None)?;
            let p = mnl_probabilities(&utilities(occ, &eta, None)?, &occ.availability)?;
            prob_sum += p[occ.chosen];
            let best = (0..p.len()).fold(0, |b, j| if p[j] > p[b] { j } else { b });
            hits += usize::from(best == occ.chosen);
        }
    }
    let n = data.n_occasions();
    Ok(FitMetrics {
        log_likelihood: ll,
        pct_correct: 100.0 * hits as f64 / n as f64,
        avg_choice_prob: prob_sum / n as f64,
        wall_seconds,
        n_obs: n,
        n_individuals: data.n_individuals(),
        n_utility_params: data.n_params(),
    })
}

/// Every assignment of the binary dimensions, continuous ones held at
/// `reference`. The first binary dimension varies fastest.
pub fn all_binary_grid(kinds: &[ContextKind], reference: &[f64]) -> Vec<Vec<f64>> {
    let binary: Vec<usize> = (0..kinds.len()).filter(|i| kinds[*i] == ContextKind::Binary).collect();
    (0..1usize << binary.len())
        .map(|mask| {
            let mut c = reference.to_vec();
            for (bit, &d) in binary.iter().enumerate() {
                c[d] = f64::from(u8::from(mask >> bit & 1 == 1));
            }
            c
        })
        .collect()
}

/// The reference plus one scenario per binary dimension, flipped alone.
pub fn one_at_a_time_grid(kinds: &[ContextKind], reference: &[f64]) -> Vec<Vec<f64>> {
    let mut grid = vec![reference.to_vec()];
    for (d, k) in kinds.iter().enumerate() {
        if *k == ContextKind::Binary {
            let mut c = reference.to_vec();
            c[d] = 1.0 - c[d];
            grid.push(c);
        }
    }
    grid
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub label: String,
    pub assignment: Vec<f64>,
    /// `NNet(c) - NNet(c0)`.
    pub shift: Vec<f64>,
}

/// Base parameters at the reference context and additive shifts of each
/// scenario relative to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub column_names: Vec<String>,
    pub context_names: Vec<String>,
    pub reference: Vec<f64>,
    pub reference_label: String,
    /// Population means plus `NNet(c0)`.
    pub base: Vec<f64>,
    pub scenarios: Vec<Scenario>,
    /// Shifts below this fraction of `|base|` are blanked when rendering.
    pub threshold: f64,
}

pub fn scenario_label(names: &[String], kinds: &[ContextKind], c: &[f64]) -> String {
    names
        .iter()
        .zip(kinds)
        .zip(c)
        .map(|((n, k), v)| match k {
            ContextKind::Binary if *v == 1.0 => format!("{n}+"),
            ContextKind::Binary => format!("{n}-"),
            ContextKind::Continuous => format!("{n}={v}"),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn check_assignment(c: &[f64], width: usize) -> Result<()> {
    if c.len() != width {
        return Err(Error::invalid(format!(
            "context assignment has {} values, the model uses {width}",
            c.len()
        )));
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("context assignment contains a non-finite value"));
    }
    Ok(())
}

fn context_width(state: &VariationalState) -> usize {
    state.net.as_ref().map_or(0, |n| n.input_width())
}

pub fn scenario_table(
    state: &VariationalState,
    context_names: &[String],
    context_kinds: &[ContextKind],
    grid: &[Vec<f64>],
    reference: &[f64],
    threshold: f64,
) -> Result<ScenarioReport> {
    let width = context_names.len();
    if context_kinds.len() != width {
        return Err(Error::dims("context kinds", width, context_kinds.len()));
    }
    if state.net.is_some() && context_width(state) != width {
        return Err(Error::dims("context columns", context_width(state), width));
    }
    check_assignment(reference, width)?;
    if !(threshold >= 0.0) {
        return Err(Error::invalid("threshold must be non-negative"));
    }
    let s0 = state.expected_shift(reference)?;
    let mut base = state.population_mean();
    base.iter_mut().zip(&s0).for_each(|(b, s)| *b += s);
    let mut scenarios = Vec::with_capacity(grid.len());
    for c in grid {
        check_assignment(c, width)?;
        let s = state.expected_shift(c)?;
        scenarios.push(Scenario {
            label: scenario_label(context_names, context_kinds, c),
            assignment: c.clone(),
            shift: s.iter().zip(&s0).map(|(a, b)| a - b).collect(),
        });
    }
    Ok(ScenarioReport {
        column_names: state.column_names.clone(),
        context_names: context_names.to_vec(),
        reference: reference.to_vec(),
        reference_label: scenario_label(context_names, context_kinds, reference),
        base,
        scenarios,
        threshold,
    })
}

impl ScenarioReport {
    /// Full table: one row for the base and one per scenario; columns are the
    /// context assignment followed by every parameter.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["scenario".to_string(), "row".to_string()];
        header.extend(self.context_names.iter().cloned());
        header.extend(self.column_names.iter().cloned());
        w.write_record(&header)?;
        let mut row = vec![self.reference_label.clone(), "base".to_string()];
        row.extend(self.reference.iter().map(f64::to_string));
        row.extend(self.base.iter().map(f64::to_string));
        w.write_record(&row)?;
        for s in &self.scenarios {
            let mut row = vec![s.label.clone(), "shift".to_string()];
            row.extend(s.assignment.iter().map(f64::to_string));
            row.extend(s.shift.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Whether a shift is large enough to print.
    pub fn is_shown(&self, param: usize, shift: f64) -> bool {
        let base = self.base[param].abs();
        if base == 0.0 {
            shift != 0.0
        } else {
            shift.abs() >= self.threshold * base
        }
    }

    /// Parameters as rows, the base column followed by one shift column per
    /// non-reference scenario; small shifts are left blank.
    pub fn render(&self) -> String {
        let shown: Vec<&Scenario> = self.scenarios.iter().filter(|s| s.assignment != self.reference).collect();
        let name_w = self.column_names.iter().map(String::len).max().unwrap_or(0).max(9);
        let mut col_w = self.reference_label.len().max(10);
        for s in &shown {
            col_w = col_w.max(s.label.len());
        }
        let mut out = String::new();
        let _ = write!(out, "{:name_w$}  {:>col_w$}", "parameter", self.reference_label);
        for s in &shown {
            let _ = write!(out, "  {:>col_w$}", s.label);
        }
        out.push('\n');
        for (i, name) in self.column_names.iter().enumerate() {
            let _ = write!(out, "{name:name_w$}  {:>col_w$.3}", self.base[i]);
            for s in &shown {
                if self.is_shown(i, s.shift[i]) {
                    let _ = write!(out, "  {:>+col_w$.3}", s.shift[i]);
                } else {
                    let _ = write!(out, "  {:>col_w$}", "");
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Average of `shift(target = 1, rest) - shift(target = 0, rest)` over every
/// assignment of the other binary dimensions. Continuous dimensions other
/// than the target must be pinned in `continuous`.
pub fn marginal_context_effect(
    state: &VariationalState,
    context_kinds: &[ContextKind],
    target: usize,
    continuous: &[(usize, f64)],
) -> Result<Vec<f64>> {
    let width = context_kinds.len();
    if target >= width {
        return Err(Error::invalid(format!("context dimension {target} does not exist")));
    }
    let mut reference = vec![0.0; width];
    for d in 0..width {
        if d == target || context_kinds[d] == ContextKind::Binary {
            continue;
        }
        match continuous.iter().find(|(i, _)| *i == d) {
            Some((_, v)) => reference[d] = *v,
            None => {
                return Err(Error::invalid(format!(
                    "continuous context dimension {d} needs a fixed value"
                )))
            }
        }
    }
    let mut kinds = context_kinds.to_vec();
    kinds[target] = ContextKind::Continuous;
    let grid = all_binary_grid(&kinds, &reference);
    let mut acc = vec![0.0; state.layout.n_params()];
    for mut c in grid.iter().cloned() {
        c[target] = 1.0;
        let on = state.expected_shift(&c)?;
        c[target] = 0.0;
        let off = state.expected_shift(&c)?;
        for (a, (x, y)) in acc.iter_mut().zip(on.iter().zip(&off)) {
            *a += x - y;
        }
    }
    let n = grid.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Context-adjusted parameters along a grid of one continuous dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub dimension: String,
    pub column_names: Vec<String>,
    /// Grid in the units the user asked for.
    pub values: Vec<f64>,
    /// `theta(r)`.
    pub theta: Vec<Vec<f64>>,
    /// `theta(0)`.
    pub theta_zero: Vec<f64>,
}

impl SweepTable {
    pub fn delta(&self, row: usize) -> Vec<f64> {
        self.theta[row].iter().zip(&self.theta_zero).map(|(a, b)| a - b).collect()
    }

    /// Columns `value`, one per parameter (`theta(r) - theta(0)`), then
    /// optionally `<name>_rel` columns dividing by `|theta(0)|`.
    pub fn write_csv<W: Write>(&self, out: W, relative: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![self.dimension.clone()];
        header.extend(self.column_names.iter().cloned());
        if relative {
            header.extend(self.column_names.iter().map(|n| format!("{n}_rel")));
        }
        w.write_record(&header)?;
        for (i, v) in self.values.iter().enumerate() {
            let d = self.delta(i);
            let mut row = vec![v.to_string()];
            row.extend(d.iter().map(f64::to_string));
            if relative {
                row.extend(d.iter().zip(&self.theta_zero).map(|(x, z)| (x / z.abs()).to_string()));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Evaluates `theta(r) = population mean + NNet(c with c[dim] = r)` at
/// `steps` evenly spaced values from `from` to `to`. `fixed` supplies the
/// other dimensions; `scaling` maps user units to model units for `dim`.
#[allow(clippy::too_many_arguments)]
pub fn context_sweep(
    state: &VariationalState,
    context_names: &[String],
    context_kinds: &[ContextKind],
    dim: usize,
    range: (f64, f64),
    steps: usize,
    fixed: &[f64],
    scaling: Option<&ColumnScaling>,
) -> Result<SweepTable> {
    let (from, to) = range;
    if dim >= context_kinds.len() {
        return Err(Error::invalid(format!("context dimension {dim} does not exist")));
    }
    if context_kinds[dim] != ContextKind::Continuous {
        return Err(Error::invalid(format!("'{}' is not a continuous context", context_names[dim])));
    }
    if steps < 2 || !(from.is_finite() && to.is_finite()) || from == to {
        return Err(Error::invalid("sweep needs at least two steps over a non-empty finite range"));
    }
    check_assignment(fixed, context_kinds.len())?;
    let to_model = |r: f64| scaling.map_or(r, |s| (r - s.mean) / s.sd);
    let theta_at = |r: f64| -> Result<Vec<f64>> {
        let mut c = fixed.to_vec();
        c[dim] = to_model(r);
        let shift = state.expected_shift(&c)?;
        Ok(state.population_mean().iter().zip(&shift).map(|(a, b)| a + b).collect())
    };
    let values: Vec<f64> = (0..steps)
        .map(|i| from + (to - from) * i as f64 / (steps - 1) as f64)
        .collect();
    let theta = values.iter().map(|v| theta_at(*v)).collect::<Result<Vec<_>>>()?;
    Ok(SweepTable {
        dimension: context_names[dim].clone(),
        column_names: state.column_names.clone(),
        values,
        theta,
        theta_zero: theta_at(0.0)?,
    })
}

//! Minibatch stochastic gradient ascent on the ELBO.

use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ChoiceDataset;
use crate::network::ContextNetwork;
use crate::priors::PriorConfig;
use crate::rng::{task_rng, DrawKey};

use super::elbo::{elbo_and_gradient, ElboOptions};
use super::optim::Adam;
use super::{FitConfig, ModelKind, VariationalState};

/// Hidden layer widths and dropout rate of the context network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkSpec {
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self { hidden: vec![32], dropout: 0.1 }
    }
}

impl NetworkSpec {
    /// Freshly initialised network for `n_context` inputs and `n_params` outputs.
    pub fn build(&self, n_context: usize, n_params: usize, seed: u64) -> Result<ContextNetwork> {
        let mut widths = vec![n_context];
        widths.extend_from_slice(&self.hidden);
        widths.push(n_params);
        ContextNetwork::init(&widths, self.dropout, &mut task_rng(seed, "network-init"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub windowed_elbo: f64,
    pub learning_rate: f64,
    pub wall_seconds: f64,
}

/// Mean ELBO of every evaluation window.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceLog {
    pub rows: Vec<TraceRow>,
}

impl TraceLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        if self.rows.is_empty() {
            w.write_record(["step", "windowed_elbo", "learning_rate", "wall_seconds"])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<TraceRow>, _>>()?;
        Ok(Self { rows })
    }

    /// Equality ignoring wall-clock time.
    pub fn same_trajectory(&self, other: &TraceLog) -> bool {
        self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| {
                a.step == b.step
                    && a.windowed_elbo.to_bits() == b.windowed_elbo.to_bits()
                    && a.learning_rate.to_bits() == b.learning_rate.to_bits()
            })
    }

    pub fn last_elbo(&self) -> Option<f64> {
        self.rows.last().map(|r| r.windowed_elbo)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    MaxSteps,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub state: VariationalState,
    pub trace: TraceLog,
    pub status: FitStatus,
}

/// Fits a fresh state. `network` is required for `Cmmnl` and ignored otherwise.
pub fn svi_fit(
    data: &ChoiceDataset,
    priors: &PriorConfig,
    kind: ModelKind,
    fit: &FitConfig,
    network: Option<&NetworkSpec>,
) -> Result<FitResult> {
    data.validate()?;
    fit.validate()?;
    let net = match kind {
        ModelKind::Cmmnl => {
            let spec = network.cloned().unwrap_or_default();
            Some(spec.build(data.n_context(), data.n_params(), fit.seed)?)
        }
        _ => None,
    };
    let state = VariationalState::init(data, kind, net, fit.collapse_mu, fit.init_scale)?;
    svi_fit_from(data, priors, state, fit)
}

fn local_ranges(state: &VariationalState, data: &ChoiceDataset, batch: &[usize]) -> Vec<Range<usize>> {
    let lay = &state.layout;
    let mut ranges = vec![0..lay.n_global()];
    for &n in batch {
        if lay.n_random > 0 {
            let start = lay.beta_mean(n).start;
            ranges.push(start..start + 2 * lay.n_random);
        }
        let n_occ = data.individuals[n].occasions.len();
        if lay.n_mu > 0 && n_occ > 0 {
            let start = lay.mu_delta(state.occasion_offsets[n]).start;
            ranges.push(start..start + 2 * lay.n_params() * n_occ);
        }
    }
    ranges
}

/// Continues optimisation from `state`.
pub fn svi_fit_from(
    data: &ChoiceDataset,
    priors: &PriorConfig,
    state: VariationalState,
    fit: &FitConfig,
) -> Result<FitResult> {
    fit.validate()?;
    state.check_dataset(data)?;
    priors.validate(state.layout.n_fixed, state.layout.n_random)?;
    if fit.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(fit.threads)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| run(data, priors, state, fit, true))
    } else {
        run(data, priors, state, fit, false)
    }
}

fn run(
    data: &ChoiceDataset,
    priors: &PriorConfig,
    mut state: VariationalState,
    fit: &FitConfig,
    parallel: bool,
) -> Result<FitResult> {
    let started = Instant::now();
    let n = data.n_individuals();
    let batch_size = fit.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut batch_rng = task_rng(fit.seed, "batch");
    let mut cursor = n;
    let mut adam = Adam::new(state.phi.len());
    let mut net_adam = Adam::new(state.net.as_ref().map_or(0, |net| net.n_params()));
    let mut lr = fit.learning_rate;
    let mut net_lr = fit.net_learning_rate.unwrap_or(fit.learning_rate);
    let opts = ElboOptions { mc_samples: fit.mc_samples, parallel };

    let mut trace = TraceLog::default();
    let mut window_sum = 0.0;
    let mut window_len = 0usize;
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0usize;
    let mut decays = 0usize;
    let mut status = FitStatus::MaxSteps;

    for _ in 0..fit.max_steps {
        if cursor >= n {
            order.shuffle(&mut batch_rng);
            cursor = 0;
        }
        let end = (cursor + batch_size).min(n);
        let batch = &order[cursor..end];
        cursor = end;

        let key = DrawKey::new(fit.seed, state.step_count);
        let (terms, grad) = match elbo_and_gradient(data, batch, &state, priors, key, opts, true) {
            Ok((t, Some(g))) => (t, g),
            Ok((_, None)) => unreachable!("gradient requested"),
            Err(e) if e.is_numerical() => {
                return Err(Error::Diverged {
                    step: state.step_count,
                    reason: e.to_string(),
                    trace: Box::new(trace),
                })
            }
            Err(e) => return Err(e),
        };
        let ranges = local_ranges(&state, data, batch);
        adam.step_ranges(&mut state.phi, &grad.phi, &ranges, lr)?;
        if let Some(net) = state.net.as_mut() {
            if net_lr > 0.0 {
                net_adam.step(net.params_mut(), &grad.net, net_lr)?;
            }
        }
        state.step_count += 1;

        window_sum += terms.total();
        window_len += 1;
        if window_len < fit.window {
            continue;
        }
        let windowed = window_sum / window_len as f64;
        trace.rows.push(TraceRow {
            step: state.step_count,
            windowed_elbo: windowed,
            learning_rate: lr,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        window_sum = 0.0;
        window_len = 0;
        if best == f64::NEG_INFINITY || windowed > best + fit.tolerance * best.abs() {
            best = windowed;
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= fit.patience {
            if decays < fit.plateau_decays {
                decays += 1;
                lr *= fit.decay_factor;
                net_lr *= fit.decay_factor;
                stale = 0;
            } else {
                status = FitStatus::Converged;
                break;
            }
        }
    }
    Ok(FitResult { state, trace, status })
}

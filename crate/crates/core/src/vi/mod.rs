//! Stochastic variational inference for MNL, mixed logit and context-aware
//! mixed logit models.
//!
//! All variational parameters live in one flat buffer (`phi`) described by a
//! [`Layout`]; the context network keeps its own buffer. Every latent has a
//! Gaussian factor in unconstrained space with scale `softplus(raw)`.

mod elbo;
mod fit;
mod optim;
mod summary;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ChoiceDataset;
use crate::network::ContextNetwork;
use crate::transforms::{inv_softplus, n_corr_params, softplus};

pub use elbo::{
    elbo_and_gradient, elbo_estimate, elbo_gradients, reparameterize, ElboGradient, ElboOptions, ElboTerms,
};
pub use fit::{svi_fit, svi_fit_from, FitResult, FitStatus, NetworkSpec, TraceLog, TraceRow};
pub use optim::Adam;
pub use summary::{posterior_summary, stars_for, SummaryRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mnl,
    Mmnl,
    Cmmnl,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mnl" => Ok(ModelKind::Mnl),
            "mmnl" => Ok(ModelKind::Mmnl),
            "cmmnl" | "c-mmnl" => Ok(ModelKind::Cmmnl),
            other => Err(Error::invalid(format!("unknown model kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelKind::Mnl => "mnl",
            ModelKind::Mmnl => "mmnl",
            ModelKind::Cmmnl => "cmmnl",
        };
        f.write_str(s)
    }
}

/// Optimisation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub learning_rate: f64,
    /// Learning rate for the network weights; defaults to `learning_rate`.
    pub net_learning_rate: Option<f64>,
    /// Individuals per minibatch.
    pub batch_size: usize,
    pub mc_samples: usize,
    pub max_steps: usize,
    /// Steps per ELBO evaluation window.
    pub window: usize,
    /// Windows without relative improvement of `tolerance` before a plateau.
    pub patience: usize,
    pub tolerance: f64,
    /// On a plateau the learning rate is multiplied by `decay_factor` this
    /// many times before the fit is declared converged.
    pub plateau_decays: usize,
    pub decay_factor: f64,
    pub seed: u64,
    /// Pin each occasion shift to the network output instead of giving it
    /// its own variational factor.
    pub collapse_mu: bool,
    /// Initial variational scale of every latent.
    pub init_scale: f64,
    /// Worker threads for the per-individual terms; results do not depend on it.
    pub threads: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            net_learning_rate: None,
            batch_size: 512,
            mc_samples: 1,
            max_steps: 20_000,
            window: 100,
            patience: 20,
            tolerance: 1e-4,
            plateau_decays: 1,
            decay_factor: 0.1,
            seed: 0,
            collapse_mu: true,
            init_scale: 0.1,
            threads: 1,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if let Some(lr) = self.net_learning_rate {
            if !(lr >= 0.0) {
                return Err(Error::invalid("net_learning_rate must be non-negative"));
            }
        }
        if self.batch_size == 0 || self.mc_samples == 0 || self.max_steps == 0 || self.window == 0 {
            return Err(Error::invalid("batch_size, mc_samples, max_steps and window must be positive"));
        }
        if self.patience == 0 || self.patience >= self.max_steps {
            return Err(Error::invalid("patience must be positive and smaller than max_steps"));
        }
        if !(self.init_scale > 0.0) || !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::invalid("init_scale must be positive and decay_factor in (0, 1]"));
        }
        if self.threads == 0 {
            return Err(Error::invalid("threads must be at least 1"));
        }
        Ok(())
    }
}

/// Offsets of every variational parameter block inside `phi`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub n_fixed: usize,
    pub n_random: usize,
    pub n_individuals: usize,
    /// Occasions with their own shift factor (0 when collapsed or no network).
    pub n_mu: usize,
}

impl Layout {
    pub fn n_params(&self) -> usize {
        self.n_fixed + self.n_random
    }

    pub fn n_corr(&self) -> usize {
        n_corr_params(self.n_random)
    }

    fn block(start: usize, len: usize) -> Range<usize> {
        start..start + len
    }

    pub fn alpha_mean(&self) -> Range<usize> {
        Self::block(0, self.n_fixed)
    }

    pub fn alpha_raw(&self) -> Range<usize> {
        Self::block(self.n_fixed, self.n_fixed)
    }

    pub fn zeta_mean(&self) -> Range<usize> {
        Self::block(2 * self.n_fixed, self.n_random)
    }

    pub fn zeta_raw(&self) -> Range<usize> {
        Self::block(2 * self.n_fixed + self.n_random, self.n_random)
    }

    pub fn tau_mean(&self) -> Range<usize> {
        Self::block(2 * self.n_fixed + 2 * self.n_random, self.n_random)
    }

    pub fn tau_raw(&self) -> Range<usize> {
        Self::block(2 * self.n_fixed + 3 * self.n_random, self.n_random)
    }

    pub fn psi_mean(&self) -> Range<usize> {
        Self::block(2 * self.n_fixed + 4 * self.n_random, self.n_corr())
    }

    pub fn psi_raw(&self) -> Range<usize> {
        Self::block(2 * self.n_fixed + 4 * self.n_random + self.n_corr(), self.n_corr())
    }

    pub fn n_global(&self) -> usize {
        2 * self.n_fixed + 4 * self.n_random + 2 * self.n_corr()
    }

    pub fn beta_mean(&self, n: usize) -> Range<usize> {
        Self::block(self.n_global() + 2 * self.n_random * n, self.n_random)
    }

    pub fn beta_raw(&self, n: usize) -> Range<usize> {
        Self::block(self.n_global() + 2 * self.n_random * n + self.n_random, self.n_random)
    }

    fn mu_start(&self) -> usize {
        self.n_global() + 2 * self.n_random * self.n_individuals
    }

    pub fn mu_delta(&self, t: usize) -> Range<usize> {
        Self::block(self.mu_start() + 2 * self.n_params() * t, self.n_params())
    }

    pub fn mu_raw(&self, t: usize) -> Range<usize> {
        Self::block(self.mu_start() + 2 * self.n_params() * t + self.n_params(), self.n_params())
    }

    pub fn len(&self) -> usize {
        self.mu_start() + 2 * self.n_params() * self.n_mu
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Name of a flat index, e.g. `q_beta[3].raw_scale[1]`.
    pub fn param_name(&self, i: usize) -> String {
        let named = [
            ("q_alpha.mean", self.alpha_mean()),
            ("q_alpha.raw_scale", self.alpha_raw()),
            ("q_zeta.mean", self.zeta_mean()),
            ("q_zeta.raw_scale", self.zeta_raw()),
            ("q_tau.mean", self.tau_mean()),
            ("q_tau.raw_scale", self.tau_raw()),
            ("q_psi.mean", self.psi_mean()),
            ("q_psi.raw_scale", self.psi_raw()),
        ];
        for (name, r) in named {
            if r.contains(&i) {
                return format!("{name}[{}]", i - r.start);
            }
        }
        let k = self.n_random;
        if k > 0 && i < self.mu_start() {
            let off = i - self.n_global();
            let (n, within) = (off / (2 * k), off % (2 * k));
            let part = if within < k { "mean" } else { "raw_scale" };
            return format!("q_beta[{n}].{part}[{}]", within % k);
        }
        let p = self.n_params();
        let off = i - self.mu_start();
        let (t, within) = (off / (2 * p), off % (2 * p));
        let part = if within < p { "delta" } else { "raw_scale" };
        format!("q_mu[{t}].{part}[{}]", within % p)
    }
}

/// Variational parameters plus the point-estimated network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub kind: ModelKind,
    pub layout: Layout,
    pub phi: Vec<f64>,
    pub net: Option<ContextNetwork>,
    pub column_names: Vec<String>,
    pub individual_ids: Vec<String>,
    /// First flat occasion index of each individual.
    pub occasion_offsets: Vec<usize>,
    pub step_count: u64,
}

impl VariationalState {
    /// Fresh state: zero means, identity correlation, `tau = 0.5` and every
    /// scale at `init_scale`.
    pub fn init(
        data: &ChoiceDataset,
        kind: ModelKind,
        net: Option<ContextNetwork>,
        collapse_mu: bool,
        init_scale: f64,
    ) -> Result<Self> {
        let n_random = data.n_random();
        match kind {
            ModelKind::Mnl if n_random > 0 => {
                return Err(Error::invalid("an MNL model cannot have random coefficients"))
            }
            ModelKind::Cmmnl if net.is_none() => {
                return Err(Error::invalid("a context-aware model needs a network"))
            }
            ModelKind::Mnl | ModelKind::Mmnl if net.is_some() => {
                return Err(Error::invalid(format!("{kind} models do not use a context network")))
            }
            _ => {}
        }
        if let Some(net) = &net {
            if net.input_width() != data.n_context() || net.output_width() != data.n_params() {
                return Err(Error::invalid(format!(
                    "network maps {} -> {}, dataset needs {} -> {}",
                    net.input_width(),
                    net.output_width(),
                    data.n_context(),
                    data.n_params()
                )));
            }
        }
        let n_mu = if kind == ModelKind::Cmmnl && !collapse_mu { data.n_occasions() } else { 0 };
        let layout = Layout {
            n_fixed: data.n_fixed,
            n_random,
            n_individuals: data.n_individuals(),
            n_mu,
        };
        let mut phi = vec![0.0; layout.len()];
        let raw = inv_softplus(init_scale);
        let mut fill = |r: Range<usize>, v: f64| phi[r].iter_mut().for_each(|p| *p = v);
        fill(layout.alpha_raw(), raw);
        fill(layout.zeta_raw(), raw);
        fill(layout.tau_mean(), inv_softplus(0.5));
        fill(layout.tau_raw(), raw);
        fill(layout.psi_raw(), raw);
        for n in 0..layout.n_individuals {
            fill(layout.beta_raw(n), raw);
        }
        for t in 0..n_mu {
            fill(layout.mu_raw(t), raw);
        }
        let mut occasion_offsets = Vec::with_capacity(data.n_individuals());
        let mut acc = 0;
        for ind in &data.individuals {
            occasion_offsets.push(acc);
            acc += ind.occasions.len();
        }
        Ok(Self {
            kind,
            layout,
            phi,
            net,
            column_names: data.column_names.clone(),
            individual_ids: data.individuals.iter().map(|i| i.id.clone()).collect(),
            occasion_offsets,
            step_count: 0,
        })
    }

    pub fn scale(&self, raw: Range<usize>) -> Vec<f64> {
        self.phi[raw].iter().map(|r| softplus(*r)).collect()
    }

    pub fn alpha_mean(&self) -> &[f64] {
        &self.phi[self.layout.alpha_mean()]
    }

    pub fn zeta_mean(&self) -> &[f64] {
        &self.phi[self.layout.zeta_mean()]
    }

    pub fn beta_mean(&self, n: usize) -> &[f64] {
        &self.phi[self.layout.beta_mean(n)]
    }

    /// Population-level taste vector at the variational means, `[alpha, zeta]`.
    pub fn population_mean(&self) -> Vec<f64> {
        let mut v = self.alpha_mean().to_vec();
        v.extend_from_slice(self.zeta_mean());
        v
    }

    /// Taste vector of individual `n` at the variational means.
    pub fn individual_mean(&self, n: usize) -> Vec<f64> {
        let mut v = self.alpha_mean().to_vec();
        if self.layout.n_random > 0 {
            v.extend_from_slice(self.beta_mean(n));
        }
        v
    }

    pub fn individual_index(&self, id: &str) -> Option<usize> {
        self.individual_ids.iter().position(|x| x == id)
    }

    /// Deterministic shift `NNet(c)` (zero for models without a network).
    pub fn expected_shift(&self, context: &[f64]) -> Result<Vec<f64>> {
        match &self.net {
            Some(net) => net.eval(context),
            None => Ok(vec![0.0; self.layout.n_params()]),
        }
    }

    /// Checks that the state was built for this dataset.
    pub fn check_dataset(&self, data: &ChoiceDataset) -> Result<()> {
        if data.n_individuals() != self.layout.n_individuals
            || data.n_fixed != self.layout.n_fixed
            || data.n_random() != self.layout.n_random
        {
            return Err(Error::invalid("variational state does not match the dataset dimensions"));
        }
        if self.layout.n_mu > 0 && self.layout.n_mu != data.n_occasions() {
            return Err(Error::dims("per-occasion shift factors", data.n_occasions(), self.layout.n_mu));
        }
        for (n, ind) in data.individuals.iter().enumerate() {
            let expected_end = self.occasion_offsets.get(n + 1).copied().unwrap_or(data.n_occasions());
            if self.occasion_offsets[n] + ind.occasions.len() != expected_end {
                return Err(Error::invalid("occasion counts differ from the fitted state"));
            }
        }
        Ok(())
    }
}

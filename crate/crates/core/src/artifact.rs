//! Versioned JSON record of a fitted model.
//!
//! The artifact holds nothing time-dependent, so two fits with the same seed
//! and inputs serialize to identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use std::time::Instant;

use crate::analysis::{compute_metrics, FitMetrics};
use crate::data::{prepare_dataset, ModelConfig, ScalingRecord};
use crate::error::{Error, Result};
use crate::model::{ChoiceDataset, ContextKind};
use crate::network::ContextNetwork;
use crate::vi::{posterior_summary, svi_fit, FitStatus, SummaryRow, TraceLog, VariationalState};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub context_names: Vec<String>,
    pub context_kinds: Vec<ContextKind>,
    pub scaling: ScalingRecord,
    pub status: FitStatus,
    /// Last windowed ELBO of the run.
    pub final_elbo: Option<f64>,
    pub summary: Vec<SummaryRow>,
    /// Where the optimisation trace was written, if anywhere.
    pub trace_path: Option<String>,
    pub state: VariationalState,
}

impl ModelArtifact {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: ModelConfig,
        context_names: Vec<String>,
        context_kinds: Vec<ContextKind>,
        scaling: ScalingRecord,
        state: VariationalState,
        status: FitStatus,
        final_elbo: Option<f64>,
        trace_path: Option<String>,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            summary: posterior_summary(&state),
            config,
            context_names,
            context_kinds,
            scaling,
            status,
            final_elbo,
            trace_path,
            state,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("schema_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(Error::invalid(format!(
                    "artifact schema version {v} is not supported (expected {SCHEMA_VERSION})"
                )))
            }
            None => return Err(Error::invalid("artifact has no schema_version")),
        }
        let mut artifact: ModelArtifact = serde_json::from_value(value)?;
        artifact.check()?;
        // Rebuild through the validating constructor.
        if let Some(net) = artifact.state.net.take() {
            artifact.state.net = Some(ContextNetwork::from_params(
                net.widths().to_vec(),
                net.params().to_vec(),
                net.dropout_rate(),
            )?);
        }
        Ok(artifact)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("cannot read artifact {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn check(&self) -> Result<()> {
        let st = &self.state;
        if st.phi.len() != st.layout.len() {
            return Err(Error::dims("variational parameters", st.layout.len(), st.phi.len()));
        }
        if st.phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("artifact contains non-finite variational parameters"));
        }
        if st.column_names.len() != st.layout.n_params() {
            return Err(Error::dims("parameter columns", st.layout.n_params(), st.column_names.len()));
        }
        if st.individual_ids.len() != st.layout.n_individuals || st.occasion_offsets.len() != st.layout.n_individuals {
            return Err(Error::invalid("artifact individual records are inconsistent"));
        }
        if self.context_names.len() != self.context_kinds.len() {
            return Err(Error::dims("context kinds", self.context_names.len(), self.context_kinds.len()));
        }
        if let Some(net) = &st.net {
            if net.input_width() != self.context_names.len() || net.output_width() != st.layout.n_params() {
                return Err(Error::invalid("artifact network widths do not match its columns"));
            }
        }
        Ok(())
    }

    /// Index of a context dimension by name.
    pub fn context_index(&self, name: &str) -> Result<usize> {
        self.context_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::invalid(format!("unknown context dimension '{name}'")))
    }

    /// Context assignment in model units from `(name, value)` pairs given
    /// in original units. Unnamed dimensions default to zero (off for
    /// binary dimensions).
    pub fn assignment(&self, values: &[(String, f64)]) -> Result<Vec<f64>> {
        let mut raw = vec![0.0; self.context_names.len()];
        for (name, v) in values {
            let d = self.context_index(name)?;
            if self.context_kinds[d] == ContextKind::Binary && *v != 0.0 && *v != 1.0 {
                return Err(Error::invalid(format!("binary context '{name}' must be 0 or 1, got {v}")));
            }
            raw[d] = *v;
        }
        Ok(self
            .context_names
            .iter()
            .zip(raw)
            .map(|(n, v)| self.scaling.context_to_model(n, v))
            .collect())
    }

    /// Applies the stored scaling to a dataset read with this artifact's
    /// config.
    pub fn prepare(&self, raw: &ChoiceDataset) -> Result<ChoiceDataset> {
        Ok(prepare_dataset(raw, &self.config, Some(&self.scaling))?.0)
    }
}

/// Output of one estimation run.
#[derive(Clone, Debug)]
pub struct Estimate {
    pub artifact: ModelArtifact,
    pub trace: TraceLog,
    /// In-sample metrics, including wall time.
    pub metrics: FitMetrics,
}

/// Standardizes `raw` as configured, fits the configured model and packages
/// the artifact. `trace_path` is only recorded, not written.
pub fn estimate(config: &ModelConfig, raw: &ChoiceDataset, trace_path: Option<String>) -> Result<Estimate> {
    config.validate()?;
    let (data, scaling) = prepare_dataset(raw, config, None)?;
    let priors = config.prior_config()?;
    let started = Instant::now();
    let result = svi_fit(&data, &priors, config.model_kind, &config.fit, Some(&config.network))?;
    let wall = started.elapsed().as_secs_f64();
    let artifact = ModelArtifact::new(
        config.clone(),
        data.context_names.clone(),
        data.context_kinds.clone(),
        scaling,
        result.state,
        result.status,
        result.trace.last_elbo(),
        trace_path,
    );
    let metrics = compute_metrics(&data, &artifact.state, wall)?;
    Ok(Estimate { artifact, trace: result.trace, metrics })
}

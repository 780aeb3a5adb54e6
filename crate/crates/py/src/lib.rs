//! Python bindings. Structured outputs cross the boundary as CSV or JSON
//! text so the Python side needs no extra dependencies.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use cmmnl_core::analysis::{
    all_binary_grid, compute_metrics, context_sweep, one_at_a_time_grid, predict, scenario_table, write_predictions,
};
use cmmnl_core::artifact::{self, ModelArtifact};
use cmmnl_core::data::{load_choice_csv, write_choice_csv, write_context_csv, ModelConfig};
use cmmnl_core::model;
use cmmnl_core::simulate::{generate_cmmnl, generate_mmnl, ShiftSpec, SimSpec};
use cmmnl_core::vi::ModelKind;
use cmmnl_core::Error;

fn py_err(e: Error) -> PyErr {
    if e.is_numerical() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for cmmnl_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn utf8(bytes: Vec<u8>) -> String {
    String::from_utf8(bytes).expect("csv writer emits utf-8")
}

/// Choice probabilities for one choice set. All alternatives are available
/// unless `availability` says otherwise.
#[pyfunction]
#[pyo3(signature = (utilities, availability=None))]
fn mnl_probabilities(utilities: Vec<f64>, availability: Option<Vec<bool>>) -> PyResult<Vec<f64>> {
    let avail = availability.unwrap_or_else(|| vec![true; utilities.len()]);
    model::mnl_probabilities(&utilities, &avail).py()
}

/// Path-size factors for routes given as lists of `(link_id, length)`.
#[pyfunction]
fn path_size(routes: Vec<Vec<(u64, f64)>>) -> PyResult<Vec<f64>> {
    model::path_size(&routes).py()
}

/// `diag(tau) psi diag(tau)` as a list of rows.
#[pyfunction]
fn assemble_covariance(tau: Vec<f64>, psi: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let k = psi.len();
    if psi.iter().any(|r| r.len() != k) {
        return Err(PyValueError::new_err("psi must be square"));
    }
    let m = DMatrix::from_fn(k, k, |i, j| psi[i][j]);
    let c = model::assemble_covariance(&tau, &m).py()?;
    Ok((0..c.nrows()).map(|i| c.row(i).iter().copied().collect()).collect())
}

/// Generates a dataset from a JSON simulation spec. Returns a dict with
/// `choices` and `context` CSV text, a matching `config` and the `truth`,
/// both as JSON text.
#[pyfunction]
#[pyo3(signature = (spec_json, seed=None))]
fn simulate(spec_json: &str, seed: Option<u64>) -> PyResult<HashMap<String, String>> {
    let mut spec: SimSpec = serde_json::from_str(spec_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let (data, truth) = if spec.shift == ShiftSpec::None { generate_mmnl(&spec) } else { generate_cmmnl(&spec) }.py()?;
    let kind = if data.n_context() > 0 {
        ModelKind::Cmmnl
    } else if data.n_random() > 0 {
        ModelKind::Mmnl
    } else {
        ModelKind::Mnl
    };
    let mut cfg = ModelConfig::for_dataset(&data, kind);
    cfg.fit.seed = spec.seed;
    let mut choices = Vec::new();
    write_choice_csv(&data, &mut choices).py()?;
    let mut context = Vec::new();
    write_context_csv(&data, &mut context).py()?;
    let truth = serde_json::to_string_pretty(&truth).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(HashMap::from([
        ("choices".to_string(), utf8(choices)),
        ("context".to_string(), utf8(context)),
        ("config".to_string(), cfg.to_json().py()?),
        ("truth".to_string(), truth),
    ]))
}

/// A fitted model artifact.
#[pyclass(frozen)]
struct Model {
    inner: ModelArtifact,
}

impl Model {
    fn data(&self, choices: &str, context: Option<&str>) -> PyResult<model::ChoiceDataset> {
        let raw = load_choice_csv(Path::new(choices), context.map(Path::new), &self.inner.config).py()?;
        self.inner.prepare(&raw).py()
    }

    fn assignment(&self, values: Option<HashMap<String, f64>>) -> PyResult<Vec<f64>> {
        let mut pairs: Vec<(String, f64)> = values.unwrap_or_default().into_iter().collect();
        pairs.sort_by(|a, b| a.0.cmp(&b.0));
        self.inner.assignment(&pairs).py()
    }
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: ModelArtifact::load(&path).py()? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: ModelArtifact::from_json(text).py()? })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().py()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py()
    }

    #[getter]
    fn column_names(&self) -> Vec<String> {
        self.inner.state.column_names.clone()
    }

    #[getter]
    fn context_names(&self) -> Vec<String> {
        self.inner.context_names.clone()
    }

    #[getter]
    fn status(&self) -> String {
        format!("{:?}", self.inner.status)
    }

    /// Posterior summary rows `(name, mean, sd, lower, upper, stars)`.
    fn summary(&self) -> Vec<(String, f64, f64, f64, f64, String)> {
        self.inner
            .summary
            .iter()
            .map(|r| (r.name.clone(), r.mean, r.sd, r.lower, r.upper, r.stars.clone()))
            .collect()
    }

    /// Scenario table as `(rendered_text, csv_text)`.
    #[pyo3(signature = (grid="all-binary", reference=None, threshold=0.05))]
    fn scenario(
        &self,
        grid: &str,
        reference: Option<HashMap<String, f64>>,
        threshold: f64,
    ) -> PyResult<(String, String)> {
        let reference = self.assignment(reference)?;
        let kinds = &self.inner.context_kinds;
        let cells = match grid {
            "all-binary" => all_binary_grid(kinds, &reference),
            "one-at-a-time" => one_at_a_time_grid(kinds, &reference),
            other => return Err(PyValueError::new_err(format!("unknown grid '{other}'"))),
        };
        let report =
            scenario_table(&self.inner.state, &self.inner.context_names, kinds, &cells, &reference, threshold).py()?;
        let mut csv = Vec::new();
        report.write_csv(&mut csv).py()?;
        Ok((report.render(), utf8(csv)))
    }

    /// Sweep of one continuous dimension as CSV text.
    #[pyo3(signature = (dim, start, stop, steps, at=None, relative=false))]
    fn sweep(
        &self,
        dim: &str,
        start: f64,
        stop: f64,
        steps: usize,
        at: Option<HashMap<String, f64>>,
        relative: bool,
    ) -> PyResult<String> {
        let a = &self.inner;
        let d = a.context_index(dim).py()?;
        let fixed = self.assignment(at)?;
        let scaling = a.scaling.context.iter().find(|s| s.name == dim);
        let table = context_sweep(
            &a.state,
            &a.context_names,
            &a.context_kinds,
            d,
            (start, stop),
            steps,
            &fixed,
            scaling,
        )
        .py()?;
        let mut csv = Vec::new();
        table.write_csv(&mut csv, relative).py()?;
        Ok(utf8(csv))
    }

    /// Predicted probabilities for a dataset as CSV text.
    #[pyo3(signature = (choices, context=None))]
    fn predict(&self, choices: &str, context: Option<&str>) -> PyResult<String> {
        let data = self.data(choices, context)?;
        let preds = predict(&data, &self.inner.state).py()?;
        let mut csv = Vec::new();
        write_predictions(&preds, &mut csv).py()?;
        Ok(utf8(csv))
    }

    /// Plug-in fit metrics on a dataset.
    #[pyo3(signature = (choices, context=None))]
    fn metrics(&self, choices: &str, context: Option<&str>) -> PyResult<HashMap<String, f64>> {
        let data = self.data(choices, context)?;
        let m = compute_metrics(&data, &self.inner.state, 0.0).py()?;
        Ok(HashMap::from([
            ("log_likelihood".to_string(), m.log_likelihood),
            ("pct_correct".to_string(), m.pct_correct),
            ("avg_choice_prob".to_string(), m.avg_choice_prob),
            ("n_obs".to_string(), m.n_obs as f64),
            ("n_individuals".to_string(), m.n_individuals as f64),
            ("n_utility_params".to_string(), m.n_utility_params as f64),
        ]))
    }
}

/// Fits the model described by a JSON config to CSV data.
#[pyfunction]
#[pyo3(signature = (config_json, choices, context=None, seed=None, max_steps=None))]
fn fit(
    py: Python<'_>,
    config_json: &str,
    choices: &str,
    context: Option<&str>,
    seed: Option<u64>,
    max_steps: Option<usize>,
) -> PyResult<Model> {
    let mut cfg = ModelConfig::from_json(config_json).py()?;
    if let Some(s) = seed {
        cfg.fit.seed = s;
    }
    if let Some(s) = max_steps {
        cfg.fit.max_steps = s;
    }
    let raw = load_choice_csv(Path::new(choices), context.map(Path::new), &cfg).py()?;
    let est = py.detach(|| artifact::estimate(&cfg, &raw, None)).py()?;
    Ok(Model { inner: est.artifact })
}

#[pymodule]
fn cmmnl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(mnl_probabilities, m)?)?;
    m.add_function(wrap_pyfunction!(path_size, m)?)?;
    m.add_function(wrap_pyfunction!(assemble_covariance, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_class::<Model>()?;
    m.add("SCHEMA_VERSION", artifact::SCHEMA_VERSION)?;
    Ok(())
}

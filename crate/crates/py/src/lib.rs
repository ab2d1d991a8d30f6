//! Python bindings: synthetic data, the four model kinds, training,
//! evaluation and the expert-selection primitives.
//!
//! Configuration objects cross the boundary as JSON strings so Python callers
//! can build them with `json.dumps` and any field left out keeps its default.

use std::collections::BTreeMap;
use std::path::PathBuf;

use aesm2::data::{self as data, DatasetSchema, SyntheticSpec};
use aesm2::eval;
use aesm2::model::{Checkpoint, Layout, ModelConfig, ModelKind};
use aesm2::selection;
use aesm2::train::{self as train, TrainConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: aesm2::Error) -> PyErr {
    match e {
        aesm2::Error::Diverged { .. } | aesm2::Error::Io(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn from_json<T: serde::de::DeserializeOwned + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        None => Ok(T::default()),
        Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(format!("bad config json: {e}"))),
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pyclass(module = "aesm2py", frozen)]
pub struct Dataset {
    inner: data::Dataset,
}

#[pymethods]
impl Dataset {
    /// Parses CSV text written by `to_csv` against a schema given as JSON.
    #[staticmethod]
    fn from_csv(text: &str, schema_json: &str) -> PyResult<Self> {
        let schema: DatasetSchema =
            serde_json::from_str(schema_json).map_err(|e| PyValueError::new_err(format!("bad schema json: {e}")))?;
        let inner = data::read_csv(text.as_bytes(), &schema).map_err(err)?;
        Ok(Dataset { inner })
    }

    fn to_csv(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        data::write_csv(&self.inner, &mut buf).map_err(err)?;
        String::from_utf8(buf).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn schema_json(&self) -> PyResult<String> {
        to_json(&self.inner.schema)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn n_scenarios(&self) -> usize {
        self.inner.schema.n_scenarios()
    }

    fn scenario_names(&self) -> Vec<String> {
        (0..self.inner.schema.n_scenarios()).map(|s| self.inner.schema.scenario_name(s)).collect()
    }

    /// `(instances, clicks, conversions)` per scenario.
    fn label_counts(&self) -> Vec<(usize, usize, usize)> {
        self.inner.label_counts()
    }

    fn filter_scenario(&self, scenario: usize) -> PyResult<Self> {
        if scenario >= self.inner.schema.n_scenarios() {
            return Err(PyValueError::new_err(format!("scenario {scenario} out of range")));
        }
        Ok(Dataset {
            inner: self.inner.filter_scenario(scenario),
        })
    }

    /// Click and conversion labels as two lists.
    fn labels(&self) -> (Vec<u8>, Vec<u8>) {
        self.inner.instances.iter().map(|i| (i.click, i.conversion)).unzip()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(len={}, scenarios={})", self.inner.len(), self.inner.schema.n_scenarios())
    }
}

/// Generates `(train, val, test)` from a synthetic spec (JSON, optional).
#[pyfunction]
#[pyo3(signature = (seed=0, spec_json=None))]
fn generate_splits(seed: u64, spec_json: Option<&str>) -> PyResult<(Dataset, Dataset, Dataset)> {
    let spec: SyntheticSpec = from_json(spec_json)?;
    let s = data::generate_splits(&spec, seed).map_err(err)?;
    Ok((Dataset { inner: s.train }, Dataset { inner: s.val }, Dataset { inner: s.test }))
}

/// JSON of the default synthetic spec, handy as a template.
#[pyfunction]
fn default_spec_json() -> PyResult<String> {
    to_json(&SyntheticSpec::default())
}

type CellAucs = BTreeMap<String, (Option<f64>, Option<f64>)>;

#[pyclass(module = "aesm2py", frozen)]
pub struct Model {
    inner: aesm2::model::Model,
}

#[pymethods]
impl Model {
    /// Fresh model for the dataset's schema. `config_json` overrides
    /// `ModelConfig` fields; `kind` wins over any kind it sets.
    #[new]
    #[pyo3(signature = (dataset, kind="aesm2", seed=0, config_json=None))]
    fn new(dataset: &Dataset, kind: &str, seed: u64, config_json: Option<&str>) -> PyResult<Self> {
        let mut config: ModelConfig = from_json(config_json)?;
        config.kind = kind.parse::<ModelKind>().map_err(err)?;
        let inner = train::init_model(config, Layout::from_schema(&dataset.inner.schema), seed).map_err(err)?;
        Ok(Model { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            inner: aesm2::model::Model::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    /// Serialized checkpoint; identical weights give identical text.
    fn checkpoint_json(&self) -> PyResult<String> {
        Checkpoint::from_model(&self.inner).to_json().map_err(err)
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind().to_string()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn config_json(&self) -> PyResult<String> {
        to_json(self.inner.config())
    }

    /// `(ctr, cvr, ctcvr)` per instance.
    fn predict(&self, py: Python<'_>, dataset: &Dataset) -> PyResult<Vec<(f64, f64, f64)>> {
        let preds = py
            .detach(|| eval::predict_dataset(&self.inner, &dataset.inner))
            .map_err(err)?;
        Ok(preds.into_iter().map(|p| (p.ctr, p.cvr, p.ctcvr)).collect())
    }

    /// `{cell: (ctr_auc, ctcvr_auc)}` with one cell per scenario plus "ALL".
    /// A cell whose labels are all one class maps to None.
    fn evaluate(
        &self,
        py: Python<'_>,
        dataset: &Dataset,
    ) -> PyResult<CellAucs> {
        let report = py.detach(|| eval::evaluate(&self.inner, &dataset.inner)).map_err(err)?;
        Ok(report
            .scenarios
            .iter()
            .chain(std::iter::once(&report.all))
            .map(|c| (c.name.clone(), (c.ctr_auc, c.ctcvr_auc)))
            .collect())
    }

    /// Expert utilization over a dataset as CSV
    /// (`layer,branch,expert,specific_freq,shared_freq`).
    fn utilization_csv(&self, py: Python<'_>, dataset: &Dataset) -> PyResult<String> {
        let report = py.detach(|| eval::utilization(&self.inner, &dataset.inner)).map_err(err)?;
        Ok(report.to_csv())
    }

    fn __repr__(&self) -> String {
        format!("Model(kind={}, parameters={})", self.inner.kind(), self.inner.parameter_count())
    }
}

/// Trains `model` and returns `(trained_model, best_epoch, epochs_run)`.
/// `config_json` overrides `TrainConfig` fields; explicit keywords win.
#[pyfunction]
#[pyo3(signature = (model, train_set, val=None, config_json=None, epochs=None, seed=None, aux=None, noise=None))]
#[allow(clippy::too_many_arguments)]
fn fit(
    py: Python<'_>,
    model: &Model,
    train_set: &Dataset,
    val: Option<&Dataset>,
    config_json: Option<&str>,
    epochs: Option<usize>,
    seed: Option<u64>,
    aux: Option<bool>,
    noise: Option<bool>,
) -> PyResult<(Model, Option<usize>, usize)> {
    let mut cfg: TrainConfig = from_json(config_json)?;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(a) = aux {
        cfg.aux = a;
    }
    if let Some(n) = noise {
        cfg.noise = n;
    }
    let start = model.inner.clone();
    let outcome = py
        .detach(|| train::train(start, &train_set.inner, val.map(|v| &v.inner), &cfg, &mut ()))
        .map_err(err)?;
    Ok((
        Model { inner: outcome.model },
        outcome.best_epoch,
        outcome.epochs.len(),
    ))
}

#[pyclass(module = "aesm2py", frozen, get_all)]
pub struct Selection {
    branch: usize,
    specific: Vec<usize>,
    shared: Vec<usize>,
    specific_scores: Vec<f64>,
    shared_scores: Vec<f64>,
}

#[pymethods]
impl Selection {
    /// Sorted union of the specific and shared sets.
    fn active(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.specific.iter().chain(&self.shared).copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    }

    fn __repr__(&self) -> String {
        format!(
            "Selection(branch={}, specific={:?}, shared={:?})",
            self.branch, self.specific, self.shared
        )
    }
}

/// Picks specific and shared experts for `branch` from a row-normalised
/// n×m gating matrix given as a list of rows.
#[pyfunction]
fn select_experts(rows: Vec<Vec<f64>>, branch: usize, k_specific: usize, k_shared: usize) -> PyResult<Selection> {
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("gating rows must all have the same length"));
    }
    let flat: Vec<f64> = rows.concat();
    let r = selection::select_from_rows(&flat, rows.len(), m, branch, k_specific, k_shared).map_err(err)?;
    Ok(Selection {
        branch: r.branch_index,
        specific: r.specific,
        shared: r.shared,
        specific_scores: r.specific_scores,
        shared_scores: r.shared_scores,
    })
}

#[pyfunction]
fn kl_divergence(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    selection::kl_divergence(&p, &q).map_err(err)
}

#[pyfunction]
fn masked_softmax(raw: Vec<f64>, active: Vec<usize>) -> PyResult<Vec<f64>> {
    selection::masked_softmax(&raw, &active).map_err(err)
}

/// Rank-based ROC AUC; ties share their average rank.
#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    eval::auc(&scores, &labels).map_err(err)
}

#[pymodule]
fn aesm2py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_class::<Selection>()?;
    m.add_function(wrap_pyfunction!(generate_splits, m)?)?;
    m.add_function(wrap_pyfunction!(default_spec_json, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(select_experts, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(masked_softmax, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add("MODEL_KINDS", ModelKind::ALL.iter().map(|k| k.as_str()).collect::<Vec<_>>())?;
    Ok(())
}

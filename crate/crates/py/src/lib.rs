//! Python bindings: configuration, simulation runs and the numerical
//! building blocks (training steps, averaging, consensus).

use fogsim::aggregation::{build_mixing_matrix, consensus_round, weighted_average as average};
use fogsim::model::{self, Dataset, ParameterVector, Sample};
use fogsim::report::{events_log, metrics_csv, Provenance};
use fogsim::sim::{self, MetricsRow, SimError, SimulationConfig, SimulationOutput};
use fogsim::topology::Adjacency;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn sim_error(e: SimError) -> PyErr {
    match e {
        SimError::InvalidConfig(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// A simulation configuration. Build one from JSON or with `three_layer`.
#[pyclass(name = "Config", module = "fogsim_py", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: SimulationConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        SimulationConfig::from_json(text)
            .map(|inner| Self { inner })
            .map_err(value_error)
    }

    /// Devices in clusters of `cluster_size`, `mid` edge servers, one root.
    #[staticmethod]
    fn three_layer(devices: usize, cluster_size: usize, mid: usize) -> Self {
        Self {
            inner: SimulationConfig::three_layer(devices, cluster_size, mid),
        }
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// Every violated rule as `field: message`; empty when the config is valid.
    fn validate(&self) -> Vec<String> {
        self.inner
            .validate()
            .iter()
            .map(ToString::to_string)
            .collect()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn global_rounds(&self) -> usize {
        self.inner.training.global_rounds
    }

    #[setter]
    fn set_global_rounds(&mut self, rounds: usize) {
        self.inner.training.global_rounds = rounds;
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(devices={}, layers={}, seed={})",
            self.inner.device_count(),
            self.inner.layers.len(),
            self.inner.seed
        )
    }
}

/// The output of one run.
#[pyclass(name = "Result", module = "fogsim_py")]
struct PyResult_ {
    output: SimulationOutput,
    provenance: Provenance,
}

fn row_dict<'py>(py: Python<'py>, r: &MetricsRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("round", r.round)?;
    d.set_item("global_loss", r.global_loss)?;
    d.set_item("global_accuracy", r.global_accuracy)?;
    d.set_item("uplink_params", r.uplink_params)?;
    d.set_item("downlink_params", r.downlink_params)?;
    d.set_item("d2d_params", r.d2d_params)?;
    d.set_item("total_energy_j", r.total_energy_j)?;
    d.set_item("round_delay_s", r.round_delay_s)?;
    d.set_item("stragglers_dropped", r.stragglers_dropped)?;
    d.set_item("clusters_sampled", r.clusters_sampled)?;
    d.set_item("samples_moved", r.samples_moved)?;
    Ok(d)
}

#[pymethods]
impl PyResult_ {
    /// One dict per round, keyed by metric name.
    fn rows<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.output.rows.iter().map(|r| row_dict(py, r)).collect()
    }

    #[getter]
    fn final_params(&self) -> Vec<f64> {
        self.output.final_params.as_slice().to_vec()
    }

    #[getter]
    fn final_accuracy(&self) -> f64 {
        self.output.final_row().global_accuracy
    }

    #[getter]
    fn final_loss(&self) -> f64 {
        self.output.final_row().global_loss
    }

    #[getter]
    fn consensus_error(&self) -> Vec<Option<f64>> {
        self.output.consensus_error.clone()
    }

    #[getter]
    fn event_count(&self) -> usize {
        self.output.events.len()
    }

    fn metrics_csv(&self) -> String {
        metrics_csv(&self.output.rows, &self.provenance)
    }

    fn events_log(&self) -> String {
        events_log(&self.output.events, &self.provenance)
    }
}

fn wrap(
    config: &PyConfig,
    run: fn(&SimulationConfig) -> Result<SimulationOutput, SimError>,
) -> PyResult<PyResult_> {
    let output = run(&config.inner).map_err(sim_error)?;
    Ok(PyResult_ {
        output,
        provenance: Provenance::of(&config.inner),
    })
}

/// Runs the fog simulation.
#[pyfunction]
fn run_simulation(config: &PyConfig) -> PyResult<PyResult_> {
    wrap(config, sim::run_simulation)
}

/// Runs the star-topology FedAvg baseline on the same data.
#[pyfunction]
fn run_star(config: &PyConfig) -> PyResult<PyResult_> {
    wrap(config, sim::run_star)
}

/// Runs gradient descent on the pooled device data.
#[pyfunction]
fn run_centralized(config: &PyConfig) -> PyResult<PyResult_> {
    wrap(config, sim::run_centralized)
}

fn dataset(features: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<Dataset> {
    if features.len() != labels.len() {
        return Err(PyValueError::new_err(format!(
            "{} feature rows but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let samples = features
        .into_iter()
        .zip(labels)
        .map(|(x, y)| Sample::new(x, y))
        .collect();
    Ok(Dataset::new(None, samples))
}

/// Mean cross-entropy gradient. `params` is row-major, one row per class.
#[pyfunction]
fn compute_gradient(
    params: Vec<f64>,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
) -> PyResult<Vec<f64>> {
    let g = model::compute_gradient(
        &ParameterVector::from_vec(params),
        &dataset(features, labels)?,
    )
    .map_err(value_error)?;
    Ok(g.into_inner())
}

/// `steps` full-batch gradient-descent steps.
#[pyfunction]
fn local_update(
    params: Vec<f64>,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    steps: usize,
    lr: f64,
) -> PyResult<Vec<f64>> {
    let u = model::local_update(
        &ParameterVector::from_vec(params),
        &dataset(features, labels)?,
        steps,
        lr,
    )
    .map_err(value_error)?;
    Ok(u.params.into_inner())
}

/// `(loss, accuracy)` of a model on a labelled set.
#[pyfunction]
fn evaluate(params: Vec<f64>, features: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<(f64, f64)> {
    let r = model::evaluate(
        &ParameterVector::from_vec(params),
        &dataset(features, labels)?,
    )
    .map_err(value_error)?;
    Ok((r.loss, r.accuracy))
}

#[pyfunction]
fn weighted_average(vectors: Vec<Vec<f64>>, weights: Vec<f64>) -> PyResult<Vec<f64>> {
    let vectors: Vec<ParameterVector> =
        vectors.into_iter().map(ParameterVector::from_vec).collect();
    Ok(average(&vectors, &weights)
        .map_err(value_error)?
        .into_inner())
}

fn graph(rows: &[Vec<bool>]) -> PyResult<Adjacency> {
    let n = rows.len();
    if let Some((i, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
        return Err(PyValueError::new_err(format!(
            "row {i} has {} entries, expected {n}",
            row.len()
        )));
    }
    for (i, row) in rows.iter().enumerate() {
        if row[i] {
            return Err(PyValueError::new_err(format!("self loop at node {i}")));
        }
        if let Some(j) = (0..n).find(|&j| row[j] != rows[j][i]) {
            return Err(PyValueError::new_err(format!(
                "adjacency not symmetric at ({i}, {j})"
            )));
        }
    }
    Ok(Adjacency::from_rows(rows))
}

/// Lazy Metropolis weights for a connected symmetric adjacency matrix.
#[pyfunction]
fn mixing_matrix(adjacency: Vec<Vec<bool>>) -> PyResult<Vec<Vec<f64>>> {
    let m = build_mixing_matrix(&graph(&adjacency)?).map_err(value_error)?;
    let n = adjacency.len();
    Ok((0..n)
        .map(|i| (0..n).map(|j| m.get(i, j)).collect())
        .collect())
}

/// Noise-free average consensus: `rounds` mixing steps over the graph.
#[pyfunction]
fn consensus(
    states: Vec<Vec<f64>>,
    adjacency: Vec<Vec<bool>>,
    rounds: usize,
) -> PyResult<Vec<Vec<f64>>> {
    let m = build_mixing_matrix(&graph(&adjacency)?).map_err(value_error)?;
    let mut cur: Vec<ParameterVector> = states.into_iter().map(ParameterVector::from_vec).collect();
    for _ in 0..rounds {
        cur = consensus_round(&cur, &m).map_err(value_error)?;
    }
    Ok(cur.into_iter().map(ParameterVector::into_inner).collect())
}

#[pymodule]
fn fogsim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyResult_>()?;
    m.add_function(wrap_pyfunction!(run_simulation, m)?)?;
    m.add_function(wrap_pyfunction!(run_star, m)?)?;
    m.add_function(wrap_pyfunction!(run_centralized, m)?)?;
    m.add_function(wrap_pyfunction!(compute_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(local_update, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_average, m)?)?;
    m.add_function(wrap_pyfunction!(mixing_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(consensus, m)?)?;
    Ok(())
}

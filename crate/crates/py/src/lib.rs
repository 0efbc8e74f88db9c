//! Python bindings: the bound verifier, energy scoring, Top-K gating, data
//! partitioning, and the full experiment pipeline.

// The pyfunction macro expansion trips useless_conversion on PyResult returns.
#![allow(clippy::useless_conversion)]

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pmmoe_core::datagen::{
    generate_synthetic, partition_dirichlet, LabeledDataset, PartitionSpec, Sample,
};
use pmmoe_core::energy;
use pmmoe_core::harness::config::ExperimentConfig;
use pmmoe_core::harness::pipeline;
use pmmoe_core::moe::top_k_weights;
use pmmoe_core::theory::{self, TheoremParams};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Closed-form accuracy lower bound for a gated mixture of `experts` experts
/// of accuracy `accuracy` routed with advantage `advantage`.
#[pyfunction]
fn theorem_bound(experts: usize, accuracy: f64, advantage: f64) -> PyResult<f64> {
    let params = TheoremParams::new(experts, accuracy, advantage).map_err(err)?;
    theory::bound(&params).map_err(err)
}

/// Exact mixture accuracy by binomial enumeration.
#[pyfunction]
fn theorem_exact(experts: usize, accuracy: f64, advantage: f64) -> PyResult<f64> {
    let params = TheoremParams::new(experts, accuracy, advantage).map_err(err)?;
    theory::exact_pmpe(&params).map_err(err)
}

/// Monte Carlo estimate of the mixture accuracy; returns (estimate, se).
#[pyfunction]
#[pyo3(signature = (experts, accuracy, advantage, trials=100_000, seed=0))]
fn theorem_monte_carlo(
    experts: usize,
    accuracy: f64,
    advantage: f64,
    trials: usize,
    seed: u64,
) -> PyResult<(f64, f64)> {
    let params = TheoremParams::new(experts, accuracy, advantage).map_err(err)?;
    theory::monte_carlo_pmpe(&params, trials, seed).map_err(err)
}

/// Verify the bound over a grid of (experts, accuracy, advantage) triples.
/// Returns one dict per grid point.
#[pyfunction]
#[pyo3(signature = (grid, trials=100_000, seed=0))]
fn verify_bound(
    py: Python<'_>,
    grid: Vec<(usize, f64, f64)>,
    trials: usize,
    seed: u64,
) -> PyResult<Vec<PyObject>> {
    let params: Vec<TheoremParams> = grid
        .into_iter()
        .map(|(m, p, a)| TheoremParams::new(m, p, a).map_err(err))
        .collect::<PyResult<_>>()?;
    let checks = theory::verify_bound(&params, trials, seed).map_err(err)?;
    checks
        .into_iter()
        .map(|c| {
            let d = PyDict::new_bound(py);
            d.set_item("experts", c.params.experts)?;
            d.set_item("accuracy", c.params.accuracy)?;
            d.set_item("advantage", c.params.advantage)?;
            d.set_item("bound", c.bound)?;
            d.set_item("exact", c.exact)?;
            d.set_item("mc_estimate", c.mc_estimate)?;
            d.set_item("mc_se", c.mc_se)?;
            d.set_item("pass", c.pass)?;
            Ok(d.into())
        })
        .collect()
}

/// Similarity confidence of two representation vectors (temperature-weighted
/// logsumexp of the normalized alignment profile).
#[pyfunction]
#[pyo3(signature = (h_j, h_k, temperature=1.0))]
fn energy_confidence(h_j: Vec<f64>, h_k: Vec<f64>, temperature: f64) -> PyResult<f64> {
    if h_j.len() != h_k.len() {
        return Err(PyValueError::new_err("vectors must have equal length"));
    }
    energy::confidence(&h_j, &h_k, temperature).map_err(err)
}

/// Normalized elementwise alignment profile; None when either vector is zero.
#[pyfunction]
fn projected_vector(h_j: Vec<f64>, h_k: Vec<f64>) -> PyResult<Option<Vec<f64>>> {
    if h_j.len() != h_k.len() {
        return Err(PyValueError::new_err("vectors must have equal length"));
    }
    Ok(energy::projected_vector(&h_j, &h_k))
}

/// Masked softmax + Top-K + renormalization over routing logits.
/// Returns (weights, selected_indices).
#[pyfunction]
#[pyo3(signature = (logits, k, active=None))]
fn gate_weights(
    logits: Vec<f64>,
    k: usize,
    active: Option<Vec<bool>>,
) -> PyResult<(Vec<f64>, Vec<usize>)> {
    let active = active.unwrap_or_else(|| vec![true; logits.len()]);
    if active.len() != logits.len() {
        return Err(PyValueError::new_err("active mask length must match logits"));
    }
    let out = top_k_weights(&logits, &active, k).map_err(err)?;
    Ok((out.weights, out.selected))
}

/// Gaussian-cluster dataset; returns (features, labels).
#[pyfunction]
#[pyo3(signature = (classes, input_dim, per_class, spread=0.25, seed=0))]
fn synthetic_dataset(
    classes: usize,
    input_dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let data = generate_synthetic(classes, input_dim, per_class, spread, seed).map_err(err)?;
    let features = data.samples().iter().map(|s| s.features.clone()).collect();
    let labels = data.samples().iter().map(|s| s.label).collect();
    Ok((features, labels))
}

/// Partition labeled samples across clients: a shared fraction of every class
/// split evenly, the rest by a per-class Dirichlet draw. Returns per-client
/// index lists.
#[pyfunction]
#[pyo3(signature = (labels, clients, shared_percent=0.0, beta=0.1, seed=0))]
fn partition_by_class(
    labels: Vec<usize>,
    clients: usize,
    shared_percent: f64,
    beta: f64,
    seed: u64,
) -> PyResult<Vec<Vec<usize>>> {
    let class_count = labels.iter().max().map_or(0, |m| m + 1).max(1);
    let samples: Vec<Sample> = labels
        .into_iter()
        .map(|label| Sample {
            features: vec![0.0, 0.0],
            label,
        })
        .collect();
    let data = LabeledDataset::new(samples, 2, class_count).map_err(err)?;
    let spec = PartitionSpec {
        clients,
        shared_percent,
        beta,
        seed,
    };
    let partition = partition_dirichlet(&data, &spec).map_err(err)?;
    Ok((0..clients).map(|j| partition.indices(j).to_vec()).collect())
}

/// The built-in configuration defaults as a parseable config string.
#[pyfunction]
fn default_config() -> String {
    ExperimentConfig::default().render()
}

/// An experiment configuration plus the pipeline to run it.
#[pyclass]
struct Experiment {
    cfg: ExperimentConfig,
}

#[pymethods]
impl Experiment {
    /// Build from config text (empty string for the defaults).
    #[new]
    #[pyo3(signature = (config_text=""))]
    fn new(config_text: &str) -> PyResult<Self> {
        let cfg = ExperimentConfig::from_str(config_text).map_err(err)?;
        Ok(Experiment { cfg })
    }

    /// Override one configuration key. Cross-key validation happens at
    /// `run`, so keys may be set in any order.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.cfg.set(key, value).map_err(err)
    }

    /// Render the effective configuration.
    fn render(&self) -> String {
        self.cfg.render()
    }

    /// Run the full pipeline, writing artifacts under `out_dir`. Returns a
    /// dict with the weighted accuracies and per-client rows.
    #[pyo3(signature = (out_dir, theorem_trials=100_000))]
    fn run(&self, py: Python<'_>, out_dir: &str, theorem_trials: usize) -> PyResult<PyObject> {
        let mut cfg = self.cfg.clone();
        cfg.out_dir = PathBuf::from(out_dir);
        cfg.validate().map_err(err)?;
        let summary = pipeline::run_experiment(&cfg, theorem_trials)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        let rows: Vec<PyObject> = summary
            .rows
            .iter()
            .map(|r| {
                let d = PyDict::new_bound(py);
                d.set_item("client", r.client)?;
                d.set_item("train_count", r.train_count)?;
                d.set_item("phase1_accuracy", r.phase1_accuracy)?;
                d.set_item("phase2_accuracy", r.phase2_accuracy)?;
                Ok(d.into())
            })
            .collect::<PyResult<_>>()?;
        let out = PyDict::new_bound(py);
        out.set_item("phase1_a_total", summary.phase1_a_total)?;
        out.set_item("phase2_a_total", summary.phase2_a_total)?;
        out.set_item("clients", rows)?;
        Ok(out.into())
    }
}

#[pymodule]
fn pmmoe_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(theorem_bound, m)?)?;
    m.add_function(wrap_pyfunction!(theorem_exact, m)?)?;
    m.add_function(wrap_pyfunction!(theorem_monte_carlo, m)?)?;
    m.add_function(wrap_pyfunction!(verify_bound, m)?)?;
    m.add_function(wrap_pyfunction!(energy_confidence, m)?)?;
    m.add_function(wrap_pyfunction!(projected_vector, m)?)?;
    m.add_function(wrap_pyfunction!(gate_weights, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(partition_by_class, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_class::<Experiment>()?;
    Ok(())
}

//! Python bindings: box geometry, crowd profiles, seeded experiments and
//! calibration. Structured results cross the boundary as JSON strings.

use std::path::PathBuf;

use nimbus_core::crowd::{calibrate as fit_profile, CalibrationGrid, CalibrationTargets};
use nimbus_core::geometry::{self, BoundingBox as CoreBox};
use nimbus_core::harness::{self, DEFAULT_SEED};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

create_exception!(nimbus, NimbusError, PyException);
create_exception!(nimbus, NonConvergenceError, NimbusError);

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn nimbus_err(e: impl std::fmt::Display) -> PyErr {
    NimbusError::new_err(e.to_string())
}

fn to_json(v: &impl serde::Serialize) -> PyResult<String> {
    serde_json::to_string(v).map_err(nimbus_err)
}

#[pyclass(name = "BoundingBox", module = "nimbus", frozen, eq, from_py_object)]
#[derive(Clone, PartialEq)]
pub struct PyBox(CoreBox);

#[pymethods]
impl PyBox {
    #[new]
    fn new(left: f64, top: f64, right: f64, bottom: f64) -> PyResult<Self> {
        CoreBox::new(left, top, right, bottom).map(Self).map_err(value_err)
    }

    #[getter]
    fn left(&self) -> f64 {
        self.0.left
    }
    #[getter]
    fn top(&self) -> f64 {
        self.0.top
    }
    #[getter]
    fn right(&self) -> f64 {
        self.0.right
    }
    #[getter]
    fn bottom(&self) -> f64 {
        self.0.bottom
    }
    #[getter]
    fn width(&self) -> f64 {
        self.0.width()
    }
    #[getter]
    fn height(&self) -> f64 {
        self.0.height()
    }

    fn coords(&self) -> (f64, f64, f64, f64) {
        let [l, t, r, b] = self.0.coords();
        (l, t, r, b)
    }

    /// Mean squared coordinate error against `other`.
    fn mse(&self, other: &PyBox) -> f64 {
        geometry::box_mse(&self.0, &other.0)
    }

    fn translate(&self, dx: f64, dy: f64) -> Self {
        Self(self.0.translate(dx, dy))
    }

    fn clamp(&self, width: f64, height: f64) -> Self {
        Self(geometry::clamp_box(&self.0, width, height))
    }

    fn fits_within(&self, width: f64, height: f64) -> bool {
        self.0.fits_within(width, height)
    }

    fn __repr__(&self) -> String {
        let b = &self.0;
        format!("BoundingBox({}, {}, {}, {})", b.left, b.top, b.right, b.bottom)
    }
}

fn unwrap_boxes(boxes: Vec<PyRef<'_, PyBox>>) -> Vec<CoreBox> {
    boxes.iter().map(|b| b.0).collect()
}

#[pyfunction]
fn mean_box(boxes: Vec<PyRef<'_, PyBox>>) -> PyResult<PyBox> {
    geometry::mean_box(&unwrap_boxes(boxes)).map(PyBox).map_err(value_err)
}

#[pyfunction]
fn box_mse(a: &PyBox, b: &PyBox) -> f64 {
    geometry::box_mse(&a.0, &b.0)
}

/// Returns `(mse_mean, mse_std)` of `boxes` against `baseline`.
#[pyfunction]
fn quality_stats(boxes: Vec<PyRef<'_, PyBox>>, baseline: &PyBox) -> PyResult<(f64, f64)> {
    let q = geometry::quality_stats(&unwrap_boxes(boxes), &baseline.0).map_err(value_err)?;
    Ok((q.mse_mean, q.mse_std))
}

#[pyfunction]
fn filter_outliers(boxes: Vec<PyRef<'_, PyBox>>, z_threshold: f64) -> PyResult<Vec<PyBox>> {
    let kept = geometry::filter_outliers(&unwrap_boxes(boxes), z_threshold).map_err(value_err)?;
    Ok(kept.into_iter().map(PyBox).collect())
}

#[pyclass(name = "CrowdProfile", module = "nimbus", from_py_object)]
#[derive(Clone)]
pub struct PyProfile(nimbus_core::crowd::CrowdProfile);

#[pymethods]
impl PyProfile {
    /// The shipped profile calibrated against the reference summaries.
    #[staticmethod]
    fn paper2016() -> Self {
        Self(nimbus_core::crowd::CrowdProfile::paper2016())
    }

    /// Fixed find and work times with no annotation error.
    #[staticmethod]
    fn deterministic(find_s: f64, work_s: f64) -> Self {
        Self(nimbus_core::crowd::CrowdProfile::deterministic(find_s, work_s))
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        nimbus_core::crowd::CrowdProfile::from_toml_str(text)
            .map(Self)
            .map_err(value_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        nimbus_core::crowd::CrowdProfile::load(&path)
            .map(Self)
            .map_err(value_err)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.0.to_toml_string().map_err(nimbus_err)
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.0)
    }

    #[getter]
    fn name(&self) -> String {
        self.0.name.clone()
    }
    #[getter]
    fn find_latency_log_mu(&self) -> f64 {
        self.0.find_latency_log_mu
    }
    #[getter]
    fn find_latency_log_sigma(&self) -> f64 {
        self.0.find_latency_log_sigma
    }
    #[getter]
    fn gross_error_prob(&self) -> f64 {
        self.0.gross_error_prob
    }
    #[setter]
    fn set_gross_error_prob(&mut self, p: f64) -> PyResult<()> {
        let mut next = self.0.clone();
        next.gross_error_prob = p;
        next.validate().map_err(value_err)?;
        self.0 = next;
        Ok(())
    }
    #[getter]
    fn rollover_stages(&self) -> u32 {
        self.0.rollover_stages
    }
}

#[pyclass(name = "TrialReport", module = "nimbus", frozen)]
pub struct PyReport(harness::TrialReport);

#[pymethods]
impl PyReport {
    #[getter]
    fn strategy(&self) -> String {
        self.0.strategy.clone()
    }
    #[getter]
    fn n_trials(&self) -> usize {
        self.0.n_trials
    }
    #[getter]
    fn latencies_s(&self) -> Vec<f64> {
        self.0.latencies_s.clone()
    }
    #[getter]
    fn latency_median(&self) -> f64 {
        self.0.latency_median
    }
    #[getter]
    fn mse_mean(&self) -> f64 {
        self.0.mse_mean
    }
    #[getter]
    fn mse_std(&self) -> f64 {
        self.0.mse_std
    }
    #[getter]
    fn mse_truth_mean(&self) -> f64 {
        self.0.mse_truth_mean
    }
    #[getter]
    fn excluded(&self) -> usize {
        self.0.excluded.len()
    }

    fn trials_csv(&self) -> PyResult<String> {
        harness::trials_csv(&self.0).map_err(nimbus_err)
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.0)
    }
}

/// Runs seeded simulated trials of `strategy` ("one-shot", "rollover" or "parallel").
#[pyfunction]
#[pyo3(signature = (strategy, profile=None, trials=20, seed=DEFAULT_SEED))]
fn run_experiment(
    py: Python<'_>,
    strategy: &str,
    profile: Option<PyProfile>,
    trials: usize,
    seed: u64,
) -> PyResult<PyReport> {
    let profile = profile.map_or_else(nimbus_core::crowd::CrowdProfile::paper2016, |p| p.0);
    let config = harness::default_strategy(strategy, &profile)
        .ok_or_else(|| PyValueError::new_err(format!("unknown strategy {strategy}")))?;
    py.detach(|| harness::run_experiment(&config, &profile, trials, seed))
        .map(PyReport)
        .map_err(nimbus_err)
}

/// Returns `(table, csv)` for reports laid side by side.
#[pyfunction]
fn compare(reports: Vec<PyRef<'_, PyReport>>) -> PyResult<(String, String)> {
    let owned: Vec<harness::TrialReport> = reports.iter().map(|r| r.0.clone()).collect();
    let c = harness::compare(&owned).map_err(nimbus_err)?;
    Ok((c.table, c.csv))
}

/// Fits a profile to the reference summaries, or to a targets TOML file.
/// Returns the profile and the fit summary as JSON.
#[pyfunction]
#[pyo3(signature = (seed=DEFAULT_SEED, targets=None, replications=None, max_stages=None))]
fn calibrate(
    py: Python<'_>,
    seed: u64,
    targets: Option<PathBuf>,
    replications: Option<usize>,
    max_stages: Option<u32>,
) -> PyResult<(PyProfile, String)> {
    let mut t = match targets {
        Some(p) => CalibrationTargets::load(&p).map_err(value_err)?,
        None => CalibrationTargets::paper2016(),
    };
    if let Some(k) = max_stages {
        t.max_stages = k;
    }
    let mut grid = CalibrationGrid::default();
    if let Some(r) = replications {
        grid.replications = r;
    }
    match py.detach(|| fit_profile(&t, &grid, seed)) {
        Ok(fit) => Ok((PyProfile(fit.profile.clone()), to_json(&fit)?)),
        Err(e @ nimbus_core::crowd::CalibrationError::NonConvergence { .. }) => {
            Err(NonConvergenceError::new_err(e.to_string()))
        }
        Err(e) => Err(nimbus_err(e)),
    }
}

#[pymodule]
fn nimbus(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NimbusError", m.py().get_type::<NimbusError>())?;
    m.add("NonConvergenceError", m.py().get_type::<NonConvergenceError>())?;
    m.add("DEFAULT_SEED", DEFAULT_SEED)?;
    m.add_class::<PyBox>()?;
    m.add_class::<PyProfile>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(mean_box, m)?)?;
    m.add_function(wrap_pyfunction!(box_mse, m)?)?;
    m.add_function(wrap_pyfunction!(quality_stats, m)?)?;
    m.add_function(wrap_pyfunction!(filter_outliers, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    Ok(())
}

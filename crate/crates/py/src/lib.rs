//! Python bindings: weights, curve fitting, the exact solver, scenario runs,
//! replay and verification.

use std::collections::BTreeMap;
use std::path::PathBuf;

use klb_core::explore::{fit_curve as core_fit, predict_latency_f};
use klb_core::ilp::{brute_force_oracle, solve_exact as core_solve, Assignment, Choice, IlpInstance};
use klb_core::scenario::{self, RunOutput, Scenario as CoreScenario};
use klb_core::types::{self, DipId, LatencySample, Resolution, Weight, WeightLatencyCurve};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err(e: klb_core::Error) -> PyErr {
    match e {
        klb_core::Error::Io(_) | klb_core::Error::ReplayDivergence { .. } | klb_core::Error::Invariant(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

fn weight(x: f64) -> PyResult<Weight> {
    Resolution::DEFAULT.quantize(x).map_err(err)
}

/// Rounds to the default weight resolution.
#[pyfunction]
fn quantize(x: f64) -> PyResult<f64> {
    Ok(weight(x)?.value())
}

/// Rescales weights so they sum to exactly 1.
#[pyfunction]
fn normalize(weights: BTreeMap<u32, f64>) -> PyResult<BTreeMap<u32, f64>> {
    let q = weights
        .into_iter()
        .map(|(d, w)| Ok((DipId(d), weight(w)?)))
        .collect::<PyResult<BTreeMap<_, _>>>()?;
    Ok(types::normalize(&q)
        .map_err(err)?
        .into_iter()
        .map(|(d, w)| (d.0, w.value()))
        .collect())
}

#[pyclass(module = "klb", frozen)]
struct Curve {
    inner: WeightLatencyCurve,
}

#[pymethods]
impl Curve {
    #[getter]
    fn coeffs(&self) -> Option<[f64; 3]> {
        self.inner.coeffs
    }

    #[getter]
    fn w_max(&self) -> f64 {
        self.inner.w_max().value()
    }

    #[getter]
    fn l0(&self) -> f64 {
        self.inner.l0
    }

    fn predict(&self, w: f64) -> PyResult<f64> {
        predict_latency_f(&self.inner, w).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Curve(coeffs={:?}, w_max={}, l0={})", self.inner.coeffs, self.w_max(), self.inner.l0)
    }
}

/// Fits a weight-latency curve from `(weight, latency_ms, dropped)` samples.
#[pyfunction]
#[pyo3(signature = (samples, l0, w_max, dip=0))]
fn fit_curve(samples: Vec<(f64, f64, bool)>, l0: f64, w_max: f64, dip: u32) -> PyResult<Curve> {
    let s = samples
        .iter()
        .enumerate()
        .map(|(i, &(w, l, d))| LatencySample::new(DipId(dip), weight(w)?, l, d, i as f64, 1).map_err(err))
        .collect::<PyResult<Vec<_>>>()?;
    Ok(Curve {
        inner: core_fit(&s, l0, weight(w_max)?, 0.0).map_err(err)?,
    })
}

fn instance(options: Vec<Vec<(f64, f64)>>, total: f64, theta: Option<f64>, epsilon: f64) -> PyResult<IlpInstance> {
    let dips = (0..options.len() as u32).map(DipId).collect();
    let opts = options
        .into_iter()
        .map(|o| {
            o.into_iter()
                .map(|(w, l)| Ok(Choice { weight: weight(w)?, latency: l }))
                .collect::<PyResult<Vec<_>>>()
        })
        .collect::<PyResult<Vec<_>>>()?;
    let theta = theta.map(weight).transpose()?;
    IlpInstance::new(dips, opts, theta, total, epsilon, Resolution::DEFAULT).map_err(err)
}

fn assignment(a: Assignment) -> (Vec<f64>, f64) {
    (a.choice.values().map(|w| w.value()).collect(), a.objective)
}

/// Exact solve of one candidate `(weight, latency)` list per DIP. Returns the
/// chosen weights in DIP order and the objective.
#[pyfunction]
#[pyo3(signature = (options, total=1.0, theta=None, epsilon=0.01))]
fn solve_exact(options: Vec<Vec<(f64, f64)>>, total: f64, theta: Option<f64>, epsilon: f64) -> PyResult<(Vec<f64>, f64)> {
    let inst = instance(options, total, theta, epsilon)?;
    Ok(assignment(core_solve(&inst).map_err(err)?))
}

/// Exhaustive reference solver; same arguments as `solve_exact`.
#[pyfunction]
#[pyo3(signature = (options, total=1.0, theta=None, epsilon=0.01))]
fn oracle(options: Vec<Vec<(f64, f64)>>, total: f64, theta: Option<f64>, epsilon: f64) -> PyResult<(Vec<f64>, f64)> {
    let inst = instance(options, total, theta, epsilon)?;
    Ok(assignment(brute_force_oracle(&inst).map_err(err)?))
}

#[pyclass(module = "klb")]
struct Scenario {
    inner: CoreScenario,
}

#[pymethods]
impl Scenario {
    /// A preset name or a path to a TOML file.
    #[new]
    fn new(name_or_path: &str) -> PyResult<Self> {
        Ok(Scenario { inner: CoreScenario::resolve(name_or_path).map_err(err)? })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Scenario { inner: CoreScenario::from_toml(text).map_err(err)? })
    }

    #[staticmethod]
    fn presets() -> Vec<&'static str> {
        scenario::PRESETS.to_vec()
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, s: u64) {
        self.inner.seed = s;
    }

    #[getter]
    fn duration(&self) -> f64 {
        self.inner.duration
    }

    #[setter]
    fn set_duration(&mut self, d: f64) -> PyResult<()> {
        let mut sc = self.inner.clone();
        sc.duration = d;
        sc.warmup = sc.warmup.min(d / 2.0);
        sc.events.retain(|e| e.at <= d);
        sc.validate().map_err(err)?;
        self.inner = sc;
        Ok(())
    }

    #[getter]
    fn policy(&self) -> String {
        self.inner.policy.to_string()
    }

    #[setter]
    fn set_policy(&mut self, p: &str) -> PyResult<()> {
        self.inner.policy = p.parse().map_err(|e| PyValueError::new_err(format!("{e}")))?;
        Ok(())
    }

    /// Runs the simulation; releases the GIL while it does.
    fn run(&self, py: Python<'_>) -> PyResult<Run> {
        let sc = self.inner.clone();
        let out = py.detach(move || scenario::run_scenario(&sc)).map_err(err)?;
        Ok(Run { inner: out })
    }
}

#[pyclass(module = "klb", frozen)]
struct Run {
    inner: RunOutput,
}

#[pymethods]
impl Run {
    #[getter]
    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json(py, &self.inner.summary)
    }

    /// Final programmed weights by 1-based DIP number.
    #[getter]
    fn weights(&self) -> BTreeMap<u32, f64> {
        self.inner
            .programs
            .last()
            .map(|(_, w)| w.iter().map(|(d, x)| (d.0 + 1, x.value())).collect())
            .unwrap_or_default()
    }

    #[getter]
    fn digest(&self) -> String {
        format!("{:016x}", self.inner.digest)
    }

    fn metrics_csv(&self) -> String {
        self.inner.metrics_csv()
    }

    fn decisions_csv(&self) -> String {
        self.inner.decisions_csv()
    }

    fn store_csv(&self) -> String {
        self.inner.store.to_csv()
    }

    fn violations(&self) -> Vec<String> {
        self.inner.violations()
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.write(&dir).map_err(err)
    }
}

/// Replays a run directory; raises on divergence.
#[pyfunction]
fn replay<'py>(py: Python<'py>, dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    json(py, &scenario::replay_dir(&dir).map_err(err)?)
}

/// Summary fields of a run directory that its CSVs do not reproduce.
#[pyfunction]
fn verify<'py>(py: Python<'py>, dir: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    json(py, &scenario::verify_dir(&dir).map_err(err)?)
}

#[pyfunction]
#[pyo3(signature = (sizes, points=10, repeats=1, seed=1))]
fn ilp_bench<'py>(py: Python<'py>, sizes: Vec<usize>, points: usize, repeats: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    json(py, &scenario::ilp_bench(&sizes, points, repeats, seed).map_err(err)?)
}

#[pymodule]
fn klb(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(fit_curve, m)?)?;
    m.add_function(wrap_pyfunction!(solve_exact, m)?)?;
    m.add_function(wrap_pyfunction!(oracle, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(ilp_bench, m)?)?;
    m.add_class::<Curve>()?;
    m.add_class::<Scenario>()?;
    m.add_class::<Run>()?;
    Ok(())
}

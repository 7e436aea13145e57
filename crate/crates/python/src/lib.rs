//! Python bindings. Options are passed as keyword arguments with snake_case
//! names and go through the same serde schema as the TOML configuration.

use nalgebra::DVector;
use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde_json::Value;

use ddp::direction::{compute_direction, DirectionOptions};
use ddp::harness::{cold_start_campaign, compare_factorizations, run as run_config, RunConfig};
use ddp::model::{assemble_dense_kkt, LqApproximation, Problem as CoreProblem, Step};
use ddp::problems::lq::{random_lq, RandomLqDims};
use ddp::problems::{build, cold_start, ProblemSpec};
use ddp::saddle::solve_kkt_dense;
use ddp::solver::{solve as core_solve, SolverOptions};
use ddp::Error;

create_exception!(endpoint_ddp, SolverError, PyRuntimeError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidOption(_) | Error::UnknownFamily(_) | Error::DimensionMismatch(_) => PyValueError::new_err(e.to_string()),
        e => SolverError::new_err(format!("{e:?}: {e}")),
    }
}

fn kebab(v: Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(m.into_iter().map(|(k, v)| (k.replace('_', "-"), kebab(v))).collect()),
        v => v,
    }
}

/// Python mapping -> serde value via the json module (keys made kebab-case).
fn py_to_value(py: Python<'_>, obj: Option<&Bound<'_, PyDict>>) -> PyResult<Value> {
    let Some(obj) = obj else {
        return Ok(Value::Object(Default::default()));
    };
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    let v: Value = serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(kebab(v))
}

fn value_to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_value<T: serde::de::DeserializeOwned>(v: Value) -> PyResult<T> {
    serde_json::from_value(v).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn vecs(v: &[DVector<f64>]) -> Vec<Vec<f64>> {
    v.iter().map(|x| x.iter().copied().collect()).collect()
}

fn dvecs(v: Vec<Vec<f64>>) -> Vec<DVector<f64>> {
    v.into_iter().map(DVector::from_vec).collect()
}

/// A built-in problem instance.
#[pyclass(frozen)]
struct Problem {
    spec: ProblemSpec,
    inner: CoreProblem,
}

#[pymethods]
impl Problem {
    /// `Problem("dpend-inverse", horizon=100, terminal_weight=10.0)`.
    #[new]
    #[pyo3(signature = (family, **overrides))]
    fn new(py: Python<'_>, family: &str, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut v = py_to_value(py, overrides)?;
        v["family"] = Value::String(family.to_string());
        let spec: ProblemSpec = from_value(v)?;
        let inner = build(&spec).map_err(to_py)?;
        Ok(Self { spec, inner })
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon()
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    #[getter]
    fn control_dims(&self) -> Vec<usize> {
        self.inner.control_dims()
    }

    #[getter]
    fn endpoint_dim(&self) -> usize {
        self.inner.endpoint_dim()
    }

    /// Effective problem description (all defaults filled in).
    fn spec<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        value_to_py(py, &self.spec)
    }

    /// Seeded uniform perturbation of the constant guess: `(xs, us)`.
    #[pyo3(signature = (seed=0, magnitude=0.0))]
    fn cold_start(&self, seed: u64, magnitude: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let (xs, us) = cold_start(&self.inner, seed, magnitude);
        (vecs(&xs), vecs(&us))
    }

    /// Roll the dynamics forward from the initial state.
    fn simulate(&self, us: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
        vecs(&self.inner.simulate(&dvecs(us)))
    }

    fn __repr__(&self) -> String {
        format!("Problem({:?}, horizon={})", self.spec.family, self.inner.horizon())
    }
}

/// Outcome of `solve`.
#[pyclass(frozen, get_all)]
struct Solution {
    status: String,
    iterations: usize,
    cost: f64,
    endpoint_l1: f64,
    infeasibility_l1: f64,
    kkt_residuals: Vec<f64>,
    xs: Vec<Vec<f64>>,
    us: Vec<Vec<f64>>,
    endpoint_multiplier: Vec<f64>,
    total_seconds: f64,
}

#[pymethods]
impl Solution {
    fn __repr__(&self) -> String {
        format!("Solution(status={:?}, iterations={}, endpoint_l1={:.3e})", self.status, self.iterations, self.endpoint_l1)
    }
}

/// Solve from `(xs, us)` (default: cold start with `seed`/`magnitude`).
/// Remaining keyword arguments are solver options, e.g. `hessian="exact"`.
#[pyfunction]
#[pyo3(signature = (problem, xs=None, us=None, seed=0, magnitude=0.0, **options))]
fn solve(
    py: Python<'_>,
    problem: &Problem,
    xs: Option<Vec<Vec<f64>>>,
    us: Option<Vec<Vec<f64>>>,
    seed: u64,
    magnitude: f64,
    options: Option<&Bound<'_, PyDict>>,
) -> PyResult<Solution> {
    let opts: SolverOptions = from_value(py_to_value(py, options)?)?;
    let (x0, u0) = cold_start(&problem.inner, seed, magnitude);
    let xs = xs.map(dvecs).unwrap_or(x0);
    let us = us.map(dvecs).unwrap_or(u0);
    let (it, stats) = py.detach(|| core_solve(&problem.inner, &xs, &us, &opts)).map_err(to_py)?;
    Ok(Solution {
        status: format!("{:?}", stats.status),
        iterations: stats.iterations,
        cost: it.cost,
        endpoint_l1: it.endpoint_gap_l1(),
        infeasibility_l1: it.infeasibility_l1(),
        kkt_residuals: stats.kkt_residuals,
        xs: vecs(&it.xs),
        us: vecs(&it.us),
        endpoint_multiplier: it.endpoint_multiplier.iter().copied().collect(),
        total_seconds: stats.total_seconds,
    })
}

/// Random LQ subproblem, for checking the Riccati direction against the
/// dense KKT solve.
#[pyclass(frozen)]
struct RandomLq {
    inner: LqApproximation,
}

fn step_dict<'py>(py: Python<'py>, s: &Step) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("dx", vecs(&s.dx))?;
    d.set_item("du", vecs(&s.du))?;
    d.set_item("endpoint_multiplier", s.endpoint_multiplier.iter().copied().collect::<Vec<_>>())?;
    Ok(d)
}

#[pymethods]
impl RandomLq {
    #[new]
    #[pyo3(signature = (seed, horizon, state_dim, control_dim, constraint_dim=0, endpoint_dim=0))]
    fn new(seed: u64, horizon: usize, state_dim: usize, control_dim: usize, constraint_dim: usize, endpoint_dim: usize) -> PyResult<Self> {
        let dims = RandomLqDims { horizon, state_dim, control_dim, constraint_dim, endpoint_dim };
        if horizon == 0 || state_dim == 0 || constraint_dim >= control_dim || endpoint_dim > dims.max_endpoint_dim() {
            return Err(PyValueError::new_err("invalid dimensions"));
        }
        Ok(Self { inner: random_lq(seed, dims) })
    }

    /// Riccati direction; keyword arguments are direction options.
    #[pyo3(signature = (reg=0.0, **options))]
    fn direction<'py>(&self, py: Python<'py>, reg: f64, options: Option<&Bound<'_, PyDict>>) -> PyResult<Bound<'py, PyDict>> {
        let opts: DirectionOptions = from_value(py_to_value(py, options)?)?;
        let dir = compute_direction(&self.inner, reg, &opts).map_err(to_py)?;
        step_dict(py, &dir.step)
    }

    /// Same step from a dense factorization of the full KKT matrix.
    fn dense<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let (sys, layout) = assemble_dense_kkt(&self.inner);
        let sol = solve_kkt_dense(&sys).map_err(to_py)?;
        step_dict(py, &Step::unpack(&self.inner, &layout, &sol.w, &sol.y))
    }
}

/// Run a CLI command (`run`, `compare`, `campaign`) on a TOML configuration
/// string; returns the summary/report as Python objects.
#[pyfunction]
#[pyo3(signature = (config, command="run"))]
fn run<'py>(py: Python<'py>, config: &str, command: &str) -> PyResult<Bound<'py, PyAny>> {
    let cfg = RunConfig::from_toml(config).map_err(to_py)?;
    match command {
        "run" => {
            let out = py.detach(|| run_config(&cfg)).map_err(to_py)?;
            value_to_py(py, &out.summary)
        }
        "compare" => value_to_py(py, &py.detach(|| compare_factorizations(&cfg)).map_err(to_py)?),
        "campaign" => value_to_py(py, &py.detach(|| cold_start_campaign(&cfg)).map_err(to_py)?),
        c => Err(PyValueError::new_err(format!("unknown command `{c}`"))),
    }
}

#[pymodule]
fn endpoint_ddp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Problem>()?;
    m.add_class::<Solution>()?;
    m.add_class::<RandomLq>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add("SolverError", m.py().get_type::<SolverError>())?;
    m.add("FAMILIES", ddp::problems::FAMILIES.to_vec())?;
    Ok(())
}

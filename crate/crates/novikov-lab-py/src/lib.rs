use std::path::PathBuf;
use std::sync::Arc;

use novikov_lab::cli_runner::{run, RunConfig, RunOptions};
use novikov_lab::gradient_flow::{incidence_table, FlowOptions};
use novikov_lab::model_manifold::{presets, CriticalPoint, ManifoldSpec, ModelManifold, TrigTerm, ZeroOptions};
use novikov_lab::novikov_complex::{assemble, homology_ranks, specialize, verify_d_squared, NovikovComplex};
use novikov_lab::novikov_ring::{Lattice, RingElement};
use novikov_lab::witten_spectral::{build_delta_t, spectrum as eigen_spectrum, EigenOptions};
use num_complex::Complex64;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Truncated Novikov ring element with exact rational coefficients.
#[pyclass(name = "RingElement", module = "pynovikov", frozen)]
struct PyRingElement {
    inner: RingElement,
}

#[pymethods]
impl PyRingElement {
    /// `terms` is a list of `(lattice_point, integer_coefficient)` pairs.
    #[staticmethod]
    #[pyo3(signature = (periods, terms, action_bound = f64::INFINITY))]
    fn from_integers(periods: Vec<f64>, terms: Vec<(Vec<i64>, i64)>, action_bound: f64) -> PyResult<Self> {
        let lattice = Lattice::new(periods).map_err(value_err)?;
        let inner = RingElement::from_integers(&lattice, terms, action_bound).map_err(value_err)?;
        Ok(PyRingElement { inner })
    }

    #[getter]
    fn action_bound(&self) -> f64 {
        self.inner.action_bound()
    }

    /// `(lattice_point, coefficient)` pairs, coefficients as `"p/q"` strings.
    fn terms(&self) -> Vec<(Vec<i64>, String)> {
        self.inner.terms().iter().map(|(p, c)| (p.clone(), c.to_string())).collect()
    }

    fn convolve(&self, other: &PyRingElement) -> PyResult<Self> {
        Ok(PyRingElement { inner: self.inner.convolve(&other.inner).map_err(value_err)? })
    }

    fn __add__(&self, other: &PyRingElement) -> PyResult<Self> {
        Ok(PyRingElement { inner: self.inner.add(&other.inner).map_err(value_err)? })
    }

    fn __mul__(&self, other: &PyRingElement) -> PyResult<Self> {
        self.convolve(other)
    }

    fn evaluate(&self, s: Complex64) -> Complex64 {
        self.inner.evaluate(s)
    }

    fn __repr__(&self) -> String {
        format!("RingElement({} terms, action_bound={})", self.inner.terms().len(), self.inner.action_bound())
    }
}

#[pyclass(name = "CriticalPoint", module = "pynovikov", frozen)]
struct PyCriticalPoint {
    inner: CriticalPoint,
}

#[pymethods]
impl PyCriticalPoint {
    #[getter]
    fn id(&self) -> usize {
        self.inner.id
    }

    #[getter]
    fn position(&self) -> Vec<f64> {
        self.inner.position.clone()
    }

    #[getter]
    fn index(&self) -> usize {
        self.inner.index
    }

    #[getter]
    fn eigenvalues(&self) -> Vec<f64> {
        self.inner.eigenvalues.clone()
    }

    #[getter]
    fn h_value(&self) -> f64 {
        self.inner.h_value
    }

    fn __repr__(&self) -> String {
        format!("CriticalPoint(id={}, index={}, position={:?})", self.inner.id, self.inner.index, self.inner.position)
    }
}

/// Flat torus with the closed one-form `sum periods_i dtheta_i + dF`.
#[pyclass(name = "Manifold", module = "pynovikov", frozen)]
struct PyManifold {
    inner: Arc<ModelManifold>,
}

impl PyManifold {
    fn wrap(spec: ManifoldSpec) -> PyResult<Self> {
        Ok(PyManifold { inner: Arc::new(ModelManifold::new(spec).map_err(value_err)?) })
    }
}

#[pymethods]
impl PyManifold {
    /// `terms` holds `(frequency, amplitude, phase)` triples of `F`.
    #[new]
    #[pyo3(signature = (periods, terms = Vec::new()))]
    fn new(periods: Vec<f64>, terms: Vec<(Vec<i64>, f64, f64)>) -> PyResult<Self> {
        let spec = ManifoldSpec {
            dim: periods.len(),
            periods,
            metric: None,
            terms: terms.into_iter().map(|(f, a, p)| TrigTerm::new(f, a, p)).collect(),
        };
        Self::wrap(spec)
    }

    #[staticmethod]
    fn circle_exact() -> PyResult<Self> {
        Self::wrap(presets::circle_exact())
    }

    #[staticmethod]
    fn torus_exact() -> PyResult<Self> {
        Self::wrap(presets::torus_exact())
    }

    #[staticmethod]
    fn torus_novikov(kappa: f64, scale: f64) -> PyResult<Self> {
        Self::wrap(presets::torus_novikov(kappa, scale))
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn h_lift(&self, x: Vec<f64>) -> f64 {
        self.inner.h_lift(&x)
    }

    fn omega(&self, x: Vec<f64>) -> Vec<f64> {
        self.inner.omega(&x)
    }

    #[pyo3(signature = (grid_per_axis = 16))]
    fn find_zeros(&self, grid_per_axis: usize) -> PyResult<Vec<PyCriticalPoint>> {
        if self.inner.terms().is_empty() {
            return Ok(Vec::new());
        }
        let z = self.inner.find_zeros(grid_per_axis, &ZeroOptions::default()).map_err(value_err)?;
        Ok(z.into_iter().map(|inner| PyCriticalPoint { inner }).collect())
    }

    /// Counts trajectories up to `action_bound` and assembles the complex.
    fn novikov_complex(&self, py: Python<'_>, action_bound: f64) -> PyResult<PyNovikovComplex> {
        let m = Arc::clone(&self.inner);
        py.detach(move || {
            let z = if m.terms().is_empty() { Vec::new() } else { m.find_zeros(16, &ZeroOptions::default()).map_err(value_err)? };
            let table = incidence_table(&m, &z, action_bound, &FlowOptions::default()).map_err(value_err)?;
            let inner = assemble(&table, &m, &z).map_err(value_err)?;
            Ok(PyNovikovComplex { inner })
        })
    }

    /// The `k` smallest eigenvalues of the deformed Laplacian in degree `q`.
    #[pyo3(signature = (q, t, k, grid = 48))]
    fn spectrum(&self, py: Python<'_>, q: usize, t: f64, k: usize, grid: usize) -> PyResult<Vec<f64>> {
        let m = Arc::clone(&self.inner);
        py.detach(move || {
            let op = build_delta_t(&m, q, t, grid).map_err(value_err)?;
            Ok(eigen_spectrum(&op, k, &EigenOptions::default()).map_err(value_err)?.values)
        })
    }
}

#[pyclass(name = "NovikovComplex", module = "pynovikov", frozen)]
struct PyNovikovComplex {
    inner: NovikovComplex,
}

#[pymethods]
impl PyNovikovComplex {
    fn dims(&self) -> Vec<usize> {
        (0..=self.inner.top_degree()).map(|q| self.inner.dim(q)).collect()
    }

    fn euler_characteristic(&self) -> i64 {
        self.inner.euler_characteristic()
    }

    /// Raises `ValueError` when a composed boundary has a nonzero term below its bound.
    fn verify_d_squared(&self) -> PyResult<usize> {
        Ok(verify_d_squared(&self.inner).map_err(value_err)?.compositions_checked)
    }

    #[pyo3(signature = (s, rho_hat = None))]
    fn betti(&self, s: Complex64, rho_hat: Option<f64>) -> Vec<usize> {
        homology_ranks(&specialize(&self.inner, s, rho_hat)).betti
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }
}

/// Runs the pipeline on a TOML configuration; returns `(exit_code, payload_json)`.
#[pyfunction]
#[pyo3(signature = (config_toml, out_dir, use_cache = false))]
fn run_config(py: Python<'_>, config_toml: &str, out_dir: PathBuf, use_cache: bool) -> PyResult<(i32, String)> {
    let cfg = RunConfig::from_toml(config_toml).map_err(value_err)?;
    let report = py.detach(move || run(&cfg, &RunOptions { out: out_dir, target: None, use_cache }));
    Ok((report.exit_code(), report.payload_json()))
}

#[pymodule]
fn pynovikov(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRingElement>()?;
    m.add_class::<PyCriticalPoint>()?;
    m.add_class::<PyManifold>()?;
    m.add_class::<PyNovikovComplex>()?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    Ok(())
}

//! Python bindings: basis preparation, blending, homogenization, the
//! surrogate, design states, the compliance driver and the `fgs` CLI.

use std::path::PathBuf;

use fgs_core::basis::{prepare_basis_set, truss_basis, BasisSet, PrepareOptions};
use fgs_core::blend::{blend_to_volume, BlendParams};
use fgs_core::driver::diversity::min_pairwise_distance;
use fgs_core::driver::verify::assemble_and_verify;
use fgs_core::driver::{diversity_penalty as penalty, run_compliance, variable_count as count};
use fgs_core::driver::{ComplianceOptions, DesignState, MicroModel};
use fgs_core::fea::{BoundaryConditions, MacroMesh};
use fgs_core::field::ScalarField2D;
use fgs_core::homogenize::{homogenize_cell, MaterialModel};
use fgs_core::surrogate::SurrogateModel;
use fgs_core::Error;
use pyo3::exceptions::{PyFileNotFoundError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: Error) -> PyErr {
    match e {
        Error::MissingArtifact(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Numerical(_) | Error::Singular(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_json(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<String> {
    py.import("json")?.call_method1("dumps", (obj,))?.extract()
}

fn from_json<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Options dict -> typed struct through serde, so unknown keys are rejected.
fn options<T: Default + for<'de> serde::Deserialize<'de>>(
    py: Python<'_>,
    d: Option<&Bound<'_, PyDict>>,
) -> PyResult<T> {
    match d {
        None => Ok(T::default()),
        Some(d) => serde_json::from_str(&to_json(py, d.as_any())?)
            .map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

fn problem(
    nx: usize,
    ny: usize,
    load_case: &str,
    load: f64,
) -> PyResult<(MacroMesh, BoundaryConditions)> {
    let mesh = MacroMesh::new(nx, ny).map_err(err)?;
    let bcs = match load_case {
        "mbb" => BoundaryConditions::mbb_half(&mesh, load),
        "cantilever" => BoundaryConditions::cantilever(&mesh, load),
        "stretch" => BoundaryConditions::clamped_stretch(&mesh, load),
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown load case {other:?}"
            )))
        }
    };
    Ok((mesh, bcs))
}

/// Prepared basis classes.
#[pyclass(name = "Basis", module = "fgs", frozen)]
struct PyBasis {
    inner: BasisSet,
}

#[pymethods]
impl PyBasis {
    /// Truss presets at `resolution` pixels, normalized to `v_star`.
    #[staticmethod]
    #[pyo3(signature = (presets, resolution=50, halfwidth=0.1, v_star=0.5, min_feature_px=4))]
    fn truss(
        py: Python<'_>,
        presets: Vec<String>,
        resolution: usize,
        halfwidth: f64,
        v_star: f64,
        min_feature_px: usize,
    ) -> PyResult<Self> {
        let opts = PrepareOptions {
            v_star,
            min_feature_px,
            ..Default::default()
        };
        let inner = py
            .detach(|| {
                let bases = presets
                    .iter()
                    .map(|p| truss_basis(p, resolution, halfwidth))
                    .collect::<Result<_, _>>()?;
                prepare_basis_set(bases, &opts)
            })
            .map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: BasisSet::load(&dir).map_err(err)?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(err)
    }

    #[getter]
    fn names(&self) -> Vec<String> {
        self.inner.names()
    }

    #[getter]
    fn resolution(&self) -> (usize, usize) {
        (self.inner.nx(), self.inner.ny())
    }

    #[getter]
    fn v_lower(&self) -> Vec<f64> {
        self.inner.v_lower.clone()
    }

    #[getter]
    fn v_min(&self) -> f64 {
        self.inner.v_min
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Blends weights `c_hat` (summing to 1) at volume `v`. Returns a dict
    /// with the flat row-major field `phi` (`j = 0` first), its shape, the
    /// realized volume and whether the request was raised to the minimum.
    fn blend<'py>(&self, py: Python<'py>, c_hat: Vec<f64>, v: f64) -> PyResult<Bound<'py, PyDict>> {
        let b =
            blend_to_volume(&c_hat, v, &self.inner, &BlendParams::default(), 1e-3).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("phi", b.phi.values().to_vec())?;
        d.set_item("shape", (b.phi.nx(), b.phi.ny()))?;
        d.set_item("volume", b.volume)?;
        d.set_item("min_volume", b.min_volume)?;
        d.set_item("clamped", b.clamped)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!(
            "Basis({:?}, {}x{})",
            self.inner.names(),
            self.inner.nx(),
            self.inner.ny()
        )
    }
}

/// Trained stiffness surrogate.
#[pyclass(name = "Surrogate", module = "fgs", frozen)]
struct PySurrogate {
    inner: SurrogateModel,
}

#[pymethods]
impl PySurrogate {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: SurrogateModel::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    /// Predicted 3x3 stiffness for weights `c_hat` at volume `v`.
    fn predict(&self, c_hat: Vec<f64>, v: f64) -> PyResult<[[f64; 3]; 3]> {
        Ok(self.inner.predict(&c_hat, v).map_err(err)?.c)
    }
}

/// Design variables of a two-scale layout.
#[pyclass(name = "DesignState", module = "fgs", frozen)]
struct PyState {
    inner: DesignState,
}

#[pymethods]
impl PyState {
    #[new]
    #[pyo3(signature = (nx, ny, n_basis, classes, v0=0.5, perturbation=0.0, seed=0))]
    fn new(
        nx: usize,
        ny: usize,
        n_basis: usize,
        classes: usize,
        v0: f64,
        perturbation: f64,
        seed: u64,
    ) -> PyResult<Self> {
        Ok(Self {
            inner: DesignState::initial(nx, ny, n_basis, classes, v0, perturbation, seed)
                .map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: DesignState::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.nx, self.inner.ny)
    }

    #[getter]
    fn c(&self) -> Vec<Vec<f64>> {
        self.inner.c.clone()
    }

    #[getter]
    fn v(&self) -> Vec<f64> {
        self.inner.v.clone()
    }

    #[getter]
    fn xi(&self) -> Vec<Vec<f64>> {
        self.inner.xi.clone()
    }

    #[getter]
    fn x(&self) -> Vec<f64> {
        self.inner.x.clone()
    }

    fn n_variables(&self) -> usize {
        count(
            self.inner.n_basis,
            self.inner.c.len(),
            self.inner.n_elements(),
        )
    }

    fn __repr__(&self) -> String {
        format!(
            "DesignState({}x{}, D={}, M={})",
            self.inner.nx,
            self.inner.ny,
            self.inner.n_basis,
            self.inner.c.len()
        )
    }
}

/// Effective 3x3 stiffness of a periodic cell; `density` is row-major
/// `n x n` in `[0, 1]`.
#[pyfunction]
#[pyo3(signature = (density, n, e_solid=1.0, nu=0.3))]
fn homogenize(
    py: Python<'_>,
    density: Vec<f64>,
    n: usize,
    e_solid: f64,
    nu: f64,
) -> PyResult<[[f64; 3]; 3]> {
    let field = ScalarField2D::new(n, n, density).map_err(err)?;
    let mat = MaterialModel {
        e_solid,
        nu,
        ..Default::default()
    };
    let h = py.detach(|| homogenize_cell(&field, &mat)).map_err(err)?;
    Ok(h.stiffness.c)
}

/// Number of design variables for `D` bases, `M` classes and `N` elements.
#[pyfunction]
fn variable_count(d: usize, m: usize, n: usize) -> usize {
    count(d, m, n)
}

/// Class diversity penalty and its gradient.
#[pyfunction]
fn diversity_penalty(c: Vec<Vec<f64>>) -> (f64, Vec<Vec<f64>>) {
    penalty(&c)
}

/// Runs the concurrent compliance optimization. `options` keys match the
/// `[optimize.options]` config section. Returns `(state, summary)`.
#[pyfunction]
#[pyo3(signature = (basis, surrogate, nx, ny, load_case="mbb", load=1.0, options=None))]
#[allow(clippy::too_many_arguments)]
fn optimize_compliance<'py>(
    py: Python<'py>,
    basis: &PyBasis,
    surrogate: &PySurrogate,
    nx: usize,
    ny: usize,
    load_case: &str,
    load: f64,
    options: Option<&Bound<'py, PyDict>>,
) -> PyResult<(PyState, Bound<'py, PyAny>)> {
    let opts: ComplianceOptions = self::options(py, options)?;
    let (mesh, bcs) = problem(nx, ny, load_case, load)?;
    let run = py
        .detach(|| {
            run_compliance(
                &basis.inner,
                &surrogate.inner,
                BlendParams::default(),
                &mesh,
                &bcs,
                &opts,
            )
        })
        .map_err(err)?;
    let summary = serde_json::json!({
        "f_c": run.f_c,
        "v_global": run.v_global,
        "v_beso": run.v_beso,
        "stop": run.stop,
        "iterations": run.iterations(),
        "min_class_distance": (run.state.c.len() > 1).then(|| min_pairwise_distance(&run.state.c)),
        "history": run.history,
    });
    Ok((
        PyState { inner: run.state },
        from_json(py, &summary.to_string())?,
    ))
}

/// Realizes a state as a full-resolution image, homogenizes every cell and
/// re-solves the macro problem. Returns the verification report as a dict.
#[pyfunction]
#[pyo3(signature = (state, basis, load_case="mbb", load=1.0, r_min=3.0, surrogate=None))]
fn verify<'py>(
    py: Python<'py>,
    state: &PyState,
    basis: &PyBasis,
    load_case: &str,
    load: f64,
    r_min: f64,
    surrogate: Option<&PySurrogate>,
) -> PyResult<Bound<'py, PyAny>> {
    let s = &state.inner;
    let (_, bcs) = problem(s.nx, s.ny, load_case, load)?;
    let params = BlendParams::default();
    let report = py
        .detach(|| {
            let predicted = match surrogate {
                Some(sur) => Some(
                    MicroModel::new(&basis.inner, &sur.inner, params, s.nx, s.ny, r_min)?
                        .evaluate(s)?
                        .stiffness(),
                ),
                None => None,
            };
            assemble_and_verify(
                s,
                &basis.inner,
                &params,
                &MaterialModel::default(),
                &bcs,
                r_min,
                predicted.as_deref(),
            )
        })
        .map_err(err)?
        .report;
    from_json(
        py,
        &serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))?,
    )
}

/// Runs the command-line tool in-process; `args` excludes the program name.
/// Returns the exit code.
#[pyfunction]
fn cli(py: Python<'_>, args: Vec<String>) -> i32 {
    py.detach(|| fgs_core::cli::run(std::iter::once("fgs".to_string()).chain(args)))
}

#[pymodule]
fn fgs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyBasis>()?;
    m.add_class::<PySurrogate>()?;
    m.add_class::<PyState>()?;
    m.add_function(wrap_pyfunction!(homogenize, m)?)?;
    m.add_function(wrap_pyfunction!(variable_count, m)?)?;
    m.add_function(wrap_pyfunction!(diversity_penalty, m)?)?;
    m.add_function(wrap_pyfunction!(optimize_compliance, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}

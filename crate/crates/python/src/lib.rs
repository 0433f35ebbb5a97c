//! Python bindings for `ddnn`.
//!
//! Configuration overrides and reports cross the boundary as JSON, so the
//! Python side sees plain dicts and the Rust side keeps its serde schemas.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyModule};

use ddnn::data::{self, CylinderGrid, MaterialDistribution, Row, Schema};
use ddnn::ddm::{self, TrainOptions, CHECKPOINT_FILE};
use ddnn::metrics;

create_exception!(ddnn, DdnnError, PyException, "Raised for every error reported by the Rust core.");

fn err(e: ddnn::Error) -> PyErr {
    DdnnError::new_err(e.to_string())
}

fn json_err(e: serde_json::Error) -> PyErr {
    DdnnError::new_err(e.to_string())
}

fn to_py_json(py: Python<'_>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(v).map_err(json_err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py_json(obj: &Bound<'_, PyAny>) -> PyResult<serde_json::Value> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(json_err)
}

/// A table of rows `(x, zeta, u)` in raw units.
#[pyclass(name = "Dataset", module = "ddnn", skip_from_py_object)]
pub struct PyDataset {
    pub inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Build from row-major sequences; `zeta` may be omitted for
    /// deterministic data.
    #[new]
    #[pyo3(signature = (x, u, zeta=None))]
    fn new(x: Vec<Vec<f64>>, u: Vec<Vec<f64>>, zeta: Option<Vec<Vec<f64>>>) -> PyResult<Self> {
        if x.is_empty() || x.len() != u.len() || zeta.as_ref().is_some_and(|z| z.len() != x.len()) {
            return Err(DdnnError::new_err("x, u and zeta need the same non-zero number of rows"));
        }
        let zeta = zeta.unwrap_or_else(|| vec![Vec::new(); x.len()]);
        let schema = Schema::new(x[0].len(), zeta[0].len(), u[0].len()).map_err(err)?;
        let rows = x
            .into_iter()
            .zip(zeta)
            .zip(u)
            .map(|((x, zeta), u)| Row { x, zeta, u })
            .collect();
        Ok(Self {
            inner: data::Dataset::new(schema, rows).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load_csv(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: data::Dataset::load_csv(path, None).map_err(err)?,
        })
    }

    fn save_csv(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_csv(path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        let s = self.inner.schema;
        format!(
            "Dataset(rows={}, spatial_dim={}, param_dim={}, output_dim={})",
            self.inner.len(),
            s.spatial_dim,
            s.param_dim,
            s.output_dim
        )
    }

    #[getter]
    fn header(&self) -> Vec<String> {
        self.inner.schema.header()
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        self.inner.rows.iter().map(|r| r.x.clone()).collect()
    }

    #[getter]
    fn zeta(&self) -> Vec<Vec<f64>> {
        self.inner.rows.iter().map(|r| r.zeta.clone()).collect()
    }

    #[getter]
    fn u(&self) -> Vec<Vec<f64>> {
        self.inner.rows.iter().map(|r| r.u.clone()).collect()
    }
}

/// The 2D manufactured field on an `nx × nz` grid over the unit square.
#[pyfunction]
#[pyo3(signature = (nx, nz, boundary_layer=data::DEFAULT_BOUNDARY_LAYER))]
fn generate_2d(nx: usize, nz: usize, boundary_layer: f64) -> PyResult<PyDataset> {
    Ok(PyDataset {
        inner: data::generate_2d_field(nx, nz, boundary_layer).map_err(err)?,
    })
}

/// Cylinder compression over lognormal material samples.
#[pyfunction]
#[pyo3(signature = (samples, grid="coarse", seed=0))]
fn generate_3d(samples: usize, grid: &str, seed: u64) -> PyResult<PyDataset> {
    let grid = CylinderGrid::preset(grid).map_err(err)?;
    Ok(PyDataset {
        inner: data::generate_3d_parametric(samples, &MaterialDistribution::default(), &grid, seed).map_err(err)?,
    })
}

#[pyclass(name = "RunConfig", module = "ddnn", skip_from_py_object)]
pub struct PyRunConfig {
    pub inner: ddnn::RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Defaults for `method` and `split`, with any other field given as a
    /// keyword argument.
    #[new]
    #[pyo3(signature = (method, split, **overrides))]
    fn new(method: &str, split: &str, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let method = method.parse().map_err(err)?;
        let split = split.parse().map_err(err)?;
        let mut cfg = ddnn::RunConfig::new(method, split);
        if let Some(o) = overrides {
            let mut value = serde_json::to_value(&cfg).map_err(json_err)?;
            if let serde_json::Value::Object(extra) = from_py_json(o.as_any())? {
                for (k, v) in extra {
                    value[k] = v;
                }
            }
            cfg = serde_json::from_value(value).map_err(json_err)?;
        }
        cfg.validate().map_err(err)?;
        Ok(Self { inner: cfg })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ddnn::RunConfig::from_json_str(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(json_err)
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py_json(py, &serde_json::to_value(&self.inner).map_err(json_err)?)
    }

    fn __repr__(&self) -> String {
        format!("RunConfig({:?}, {:?})", self.inner.method.to_string(), self.inner.split.to_string())
    }
}

#[pyclass(name = "RunReport", module = "ddnn", skip_from_py_object)]
pub struct PyRunReport {
    pub inner: ddm::RunReport,
}

#[pymethods]
impl PyRunReport {
    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged()
    }

    #[getter]
    fn outer_iterations(&self) -> usize {
        self.inner.outer_iterations
    }

    #[getter]
    fn max_e_rel(&self) -> Option<f64> {
        self.inner.final_metrics.as_ref().map(|f| f.max_e_rel)
    }

    /// Mean interface jump of the last iteration and of the unconstrained
    /// first pass.
    #[getter]
    fn jumps(&self) -> Option<(f64, Option<f64>)> {
        self.inner.final_metrics.as_ref().map(|f| (f.mean_jump, f.baseline_jump))
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(json_err)
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py_json(py, &serde_json::to_value(&self.inner).map_err(json_err)?)
    }
}

#[pyclass(name = "Model", module = "ddnn", skip_from_py_object)]
pub struct PyModel {
    pub inner: ddm::DdmModel,
}

#[pymethods]
impl PyModel {
    /// Load a checkpoint file, or `model.json` inside a directory.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let path = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path };
        let (inner, _) = ddm::DdmModel::load(path).map_err(err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path, &[]).map_err(err)
    }

    #[getter]
    fn n_subdomains(&self) -> usize {
        self.inner.n_subdomains()
    }

    #[getter]
    fn outer_iterations(&self) -> usize {
        self.inner.k
    }

    #[getter]
    fn method(&self) -> String {
        self.inner.method.to_string()
    }

    /// Predictions in raw units for every row of `dataset`.
    fn predict(&self, dataset: &PyDataset) -> PyResult<Vec<Vec<f64>>> {
        let out = self.inner.predict_raw(&dataset.inner).map_err(err)?;
        Ok(out.rows.into_iter().map(|r| r.u).collect())
    }

    /// Relative-error summary on `dataset` (normalized units).
    fn evaluate(&self, py: Python<'_>, dataset: &PyDataset) -> PyResult<Py<PyAny>> {
        let normalized = self.inner.normalization.apply(&dataset.inner).map_err(err)?;
        let field = metrics::error_field(&self.inner, &normalized).map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("max_e_rel", field.max)?;
        out.set_item("mean_e_rel", field.mean)?;
        out.set_item("argmax_row", field.argmax)?;
        out.set_item("e_rel", field.e_rel)?;
        Ok(out.into_any().unbind())
    }

    /// Maximum relative errors of the mean and std fields over samples.
    fn statistics(&self, dataset: &PyDataset) -> PyResult<(f64, f64)> {
        let normalized = self.inner.normalization.apply(&dataset.inner).map_err(err)?;
        let stats = metrics::statistics_field(&self.inner, &normalized).map_err(err)?;
        Ok((stats.max_e_mean(), stats.max_e_std()))
    }

    /// Mean value jump between neighbours on each interface.
    fn interface_jumps(&self) -> PyResult<Vec<f64>> {
        self.inner.interface_jumps().map_err(err)
    }
}

/// Train a decomposed model. Writes checkpoint, traces and reports when
/// `out_dir` is given.
#[pyfunction]
#[pyo3(signature = (config, dataset, out_dir=None, resume=false))]
fn train(
    py: Python<'_>,
    config: &PyRunConfig,
    dataset: &PyDataset,
    out_dir: Option<PathBuf>,
    resume: bool,
) -> PyResult<(PyModel, PyRunReport)> {
    let opts = TrainOptions { out_dir, resume };
    let (cfg, ds) = (&config.inner, &dataset.inner);
    let (model, report) = py.detach(|| ddm::train(cfg, ds, &opts)).map_err(err)?;
    Ok((PyModel { inner: model }, PyRunReport { inner: report }))
}

/// `|p − t| / (|t| + 1)`, maximum over components.
#[pyfunction]
fn relative_error(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    if pred.len() != truth.len() {
        return Err(DdnnError::new_err("pred and truth differ in length"));
    }
    Ok(metrics::relative_error(&pred, &truth))
}

/// Mean and population std over samples; `values[point][sample][component]`.
#[pyfunction]
fn field_statistics(values: Vec<Vec<Vec<f64>>>) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    metrics::field_statistics(&values).map_err(err)
}

#[pymodule]
#[pyo3(name = "ddnn")]
pub fn ddnn_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DdnnError", m.py().get_type::<DdnnError>())?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyRunReport>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_2d, m)?)?;
    m.add_function(wrap_pyfunction!(generate_3d, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(relative_error, m)?)?;
    m.add_function(wrap_pyfunction!(field_statistics, m)?)?;
    Ok(())
}

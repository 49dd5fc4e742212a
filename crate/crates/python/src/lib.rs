//! Python bindings for `cdrf-core`.

use cdrf_core::data::{load_dataset, EstimationMode, SampleRecord};
use cdrf_core::evaluation::{bound_ratio, empirical_risk_vs_truth, lipschitz_constant, DiagnosticsInput};
use cdrf_core::simulation::{true_cdrf as truth, Scenario};
use cdrf_core::{fit_cdrf, Dataset, Family, FittedCDRF, FusionConfig, PipelineConfig, ReferenceMeasure};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Observations `(x, a, y, s)`.
#[pyclass(name = "Dataset", module = "cdrf_fusion", skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(x: Vec<Vec<f64>>, a: Vec<f64>, y: Vec<f64>, s: Vec<u32>) -> PyResult<Self> {
        Ok(PyDataset {
            inner: dataset_from_columns(x, a, y, s).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_csv(path: &str) -> PyResult<Self> {
        Ok(PyDataset {
            inner: load_dataset(path).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, covariates={}, sources={:?})",
            self.inner.len(),
            self.inner.covariate_dim(),
            self.inner.sources()
        )
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        self.inner.records().iter().map(|r| r.x.clone()).collect()
    }

    #[getter]
    fn a(&self) -> Vec<f64> {
        self.inner.records().iter().map(|r| r.a[0]).collect()
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.inner.records().iter().map(|r| r.y).collect()
    }

    #[getter]
    fn s(&self) -> Vec<u32> {
        self.inner.records().iter().map(|r| r.s).collect()
    }

    fn to_csv(&self, path: &str) -> PyResult<()> {
        let f = std::fs::File::create(path).map_err(err)?;
        self.inner.write_csv(f).map_err(err)
    }
}

fn dataset_from_columns(x: Vec<Vec<f64>>, a: Vec<f64>, y: Vec<f64>, s: Vec<u32>) -> cdrf_core::Result<Dataset> {
    let n = x.len();
    if a.len() != n || y.len() != n || s.len() != n {
        return Err(cdrf_core::CdrfError::invalid(format!(
            "column lengths differ: x={n}, a={}, y={}, s={}",
            a.len(),
            y.len(),
            s.len()
        )));
    }
    let records = x
        .into_iter()
        .zip(a)
        .zip(y)
        .zip(s)
        .map(|(((x, a), y), s)| SampleRecord { x, a: vec![a], y, s })
        .collect();
    Dataset::new(records)
}

/// Fitted dose-response curve.
#[pyclass(name = "Model", module = "cdrf_fusion", skip_from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    inner: FittedCDRF,
}

#[pymethods]
impl PyModel {
    /// Curve value at one exposure, or at each exposure of a list.
    fn predict<'py>(&self, py: Python<'py>, a: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
        if let Ok(t) = a.extract::<f64>() {
            let v = self.inner.predict(&[t]).map_err(err)?;
            return Ok(v.into_pyobject(py)?.into_any());
        }
        let ts: Vec<f64> = a.extract()?;
        let pts: Vec<Vec<f64>> = ts.into_iter().map(|t| vec![t]).collect();
        let out = self.inner.predict_many(&pts).map_err(err)?;
        Ok(out.into_pyobject(py)?.into_any())
    }

    #[getter]
    fn lambda_(&self) -> f64 {
        self.inner.lambda
    }

    #[getter]
    fn bandwidth(&self) -> f64 {
        self.inner.kernel.bandwidth
    }

    #[getter]
    fn n2(&self) -> usize {
        self.inner.n2()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: serde_json::from_str(text).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(kernel={}, bandwidth={:.4}, lambda={}, n2={})",
            self.inner.kernel.family,
            self.inner.kernel.bandwidth,
            self.inner.lambda,
            self.inner.n2()
        )
    }
}

/// Draws `n` records from the simulation design.
#[pyfunction]
#[pyo3(signature = (family, n, seed = 0))]
fn simulate(family: &str, n: usize, seed: u64) -> PyResult<PyDataset> {
    let family: Family = family.parse().map_err(err)?;
    Ok(PyDataset {
        inner: Scenario::new(family).generate(n, seed).map_err(err)?,
    })
}

/// Fits the curve. `config` is an optional JSON pipeline configuration.
#[pyfunction]
#[pyo3(signature = (data, mode = "fused", mu = "uniform", seed = 0, sources_x = vec![2, 3], sources_y = vec![1, 3], config = None))]
#[allow(clippy::too_many_arguments)]
fn fit(
    py: Python<'_>,
    data: &PyDataset,
    mode: &str,
    mu: &str,
    seed: u64,
    sources_x: Vec<u32>,
    sources_y: Vec<u32>,
    config: Option<&str>,
) -> PyResult<PyModel> {
    let mode: EstimationMode = mode.parse().map_err(err)?;
    let mu: ReferenceMeasure = mu.parse().map_err(err)?;
    let fusion = FusionConfig::new(sources_x, sources_y).map_err(err)?;
    let cfg: PipelineConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(err)?,
        None => PipelineConfig::default(),
    };
    let data = data.inner.clone();
    let result = py
        .detach(move || fit_cdrf(&data, &fusion, mode, &mu, &cfg, seed))
        .map_err(err)?;
    Ok(PyModel { inner: result.model })
}

/// Mean squared error against the known curve over draws from `mu`.
#[pyfunction]
#[pyo3(signature = (model, family, mu = "uniform", m_eval = 1000, seed = 0))]
fn risk(model: &PyModel, family: &str, mu: &str, m_eval: usize, seed: u64) -> PyResult<f64> {
    let family: Family = family.parse().map_err(err)?;
    let mu: ReferenceMeasure = mu.parse().map_err(err)?;
    empirical_risk_vs_truth(&model.inner, family, &mu, m_eval, seed).map_err(err)
}

#[pyfunction]
fn true_cdrf(family: &str, a: f64) -> PyResult<f64> {
    let family: Family = family.parse().map_err(err)?;
    truth(family, a).map_err(err)
}

/// Lipschitz constants and the fused-to-unfused bound ratio.
#[pyfunction]
#[pyo3(signature = (xi, eta, w_sup, xi_u, eta_u, w_sup_u, delta = 0.5, sigma = 1.0, l_subexp = 1.0, p = 0.5, alpha = 0.25))]
#[allow(clippy::too_many_arguments)]
fn diagnostics<'py>(
    py: Python<'py>,
    xi: f64,
    eta: f64,
    w_sup: f64,
    xi_u: f64,
    eta_u: f64,
    w_sup_u: f64,
    delta: f64,
    sigma: f64,
    l_subexp: f64,
    p: f64,
    alpha: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let input = DiagnosticsInput {
        delta,
        sigma,
        l_subexp,
        xi,
        eta,
        w_sup,
        xi_u,
        eta_u,
        w_sup_u,
        p,
        alpha,
    };
    let out = PyDict::new(py);
    out.set_item(
        "lipschitz_fused",
        lipschitz_constant(delta, sigma, l_subexp, xi, eta, w_sup).map_err(err)?,
    )?;
    out.set_item(
        "lipschitz_nonfused",
        lipschitz_constant(delta, sigma, l_subexp, xi_u, eta_u, w_sup_u).map_err(err)?,
    )?;
    out.set_item("bound_ratio", bound_ratio(&input).map_err(err)?)?;
    Ok(out)
}

#[pymodule]
fn cdrf_fusion(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(risk, m)?)?;
    m.add_function(wrap_pyfunction!(true_cdrf, m)?)?;
    m.add_function(wrap_pyfunction!(diagnostics, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_become_records() {
        let d = dataset_from_columns(vec![vec![0.1], vec![0.2]], vec![0.3, 0.4], vec![1.0, 2.0], vec![1, 3]).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.records()[1].a, vec![0.4]);
        assert_eq!(d.records()[1].s, 3);
    }

    #[test]
    fn mismatched_columns_rejected() {
        assert!(dataset_from_columns(vec![vec![0.1]], vec![0.3, 0.4], vec![1.0], vec![1]).is_err());
    }
}

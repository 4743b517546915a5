//! Python bindings. Matrices cross the boundary as lists of row lists.

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use cmab_core::cmab::{CmabParams, CmabState};
use cmab_core::cmanp::{self, CmanpModel, ConditionedState, TrainConfig};
use cmab_core::config::ModelConfig;
use cmab_core::numerics::{self, init_matrix, InitScheme, RngState};
use cmab_core::{check, io, Error, Matrix};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn to_matrix(rows: Vec<Vec<f64>>, cols: usize) -> PyResult<Matrix> {
    let n = rows.len();
    let mut data = Vec::with_capacity(n * cols);
    for (i, r) in rows.into_iter().enumerate() {
        if r.len() != cols {
            return Err(PyValueError::new_err(format!(
                "row {i} has {} values, expected {cols}",
                r.len()
            )));
        }
        data.extend(r);
    }
    Matrix::from_vec(n, cols, data).map_err(py_err)
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn column(m: &Matrix) -> Vec<f64> {
    m.as_slice().to_vec()
}

#[pyfunction]
fn logsumexp(values: Vec<f64>) -> PyResult<f64> {
    numerics::logsumexp(&values).map_err(py_err)
}

#[pyfunction]
fn softplus(x: f64) -> f64 {
    numerics::softplus(x)
}

/// One constant-memory attention block with random weights.
#[pyclass(name = "CmabBlock")]
struct PyCmabBlock {
    params: CmabParams,
    config: ModelConfig,
}

#[pyclass(name = "CmabState")]
struct PyCmabState {
    inner: CmabState,
}

#[pymethods]
impl PyCmabState {
    #[getter]
    fn count(&self) -> usize {
        self.inner.stream.count()
    }
}

#[pymethods]
impl PyCmabBlock {
    #[new]
    #[pyo3(signature = (d, heads, l_i, l_b, seed = 0))]
    fn new(d: usize, heads: usize, l_i: usize, l_b: usize, seed: u64) -> PyResult<Self> {
        let config = ModelConfig::new(d, heads, 1, l_i, l_b);
        let params = CmabParams::init(&mut RngState::new(seed), &config).map_err(py_err)?;
        Ok(Self { params, config })
    }

    /// Random `L_I × d` input latents.
    #[pyo3(signature = (seed = 0))]
    fn random_latents(&self, seed: u64) -> Vec<Vec<f64>> {
        let m: Matrix = init_matrix(
            &mut RngState::new(seed),
            self.config.l_i,
            self.config.d,
            InitScheme::Normal { std: 1.0 },
        );
        to_rows(&m)
    }

    /// Returns the output latents and the streaming state.
    fn forward(
        &self,
        iemb: Vec<Vec<f64>>,
        input: Vec<Vec<f64>>,
    ) -> PyResult<(Vec<Vec<f64>>, PyCmabState)> {
        let d = self.config.d;
        let (out, state) = self
            .params
            .forward_full(&to_matrix(iemb, d)?, &to_matrix(input, d)?)
            .map_err(py_err)?;
        Ok((to_rows(&out), PyCmabState { inner: state }))
    }

    #[pyo3(signature = (iemb, input, chunk_size = 128))]
    fn forward_chunked(
        &self,
        iemb: Vec<Vec<f64>>,
        input: Vec<Vec<f64>>,
        chunk_size: usize,
    ) -> PyResult<(Vec<Vec<f64>>, PyCmabState)> {
        let d = self.config.d;
        let input = to_matrix(input, d)?;
        let chunks = cmab_core::cmab::row_chunks(&input, chunk_size.max(1));
        let (out, state) = self
            .params
            .forward_chunked(&to_matrix(iemb, d)?, chunks, chunk_size)
            .map_err(py_err)?;
        Ok((to_rows(&out), PyCmabState { inner: state }))
    }

    fn update(
        &self,
        state: &mut PyCmabState,
        iemb: Vec<Vec<f64>>,
        batch: Vec<Vec<f64>>,
    ) -> PyResult<Vec<Vec<f64>>> {
        let d = self.config.d;
        let out = self
            .params
            .update(
                &mut state.inner,
                &to_matrix(iemb, d)?,
                &to_matrix(batch, d)?,
            )
            .map_err(py_err)?;
        Ok(to_rows(&out))
    }
}

#[pyclass(name = "ConditionedState")]
struct PyConditionedState {
    inner: ConditionedState,
}

#[pymethods]
impl PyConditionedState {
    #[getter]
    fn count(&self) -> usize {
        self.inner.count()
    }
}

/// The constant-memory attentive neural process for 1-D regression.
#[pyclass(name = "Cmanp")]
struct PyCmanp {
    model: CmanpModel,
}

#[pymethods]
impl PyCmanp {
    #[new]
    #[pyo3(signature = (config = "desk", seed = 0))]
    fn new(config: &str, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig::named(config).map_err(py_err)?;
        let model = CmanpModel::init(&mut RngState::new(seed), cfg).map_err(py_err)?;
        Ok(Self { model })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            model: io::load_weights(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        io::save_weights(&self.model, path).map_err(py_err)
    }

    /// Conditions on `[[x, y], ...]`.
    fn condition(&self, context: Vec<Vec<f64>>) -> PyResult<PyConditionedState> {
        let inner = self
            .model
            .condition(&to_matrix(context, 2)?)
            .map_err(py_err)?;
        Ok(PyConditionedState { inner })
    }

    fn update_context(&self, state: &mut PyConditionedState, pairs: Vec<Vec<f64>>) -> PyResult<()> {
        self.model
            .update_context(&mut state.inner, &to_matrix(pairs, 2)?)
            .map_err(py_err)
    }

    /// Returns `(means, stds)` for the target inputs.
    fn query(&self, state: &PyConditionedState, xs: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let xs = Matrix::from_vec(xs.len(), 1, xs).map_err(py_err)?;
        let pred = self.model.query(&state.inner, &xs).map_err(py_err)?;
        Ok((column(&pred.mean), column(&pred.std)))
    }
}

/// Trains on sinusoid tasks; returns the model and `(step, nll)` trace.
#[pyfunction]
#[pyo3(signature = (steps, seed = 0, config = "desk", batch_size = 16, lr = 5e-4))]
fn train(
    py: Python<'_>,
    steps: usize,
    seed: u64,
    config: &str,
    batch_size: usize,
    lr: f64,
) -> PyResult<(PyCmanp, Vec<(usize, f64)>)> {
    let cfg = ModelConfig::named(config).map_err(py_err)?;
    let mut tc = TrainConfig {
        steps,
        batch_size,
        seed,
        ..TrainConfig::default()
    };
    tc.adam.lr = lr;
    let outcome = py.detach(|| cmanp::train(cfg, tc)).map_err(py_err)?;
    let trace = outcome.trace.iter().map(|r| (r.step, r.nll)).collect();
    Ok((
        PyCmanp {
            model: outcome.model,
        },
        trace,
    ))
}

/// Runs the equivalence properties; returns `(name, worst, passed)` per property.
#[pyfunction]
#[pyo3(signature = (seed = 0, trials = 10, tol = 1e-10))]
fn check_equivalence(seed: u64, trials: usize, tol: f64) -> PyResult<Vec<(String, f64, bool)>> {
    let report = check::run_equivalence(seed, trials, None, tol).map_err(py_err)?;
    Ok(report
        .properties
        .iter()
        .map(|p| (p.name.to_string(), p.worst, p.passed()))
        .collect())
}

#[pymodule]
fn cmab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(logsumexp, m)?)?;
    m.add_function(wrap_pyfunction!(softplus, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(check_equivalence, m)?)?;
    m.add_class::<PyCmabBlock>()?;
    m.add_class::<PyCmabState>()?;
    m.add_class::<PyCmanp>()?;
    m.add_class::<PyConditionedState>()?;
    Ok(())
}

//! Python bindings. Matrices cross the boundary as nested lists of floats (row-major), so
//! NumPy arrays are accepted on input and `numpy.asarray` recovers them on output.

pub mod convert;

use kernel_flows::experiment::{run_experiment, ExperimentConfig, ExperimentKind};
use kernel_flows::laws;
use kernel_flows::linalg::{self, SymmetricMatrix};
use kernel_flows::muon::{muon_feature_flow, muon_kernel_rhs_mse, MuonConfig};
use kernel_flows::noise::{self, NoiseForm};
use kernel_flows::population::{self, PopulationSpectrum};
use kernel_flows::setup::{build_laplacian, LabelSet, RegularizationConfig, SSLConfig, SemiConfig};
use kernel_flows::ssl;
use kernel_flows::supervised::{self, FlowConfig, FlowStatus, KernelRhs};
use kernel_flows::FlowError;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use convert::{from_rows, symmetric, to_rows, Rows};

fn err(e: FlowError) -> PyErr {
    match e {
        FlowError::Io(_) | FlowError::Csv(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn flow_config(dt: Option<f64>, max_steps: usize, stop_grad_norm: f64, record_every: usize) -> FlowConfig {
    FlowConfig { dt, max_steps, stop_grad_norm, record_every, ..FlowConfig::default() }
}

fn status_name(s: FlowStatus) -> &'static str {
    match s {
        FlowStatus::Converged => "converged",
        FlowStatus::MaxSteps => "max_steps",
        FlowStatus::Diverged => "diverged",
    }
}

/// Result of a kernel-level flow.
#[pyclass(module = "kernel_flows", get_all, frozen)]
pub struct FlowResult {
    /// Snapshot times.
    pub times: Vec<f64>,
    /// Snapshot kernels.
    pub kernels: Vec<Rows>,
    /// Time of every visited step.
    pub step_times: Vec<f64>,
    /// Tracked scalar per step (effective loss or energy).
    pub values: Vec<f64>,
    pub traces: Vec<f64>,
    pub status: String,
    pub dt: f64,
}

#[pymethods]
impl FlowResult {
    #[getter]
    fn terminal(&self) -> Rows {
        self.kernels.last().cloned().unwrap_or_default()
    }

    #[getter]
    fn converged(&self) -> bool {
        self.status == "converged"
    }

    fn __repr__(&self) -> String {
        format!("FlowResult(status={}, snapshots={}, steps={})", self.status, self.times.len(), self.step_times.len())
    }
}

fn flow_result<S>(run: supervised::FlowRun<S>, snap: impl Fn(&S) -> (f64, Rows)) -> FlowResult {
    let (times, kernels) = run.states.iter().map(snap).unzip();
    FlowResult {
        times,
        kernels,
        step_times: run.steps.iter().map(|s| s.t).collect(),
        values: run.steps.iter().map(|s| s.value).collect(),
        traces: run.steps.iter().map(|s| s.trace).collect(),
        status: status_name(run.status).to_string(),
        dt: run.dt,
    }
}

/// Kernel flow `K̇ = F(K)` for squared loss (`rhs="mse"`), the general field
/// (`rhs="general"`) or the Muon field (`rhs="muon"`, using `eta`).
#[pyfunction]
#[pyo3(signature = (k0, y, lam, mu, rhs="mse", eta=1.0, dt=None, max_steps=20_000, stop_grad_norm=1e-9, record_every=10))]
#[allow(clippy::too_many_arguments)]
fn integrate_kernel_flow(
    k0: Rows,
    y: Rows,
    lam: f64,
    mu: f64,
    rhs: &str,
    eta: f64,
    dt: Option<f64>,
    max_steps: usize,
    stop_grad_norm: f64,
    record_every: usize,
) -> PyResult<FlowResult> {
    let k0 = symmetric(&k0)?;
    let labels = LabelSet::new(from_rows(&y)?).map_err(err)?;
    let reg = RegularizationConfig::new(lam, mu).map_err(err)?;
    let rhs = match rhs {
        "mse" => KernelRhs::Mse,
        "general" => KernelRhs::General,
        "muon" => KernelRhs::MuonMse(MuonConfig::new(eta, mu).map_err(err)?),
        other => return Err(PyValueError::new_err(format!("unknown rhs '{other}'"))),
    };
    let cfg = flow_config(dt, max_steps, stop_grad_norm, record_every);
    let run = supervised::integrate_kernel_flow(&k0, rhs, &labels, &reg, &cfg).map_err(err)?;
    Ok(flow_result(run, |s| (s.t, to_rows(s.k.as_matrix()))))
}

/// Projected-gradient SSL flow on the graph with adjacency `a`.
#[pyfunction]
#[pyo3(signature = (k0, a, beta, eps, mu, dt=None, max_steps=20_000, stop_grad_norm=1e-9, record_every=10))]
#[allow(clippy::too_many_arguments)]
fn ssl_flow(
    k0: Rows,
    a: Rows,
    beta: f64,
    eps: f64,
    mu: f64,
    dt: Option<f64>,
    max_steps: usize,
    stop_grad_norm: f64,
    record_every: usize,
) -> PyResult<FlowResult> {
    let graph = build_laplacian(&symmetric(&a)?).map_err(err)?;
    let cfg = SSLConfig::new(beta, eps, mu).map_err(err)?;
    let flow = flow_config(dt, max_steps, stop_grad_norm, record_every);
    let run = ssl::ssl_flow(&symmetric(&k0)?, &graph, &cfg, &flow).map_err(err)?;
    Ok(flow_result(run, |s| (s.t, to_rows(s.k.as_matrix()))))
}

/// Semi-supervised kernel flow on labels `y` and the graph with adjacency `a`.
#[pyfunction]
#[pyo3(signature = (k0, y, a, alpha, lam, mu, dt=None, max_steps=20_000, stop_grad_norm=1e-9, record_every=10))]
#[allow(clippy::too_many_arguments)]
fn semi_flow(
    k0: Rows,
    y: Rows,
    a: Rows,
    alpha: f64,
    lam: f64,
    mu: f64,
    dt: Option<f64>,
    max_steps: usize,
    stop_grad_norm: f64,
    record_every: usize,
) -> PyResult<FlowResult> {
    let graph = build_laplacian(&symmetric(&a)?).map_err(err)?;
    let labels = LabelSet::new(from_rows(&y)?).map_err(err)?;
    let semi = SemiConfig::new(alpha, RegularizationConfig::new(lam, mu).map_err(err)?).map_err(err)?;
    let flow = flow_config(dt, max_steps, stop_grad_norm, record_every);
    let run = ssl::semi_flow(&symmetric(&k0)?, &labels, &graph, &semi, &flow).map_err(err)?;
    Ok(flow_result(run, |s| (s.t, to_rows(s.k.as_matrix()))))
}

/// Feature-level Muon flow; snapshots hold `ΦᵀΦ`.
#[pyfunction]
#[pyo3(signature = (phi0, y, lam, eta, mu, dt=None, max_steps=20_000, stop_grad_norm=1e-9, record_every=10))]
#[allow(clippy::too_many_arguments)]
fn muon_flow(
    phi0: Rows,
    y: Rows,
    lam: f64,
    eta: f64,
    mu: f64,
    dt: Option<f64>,
    max_steps: usize,
    stop_grad_norm: f64,
    record_every: usize,
) -> PyResult<FlowResult> {
    let labels = LabelSet::new(from_rows(&y)?).map_err(err)?;
    let cfg = MuonConfig::new(eta, mu).map_err(err)?;
    let flow = flow_config(dt, max_steps, stop_grad_norm, record_every);
    let run = muon_feature_flow(&from_rows(&phi0)?, &labels, lam, &cfg, &flow).map_err(err)?;
    Ok(flow_result(run, |s| (s.t, to_rows(s.kernel().as_matrix()))))
}

#[pyfunction]
fn kernel_rhs_mse(k: Rows, y: Rows, lam: f64, mu: f64) -> PyResult<Rows> {
    let f = supervised::kernel_rhs_mse(&symmetric(&k)?, &from_rows(&y)?, lam, mu).map_err(err)?;
    Ok(to_rows(f.as_matrix()))
}

#[pyfunction]
fn muon_kernel_rhs(k: Rows, y: Rows, lam: f64, eta: f64, mu: f64) -> PyResult<Rows> {
    let labels = LabelSet::new(from_rows(&y)?).map_err(err)?;
    let cfg = MuonConfig::new(eta, mu).map_err(err)?;
    Ok(to_rows(muon_kernel_rhs_mse(&symmetric(&k)?, &labels, lam, &cfg).map_err(err)?.as_matrix()))
}

#[pyfunction]
fn effective_loss(k: Rows, y: Rows, lam: f64, mu: f64) -> PyResult<f64> {
    supervised::effective_loss(&symmetric(&k)?, &from_rows(&y)?, lam, mu).map_err(err)
}

#[pyfunction]
fn ridge_prediction(k: Rows, y: Rows, lam: f64) -> PyResult<Rows> {
    Ok(to_rows(&supervised::ridge_prediction(&symmetric(&k)?, &from_rows(&y)?, lam).map_err(err)?))
}

#[pyfunction]
fn water_filling_spectrum(sigma: Vec<f64>, lam: f64, mu: f64) -> PyResult<Vec<f64>> {
    laws::water_filling_spectrum(&sigma, &RegularizationConfig::new(lam, mu).map_err(err)?).map_err(err)
}

#[pyfunction]
fn ssl_spectrum(nu: Vec<f64>, beta: f64, eps: f64, mu: f64) -> PyResult<Vec<f64>> {
    laws::ssl_spectrum(&nu, &SSLConfig::new(beta, eps, mu).map_err(err)?).map_err(err)
}

#[pyfunction]
fn semi_spectrum(sigma: Vec<f64>, nu: Vec<f64>, alpha: f64, lam: f64, mu: f64) -> PyResult<Vec<f64>> {
    let semi = SemiConfig::new(alpha, RegularizationConfig::new(lam, mu).map_err(err)?).map_err(err)?;
    laws::semi_spectrum(&sigma, &nu, &semi).map_err(err)
}

#[pyfunction]
fn predict_k_infinity(y: Rows, lam: f64, mu: f64) -> PyResult<Rows> {
    let labels = LabelSet::new(from_rows(&y)?).map_err(err)?;
    let k = laws::predict_k_infinity(&labels, &RegularizationConfig::new(lam, mu).map_err(err)?).map_err(err)?;
    Ok(to_rows(k.as_matrix()))
}

#[pyfunction]
fn scalar_fixed_point(y: f64, lam: f64, mu: f64) -> f64 {
    supervised::scalar_fixed_point(y, lam, mu)
}

#[pyfunction]
#[pyo3(signature = (k, rel_threshold=1e-6))]
fn effective_rank(k: Rows, rel_threshold: f64) -> PyResult<usize> {
    Ok(linalg::effective_rank(&symmetric(&k)?, rel_threshold))
}

#[pyfunction]
fn commutator_norm(a: Rows, b: Rows) -> PyResult<f64> {
    Ok(linalg::commutator_norm(&symmetric(&a)?, &symmetric(&b)?))
}

#[pyfunction]
#[pyo3(signature = (g, rank_tol=1e-10))]
fn polar_direction(g: Rows, rank_tol: f64) -> PyResult<Rows> {
    Ok(to_rows(&linalg::polar_direction(&from_rows(&g)?, rank_tol)))
}

/// Kernel noise realization for the mini-batch `batch`; `form` is `"linearized"` or
/// `"quadratic"`.
#[pyfunction]
#[pyo3(signature = (k, y, lam, batch, form="linearized"))]
fn kernel_noise_matrix(k: Rows, y: Rows, lam: f64, batch: Vec<usize>, form: &str) -> PyResult<Rows> {
    let form = match form {
        "linearized" => NoiseForm::Linearized,
        "quadratic" => NoiseForm::Quadratic,
        other => return Err(PyValueError::new_err(format!("unknown noise form '{other}'"))),
    };
    let labels = LabelSet::new(from_rows(&y)?).map_err(err)?;
    let z = noise::kernel_noise_matrix_with(&symmetric(&k)?, &labels, lam, &batch, form).map_err(err)?;
    Ok(to_rows(z.as_matrix()))
}

/// Bias, variance and total risk of a diagonal population spectrum.
#[pyfunction]
fn risk_decomposition<'py>(
    py: Python<'py>,
    mu: Vec<f64>,
    a: Vec<f64>,
    sigma_eps2: f64,
    n: f64,
    lam: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = PopulationSpectrum::new(mu, a, sigma_eps2, n, lam).map_err(err)?;
    let r = population::risk_decomposition(&spec).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("bias", r.bias)?;
    d.set_item("variance", r.variance)?;
    d.set_item("total", r.total)?;
    Ok(d)
}

#[pyfunction]
fn effective_dimension(mu: Vec<f64>, lam: f64, order: u8) -> PyResult<f64> {
    population::effective_dimension(&mu, lam, order).map_err(err)
}

/// Runs a configured experiment; `overrides` maps dotted keys to JSON-encodable values.
/// Returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (kind, out, seed=None, overrides=None))]
fn run(py: Python<'_>, kind: &str, out: &str, seed: Option<u64>, overrides: Option<Bound<'_, PyDict>>) -> PyResult<Py<PyAny>> {
    let kind: ExperimentKind = kind.parse().map_err(PyValueError::new_err)?;
    let json = py.import("json")?;
    let mut pairs = Vec::new();
    if let Some(d) = overrides {
        for (k, v) in d.iter() {
            let value: String = json.call_method1("dumps", (v,))?.extract()?;
            pairs.push((k.extract::<String>()?, value));
        }
    }
    if let Some(s) = seed {
        pairs.push(("seed".to_string(), s.to_string()));
    }
    pairs.push(("out".to_string(), serde_json::Value::String(out.to_string()).to_string()));
    let cfg = ExperimentConfig::resolve(kind, None, &pairs).map_err(err)?;
    let report = py.detach(|| run_experiment(&cfg)).map_err(err)?;
    let text = serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok(json.call_method1("loads", (text,))?.unbind())
}

/// Symmetric part `(M + Mᵀ)/2`.
#[pyfunction]
fn symmetrize(m: Rows) -> PyResult<Rows> {
    let m = from_rows(&m)?;
    if !m.is_square() {
        return Err(PyValueError::new_err("matrix must be square"));
    }
    Ok(to_rows(SymmetricMatrix::symmetrize(m).as_matrix()))
}

#[pymodule(name = "kernel_flows")]
fn kernel_flows_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<FlowResult>()?;
    m.add_function(wrap_pyfunction!(integrate_kernel_flow, m)?)?;
    m.add_function(wrap_pyfunction!(ssl_flow, m)?)?;
    m.add_function(wrap_pyfunction!(semi_flow, m)?)?;
    m.add_function(wrap_pyfunction!(muon_flow, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_rhs_mse, m)?)?;
    m.add_function(wrap_pyfunction!(muon_kernel_rhs, m)?)?;
    m.add_function(wrap_pyfunction!(effective_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ridge_prediction, m)?)?;
    m.add_function(wrap_pyfunction!(water_filling_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(ssl_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(semi_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(predict_k_infinity, m)?)?;
    m.add_function(wrap_pyfunction!(scalar_fixed_point, m)?)?;
    m.add_function(wrap_pyfunction!(effective_rank, m)?)?;
    m.add_function(wrap_pyfunction!(commutator_norm, m)?)?;
    m.add_function(wrap_pyfunction!(polar_direction, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_noise_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(risk_decomposition, m)?)?;
    m.add_function(wrap_pyfunction!(effective_dimension, m)?)?;
    m.add_function(wrap_pyfunction!(symmetrize, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}

//! Population-level risk: the probe bias/variance decomposition, effective dimension, the
//! water-filled versus static-spectrum comparison, and a finite-mode surrogate of the
//! operator flow.
//!
//! The surrogate replaces the integral operator with an `m×m` PSD matrix `T` on `m` grid
//! points with unit quadrature weights. The residual is the ridge residual
//! `r = λ(T + λI)⁻¹f` of the target vector `f`, and the drive is the rank-1 `M = rrᵀ`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, invalid, Result};
use crate::laws::water_filling_spectrum;
use crate::linalg::{sym_eig, SymmetricMatrix};
use crate::setup::RegularizationConfig;
use crate::supervised::{integrate_symmetric, resolvent, FlowConfig, FlowRun, MatrixFlow};

/// Operator eigenvalues `μᵢ` with target coefficients `aᵢ`, label-noise variance, nominal
/// sample count and probe ridge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpectrum {
    pub mu: Vec<f64>,
    pub a: Vec<f64>,
    pub sigma_eps2: f64,
    pub n: f64,
    pub lambda: f64,
}

impl PopulationSpectrum {
    pub fn new(mu: Vec<f64>, a: Vec<f64>, sigma_eps2: f64, n: f64, lambda: f64) -> Result<Self> {
        let s = Self { mu, a, sigma_eps2, n, lambda };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.len() != self.a.len() {
            return Err(dim_mismatch(format!("{} eigenvalues but {} coefficients", self.mu.len(), self.a.len())));
        }
        if self.mu.iter().any(|&m| !(m.is_finite() && m >= 0.0)) {
            return Err(invalid("operator eigenvalues must be finite and >= 0"));
        }
        if self.a.iter().any(|v| !v.is_finite()) {
            return Err(invalid("target coefficients must be finite"));
        }
        if !(self.sigma_eps2.is_finite() && self.sigma_eps2 >= 0.0) {
            return Err(invalid("sigma_eps2 must be >= 0"));
        }
        if !(self.n.is_finite() && self.n > 0.0) {
            return Err(invalid("N must be > 0"));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(invalid(format!("lambda must be > 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Probe risk split into approximation bias and estimation variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskDecomposition {
    pub bias: f64,
    pub variance: f64,
    pub total: f64,
}

/// `bias = Σ(λ/(μᵢ+λ))²aᵢ²`, `variance = (σ_ε²/N)Σ(μᵢ/(μᵢ+λ))²`.
pub fn risk_decomposition(spec: &PopulationSpectrum) -> Result<RiskDecomposition> {
    spec.validate()?;
    let l = spec.lambda;
    let bias: f64 = spec.mu.iter().zip(&spec.a).map(|(&m, &a)| (l / (m + l)).powi(2) * a * a).sum();
    let variance = spec.sigma_eps2 / spec.n * effective_dimension(&spec.mu, l, 2)?;
    Ok(RiskDecomposition { bias, variance, total: bias + variance })
}

/// Order 1: `Σμᵢ/(μᵢ+λ)`. Order 2: `Σ(μᵢ/(μᵢ+λ))²`.
pub fn effective_dimension(mu: &[f64], lambda: f64, order: u8) -> Result<f64> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(invalid(format!("lambda must be > 0, got {lambda}")));
    }
    let shrink = mu.iter().map(|&m| m / (m + lambda));
    match order {
        1 => Ok(shrink.sum()),
        2 => Ok(shrink.map(|s| s * s).sum()),
        _ => Err(invalid(format!("effective dimension order must be 1 or 2, got {order}"))),
    }
}

/// One row of a risk table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskRow {
    pub spectrum: String,
    pub bias: f64,
    pub variance: f64,
    pub total: f64,
    pub neff1: f64,
    pub neff2: f64,
}

impl RiskRow {
    pub fn evaluate(name: &str, spec: &PopulationSpectrum) -> Result<Self> {
        let r = risk_decomposition(spec)?;
        Ok(Self {
            spectrum: name.to_string(),
            bias: r.bias,
            variance: r.variance,
            total: r.total,
            neff1: effective_dimension(&spec.mu, spec.lambda, 1)?,
            neff2: effective_dimension(&spec.mu, spec.lambda, 2)?,
        })
    }
}

/// Risk rows of the water-filled and the trace-matched static spectrum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskComparison {
    pub flow: RiskRow,
    pub flow_spectrum: Vec<f64>,
    pub static_row: RiskRow,
    pub static_spectrum: Vec<f64>,
    pub static_exponent: f64,
}

impl RiskComparison {
    pub fn flow_not_worse(&self) -> bool {
        self.flow.total <= self.static_row.total
    }

    pub fn rows(&self) -> [&RiskRow; 2] {
        [&self.flow, &self.static_row]
    }

    /// CSV with header `spectrum,bias,variance,total,neff1,neff2`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_risk_csv(path, &self.rows().map(Clone::clone))
    }
}

/// Writes risk rows as CSV with LF line endings.
pub fn write_risk_csv(path: impl AsRef<Path>, rows: &[RiskRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Compares the water-filled spectrum of `sigma` against `μᵢ ∝ i^{−ν}` rescaled to the same
/// trace. Both are probed with ridge `reg.lambda`.
pub fn flow_vs_static_risk(
    a: &[f64],
    sigma: &[f64],
    static_exponent: f64,
    reg: &RegularizationConfig,
    sigma_eps2: f64,
    n: f64,
) -> Result<RiskComparison> {
    if !(static_exponent.is_finite() && static_exponent > 0.0) {
        return Err(invalid("static exponent must be > 0"));
    }
    if a.len() != sigma.len() {
        return Err(dim_mismatch("target and drive spectra differ in length"));
    }
    let flow_spectrum = water_filling_spectrum(sigma, reg)?;
    let trace: f64 = flow_spectrum.iter().sum();
    let raw: Vec<f64> = (1..=a.len()).map(|i| (i as f64).powf(-static_exponent)).collect();
    let raw_sum: f64 = raw.iter().sum();
    let static_spectrum: Vec<f64> = raw.iter().map(|v| v * trace / raw_sum).collect();
    let flow_spec = PopulationSpectrum::new(flow_spectrum.clone(), a.to_vec(), sigma_eps2, n, reg.lambda)?;
    let static_spec = PopulationSpectrum::new(static_spectrum.clone(), a.to_vec(), sigma_eps2, n, reg.lambda)?;
    Ok(RiskComparison {
        flow: RiskRow::evaluate("flow", &flow_spec)?,
        flow_spectrum,
        static_row: RiskRow::evaluate("static", &static_spec)?,
        static_spectrum,
        static_exponent,
    })
}

/// Drive scaling of the surrogate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopulationConvention {
    /// `(η/λ)(TMT + h.c.) − 2ημT`.
    #[default]
    Sandwiched,
    /// `(η/λ)(MT + TM) − 2ημT`; equals the empirical squared-loss kernel flow at `η = 1`.
    Empirical,
}

/// Parameters of [`population_flow_surrogate`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateParams {
    pub eta: f64,
    pub lambda: f64,
    pub mu: f64,
    #[serde(default)]
    pub convention: PopulationConvention,
}

impl SurrogateParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(invalid("eta must be > 0"));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(invalid("lambda must be > 0"));
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(invalid("mu must be >= 0"));
        }
        Ok(())
    }
}

/// Surrogate snapshot: operator, its spectrum and the target coefficients in its current
/// eigenbasis, both ordered by descending eigenvalue.
#[derive(Clone, Debug)]
pub struct PopulationState {
    pub t: f64,
    pub operator: SymmetricMatrix,
    pub spectrum: Vec<f64>,
    pub coefficients: Vec<f64>,
}

impl PopulationState {
    fn at(t: f64, operator: SymmetricMatrix, target: &DVector<f64>) -> Result<Self> {
        let eig = sym_eig(&operator)?;
        let coefficients = (eig.eigenvectors.transpose() * target).iter().copied().collect();
        Ok(Self { t, spectrum: eig.eigenvalues.iter().map(|v| v.max(0.0)).collect(), operator, coefficients })
    }

    /// Probe risk inputs at this snapshot.
    pub fn risk_spectrum(&self, sigma_eps2: f64, n: f64, lambda: f64) -> Result<PopulationSpectrum> {
        PopulationSpectrum::new(self.spectrum.clone(), self.coefficients.clone(), sigma_eps2, n, lambda)
    }
}

/// Vector field of the surrogate.
pub fn surrogate_rhs(t_op: &SymmetricMatrix, target: &DVector<f64>, p: &SurrogateParams) -> Result<SymmetricMatrix> {
    if t_op.dim() != target.len() {
        return Err(dim_mismatch("operator and target sizes differ"));
    }
    let r = resolvent(t_op, p.lambda)?.as_matrix() * target * p.lambda;
    let tm = t_op.as_matrix();
    let half = match p.convention {
        PopulationConvention::Sandwiched => {
            let tr = tm * &r;
            &tr * tr.transpose()
        }
        PopulationConvention::Empirical => &r * (tm * &r).transpose(),
    };
    let half_t = half.transpose();
    Ok(SymmetricMatrix::symmetrize((half + half_t) * (p.eta / p.lambda) - tm * (2.0 * p.eta * p.mu)))
}

/// `0.1 / (η(‖f‖²/λ² + 2μ))`.
pub fn surrogate_default_dt(target: &[f64], p: &SurrogateParams) -> f64 {
    let f2: f64 = target.iter().map(|v| v * v).sum();
    0.1 / (p.eta * (f2 / (p.lambda * p.lambda) + 2.0 * p.mu))
}

/// Integrates the surrogate with RK4. The tracked value is the squared residual norm.
pub fn population_flow_surrogate(
    t0: &SymmetricMatrix,
    target: &[f64],
    params: &SurrogateParams,
    cfg: &FlowConfig,
) -> Result<FlowRun<PopulationState>> {
    params.validate()?;
    cfg.validate()?;
    if t0.dim() != target.len() {
        return Err(dim_mismatch(format!("operator is {0}x{0} but target has {1} entries", t0.dim(), target.len())));
    }
    if sym_eig(t0)?.min_eigenvalue() < -crate::linalg::PSD_TOL * t0.amax().max(1.0) {
        return Err(crate::error::FlowError::NotPsd(sym_eig(t0)?.min_eigenvalue()));
    }
    let f = DVector::from_column_slice(target);
    let dt = cfg.dt.unwrap_or_else(|| surrogate_default_dt(target, params));
    let rhs_fn = |t: &SymmetricMatrix| surrogate_rhs(t, &f, params);
    let value_fn = |t: &SymmetricMatrix| -> Result<f64> {
        let r = resolvent(t, params.lambda)?.as_matrix() * &f * params.lambda;
        Ok(r.norm_squared())
    };
    let snap = |t: f64, op: SymmetricMatrix| PopulationState::at(t, op, &f);
    integrate_symmetric(MatrixFlow { rhs: &rhs_fn, value: &value_fn }, t0.clone(), dt, cfg, &snap)
}

/// Diagonal initial operator `diag(values)`.
pub fn diagonal_operator(values: &[f64]) -> SymmetricMatrix {
    SymmetricMatrix::from_diagonal(values)
}

/// `m×m` identity scaled by `c`.
pub fn isotropic_operator(m: usize, c: f64) -> SymmetricMatrix {
    SymmetricMatrix::symmetrize(DMatrix::identity(m, m) * c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::effective_rank;
    use crate::setup::{rng_from_seed, LabelSet};
    use crate::supervised::{integrate_kernel_flow, KernelRhs};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn spec(mu: Vec<f64>, a: Vec<f64>, s2: f64) -> PopulationSpectrum {
        PopulationSpectrum::new(mu, a, s2, 100.0, 1.0).unwrap()
    }

    #[test]
    fn collapse_limit() {
        let r = risk_decomposition(&spec(vec![0.0; 3], vec![1.0, 2.0, 0.5], 1.0)).unwrap();
        assert_abs_diff_eq!(r.bias, 5.25, epsilon = 1e-15);
        assert_eq!(r.variance, 0.0);
        assert_abs_diff_eq!(r.total, 5.25, epsilon = 1e-15);
    }

    #[test]
    fn interpolation_limit() {
        let r = risk_decomposition(&spec(vec![1e12; 4], vec![1.0; 4], 2.0)).unwrap();
        assert!(r.bias < 1e-20);
        assert_abs_diff_eq!(r.variance, 2.0 * 4.0 / 100.0, epsilon = 1e-10);
    }

    #[test]
    fn single_mode_at_lambda() {
        let r = risk_decomposition(&spec(vec![1.0], vec![1.0], 3.0)).unwrap();
        assert_abs_diff_eq!(r.bias, 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(r.variance, 3.0 / 400.0, epsilon = 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(PopulationSpectrum::new(vec![1.0], vec![1.0], 1.0, 10.0, 0.0).is_err());
        assert!(PopulationSpectrum::new(vec![-1.0], vec![1.0], 1.0, 10.0, 1.0).is_err());
        assert!(effective_dimension(&[1.0], 1.0, 3).is_err());
    }

    #[test]
    fn effective_dimension_examples() {
        assert_eq!(effective_dimension(&[0.0; 5], 1.0, 1).unwrap(), 0.0);
        assert_abs_diff_eq!(effective_dimension(&[2.0], 2.0, 1).unwrap(), 0.5);
        assert_abs_diff_eq!(effective_dimension(&[2.0], 2.0, 2).unwrap(), 0.25);
        assert_abs_diff_eq!(effective_dimension(&[1e12; 7], 1.0, 1).unwrap(), 7.0, epsilon = 1e-9);
    }

    #[test]
    fn monotone_in_each_eigenvalue() {
        let base = spec(vec![0.5, 1.0, 2.0], vec![1.0, 0.5, 0.2], 1.0);
        for i in 0..3 {
            let mut up = base.clone();
            up.mu[i] += 0.1;
            let l = base.lambda;
            let bias_i = |s: &PopulationSpectrum| (l / (s.mu[i] + l)).powi(2) * s.a[i] * s.a[i];
            let var_i = |s: &PopulationSpectrum| (s.mu[i] / (s.mu[i] + l)).powi(2);
            assert!(bias_i(&up) < bias_i(&base));
            assert!(var_i(&up) > var_i(&base));
        }
    }

    #[test]
    fn sub_threshold_target_is_irreducible() {
        let reg = RegularizationConfig::new(1.0, 1.0).unwrap();
        let cmp = flow_vs_static_risk(&[1.0, 2.0], &[0.5, 0.2], 1.0, &reg, 1.0, 10.0).unwrap();
        assert_abs_diff_eq!(cmp.flow.bias, 5.0, epsilon = 1e-15);
    }

    #[test]
    fn noiseless_comparison_is_bias_only() {
        let reg = RegularizationConfig::new(1.0, 0.1).unwrap();
        let cmp = flow_vs_static_risk(&[1.0, 0.5, 0.0], &[40.0, 10.0, 0.01], 1.0, &reg, 0.0, 10.0).unwrap();
        assert_eq!(cmp.flow.variance, 0.0);
        assert_eq!(cmp.static_row.variance, 0.0);
        let ft: f64 = cmp.flow_spectrum.iter().sum();
        let st: f64 = cmp.static_spectrum.iter().sum();
        assert_abs_diff_eq!(ft, st, epsilon = 1e-12);
    }

    #[test]
    fn top_modes_target_lowers_effective_dimension() {
        let reg = RegularizationConfig::new(1.0, 0.1).unwrap();
        let mut sigma = vec![0.0; 50];
        let mut a = vec![0.0; 50];
        for i in 0..3 {
            sigma[i] = 100.0 / (i + 1) as f64;
            a[i] = 1.0;
        }
        let cmp = flow_vs_static_risk(&a, &sigma, 1.0, &reg, 1.0, 100.0).unwrap();
        assert!(cmp.flow.neff1 < cmp.static_row.neff1);
    }

    #[test]
    fn zero_target_decays_isotropically() {
        let p = SurrogateParams { eta: 1.0, lambda: 1.0, mu: 0.5, convention: PopulationConvention::Sandwiched };
        let t0 = diagonal_operator(&[1.0, 2.0, 3.0]);
        let cfg = FlowConfig { dt: Some(0.01), max_steps: 100, ..FlowConfig::default() };
        let run = population_flow_surrogate(&t0, &[0.0; 3], &p, &cfg).unwrap();
        let decay = (-2.0f64 * 0.5 * 1.0).exp();
        let end = &run.terminal().operator;
        for i in 0..3 {
            assert_abs_diff_eq!(end[(i, i)], (i + 1) as f64 * decay, epsilon = 1e-9);
        }
    }

    #[test]
    fn aligned_rank_one_target_grows_only_its_mode() {
        for convention in [PopulationConvention::Sandwiched, PopulationConvention::Empirical] {
            let p = SurrogateParams { eta: 1.0, lambda: 1.0, mu: 0.1, convention };
            let t0 = diagonal_operator(&[0.5, 0.5, 0.5, 0.5]);
            let cfg = FlowConfig { dt: Some(0.01), max_steps: 10_000, ..FlowConfig::default() };
            let run = population_flow_surrogate(&t0, &[0.0, 3.0, 0.0, 0.0], &p, &cfg).unwrap();
            let end = &run.terminal().operator;
            assert!(end[(1, 1)] > 0.5, "{convention:?}");
            for i in [0, 2, 3] {
                assert!(end[(i, i)].abs() < 0.5 * (-0.2f64 * 90.0).exp());
            }
            assert!(effective_rank(end, 1e-6) <= 1);
        }
    }

    #[test]
    fn empirical_convention_matches_kernel_flow() {
        let mut rng = rng_from_seed(3);
        let n = 6;
        let f: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = LabelSet::new(DMatrix::from_column_slice(n, 1, &f)).unwrap();
        let reg = RegularizationConfig::new(0.7, 0.2).unwrap();
        let k0 = crate::supervised::default_init(n, 4);
        let cfg = FlowConfig { dt: Some(1e-3), max_steps: 1000, record_every: 1000, ..FlowConfig::default() };
        let emp = integrate_kernel_flow(&k0, KernelRhs::Mse, &labels, &reg, &cfg).unwrap();
        let p = SurrogateParams { eta: 1.0, lambda: 0.7, mu: 0.2, convention: PopulationConvention::Empirical };
        let sur = population_flow_surrogate(&k0, &f, &p, &cfg).unwrap();
        let gap = (emp.terminal().k.as_matrix() - sur.terminal().operator.as_matrix()).norm();
        assert!(gap <= 1e-6, "{gap}");
    }

    #[test]
    fn risk_csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("risk.csv");
        let reg = RegularizationConfig::new(1.0, 0.1).unwrap();
        flow_vs_static_risk(&[1.0, 0.0], &[10.0, 0.0], 1.0, &reg, 1.0, 10.0).unwrap().write_csv(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(text.starts_with("spectrum,bias,variance,total,neff1,neff2\nflow,"));
        assert!(!text.contains('\r'));
    }
}

//! Optimizer geometry: the modulated NTK `Θ = JM⁻¹Jᵀ`, weight-decay images, anisotropic
//! decay, and the polar-direction (Muon) feature and kernel flows.
//!
//! Under the polar update with a ridge-optimal readout,
//!
//! ```text
//! Φ̇ = η𝒫(W*ᵀRᵀ) − μΦ,     K̇ = η[KB(BKB)^{†-1/2} + (BKB)^{†-1/2}BK] − 2μK,
//! ```
//!
//! with `B = ΣYYᵀΣ`. Every nonzero singular value of the drive equals `η`, so every
//! nonzero eigenvalue of a converged kernel equals `(η/μ)²`.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, invalid, FlowError, Result};
use crate::linalg::{
    pinv_sqrt, polar_direction, sym_eig, GeneralMatrix, SymmetricMatrix, DEFAULT_RANK_TOL,
};
use crate::setup::{LabelSet, RegularizationConfig};
use crate::supervised::{
    effective_loss_grad, residual_mse, ridge_readout, FlowConfig, FlowRun, FlowStatus, StepRecord, DIVERGENCE_NORM,
};

/// Step scale `η`, decay `μ` and the pseudo-inverse rank tolerance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MuonConfig {
    pub eta: f64,
    pub mu: f64,
    #[serde(default = "default_rank_tol")]
    pub rank_tol: f64,
}

fn default_rank_tol() -> f64 {
    DEFAULT_RANK_TOL
}

impl MuonConfig {
    pub fn new(eta: f64, mu: f64) -> Result<Self> {
        let cfg = Self { eta, mu, rank_tol: DEFAULT_RANK_TOL };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(invalid("eta must be > 0"));
        }
        if !(self.mu.is_finite() && self.mu > 0.0) {
            return Err(invalid("mu must be > 0"));
        }
        if !(self.rank_tol.is_finite() && self.rank_tol >= 0.0) {
            return Err(invalid("rank_tol must be >= 0"));
        }
        Ok(())
    }

    /// Saturation level `(η/μ)²` of every active kernel eigenvalue.
    pub fn saturation(&self) -> f64 {
        (self.eta / self.mu).powi(2)
    }
}

/// A parameterized model seen through its Jacobian and a PD preconditioner.
#[derive(Clone, Debug)]
pub struct PreconditionedModel {
    /// `Nd × p` Jacobian of the flattened outputs.
    pub jacobian: GeneralMatrix,
    /// `p × p` positive-definite preconditioner.
    pub preconditioner: SymmetricMatrix,
    pub theta: DVector<f64>,
    /// Sample Gram `ΦᵀΦ` when the model has one.
    pub gram: Option<SymmetricMatrix>,
}

impl PreconditionedModel {
    pub fn new(jacobian: GeneralMatrix, preconditioner: SymmetricMatrix, theta: DVector<f64>) -> Result<Self> {
        let p = jacobian.ncols();
        if preconditioner.dim() != p || theta.len() != p {
            return Err(dim_mismatch(format!(
                "J has {p} columns, M is {0}x{0}, theta has length {1}",
                preconditioner.dim(),
                theta.len()
            )));
        }
        if Cholesky::new(preconditioner.as_matrix().clone()).is_none() {
            return Err(FlowError::Singular("preconditioner M"));
        }
        Ok(Self { jacobian, preconditioner, theta, gram: None })
    }

    fn chol(&self) -> Result<Cholesky<f64, nalgebra::Dyn>> {
        Cholesky::new(self.preconditioner.as_matrix().clone()).ok_or(FlowError::Singular("preconditioner M"))
    }
}

/// `Θ = JM⁻¹Jᵀ`.
pub fn modulated_ntk(model: &PreconditionedModel) -> Result<SymmetricMatrix> {
    let chol = model.chol()?;
    let x = chol.solve(&model.jacobian.transpose());
    Ok(SymmetricMatrix::symmetrize(&model.jacobian * x))
}

/// `v = JM⁻¹θ`.
pub fn weight_decay_image(model: &PreconditionedModel) -> Result<DVector<f64>> {
    let chol = model.chol()?;
    Ok(&model.jacobian * chol.solve(&model.theta))
}

/// Linear readout `Ŷ = Φ0ᵀWᵀ` with `θ = vec(W)` and `M = I`.
///
/// Outputs are flattened column-major (`row = c·N + i`), parameters likewise
/// (`index = m·C + c`), so `J[(c·N + i), (m·C + c)] = Φ0[m, i]`.
pub fn linear_readout_model(phi0: &GeneralMatrix, w: &GeneralMatrix) -> Result<PreconditionedModel> {
    let (k, n) = phi0.shape();
    let c = w.nrows();
    if w.ncols() != k {
        return Err(dim_mismatch("W must be C x k for Phi0 of shape k x N"));
    }
    let mut j = DMatrix::zeros(n * c, k * c);
    for cls in 0..c {
        for i in 0..n {
            for m in 0..k {
                j[(cls * n + i, m * c + cls)] = phi0[(m, i)];
            }
        }
    }
    let theta = DVector::from_column_slice(w.as_slice());
    let mut model = PreconditionedModel::new(j, SymmetricMatrix::identity(k * c), theta)?;
    model.gram = Some(SymmetricMatrix::symmetrize(phi0.transpose() * phi0));
    Ok(model)
}

/// Analytic and finite-difference output drift under readout weight decay.
#[derive(Clone, Debug)]
pub struct ReadoutDecayCheck {
    /// `−λGŶ` with `G = Φ0ᵀΦ0` (the N×N Gram acting on the N×C prediction).
    pub analytic: GeneralMatrix,
    /// `(Ŷ(W − hλW) − Ŷ(W))/h` at `h = 1e-7`.
    pub finite_diff: GeneralMatrix,
    /// `‖analytic − finite_diff‖_F`.
    pub gap: f64,
    /// `1e-6·(1 + ‖analytic‖_F)`.
    pub tolerance: f64,
    /// Gap between the finite difference and the exact drift `−λŶ`.
    pub exact_gap: f64,
}

impl ReadoutDecayCheck {
    pub fn passed(&self) -> bool {
        self.gap <= self.tolerance
    }
}

/// Compares `−λGŶ` against the measured output drift of `W ← W − hλW`.
pub fn readout_decay_check(phi0: &GeneralMatrix, w: &GeneralMatrix, lambda: f64) -> Result<ReadoutDecayCheck> {
    if w.ncols() != phi0.nrows() {
        return Err(dim_mismatch("W must be C x k for Phi0 of shape k x N"));
    }
    const H: f64 = 1e-7;
    let predict = |w: &GeneralMatrix| phi0.transpose() * w.transpose();
    let yhat = predict(w);
    let g = phi0.transpose() * phi0;
    let analytic = &g * &yhat * (-lambda);
    let stepped = w - w * (H * lambda);
    let finite_diff = (predict(&stepped) - &yhat) / H;
    let gap = (&analytic - &finite_diff).norm();
    let exact_gap = (&yhat * (-lambda) - &finite_diff).norm();
    let tolerance = 1e-6 * (1.0 + analytic.norm());
    Ok(ReadoutDecayCheck { analytic, finite_diff, gap, tolerance, exact_gap })
}

/// `𝒟(K) = GK + KG`.
pub fn anisotropic_decay(k: &SymmetricMatrix, g: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    if k.dim() != g.dim() {
        return Err(dim_mismatch("K and G must have equal size"));
    }
    let gk = g.as_matrix() * k.as_matrix();
    let t = gk.transpose();
    Ok(SymmetricMatrix::symmetrize(gk + t))
}

/// Preconditioned reduced feature field `vec(Φ̇) = Θ·vec(W*ᵀRᵀ − μΦ)`, with `Θ` acting on
/// the column-major flattening of `Φ`.
pub fn preconditioned_feature_rhs(
    phi: &GeneralMatrix,
    labels: &LabelSet,
    reg: &RegularizationConfig,
    theta: &SymmetricMatrix,
) -> Result<GeneralMatrix> {
    let (k, n) = phi.shape();
    if theta.dim() != k * n {
        return Err(dim_mismatch("Theta must act on vec(Phi)"));
    }
    let kernel = SymmetricMatrix::symmetrize(phi.transpose() * phi);
    let r = residual_mse(&kernel, labels.y(), reg.lambda)?;
    let w = ridge_readout(phi, labels.y(), reg.lambda)?;
    let field = w.transpose() * r.transpose() - phi * reg.mu;
    let flat = theta.as_matrix() * DVector::from_column_slice(field.as_slice());
    Ok(DMatrix::from_column_slice(k, n, flat.as_slice()))
}

/// `η𝒫(WᵀRᵀ) − μΦ`.
pub fn muon_feature_rhs(phi: &GeneralMatrix, w: &GeneralMatrix, r: &GeneralMatrix, cfg: &MuonConfig) -> Result<GeneralMatrix> {
    if w.ncols() != phi.nrows() || r.nrows() != phi.ncols() || r.ncols() != w.nrows() {
        return Err(dim_mismatch("need Phi k x N, W C x k, R N x C"));
    }
    let drive = polar_direction(&(w.transpose() * r.transpose()), cfg.rank_tol);
    Ok(drive * cfg.eta - phi * cfg.mu)
}

/// Muon kernel field `η[KB(BKB)^{†-1/2} + (BKB)^{†-1/2}BK] − 2μK`, `B = ΣYYᵀΣ`.
pub fn muon_kernel_rhs_mse(k: &SymmetricMatrix, labels: &LabelSet, lambda: f64, cfg: &MuonConfig) -> Result<SymmetricMatrix> {
    if k.dim() != labels.n() {
        return Err(dim_mismatch("K and labels disagree on N"));
    }
    let chol = Cholesky::new(k.shift(lambda).into_inner()).ok_or(FlowError::Singular("K + lambda I"))?;
    let p = chol.solve(labels.y());
    let b = SymmetricMatrix::new(&p * p.transpose())?;
    let bkb = SymmetricMatrix::symmetrize(b.as_matrix() * k.as_matrix() * b.as_matrix());
    let q = pinv_sqrt(&bkb, cfg.rank_tol)?;
    let x = k.as_matrix() * b.as_matrix() * q.as_matrix();
    let xt = x.transpose();
    Ok(SymmetricMatrix::symmetrize((x + xt) * cfg.eta - k.as_matrix() * (2.0 * cfg.mu)))
}

/// Snapshot of the feature-level Muon flow.
#[derive(Clone, Debug)]
pub struct MuonFeatureState {
    pub t: f64,
    pub phi: GeneralMatrix,
}

impl MuonFeatureState {
    pub fn kernel(&self) -> SymmetricMatrix {
        SymmetricMatrix::symmetrize(self.phi.transpose() * &self.phi)
    }
}

fn muon_phi_field(phi: &GeneralMatrix, labels: &LabelSet, lambda: f64, cfg: &MuonConfig) -> Result<GeneralMatrix> {
    let k = SymmetricMatrix::symmetrize(phi.transpose() * phi);
    let r = residual_mse(&k, labels.y(), lambda)?;
    let w = ridge_readout(phi, labels.y(), lambda)?;
    muon_feature_rhs(phi, &w, &r, cfg)
}

/// RK4 integration of the feature-level Muon flow with ridge-optimal readout.
pub fn muon_feature_flow(
    phi0: &GeneralMatrix,
    labels: &LabelSet,
    lambda: f64,
    cfg: &MuonConfig,
    flow: &FlowConfig,
) -> Result<FlowRun<MuonFeatureState>> {
    cfg.validate()?;
    flow.validate()?;
    if phi0.ncols() != labels.n() {
        return Err(dim_mismatch("Phi0 columns must match N"));
    }
    let dt = flow.dt.unwrap_or(0.05 / cfg.eta.max(cfg.mu));
    let mut phi = phi0.clone();
    let mut t = 0.0;
    let mut states = vec![MuonFeatureState { t, phi: phi.clone() }];
    let mut steps = Vec::new();
    let mut status = FlowStatus::MaxSteps;
    let mut last_recorded = 0;
    for step in 0..=flow.max_steps {
        let f1 = match muon_phi_field(&phi, labels, lambda, cfg) {
            Ok(f) => f,
            Err(_) => {
                status = FlowStatus::Diverged;
                break;
            }
        };
        steps.push(StepRecord { t, value: f64::NAN, trace: phi.norm_squared(), rhs_norm: f1.norm() });
        if f1.norm() <= flow.stop_grad_norm {
            status = FlowStatus::Converged;
            break;
        }
        if step == flow.max_steps {
            break;
        }
        let next = (|| -> Result<GeneralMatrix> {
            let f2 = muon_phi_field(&(&phi + &f1 * (0.5 * dt)), labels, lambda, cfg)?;
            let f3 = muon_phi_field(&(&phi + &f2 * (0.5 * dt)), labels, lambda, cfg)?;
            let f4 = muon_phi_field(&(&phi + &f3 * dt), labels, lambda, cfg)?;
            Ok(&phi + (&f1 + f2 * 2.0 + f3 * 2.0 + f4) * (dt / 6.0))
        })();
        match next {
            Ok(n) if n.norm().is_finite() && n.norm() <= DIVERGENCE_NORM => phi = n,
            _ => {
                status = FlowStatus::Diverged;
                break;
            }
        }
        t += dt;
        if (step + 1) % flow.record_every == 0 {
            states.push(MuonFeatureState { t, phi: phi.clone() });
            last_recorded = step + 1;
        }
    }
    if status != FlowStatus::Diverged && last_recorded != steps.len() - 1 {
        states.push(MuonFeatureState { t, phi });
    }
    Ok(FlowRun { states, steps, status, dt })
}

/// Outcome of [`muon_steady_state_check`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MuonSteadyReport {
    pub rank: usize,
    pub rank_ok: bool,
    /// `(η/μ)²`.
    pub saturation: f64,
    /// Largest relative deviation of a nonzero eigenvalue from the saturation level.
    pub max_rel_deviation: f64,
    pub saturation_ok: bool,
    /// `Some(false)` flags a terminal kernel taken from a run that did not converge.
    pub input_converged: Option<bool>,
}

impl MuonSteadyReport {
    pub fn passed(&self) -> bool {
        self.rank_ok && self.saturation_ok && self.input_converged != Some(false)
    }
}

/// Relative threshold separating active from null kernel modes.
pub const MUON_ACTIVE_THRESHOLD: f64 = 1e-6;

/// Rank bound and eigenvalue saturation at a terminal Muon kernel.
pub fn muon_steady_state_check(terminal_k: &SymmetricMatrix, c: usize, cfg: &MuonConfig) -> Result<MuonSteadyReport> {
    let eig = sym_eig(terminal_k)?;
    let rank = eig.count_above(MUON_ACTIVE_THRESHOLD);
    let saturation = cfg.saturation();
    let max_rel_deviation = eig.eigenvalues[..rank]
        .iter()
        .map(|v| (v - saturation).abs() / saturation)
        .fold(0.0, f64::max);
    Ok(MuonSteadyReport {
        rank,
        rank_ok: rank <= c,
        saturation,
        max_rel_deviation,
        saturation_ok: max_rel_deviation <= 1e-3,
        input_converged: None,
    })
}

/// [`muon_steady_state_check`] on the terminal state of a run, flagging non-convergence.
pub fn muon_steady_state_check_run<S>(
    run: &FlowRun<S>,
    kernel: impl Fn(&S) -> SymmetricMatrix,
    c: usize,
    cfg: &MuonConfig,
) -> Result<MuonSteadyReport> {
    let mut report = muon_steady_state_check(&kernel(run.terminal()), c, cfg)?;
    report.input_converged = Some(run.converged());
    Ok(report)
}

/// Raw and preconditioned stationarity measures at a kernel.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StationarityReport {
    /// `‖∇𝒥(K)‖_F`.
    pub raw_norm: f64,
    /// `‖sym(Θ∇𝒥(K))‖_F`.
    pub preconditioned_norm: f64,
    pub theta_min_eig: f64,
    pub theta_max_eig: f64,
    /// `κ(Θ)`, infinite for singular `Θ`.
    pub condition: f64,
    /// `preconditioned_norm / λ_min(Θ)`, an upper bound on the raw norm for PD `Θ`.
    pub raw_bound: Option<f64>,
    /// PD case: the raw norm obeys the bound.
    pub bound_holds: Option<bool>,
    /// Singular case: the raw gradient is nonzero yet annihilated by `Θ`.
    pub stalled: Option<bool>,
}

/// Tolerance for calling a norm zero in [`stationarity_invariance_demo`].
pub const STATIONARITY_TOL: f64 = 1e-10;

/// Compares `∇𝒥(K)` with its preconditioned image `sym(Θ∇𝒥(K))`.
pub fn stationarity_invariance_demo(
    k_star: &SymmetricMatrix,
    labels: &LabelSet,
    reg: &RegularizationConfig,
    theta: &SymmetricMatrix,
) -> Result<StationarityReport> {
    if theta.dim() != k_star.dim() {
        return Err(dim_mismatch("Theta and K must have equal size"));
    }
    let grad = effective_loss_grad(k_star, labels.y(), reg.lambda, reg.mu)?;
    let tg = theta.as_matrix() * grad.as_matrix();
    let sym = (&tg + tg.transpose()) * 0.5;
    let raw_norm = grad.norm();
    let preconditioned_norm = sym.norm();
    let eig = sym_eig(theta)?;
    let (lo, hi) = (eig.min_eigenvalue(), eig.max_eigenvalue());
    if lo < -1e-12 * hi.abs().max(1.0) {
        return Err(FlowError::NotPsd(lo));
    }
    let scale = hi.abs().max(f64::MIN_POSITIVE);
    let pd = lo > STATIONARITY_TOL * scale;
    let condition = if pd { hi / lo } else { f64::INFINITY };
    let (raw_bound, bound_holds, stalled) = if pd {
        let bound = preconditioned_norm / lo;
        (Some(bound), Some(raw_norm <= bound * (1.0 + 1e-12) + 1e-15), None)
    } else {
        let stalled = preconditioned_norm <= STATIONARITY_TOL * (1.0 + raw_norm) && raw_norm > STATIONARITY_TOL;
        (None, None, Some(stalled))
    };
    Ok(StationarityReport {
        raw_norm,
        preconditioned_norm,
        theta_min_eig: lo,
        theta_max_eig: hi,
        condition,
        raw_bound,
        bound_holds,
        stalled,
    })
}

/// A point where the preconditioned flow stalls although the raw gradient is nonzero.
///
/// Diagonal labels with `C = N`, modes `1..N−1` at their water-filling values, and the last
/// mode at a non-optimal value; `Θ = diag(1, …, 1, 0)` annihilates the only nonzero
/// gradient entry.
pub fn stagnation_witness(n: usize) -> Result<(SymmetricMatrix, LabelSet, RegularizationConfig, SymmetricMatrix)> {
    if n < 2 {
        return Err(invalid("the witness needs N >= 2"));
    }
    let reg = RegularizationConfig::new(1.0, 0.25)?;
    let ys: Vec<f64> = (0..n).map(|i| 2.0 + i as f64).collect();
    let y = DMatrix::from_diagonal(&DVector::from_vec(ys.clone()));
    let mut ks: Vec<f64> = ys
        .iter()
        .map(|&v| reg.lambda * ((v * v / reg.tau()).sqrt() - 1.0).max(0.0))
        .collect();
    ks[n - 1] = 0.1;
    let mut th = vec![1.0; n];
    th[n - 1] = 0.0;
    Ok((
        SymmetricMatrix::from_diagonal(&ks),
        LabelSet::new(y)?,
        reg,
        SymmetricMatrix::from_diagonal(&th),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{random_gaussian, random_orthonormal, random_psd, singular_values};
    use crate::setup::rng_from_seed;
    use crate::supervised::{integrate_kernel_flow, KernelRhs};
    use approx::assert_abs_diff_eq;

    #[test]
    fn ntk_examples() {
        let id = SymmetricMatrix::identity(4);
        let m = PreconditionedModel::new(DMatrix::identity(4, 4), id.clone(), DVector::zeros(4)).unwrap();
        assert!((modulated_ntk(&m).unwrap().as_matrix() - id.as_matrix()).norm() < 1e-14);
        let mut rng = rng_from_seed(1);
        let j = random_gaussian(5, 4, &mut rng);
        let a = PreconditionedModel::new(j.clone(), id.clone(), DVector::zeros(4)).unwrap();
        let b = PreconditionedModel::new(j.clone(), id.scale(4.0), DVector::zeros(4)).unwrap();
        let ta = modulated_ntk(&a).unwrap();
        let tb = modulated_ntk(&b).unwrap();
        assert!((tb.as_matrix() * 4.0 - ta.as_matrix()).norm() < 1e-12);
        let m = random_psd(4, 4, &mut rng).shift(0.1);
        let c = PreconditionedModel::new(j, m, DVector::zeros(4)).unwrap();
        assert!(sym_eig(&modulated_ntk(&c).unwrap()).unwrap().min_eigenvalue() > -1e-12);
        assert!(PreconditionedModel::new(DMatrix::identity(2, 2), SymmetricMatrix::zeros(2), DVector::zeros(2)).is_err());
    }

    #[test]
    fn decay_image_examples() {
        let id = SymmetricMatrix::identity(3);
        let m = PreconditionedModel::new(DMatrix::identity(3, 3), id.clone(), DVector::zeros(3)).unwrap();
        assert_eq!(weight_decay_image(&m).unwrap().norm(), 0.0);
        let theta = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let m = PreconditionedModel::new(DMatrix::identity(3, 3), id, theta.clone()).unwrap();
        assert!((weight_decay_image(&m).unwrap() - theta).norm() < 1e-15);
    }

    #[test]
    fn linear_readout_image_is_the_prediction() {
        let mut rng = rng_from_seed(2);
        let phi0 = random_gaussian(8, 12, &mut rng);
        let w = random_gaussian(3, 8, &mut rng);
        let model = linear_readout_model(&phi0, &w).unwrap();
        let yhat = phi0.transpose() * w.transpose();
        let v = weight_decay_image(&model).unwrap();
        assert!((v - DVector::from_column_slice(yhat.as_slice())).norm() < 1e-12);
        // Θ acts on flattened outputs as left multiplication by the sample Gram.
        let ntk = modulated_ntk(&model).unwrap();
        let g = model.gram.as_ref().unwrap();
        let lhs = ntk.as_matrix() * DVector::from_column_slice(yhat.as_slice());
        let rhs = g.as_matrix() * &yhat;
        assert!((lhs - DVector::from_column_slice(rhs.as_slice())).norm() < 1e-9 * rhs.norm());
    }

    #[test]
    fn readout_decay_trivial_cases() {
        let mut rng = rng_from_seed(3);
        let phi0 = random_gaussian(8, 12, &mut rng);
        let w = random_gaussian(3, 8, &mut rng);
        let c = readout_decay_check(&phi0, &w, 0.0).unwrap();
        assert_eq!(c.analytic.norm(), 0.0);
        assert_eq!(c.finite_diff.norm(), 0.0);
        assert!(c.passed());
        let c = readout_decay_check(&phi0, &DMatrix::zeros(3, 8), 0.7).unwrap();
        assert!(c.passed());
    }

    #[test]
    fn readout_drift_is_minus_lambda_prediction() {
        let mut rng = rng_from_seed(4);
        let phi0 = random_gaussian(8, 12, &mut rng);
        let w = random_gaussian(3, 8, &mut rng);
        let c = readout_decay_check(&phi0, &w, 0.7).unwrap();
        assert!(c.exact_gap <= 1e-6 * (1.0 + c.finite_diff.norm()));
    }

    #[test]
    fn readout_decay_holds_when_features_are_orthonormal() {
        let mut rng = rng_from_seed(5);
        let phi0 = random_orthonormal(12, 8, &mut rng).transpose();
        let w = random_gaussian(3, 8, &mut rng);
        assert!(readout_decay_check(&phi0, &w, 0.7).unwrap().passed());
    }

    #[test]
    fn anisotropic_decay_examples() {
        let mut rng = rng_from_seed(6);
        let k = random_psd(5, 5, &mut rng);
        let g = random_psd(5, 2, &mut rng);
        let d = anisotropic_decay(&k, &SymmetricMatrix::identity(5)).unwrap();
        assert!((d.as_matrix() - k.as_matrix() * 2.0).norm() < 1e-14);
        assert_eq!(anisotropic_decay(&SymmetricMatrix::zeros(5), &g).unwrap().norm(), 0.0);
        assert!(k.dot(anisotropic_decay(&k, &g).unwrap().as_matrix()) >= 0.0);
    }

    #[test]
    fn feature_rhs_examples() {
        let mut rng = rng_from_seed(7);
        let cfg = MuonConfig::new(0.8, 0.5).unwrap();
        let phi = random_gaussian(6, 10, &mut rng);
        let w = random_gaussian(2, 6, &mut rng);
        let zero = DMatrix::zeros(10, 2);
        assert!((muon_feature_rhs(&phi, &w, &zero, &cfg).unwrap() + &phi * 0.5).norm() < 1e-14);
        let r = random_gaussian(10, 2, &mut rng);
        let fixed = polar_direction(&(w.transpose() * r.transpose()), cfg.rank_tol) * (cfg.eta / cfg.mu);
        assert!(muon_feature_rhs(&fixed, &w, &r, &cfg).unwrap().norm() < 1e-12);
        let drive = muon_feature_rhs(&phi, &w, &r, &cfg).unwrap() + &phi * cfg.mu;
        let s = singular_values(&drive);
        assert!(s[..2].iter().all(|v| (v - cfg.eta).abs() < 1e-9));
        let scaled = muon_feature_rhs(&phi, &w, &(&r * 7.0), &cfg).unwrap();
        assert!((scaled - muon_feature_rhs(&phi, &w, &r, &cfg).unwrap()).norm() < 1e-10);
    }

    #[test]
    fn kernel_rhs_examples() {
        let mut rng = rng_from_seed(8);
        let labels = LabelSet::new(random_gaussian(6, 2, &mut rng)).unwrap();
        let cfg = MuonConfig::new(1.0, 0.5).unwrap();
        let z = SymmetricMatrix::zeros(6);
        assert_eq!(muon_kernel_rhs_mse(&z, &labels, 1.0, &cfg).unwrap().norm(), 0.0);
        let k = random_psd(6, 6, &mut rng);
        let none = LabelSet::new(DMatrix::zeros(6, 2)).unwrap();
        let rhs = muon_kernel_rhs_mse(&k, &none, 1.0, &cfg).unwrap();
        assert!((rhs.as_matrix() + k.as_matrix()).norm() < 1e-14);
    }

    #[test]
    fn muon_saturates_at_eta_over_mu_squared() {
        let mut rng = rng_from_seed(9);
        let labels = LabelSet::new(random_gaussian(16, 2, &mut rng)).unwrap();
        let reg = RegularizationConfig::new(1.0, 2.0).unwrap();
        let cfg = MuonConfig::new(1.0, 2.0).unwrap();
        let flow = FlowConfig { dt: Some(0.02), max_steps: 5000, stop_grad_norm: 1e-10, ..FlowConfig::default() };
        let k0 = crate::supervised::default_init(16, 3);
        let run = integrate_kernel_flow(&k0, KernelRhs::MuonMse(cfg), &labels, &reg, &flow).unwrap();
        let report = muon_steady_state_check_run(&run, |s| s.k.clone(), 2, &cfg).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_abs_diff_eq!(report.saturation, 0.25, epsilon = 1e-15);

        let gd = integrate_kernel_flow(&k0, KernelRhs::Mse, &labels, &reg, &FlowConfig { stop_grad_norm: 1e-10, max_steps: 100_000, ..flow }).unwrap();
        let neg = muon_steady_state_check(&gd.terminal().k, 2, &cfg).unwrap();
        assert!(neg.rank_ok && !neg.saturation_ok);
        assert!(muon_steady_state_check(&SymmetricMatrix::zeros(4), 1, &cfg).unwrap().passed());
    }

    #[test]
    fn free_feature_preconditioning_is_the_reduced_flow() {
        let mut rng = rng_from_seed(10);
        let labels = LabelSet::new(random_gaussian(5, 2, &mut rng)).unwrap();
        let reg = RegularizationConfig::new(0.5, 0.3).unwrap();
        let phi = random_gaussian(3, 5, &mut rng);
        let got = preconditioned_feature_rhs(&phi, &labels, &reg, &SymmetricMatrix::identity(15)).unwrap();
        let k = SymmetricMatrix::symmetrize(phi.transpose() * &phi);
        let r = residual_mse(&k, labels.y(), reg.lambda).unwrap();
        let w = ridge_readout(&phi, labels.y(), reg.lambda).unwrap();
        let want = w.transpose() * r.transpose() - &phi * reg.mu;
        assert!((got - want).norm() < 1e-12);
    }

    #[test]
    fn stationarity_examples() {
        let mut rng = rng_from_seed(11);
        let labels = LabelSet::new(random_gaussian(5, 2, &mut rng)).unwrap();
        let reg = RegularizationConfig::new(1.0, 0.2).unwrap();
        let k = random_psd(5, 5, &mut rng);
        let r = stationarity_invariance_demo(&k, &labels, &reg, &SymmetricMatrix::identity(5)).unwrap();
        assert_abs_diff_eq!(r.raw_norm, r.preconditioned_norm, epsilon = 1e-12);
        let q = random_orthonormal(5, 5, &mut rng);
        let theta = SymmetricMatrix::from_eigen(&[10.0, 5.0, 3.0, 2.0, 1.0], &q);
        let r = stationarity_invariance_demo(&k, &labels, &reg, &theta).unwrap();
        assert_abs_diff_eq!(r.condition, 10.0, epsilon = 1e-9);
        assert_eq!(r.bound_holds, Some(true));

        let (k, labels, reg, theta) = stagnation_witness(4).unwrap();
        let r = stationarity_invariance_demo(&k, &labels, &reg, &theta).unwrap();
        assert!(r.raw_norm > 0.1);
        assert!(r.preconditioned_norm < 1e-12);
        assert_eq!(r.stalled, Some(true));
    }
}

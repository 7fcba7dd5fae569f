//! Supervised kernel dynamics.
//!
//! With ridge readout `W*(Φ)` the kernel `K = ΦᵀΦ` follows
//!
//! ```text
//! K̇ = RŶᵀ + ŶRᵀ − 2μK,   Ŷ = KΣY,   R = λΣY,   Σ = (K + λI)⁻¹
//! ```
//!
//! which for squared loss is `K̇ = λ(BK + KB) − 2μK` with `B = ΣYYᵀΣ`. The effective loss
//! `λTr(YᵀΣY) + μTr K` decreases along this flow. The module also carries the coupled
//! `(Φ, W)` gradient flow, the scalar single-mode flow and the fast/slow error sweep.

use nalgebra::{Cholesky, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, invalid, FlowError, Result};
use crate::linalg::{random_psd, singular_values, GeneralMatrix, SymmetricMatrix};
use crate::muon::{muon_kernel_rhs_mse, MuonConfig};
use crate::setup::{label_gram, rng_from_seed, LabelSet, RegularizationConfig};

/// Frobenius norm above which a run is declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e12;

/// Integration controls shared by every flow.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    /// Step size; `None` selects the flow's default heuristic.
    pub dt: Option<f64>,
    pub max_steps: usize,
    pub stop_grad_norm: f64,
    pub psd_guard: bool,
    /// Heavy-ball friction `μ_m`; 0 disables momentum.
    pub friction: f64,
    /// Keep a full snapshot every `record_every` steps (the first and last are always kept).
    pub record_every: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            dt: None,
            max_steps: 20_000,
            stop_grad_norm: 1e-9,
            psd_guard: false,
            friction: 0.0,
            record_every: 10,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(dt) = self.dt {
            if !(dt.is_finite() && dt > 0.0) {
                return Err(invalid(format!("dt must be > 0, got {dt}")));
            }
        }
        if !(self.stop_grad_norm.is_finite() && self.stop_grad_norm > 0.0) {
            return Err(invalid("stop_grad_norm must be > 0"));
        }
        if !(self.friction.is_finite() && self.friction >= 0.0) {
            return Err(invalid("friction must be >= 0"));
        }
        if self.record_every == 0 {
            return Err(invalid("record_every must be >= 1"));
        }
        Ok(())
    }
}

/// How a run ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowStatus {
    Converged,
    MaxSteps,
    Diverged,
}

/// Scalar diagnostics recorded at every visited point of a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    /// Effective loss, SSL energy or coupled objective depending on the flow.
    pub value: f64,
    pub trace: f64,
    /// Norm of the vector field at this point.
    pub rhs_norm: f64,
}

/// Snapshots plus per-step diagnostics.
#[derive(Clone, Debug)]
pub struct FlowRun<S> {
    pub states: Vec<S>,
    pub steps: Vec<StepRecord>,
    pub status: FlowStatus,
    pub dt: f64,
}

impl<S> FlowRun<S> {
    pub fn terminal(&self) -> &S {
        self.states.last().expect("a run always holds its initial state")
    }

    pub fn converged(&self) -> bool {
        self.status == FlowStatus::Converged
    }

    /// Largest per-step increase of the tracked value, relative to `1 + |value|`.
    pub fn max_relative_increase(&self) -> f64 {
        self.steps
            .windows(2)
            .map(|w| (w[1].value - w[0].value) / (1.0 + w[0].value.abs()))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Snapshot of the kernel flow.
#[derive(Clone, Debug)]
pub struct SupervisedFlowState {
    pub t: f64,
    pub k: SymmetricMatrix,
    pub sigma: SymmetricMatrix,
    pub yhat: GeneralMatrix,
    pub r: GeneralMatrix,
    pub eff_loss: f64,
}

impl SupervisedFlowState {
    pub fn at(t: f64, k: SymmetricMatrix, labels: &LabelSet, reg: &RegularizationConfig) -> Result<Self> {
        let sigma = resolvent(&k, reg.lambda)?;
        let r = sigma.as_matrix() * labels.y() * reg.lambda;
        let yhat = labels.y() - &r;
        let eff_loss = reg.lambda * labels.y().dot(&(sigma.as_matrix() * labels.y())) + reg.mu * k.trace();
        Ok(Self { t, k, sigma, yhat, r, eff_loss })
    }
}

fn check_square(k: &SymmetricMatrix, y: &GeneralMatrix) -> Result<()> {
    if k.dim() != y.nrows() {
        return Err(dim_mismatch(format!("K is {}x{} but Y has {} rows", k.dim(), k.dim(), y.nrows())));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(invalid(format!("lambda must be > 0, got {lambda}")));
    }
    Ok(())
}

fn shifted_cholesky(k: &SymmetricMatrix, lambda: f64) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(k.shift(lambda).into_inner()).ok_or(FlowError::Singular("K + lambda I"))
}

/// `(K + λI)⁻¹`.
pub fn resolvent(k: &SymmetricMatrix, lambda: f64) -> Result<SymmetricMatrix> {
    check_lambda(lambda)?;
    let chol = shifted_cholesky(k, lambda)?;
    Ok(SymmetricMatrix::symmetrize(chol.inverse()))
}

/// Kernel ridge prediction `Ŷ = K(K + λI)⁻¹Y`.
pub fn ridge_prediction(k: &SymmetricMatrix, y: &GeneralMatrix, lambda: f64) -> Result<GeneralMatrix> {
    check_lambda(lambda)?;
    check_square(k, y)?;
    let lu = k.shift(lambda).into_inner().lu();
    let alpha = lu.solve(y).ok_or(FlowError::Singular("K + lambda I"))?;
    Ok(k.as_matrix() * alpha)
}

/// Squared-loss residual `R = λ(K + λI)⁻¹Y`.
pub fn residual_mse(k: &SymmetricMatrix, y: &GeneralMatrix, lambda: f64) -> Result<GeneralMatrix> {
    check_lambda(lambda)?;
    check_square(k, y)?;
    let chol = shifted_cholesky(k, lambda)?;
    Ok(chol.solve(y) * lambda)
}

/// `RŶᵀ + ŶRᵀ − 2μK`.
pub fn kernel_rhs_general(yhat: &GeneralMatrix, r: &GeneralMatrix, k: &SymmetricMatrix, mu: f64) -> Result<SymmetricMatrix> {
    if yhat.shape() != r.shape() || yhat.nrows() != k.dim() {
        return Err(dim_mismatch("Yhat, R and K shapes disagree"));
    }
    let drive = r * yhat.transpose();
    let t = drive.transpose();
    Ok(SymmetricMatrix::symmetrize(drive + t - k.as_matrix() * (2.0 * mu)))
}

/// Low-rank pieces of the squared-loss drive: `P = ΣY` and `S = KP`, so `B = PPᵀ`.
struct MseDrive {
    p: GeneralMatrix,
    s: GeneralMatrix,
}

impl MseDrive {
    fn new(k: &SymmetricMatrix, y: &GeneralMatrix, lambda: f64) -> Result<Self> {
        let chol = shifted_cholesky(k, lambda)?;
        let p = chol.solve(y);
        let s = k.as_matrix() * &p;
        Ok(Self { p, s })
    }

    fn rhs(&self, k: &SymmetricMatrix, lambda: f64, mu: f64) -> SymmetricMatrix {
        let a = &self.p * self.s.transpose();
        let at = a.transpose();
        SymmetricMatrix::symmetrize((a + at) * lambda - k.as_matrix() * (2.0 * mu))
    }

    fn eff_loss(&self, k: &SymmetricMatrix, y: &GeneralMatrix, lambda: f64, mu: f64) -> f64 {
        lambda * y.dot(&self.p) + mu * k.trace()
    }
}

/// `λ[ΣM_YΣK + KΣM_YΣ] − 2μK`, evaluated through the rank-C factor `ΣY`.
pub fn kernel_rhs_mse(k: &SymmetricMatrix, y: &GeneralMatrix, lambda: f64, mu: f64) -> Result<SymmetricMatrix> {
    check_lambda(lambda)?;
    check_square(k, y)?;
    Ok(MseDrive::new(k, y, lambda)?.rhs(k, lambda, mu))
}

/// `Tr(Yᵀ(I + K/λ)⁻¹Y) + μTr K`.
pub fn effective_loss(k: &SymmetricMatrix, y: &GeneralMatrix, lambda: f64, mu: f64) -> Result<f64> {
    check_lambda(lambda)?;
    check_square(k, y)?;
    Ok(MseDrive::new(k, y, lambda)?.eff_loss(k, y, lambda, mu))
}

/// Gradient of [`effective_loss`] with respect to `K`: `−λΣM_YΣ + μI`.
pub fn effective_loss_grad(k: &SymmetricMatrix, y: &GeneralMatrix, lambda: f64, mu: f64) -> Result<SymmetricMatrix> {
    check_lambda(lambda)?;
    check_square(k, y)?;
    let d = MseDrive::new(k, y, lambda)?;
    let b = &d.p * d.p.transpose();
    Ok(SymmetricMatrix::symmetrize(b * (-lambda)).shift(mu))
}

/// `0.1 / (λ_max(M_Y)/λ² + 2μ)`.
pub fn default_dt(labels: &LabelSet, reg: &RegularizationConfig) -> Result<f64> {
    let (_, eig) = label_gram(labels)?;
    Ok(0.1 / (eig.max_eigenvalue().max(0.0) / (reg.lambda * reg.lambda) + 2.0 * reg.mu))
}

/// `0.1·I` plus a `1e-3`-scaled random PSD jitter.
pub fn default_init(n: usize, seed: u64) -> SymmetricMatrix {
    let mut rng = rng_from_seed(seed);
    random_psd(n, n, &mut rng).scale(1e-3).shift(0.1)
}

/// Right-hand side selector for [`integrate_kernel_flow`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum KernelRhs {
    /// Composes [`ridge_prediction`], [`residual_mse`] and [`kernel_rhs_general`].
    General,
    /// [`kernel_rhs_mse`].
    Mse,
    /// Polar-direction kernel flow; decay and step scale come from the Muon config.
    MuonMse(MuonConfig),
}

fn eval_rhs(kind: &KernelRhs, k: &SymmetricMatrix, labels: &LabelSet, reg: &RegularizationConfig) -> Result<SymmetricMatrix> {
    match kind {
        KernelRhs::General => {
            let yhat = ridge_prediction(k, labels.y(), reg.lambda)?;
            let r = residual_mse(k, labels.y(), reg.lambda)?;
            kernel_rhs_general(&yhat, &r, k, reg.mu)
        }
        KernelRhs::Mse => kernel_rhs_mse(k, labels.y(), reg.lambda, reg.mu),
        KernelRhs::MuonMse(cfg) => muon_kernel_rhs_mse(k, labels, reg.lambda, cfg),
    }
}

/// Generic RK4 driver for symmetric-matrix flows. `value` is the Lyapunov-type scalar
/// tracked per step; `rhs` is the vector field.
pub(crate) struct MatrixFlow<'a> {
    pub rhs: &'a dyn Fn(&SymmetricMatrix) -> Result<SymmetricMatrix>,
    pub value: &'a dyn Fn(&SymmetricMatrix) -> Result<f64>,
}

pub(crate) fn integrate_symmetric<S>(
    flow: MatrixFlow<'_>,
    k0: SymmetricMatrix,
    dt: f64,
    cfg: &FlowConfig,
    snapshot: &dyn Fn(f64, SymmetricMatrix) -> Result<S>,
) -> Result<FlowRun<S>> {
    let mut k = k0;
    let mut v = SymmetricMatrix::zeros(k.dim());
    let momentum = cfg.friction > 0.0;
    let mut t = 0.0;
    let mut states = vec![snapshot(t, k.clone())?];
    let mut steps = Vec::new();
    let mut status = FlowStatus::MaxSteps;
    let mut last_recorded = 0usize;
    for step in 0..=cfg.max_steps {
        let f1 = match (flow.rhs)(&k) {
            Ok(f) if f.is_finite() => f,
            _ => {
                status = FlowStatus::Diverged;
                break;
            }
        };
        let rhs_norm = if momentum { f1.norm().max(v.norm()) } else { f1.norm() };
        let value = (flow.value)(&k).unwrap_or(f64::NAN);
        steps.push(StepRecord { t, value, trace: k.trace(), rhs_norm });
        if rhs_norm <= cfg.stop_grad_norm {
            status = FlowStatus::Converged;
            break;
        }
        if step == cfg.max_steps {
            break;
        }
        let next = if momentum {
            rk4_momentum(&flow, &k, &v, &f1, dt, cfg.friction).map(|(k2, v2)| {
                v = v2;
                k2
            })
        } else {
            rk4(&flow, &k, &f1, dt)
        };
        let mut next = match next {
            Ok(n) => n,
            Err(_) => {
                status = FlowStatus::Diverged;
                break;
            }
        };
        if cfg.psd_guard {
            next = crate::linalg::psd_project(&next);
        }
        t += dt;
        if !next.is_finite() || next.norm() > DIVERGENCE_NORM {
            status = FlowStatus::Diverged;
            break;
        }
        k = next;
        if (step + 1) % cfg.record_every == 0 {
            states.push(snapshot(t, k.clone())?);
            last_recorded = step + 1;
        }
    }
    let visited = steps.len().saturating_sub(1);
    if status != FlowStatus::Diverged && last_recorded != visited {
        states.push(snapshot(t, k)?);
    }
    Ok(FlowRun { states, steps, status, dt })
}

fn rk4(flow: &MatrixFlow<'_>, k: &SymmetricMatrix, f1: &SymmetricMatrix, dt: f64) -> Result<SymmetricMatrix> {
    let f2 = (flow.rhs)(&k.add(&f1.scale(0.5 * dt)))?;
    let f3 = (flow.rhs)(&k.add(&f2.scale(0.5 * dt)))?;
    let f4 = (flow.rhs)(&k.add(&f3.scale(dt)))?;
    let incr = f1.add(&f2.scale(2.0)).add(&f3.scale(2.0)).add(&f4);
    Ok(k.add(&incr.scale(dt / 6.0)))
}

/// RK4 on `K̇ = V`, `V̇ = −μ_m V + F(K)`.
fn rk4_momentum(
    flow: &MatrixFlow<'_>,
    k: &SymmetricMatrix,
    v: &SymmetricMatrix,
    f1: &SymmetricMatrix,
    dt: f64,
    friction: f64,
) -> Result<(SymmetricMatrix, SymmetricMatrix)> {
    let acc = |vv: &SymmetricMatrix, f: &SymmetricMatrix| f.sub(&vv.scale(friction));
    let (dk1, dv1) = (v.clone(), acc(v, f1));
    let (k2, v2) = (k.add(&dk1.scale(0.5 * dt)), v.add(&dv1.scale(0.5 * dt)));
    let (dk2, dv2) = (v2.clone(), acc(&v2, &(flow.rhs)(&k2)?));
    let (k3, v3) = (k.add(&dk2.scale(0.5 * dt)), v.add(&dv2.scale(0.5 * dt)));
    let (dk3, dv3) = (v3.clone(), acc(&v3, &(flow.rhs)(&k3)?));
    let (k4, v4) = (k.add(&dk3.scale(dt)), v.add(&dv3.scale(dt)));
    let (dk4, dv4) = (v4.clone(), acc(&v4, &(flow.rhs)(&k4)?));
    let k_next = k.add(&dk1.add(&dk2.scale(2.0)).add(&dk3.scale(2.0)).add(&dk4).scale(dt / 6.0));
    let v_next = v.add(&dv1.add(&dv2.scale(2.0)).add(&dv3.scale(2.0)).add(&dv4).scale(dt / 6.0));
    Ok((k_next, v_next))
}

/// Integrates the kernel flow from `k0` with fixed-step RK4.
///
/// The run stops once `‖K̇‖_F ≤ stop_grad_norm` (with momentum, also `‖V‖_F`) or after
/// `max_steps`. Divergence is reported through [`FlowStatus::Diverged`] with the
/// trajectory prefix.
pub fn integrate_kernel_flow(
    k0: &SymmetricMatrix,
    rhs: KernelRhs,
    labels: &LabelSet,
    reg: &RegularizationConfig,
    cfg: &FlowConfig,
) -> Result<FlowRun<SupervisedFlowState>> {
    cfg.validate()?;
    reg.validate()?;
    check_square(k0, labels.y())?;
    if let KernelRhs::MuonMse(m) = &rhs {
        m.validate()?;
        if cfg.friction > 0.0 {
            return Err(invalid("momentum is not supported for the Muon flow"));
        }
    }
    let dt = match cfg.dt {
        Some(dt) => dt,
        None => default_dt(labels, reg)?,
    };
    let y = labels.y();
    let rhs_fn = |k: &SymmetricMatrix| eval_rhs(&rhs, k, labels, reg);
    let value_fn = |k: &SymmetricMatrix| effective_loss(k, y, reg.lambda, reg.mu);
    let snap = |t: f64, k: SymmetricMatrix| SupervisedFlowState::at(t, k, labels, reg);
    integrate_symmetric(MatrixFlow { rhs: &rhs_fn, value: &value_fn }, k0.clone(), dt, cfg, &snap)
}

/// Ridge-optimal readout `W* = Yᵀ(ΦᵀΦ + λI)⁻¹Φᵀ`.
pub fn ridge_readout(phi: &GeneralMatrix, y: &GeneralMatrix, lambda: f64) -> Result<GeneralMatrix> {
    check_lambda(lambda)?;
    if phi.ncols() != y.nrows() {
        return Err(dim_mismatch("Phi columns must match label rows"));
    }
    let k = SymmetricMatrix::symmetrize(phi.transpose() * phi);
    let chol = shifted_cholesky(&k, lambda)?;
    Ok((chol.solve(y)).transpose() * phi.transpose())
}

/// `½‖ΦᵀWᵀ − Y‖² + (λ/2)‖W‖² + (μ/2)‖Φ‖²`.
pub fn coupled_objective(phi: &GeneralMatrix, w: &GeneralMatrix, y: &GeneralMatrix, reg: &RegularizationConfig) -> f64 {
    let e = phi.transpose() * w.transpose() - y;
    0.5 * e.norm_squared() + 0.5 * reg.lambda * w.norm_squared() + 0.5 * reg.mu * phi.norm_squared()
}

/// Gradients `(∇_W, ∇_Φ)` of [`coupled_objective`].
pub fn coupled_gradients(
    phi: &GeneralMatrix,
    w: &GeneralMatrix,
    y: &GeneralMatrix,
    reg: &RegularizationConfig,
) -> (GeneralMatrix, GeneralMatrix) {
    let e = phi.transpose() * w.transpose() - y;
    let gw = e.transpose() * phi.transpose() + w * reg.lambda;
    let gphi = w.transpose() * e.transpose() + phi * reg.mu;
    (gw, gphi)
}

/// Snapshot of the coupled feature/readout flow.
#[derive(Clone, Debug)]
pub struct CoupledState {
    pub t: f64,
    pub phi: GeneralMatrix,
    pub w: GeneralMatrix,
    pub eta_w: f64,
    pub eta_phi: f64,
    pub objective: f64,
}

impl CoupledState {
    /// `K = ΦᵀΦ`.
    pub fn kernel(&self) -> SymmetricMatrix {
        SymmetricMatrix::symmetrize(self.phi.transpose() * &self.phi)
    }
}

/// Forward-Euler coupled flow `Ẇ = −η_W(∇_W𝓛 + λW)`, `Φ̇ = −η_Φ(∇_Φ𝓛 + μΦ)` with step
/// `η·dt` per variable. With friction, each variable carries a velocity
/// `v ← v + dt(−μ_m v − η∇)` and moves by `dt·v`.
#[allow(clippy::too_many_arguments)]
pub fn coupled_flow(
    phi0: &GeneralMatrix,
    w0: &GeneralMatrix,
    labels: &LabelSet,
    reg: &RegularizationConfig,
    eta_w: f64,
    eta_phi: f64,
    cfg: &FlowConfig,
) -> Result<FlowRun<CoupledState>> {
    cfg.validate()?;
    reg.validate()?;
    if !(eta_w > 0.0 && eta_phi > 0.0) {
        return Err(invalid("learning rates must be > 0"));
    }
    if reg.mu <= 0.0 {
        return Err(invalid("the coupled flow needs mu > 0"));
    }
    let y = labels.y();
    if phi0.ncols() != y.nrows() || w0.nrows() != y.ncols() || w0.ncols() != phi0.nrows() {
        return Err(dim_mismatch("need Phi k x N, W C x k, Y N x C"));
    }
    let dt = match cfg.dt {
        Some(dt) => dt,
        None => {
            let s = singular_values(phi0).first().copied().unwrap_or(0.0);
            0.1 / ((s * s + reg.lambda) * eta_w).max((s * s + reg.mu) * eta_phi).max(1.0)
        }
    };
    let (mut phi, mut w) = (phi0.clone(), w0.clone());
    let (mut vphi, mut vw) = (phi.map(|_| 0.0), w.map(|_| 0.0));
    let momentum = cfg.friction > 0.0;
    let mut t = 0.0;
    let snap = |t: f64, phi: &GeneralMatrix, w: &GeneralMatrix| CoupledState {
        t,
        phi: phi.clone(),
        w: w.clone(),
        eta_w,
        eta_phi,
        objective: coupled_objective(phi, w, y, reg),
    };
    let mut states = vec![snap(t, &phi, &w)];
    let mut steps = Vec::new();
    let mut status = FlowStatus::MaxSteps;
    let mut last_recorded = 0usize;
    for step in 0..=cfg.max_steps {
        let (gw, gphi) = coupled_gradients(&phi, &w, y, reg);
        let mut rhs_norm = gw.norm().max(gphi.norm());
        if momentum {
            rhs_norm = rhs_norm.max(vw.norm()).max(vphi.norm());
        }
        let objective = coupled_objective(&phi, &w, y, reg);
        steps.push(StepRecord { t, value: objective, trace: phi.norm_squared(), rhs_norm });
        if rhs_norm <= cfg.stop_grad_norm {
            status = FlowStatus::Converged;
            break;
        }
        if step == cfg.max_steps {
            break;
        }
        if momentum {
            vw = &vw + (&vw * (-cfg.friction) - &gw * eta_w) * dt;
            vphi = &vphi + (&vphi * (-cfg.friction) - &gphi * eta_phi) * dt;
            w += &vw * dt;
            phi += &vphi * dt;
        } else {
            w -= gw * (eta_w * dt);
            phi -= gphi * (eta_phi * dt);
        }
        t += dt;
        let size = phi.norm().max(w.norm());
        if !size.is_finite() || size > DIVERGENCE_NORM {
            status = FlowStatus::Diverged;
            break;
        }
        if (step + 1) % cfg.record_every == 0 {
            states.push(snap(t, &phi, &w));
            last_recorded = step + 1;
        }
    }
    if status != FlowStatus::Diverged && last_recorded != steps.len() - 1 {
        states.push(snap(t, &phi, &w));
    }
    Ok(FlowRun { states, steps, status, dt })
}

/// Growth factor `2λk/(λ + k)²` of the single-mode flow; peaks at `k = λ`.
pub fn scalar_growth_term(k: f64, lambda: f64) -> f64 {
    2.0 * lambda * k / ((lambda + k) * (lambda + k))
}

/// `k̇ = 2λk·y²/(λ + k)² − 2μk`.
pub fn scalar_rhs(k: f64, y: f64, lambda: f64, mu: f64) -> f64 {
    y * y * scalar_growth_term(k, lambda) - 2.0 * mu * k
}

/// Closed-form terminal value for `k0 > 0`.
pub fn scalar_fixed_point(y: f64, lambda: f64, mu: f64) -> f64 {
    let s = y * y;
    if s <= mu * lambda {
        0.0
    } else {
        lambda * ((s / (lambda * mu)).sqrt() - 1.0)
    }
}

/// RK4 integration of the single-mode flow; returns every `(t, k)` visited.
pub fn scalar_flow(k0: f64, y: f64, lambda: f64, mu: f64, cfg: &FlowConfig) -> Result<Vec<(f64, f64)>> {
    cfg.validate()?;
    check_lambda(lambda)?;
    if !(k0 >= 0.0 && k0.is_finite()) {
        return Err(invalid("k0 must be finite and >= 0"));
    }
    let dt = cfg.dt.unwrap_or(0.1 / (y * y / (lambda * lambda) + 2.0 * mu));
    let f = |k: f64| scalar_rhs(k, y, lambda, mu);
    let mut k = k0;
    let mut t = 0.0;
    let mut out = vec![(t, k)];
    for _ in 0..cfg.max_steps {
        let f1 = f(k);
        if f1.abs() <= cfg.stop_grad_norm {
            break;
        }
        let f2 = f(k + 0.5 * dt * f1);
        let f3 = f(k + 0.5 * dt * f2);
        let f4 = f(k + dt * f3);
        k = (k + dt / 6.0 * (f1 + 2.0 * f2 + 2.0 * f3 + f4)).max(0.0);
        t += dt;
        out.push((t, k));
        if !k.is_finite() {
            break;
        }
    }
    Ok(out)
}

/// One entry of [`adiabatic_error_sweep`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdiabaticPoint {
    pub epsilon: f64,
    /// `sup_t ‖Φ_coupled(t) − Φ_reduced(t)‖_F` over the comparison grid.
    pub error: f64,
    pub diverged: bool,
}

/// Number of comparison instants on `[0, T]`.
pub const ADIABATIC_GRID: usize = 100;

fn reduced_phi_rhs(phi: &GeneralMatrix, y: &GeneralMatrix, reg: &RegularizationConfig, eta_phi: f64) -> Result<GeneralMatrix> {
    let k = SymmetricMatrix::symmetrize(phi.transpose() * phi);
    let r = residual_mse(&k, y, reg.lambda)?;
    let w = ridge_readout(phi, y, reg.lambda)?;
    Ok((w.transpose() * r.transpose() - phi * reg.mu) * eta_phi)
}

fn coupled_rhs(
    phi: &GeneralMatrix,
    w: &GeneralMatrix,
    y: &GeneralMatrix,
    reg: &RegularizationConfig,
    eta_w: f64,
    eta_phi: f64,
) -> (GeneralMatrix, GeneralMatrix) {
    let (gw, gphi) = coupled_gradients(phi, w, y, reg);
    (gphi * (-eta_phi), gw * (-eta_w))
}

/// Sup-norm gap between the coupled flow at `η_Φ = 1, η_W = 1/ε` and the reduced
/// feature flow with ridge-optimal readout, both integrated by RK4 from `Φ0` on a
/// shared grid with `dt ≤ 0.25ε/(s_max(Φ0)² + λ)`.
pub fn adiabatic_error_sweep(
    phi0: &GeneralMatrix,
    w0: &GeneralMatrix,
    labels: &LabelSet,
    reg: &RegularizationConfig,
    epsilon_list: &[f64],
    horizon: f64,
) -> Result<Vec<AdiabaticPoint>> {
    reg.validate()?;
    let y = labels.y();
    if phi0.ncols() != y.nrows() || w0.nrows() != y.ncols() || w0.ncols() != phi0.nrows() {
        return Err(dim_mismatch("need Phi k x N, W C x k, Y N x C"));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(invalid("horizon must be > 0"));
    }
    let smax = singular_values(phi0).first().copied().unwrap_or(0.0);
    let mut out = Vec::with_capacity(epsilon_list.len());
    for &eps in epsilon_list {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(invalid(format!("epsilon must lie in (0, 1), got {eps}")));
        }
        let target_dt = (0.25 * eps / (smax * smax + reg.lambda)).min(1e-2);
        let per_cell = ((horizon / ADIABATIC_GRID as f64) / target_dt).ceil().max(1.0) as usize;
        let dt = horizon / (ADIABATIC_GRID * per_cell) as f64;
        let (eta_w, eta_phi) = (1.0 / eps, 1.0);
        let (mut pc, mut wc) = (phi0.clone(), w0.clone());
        let mut pr = phi0.clone();
        let mut error = 0.0f64;
        let mut diverged = false;
        'grid: for _ in 0..ADIABATIC_GRID {
            for _ in 0..per_cell {
                let (a1, b1) = coupled_rhs(&pc, &wc, y, reg, eta_w, eta_phi);
                let (a2, b2) = coupled_rhs(&(&pc + &a1 * (0.5 * dt)), &(&wc + &b1 * (0.5 * dt)), y, reg, eta_w, eta_phi);
                let (a3, b3) = coupled_rhs(&(&pc + &a2 * (0.5 * dt)), &(&wc + &b2 * (0.5 * dt)), y, reg, eta_w, eta_phi);
                let (a4, b4) = coupled_rhs(&(&pc + &a3 * dt), &(&wc + &b3 * dt), y, reg, eta_w, eta_phi);
                pc += (a1 + a2 * 2.0 + a3 * 2.0 + a4) * (dt / 6.0);
                wc += (b1 + b2 * 2.0 + b3 * 2.0 + b4) * (dt / 6.0);

                let step = (|| -> Result<GeneralMatrix> {
                    let r1 = reduced_phi_rhs(&pr, y, reg, eta_phi)?;
                    let r2 = reduced_phi_rhs(&(&pr + &r1 * (0.5 * dt)), y, reg, eta_phi)?;
                    let r3 = reduced_phi_rhs(&(&pr + &r2 * (0.5 * dt)), y, reg, eta_phi)?;
                    let r4 = reduced_phi_rhs(&(&pr + &r3 * dt), y, reg, eta_phi)?;
                    Ok((r1 + r2 * 2.0 + r3 * 2.0 + r4) * (dt / 6.0))
                })();
                match step {
                    Ok(d) => pr += d,
                    Err(_) => {
                        diverged = true;
                        break 'grid;
                    }
                }
            }
            let gap = (&pc - &pr).norm();
            if !gap.is_finite() || pc.norm() > DIVERGENCE_NORM {
                diverged = true;
                break;
            }
            error = error.max(gap);
        }
        out.push(AdiabaticPoint { epsilon: eps, error: if diverged { f64::NAN } else { error }, diverged });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{random_gaussian, random_psd};
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    fn task(n: usize, c: usize, seed: u64) -> LabelSet {
        let mut rng = rng_from_seed(seed);
        LabelSet::new(random_gaussian(n, c, &mut rng)).unwrap()
    }

    #[test]
    fn resolvent_examples() {
        let r = resolvent(&SymmetricMatrix::zeros(3), 2.0).unwrap();
        assert!((r.as_matrix() - DMatrix::identity(3, 3) * 0.5).norm() < 1e-15);
        let r = resolvent(&SymmetricMatrix::from_diagonal(&[1.0]), 1.0).unwrap();
        assert_abs_diff_eq!(r[(0, 0)], 0.5, epsilon = 1e-15);
        assert!(resolvent(&SymmetricMatrix::zeros(2), 0.0).is_err());
        let mut rng = rng_from_seed(1);
        let k = random_psd(6, 6, &mut rng);
        let s = resolvent(&k, 0.3).unwrap();
        let id = k.as_matrix() * s.as_matrix() + s.as_matrix() * 0.3;
        assert!((id - DMatrix::identity(6, 6)).norm() < 1e-9);
    }

    #[test]
    fn prediction_and_residual_examples() {
        let labels = task(5, 2, 2);
        let y = labels.y();
        let z = SymmetricMatrix::zeros(5);
        assert_eq!(ridge_prediction(&z, y, 1.0).unwrap().norm(), 0.0);
        assert!((residual_mse(&z, y, 1.0).unwrap() - y).norm() < 1e-15);
        let k = SymmetricMatrix::identity(5).scale(0.7);
        assert!((ridge_prediction(&k, y, 0.7).unwrap() - y * 0.5).norm() < 1e-12);
        assert!((residual_mse(&k, y, 0.7).unwrap() - y * 0.5).norm() < 1e-12);
        let big = SymmetricMatrix::identity(5).scale(1e12);
        assert!(residual_mse(&big, y, 1.0).unwrap().amax() < 1e-10);
        assert!(ridge_prediction(&SymmetricMatrix::zeros(4), y, 1.0).is_err());
    }

    #[test]
    fn shrinkage_per_mode() {
        let k = SymmetricMatrix::from_diagonal(&[3.0, 1.0, 0.0]);
        let y = DMatrix::from_column_slice(3, 1, &[1.0, 1.0, 1.0]);
        let yhat = ridge_prediction(&k, &y, 1.0).unwrap();
        assert_abs_diff_eq!(yhat[0], 0.75, epsilon = 1e-14);
        assert_abs_diff_eq!(yhat[1], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(yhat[2], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn general_rhs_examples() {
        let mut rng = rng_from_seed(3);
        let k = random_psd(4, 4, &mut rng);
        let zero = DMatrix::zeros(4, 2);
        let yhat = random_gaussian(4, 2, &mut rng);
        let rhs = kernel_rhs_general(&yhat, &zero, &k, 0.3).unwrap();
        assert!((rhs.as_matrix() - k.as_matrix() * -0.6).norm() < 1e-14);
        let yv = random_gaussian(4, 1, &mut rng);
        let rhs = kernel_rhs_general(&yv, &yv, &k, 0.0).unwrap();
        assert!((rhs.as_matrix() - &yv * yv.transpose() * 2.0).norm() < 1e-14);
    }

    #[test]
    fn mse_rhs_examples() {
        let labels = task(6, 2, 4);
        let z = SymmetricMatrix::zeros(6);
        assert_eq!(kernel_rhs_mse(&z, labels.y(), 1.0, 0.5).unwrap().norm(), 0.0);
        let mut rng = rng_from_seed(5);
        let k = random_psd(6, 6, &mut rng);
        let rhs = kernel_rhs_mse(&k, &DMatrix::zeros(6, 2), 1.0, 0.5).unwrap();
        assert!((rhs.as_matrix() + k.as_matrix()).norm() < 1e-14);
    }

    #[test]
    fn mse_rhs_matches_explicit_formula() {
        let labels = task(7, 3, 6);
        let mut rng = rng_from_seed(7);
        let k = random_psd(7, 7, &mut rng);
        let (lambda, mu) = (0.4, 0.15);
        let s = resolvent(&k, lambda).unwrap();
        let m = labels.y() * labels.y().transpose();
        let b = s.as_matrix() * m * s.as_matrix();
        let explicit = (&b * k.as_matrix() + k.as_matrix() * &b) * lambda - k.as_matrix() * (2.0 * mu);
        let fast = kernel_rhs_mse(&k, labels.y(), lambda, mu).unwrap();
        assert!((fast.as_matrix() - explicit).norm() < 1e-10);
    }

    #[test]
    fn loss_examples_and_gradient() {
        let labels = task(5, 2, 8);
        let y = labels.y();
        let z = SymmetricMatrix::zeros(5);
        assert_abs_diff_eq!(effective_loss(&z, y, 0.7, 0.2).unwrap(), y.norm_squared(), epsilon = 1e-12);
        let big = SymmetricMatrix::identity(5).scale(1e10);
        assert!(effective_loss(&big, y, 1.0, 0.0).unwrap() < 1e-8);

        let mut rng = rng_from_seed(9);
        let k = random_psd(5, 5, &mut rng);
        let (lambda, mu) = (0.6, 0.25);
        let g = effective_loss_grad(&k, y, lambda, mu).unwrap();
        let h = 1e-5;
        let dir = crate::linalg::random_symmetric(5, &mut rng);
        let plus = effective_loss(&k.add(&dir.scale(h)), y, lambda, mu).unwrap();
        let minus = effective_loss(&k.sub(&dir.scale(h)), y, lambda, mu).unwrap();
        let fd = (plus - minus) / (2.0 * h);
        let an = g.dot(dir.as_matrix());
        assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0));
    }

    #[test]
    fn zero_kernel_is_fixed() {
        let labels = task(4, 2, 10);
        let reg = RegularizationConfig::new(1.0, 0.1).unwrap();
        let cfg = FlowConfig { max_steps: 50, ..FlowConfig::default() };
        let run = integrate_kernel_flow(&SymmetricMatrix::zeros(4), KernelRhs::Mse, &labels, &reg, &cfg).unwrap();
        assert!(run.converged());
        assert_eq!(run.terminal().k.norm(), 0.0);
    }

    #[test]
    fn pure_decay_matches_exponential() {
        let labels = LabelSet::new(DMatrix::zeros(3, 1)).unwrap();
        let reg = RegularizationConfig::new(1.0, 0.4).unwrap();
        let cfg = FlowConfig { dt: Some(0.01), max_steps: 100, record_every: 100, ..FlowConfig::default() };
        for rhs in [KernelRhs::Mse, KernelRhs::General] {
            let run = integrate_kernel_flow(&SymmetricMatrix::identity(3), rhs, &labels, &reg, &cfg).unwrap();
            let last = run.terminal();
            assert_abs_diff_eq!(last.t, 1.0, epsilon = 1e-12);
            let want = (-0.8f64).exp();
            assert!((last.k.as_matrix() - DMatrix::identity(3, 3) * want).amax() < 1e-4);
        }
    }

    #[test]
    fn snapshots_are_consistent() {
        let labels = task(5, 2, 11);
        let reg = RegularizationConfig::new(0.5, 0.1).unwrap();
        let cfg = FlowConfig { max_steps: 30, record_every: 7, ..FlowConfig::default() };
        let run = integrate_kernel_flow(&default_init(5, 1), KernelRhs::Mse, &labels, &reg, &cfg).unwrap();
        assert!(run.states.windows(2).all(|w| w[1].t > w[0].t));
        for s in &run.states {
            let id = s.sigma.as_matrix() * s.k.shift(reg.lambda).as_matrix();
            assert!((id - DMatrix::identity(5, 5)).norm() < 1e-8);
            assert!((&s.r + &s.yhat - labels.y()).norm() < 1e-10);
        }
        assert_eq!(run.steps.len(), 31);
    }

    #[test]
    fn momentum_keeps_fixed_points() {
        let labels = task(6, 2, 12);
        let reg = RegularizationConfig::new(1.0, 0.3).unwrap();
        let base = FlowConfig { dt: Some(0.02), max_steps: 40_000, stop_grad_norm: 1e-10, ..FlowConfig::default() };
        let k0 = default_init(6, 2);
        let plain = integrate_kernel_flow(&k0, KernelRhs::Mse, &labels, &reg, &base).unwrap();
        let heavy = integrate_kernel_flow(&k0, KernelRhs::Mse, &labels, &reg, &FlowConfig { friction: 2.0, ..base }).unwrap();
        assert!(plain.converged() && heavy.converged());
        let a = &plain.terminal().k;
        let b = &heavy.terminal().k;
        assert!((a.as_matrix() - b.as_matrix()).norm() <= 1e-4 * a.norm());
    }

    #[test]
    fn scalar_examples() {
        let cfg = FlowConfig { dt: Some(0.01), max_steps: 200_000, stop_grad_norm: 1e-13, ..FlowConfig::default() };
        let traj = scalar_flow(0.1, 2.0, 1.0, 1.0, &cfg).unwrap();
        assert_abs_diff_eq!(traj.last().unwrap().1, 1.0, epsilon = 1e-6);
        let traj = scalar_flow(0.5, 0.0, 1.0, 1.0, &cfg).unwrap();
        assert!(traj.last().unwrap().1 < 1e-6);
        assert!(traj.iter().all(|&(_, k)| k >= 0.0));
        assert_eq!(scalar_fixed_point(2.0, 1.0, 1.0), 1.0);
        let (best, _) = (0..=40_000)
            .map(|i| i as f64 * 1e-4)
            .map(|k| (k, scalar_growth_term(k, 0.8)))
            .fold((0.0, f64::MIN), |a, b| if b.1 > a.1 { b } else { a });
        assert!((best - 0.8).abs() <= 1e-3);
    }

    #[test]
    fn coupled_pure_decay() {
        let labels = LabelSet::new(DMatrix::zeros(4, 2)).unwrap();
        let reg = RegularizationConfig::new(0.5, 0.5).unwrap();
        let mut rng = rng_from_seed(13);
        let phi0 = random_gaussian(3, 4, &mut rng);
        let w0 = random_gaussian(2, 3, &mut rng);
        let cfg = FlowConfig { dt: Some(0.05), max_steps: 2000, stop_grad_norm: 1e-8, ..FlowConfig::default() };
        let run = coupled_flow(&phi0, &w0, &labels, &reg, 1.0, 1.0, &cfg).unwrap();
        let last = run.terminal();
        assert!(last.phi.norm() < 1e-6 && last.w.norm() < 1e-6);
        assert!(run.max_relative_increase() <= 1e-9);
    }

    #[test]
    fn adiabatic_single_entry() {
        let labels = task(4, 1, 14);
        let reg = RegularizationConfig::new(1.0, 0.2).unwrap();
        let mut rng = rng_from_seed(15);
        let phi0 = random_gaussian(5, 4, &mut rng) * 0.4;
        let w0 = ridge_readout(&phi0, labels.y(), reg.lambda).unwrap();
        let pts = adiabatic_error_sweep(&phi0, &w0, &labels, &reg, &[1e-4], 0.5).unwrap();
        assert_eq!(pts.len(), 1);
        assert!(pts[0].error < 1e-3);
        assert!(adiabatic_error_sweep(&phi0, &w0, &labels, &reg, &[1.5], 0.5).is_err());
    }
}

//! Self-supervised spectral energy and the semi-supervised balance.
//!
//! The energy is `E(K) = 2Tr(LK) + μTr K − β log det(K + εI)`, with the alignment term
//! taken as `2Tr(LK)`. A convention with a `½` prefactor on the pairwise alignment sum
//! gives `Tr(LK)` instead, which amounts to halving `L`. Its minimizer over the PSD cone
//! is `K* = U diag(max(0, β/(2νᵢ + μ) − ε)) Uᵀ` in the eigenbasis of `L`.
//!
//! The semi-supervised flow adds `αTr(LK)` to the supervised effective loss. When `M_Y` and
//! `L` commute the steady state obeys `λσᵢ/(kᵢ + λ)² = μ + ανᵢ` on every active mode.

use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, FlowError, Result};
use crate::laws::{semi_spectrum, ssl_spectrum};
use crate::linalg::{commutator_norm, joint_eigenbasis, psd_project, rayleigh_quotients, sym_eig, GeneralMatrix, SymmetricMatrix};
use crate::setup::{label_gram, AugmentationGraph, LabelSet, SSLConfig, SemiConfig};
use crate::supervised::{
    effective_loss, integrate_symmetric, kernel_rhs_mse, FlowConfig, FlowRun, FlowStatus, MatrixFlow, StepRecord,
    SupervisedFlowState, DIVERGENCE_NORM,
};

/// Normalized commutator above which `M_Y` and `L` are treated as non-commuting.
pub const COMMUTING_TOL: f64 = 1e-6;

fn check_graph(k: &SymmetricMatrix, graph: &AugmentationGraph) -> Result<()> {
    if k.dim() != graph.n() {
        return Err(dim_mismatch("K and graph disagree on N"));
    }
    Ok(())
}

fn shifted_cholesky(k: &SymmetricMatrix, eps: f64) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    nalgebra::Cholesky::new(k.shift(eps).into_inner()).ok_or(FlowError::Singular("K + epsilon I"))
}

/// `2Tr(LK) + μTr K − β log det(K + εI)`.
pub fn ssl_energy(k: &SymmetricMatrix, graph: &AugmentationGraph, ssl: &SSLConfig) -> Result<f64> {
    check_graph(k, graph)?;
    let chol = shifted_cholesky(k, ssl.epsilon)?;
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Ok(2.0 * graph.laplacian.dot(k.as_matrix()) + ssl.mu * k.trace() - ssl.beta * logdet)
}

/// `2L + μI − β(K + εI)⁻¹`.
pub fn ssl_energy_grad(k: &SymmetricMatrix, graph: &AugmentationGraph, ssl: &SSLConfig) -> Result<SymmetricMatrix> {
    check_graph(k, graph)?;
    let inv = shifted_cholesky(k, ssl.epsilon)?.inverse();
    Ok(SymmetricMatrix::symmetrize(graph.laplacian.as_matrix() * 2.0 - inv * ssl.beta).shift(ssl.mu))
}

/// Rectified minimizer in the eigenbasis of `L`.
pub fn ssl_closed_form(graph: &AugmentationGraph, ssl: &SSLConfig) -> Result<SymmetricMatrix> {
    let eig = sym_eig(&graph.laplacian)?;
    let k = ssl_spectrum(&eig.eigenvalues, ssl)?;
    Ok(SymmetricMatrix::from_eigen(&k, &eig.eigenvectors))
}

/// `0.25/(2λ_max(L) + μ + β/ε²)`.
pub fn ssl_default_step(graph: &AugmentationGraph, ssl: &SSLConfig) -> Result<f64> {
    let lmax = sym_eig(&graph.laplacian)?.max_eigenvalue().max(0.0);
    Ok(0.25 / (2.0 * lmax + ssl.mu + ssl.beta / (ssl.epsilon * ssl.epsilon)))
}

/// Snapshot of the SSL projected-gradient flow.
#[derive(Clone, Debug)]
pub struct SSLFlowState {
    pub t: f64,
    pub k: SymmetricMatrix,
    pub energy: f64,
    /// Norm of the projected-gradient map `(K − Π(K − s∇E))/s`.
    pub grad_norm: f64,
}

/// Projected gradient descent `K ← Π_PSD(K − s∇E(K))`.
pub fn ssl_flow(k0: &SymmetricMatrix, graph: &AugmentationGraph, ssl: &SSLConfig, cfg: &FlowConfig) -> Result<FlowRun<SSLFlowState>> {
    cfg.validate()?;
    ssl.validate()?;
    check_graph(k0, graph)?;
    let step = match cfg.dt {
        Some(dt) => dt,
        None => ssl_default_step(graph, ssl)?,
    };
    let mut k = psd_project(k0);
    let mut t = 0.0;
    let mut states = Vec::new();
    let mut steps = Vec::new();
    let mut status = FlowStatus::MaxSteps;
    let mut last_recorded = None;
    for i in 0..=cfg.max_steps {
        let energy = ssl_energy(&k, graph, ssl)?;
        let grad = ssl_energy_grad(&k, graph, ssl)?;
        let next = psd_project(&k.sub(&grad.scale(step)));
        let grad_norm = (k.as_matrix() - next.as_matrix()).norm() / step;
        steps.push(StepRecord { t, value: energy, trace: k.trace(), rhs_norm: grad_norm });
        if i % cfg.record_every == 0 {
            states.push(SSLFlowState { t, k: k.clone(), energy, grad_norm });
            last_recorded = Some(i);
        }
        if grad_norm <= cfg.stop_grad_norm {
            status = FlowStatus::Converged;
            break;
        }
        if i == cfg.max_steps {
            break;
        }
        if !next.is_finite() || next.norm() > DIVERGENCE_NORM {
            status = FlowStatus::Diverged;
            break;
        }
        k = next;
        t += step;
    }
    if status != FlowStatus::Diverged && last_recorded != Some(steps.len() - 1) {
        let last = steps.last().expect("at least one step is recorded");
        states.push(SSLFlowState { t, k, energy: last.value, grad_norm: last.rhs_norm });
    }
    Ok(FlowRun { states, steps, status, dt: step })
}

/// Both sides of the graph Dirichlet identity for `K = ΦᵀΦ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirichletCheck {
    /// `Σᵢⱼ Aᵢⱼ(Kᵢᵢ + Kⱼⱼ − 2Kᵢⱼ)`, i.e. `Σᵢⱼ Aᵢⱼ‖φᵢ − φⱼ‖²`.
    pub lhs: f64,
    /// `2Tr(LK)`.
    pub rhs: f64,
    pub gap: f64,
}

impl DirichletCheck {
    pub fn passed(&self) -> bool {
        self.gap <= 1e-9 * (1.0 + self.lhs.abs())
    }
}

pub fn dirichlet_identity_check(phi: &GeneralMatrix, graph: &AugmentationGraph) -> Result<DirichletCheck> {
    let n = graph.n();
    if phi.ncols() != n {
        return Err(dim_mismatch("Phi columns must match the graph size"));
    }
    let mut lhs = 0.0;
    for i in 0..n {
        for j in 0..n {
            let a = graph.adjacency[(i, j)];
            if a != 0.0 {
                lhs += a * (phi.column(i) - phi.column(j)).norm_squared();
            }
        }
    }
    let k = phi.transpose() * phi;
    let rhs = 2.0 * graph.laplacian.dot(&k);
    Ok(DirichletCheck { lhs, rhs, gap: (lhs - rhs).abs() })
}

/// Joint eigenbasis of `M_Y` and `L` with the per-mode `(σᵢ, νᵢ)`.
pub struct CommutingModes {
    pub basis: GeneralMatrix,
    pub sigma: Vec<f64>,
    pub nu: Vec<f64>,
}

/// Rejects non-commuting tasks with [`FlowError::NonCommuting`].
pub fn commuting_modes(labels: &LabelSet, graph: &AugmentationGraph) -> Result<CommutingModes> {
    if labels.n() != graph.n() {
        return Err(dim_mismatch("labels and graph disagree on N"));
    }
    let (m, _) = label_gram(labels)?;
    let c = commutator_norm(&m, &graph.laplacian);
    if c > COMMUTING_TOL {
        return Err(FlowError::NonCommuting(c));
    }
    let basis = joint_eigenbasis(&m, &graph.laplacian)?;
    let sigma = rayleigh_quotients(&m, &basis);
    let nu = rayleigh_quotients(&graph.laplacian, &basis);
    Ok(CommutingModes { basis, sigma, nu })
}

/// Closed-form semi-supervised kernel on a commuting task.
pub fn semi_closed_form(labels: &LabelSet, graph: &AugmentationGraph, semi: &SemiConfig) -> Result<SymmetricMatrix> {
    let modes = commuting_modes(labels, graph)?;
    let k = semi_spectrum(&modes.sigma, &modes.nu, semi)?;
    Ok(SymmetricMatrix::from_eigen(&k, &modes.basis))
}

/// Relative level above which a kernel mode counts as active in the balance check.
pub const BALANCE_ACTIVE_THRESHOLD: f64 = 1e-9;

/// Largest violation of `λσᵢ/(kᵢ + λ)² = μ + ανᵢ` over the active modes of `K`. For a
/// kernel without active modes it reports the violation over all modes as a diagnostic.
pub fn semi_balance_residual(k: &SymmetricMatrix, labels: &LabelSet, graph: &AugmentationGraph, semi: &SemiConfig) -> Result<f64> {
    check_graph(k, graph)?;
    let modes = commuting_modes(labels, graph)?;
    let ks = rayleigh_quotients(k, &modes.basis);
    let kmax = ks.iter().copied().fold(0.0, f64::max);
    let lambda = semi.reg.lambda;
    let violation = |i: usize| {
        (lambda * modes.sigma[i] / (ks[i] + lambda).powi(2) - (semi.reg.mu + semi.alpha * modes.nu[i])).abs()
    };
    let active: Vec<usize> = (0..ks.len()).filter(|&i| ks[i] > BALANCE_ACTIVE_THRESHOLD * kmax.max(1.0)).collect();
    let pool: Vec<usize> = if active.is_empty() { (0..ks.len()).collect() } else { active };
    Ok(pool.into_iter().map(violation).fold(0.0, f64::max))
}

/// `λ(BK + KB) − 2μK − α(LK + KL)`.
pub fn semi_kernel_rhs(k: &SymmetricMatrix, labels: &LabelSet, graph: &AugmentationGraph, semi: &SemiConfig) -> Result<SymmetricMatrix> {
    check_graph(k, graph)?;
    let base = kernel_rhs_mse(k, labels.y(), semi.reg.lambda, semi.reg.mu)?;
    let lk = graph.laplacian.as_matrix() * k.as_matrix();
    let lt = lk.transpose();
    Ok(base.sub(&SymmetricMatrix::symmetrize((lk + lt) * semi.alpha)))
}

/// RK4 integration of the semi-supervised kernel flow. The tracked value is
/// `effective_loss + αTr(LK)`.
pub fn semi_flow(
    k0: &SymmetricMatrix,
    labels: &LabelSet,
    graph: &AugmentationGraph,
    semi: &SemiConfig,
    cfg: &FlowConfig,
) -> Result<FlowRun<SupervisedFlowState>> {
    cfg.validate()?;
    semi.validate()?;
    check_graph(k0, graph)?;
    if labels.n() != graph.n() {
        return Err(dim_mismatch("labels and graph disagree on N"));
    }
    let dt = match cfg.dt {
        Some(dt) => dt,
        None => {
            let base = crate::supervised::default_dt(labels, &semi.reg)?;
            let lmax = sym_eig(&graph.laplacian)?.max_eigenvalue().max(0.0);
            1.0 / (1.0 / base + 20.0 * semi.alpha * lmax)
        }
    };
    let rhs = |k: &SymmetricMatrix| semi_kernel_rhs(k, labels, graph, semi);
    let value = |k: &SymmetricMatrix| {
        Ok(effective_loss(k, labels.y(), semi.reg.lambda, semi.reg.mu)? + semi.alpha * graph.laplacian.dot(k.as_matrix()))
    };
    let snap = |t: f64, k: SymmetricMatrix| SupervisedFlowState::at(t, k, labels, &semi.reg);
    integrate_symmetric(MatrixFlow { rhs: &rhs, value: &value }, k0.clone(), dt, cfg, &snap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{random_gaussian, random_psd};
    use crate::setup::{build_laplacian, rng_from_seed, synth_clustered_task, synth_commuting_task, RegularizationConfig};
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;

    fn random_graph(n: usize, seed: u64) -> AugmentationGraph {
        let mut rng = rng_from_seed(seed);
        let g = random_gaussian(n, n, &mut rng).map(|v| v.abs());
        let mut a = (&g + g.transpose()) * 0.5;
        a.fill_diagonal(0.0);
        build_laplacian(&SymmetricMatrix::new(a).unwrap()).unwrap()
    }

    #[test]
    fn energy_examples() {
        let graph = random_graph(5, 1);
        let ssl = SSLConfig::new(1.5, 0.3, 0.7).unwrap();
        let e = ssl_energy(&SymmetricMatrix::zeros(5), &graph, &ssl).unwrap();
        assert_abs_diff_eq!(e, -1.5 * 5.0 * 0.3f64.ln(), epsilon = 1e-12);
        let empty = build_laplacian(&SymmetricMatrix::zeros(4)).unwrap();
        let ssl0 = SSLConfig::new(1.5, 0.3, 0.0).unwrap();
        let e = ssl_energy(&SymmetricMatrix::identity(4), &empty, &ssl0).unwrap();
        assert_abs_diff_eq!(e, -1.5 * 4.0 * 1.3f64.ln(), epsilon = 1e-12);
        let mut rng = rng_from_seed(2);
        for _ in 0..10 {
            let a = random_psd(5, 3, &mut rng);
            let b = random_psd(5, 5, &mut rng);
            let mid = a.add(&b).scale(0.5);
            let em = ssl_energy(&mid, &graph, &ssl).unwrap();
            let avg = 0.5 * (ssl_energy(&a, &graph, &ssl).unwrap() + ssl_energy(&b, &graph, &ssl).unwrap());
            assert!(em <= avg + 1e-12);
        }
        let bad = SymmetricMatrix::identity(5).scale(-0.3);
        assert!(ssl_energy(&bad, &graph, &ssl).is_err());
    }

    #[test]
    fn gradient_examples() {
        let graph = random_graph(6, 3);
        let ssl = SSLConfig::new(20.0, 0.2, 0.5).unwrap();
        let interior = SymmetricMatrix::symmetrize(
            nalgebra::Cholesky::new(graph.laplacian.scale(2.0).shift(ssl.mu).into_inner())
                .unwrap()
                .inverse()
                * ssl.beta,
        )
        .shift(-ssl.epsilon);
        assert!(sym_eig(&interior).unwrap().min_eigenvalue() > 0.0);
        assert!(ssl_energy_grad(&interior, &graph, &ssl).unwrap().norm() <= 1e-10);

        let empty = build_laplacian(&SymmetricMatrix::zeros(3)).unwrap();
        let ssl1 = SSLConfig::new(2.0, 0.5, 1.0).unwrap();
        let k = SymmetricMatrix::identity(3).scale(1.5);
        assert!(ssl_energy_grad(&k, &empty, &ssl1).unwrap().norm() < 1e-14);
        let ssl0 = SSLConfig::new(2.0, 0.5, 0.0).unwrap();
        let g0 = ssl_energy_grad(&k, &empty, &ssl0).unwrap();
        assert!((g0.as_matrix() + nalgebra::DMatrix::identity(3, 3)).norm() < 1e-14);

        let mut rng = rng_from_seed(4);
        let k = random_psd(6, 6, &mut rng);
        let dir = crate::linalg::random_symmetric(6, &mut rng);
        let h = 1e-6;
        let fd = (ssl_energy(&k.add(&dir.scale(h)), &graph, &ssl).unwrap()
            - ssl_energy(&k.sub(&dir.scale(h)), &graph, &ssl).unwrap())
            / (2.0 * h);
        let an = ssl_energy_grad(&k, &graph, &ssl).unwrap().dot(dir.as_matrix());
        assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0));
    }

    #[test]
    fn flow_reaches_rectified_law() {
        let (_, graph) = synth_clustered_task(12, 2, 1.0, 0.1, 5).unwrap();
        let ssl = SSLConfig::new(4.0, 0.5, 1.0).unwrap();
        let cfg = FlowConfig { dt: Some(0.03), max_steps: 20_000, stop_grad_norm: 1e-10, ..FlowConfig::default() };
        let run = ssl_flow(&SymmetricMatrix::identity(12).scale(0.3), &graph, &ssl, &cfg).unwrap();
        assert!(run.converged());
        assert!(run.steps.windows(2).all(|w| w[1].value <= w[0].value + 1e-9));
        let k = &run.terminal().k;
        let eig = sym_eig(&graph.laplacian).unwrap();
        let got = rayleigh_quotients(k, &eig.eigenvectors);
        let want = ssl_spectrum(&eig.eigenvalues, &ssl).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-4);
        }
        assert!(commutator_norm(k, &graph.laplacian) <= 1e-6);

        let closed = ssl_closed_form(&graph, &ssl).unwrap();
        let again = ssl_flow(&closed, &graph, &ssl, &cfg).unwrap();
        assert!(again.converged());
        assert_eq!(again.steps.len(), 1);
    }

    #[test]
    fn dirichlet_examples() {
        let graph = random_graph(5, 6);
        let constant = DMatrix::from_fn(3, 5, |i, _| i as f64 + 1.0);
        let c = dirichlet_identity_check(&constant, &graph).unwrap();
        assert!(c.lhs.abs() < 1e-12 && c.rhs.abs() < 1e-12);
        let a = SymmetricMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let g2 = build_laplacian(&a).unwrap();
        let c = dirichlet_identity_check(&DMatrix::identity(2, 2), &g2).unwrap();
        assert_abs_diff_eq!(c.lhs, 2.0 * 2.0, epsilon = 1e-14);
        assert!(c.passed());
        let mut rng = rng_from_seed(7);
        let phi = random_gaussian(4, 5, &mut rng);
        assert!(dirichlet_identity_check(&phi, &graph).unwrap().passed());
    }

    #[test]
    fn semi_balance_examples() {
        let (_, graph) = synth_clustered_task(12, 3, 1.0, 0.1, 8).unwrap();
        let (labels, _) = synth_commuting_task(&graph, &[(0, 6.0), (1, 5.0), (4, 9.0)]).unwrap();
        let semi = SemiConfig::new(0.3, RegularizationConfig::new(1.0, 0.5).unwrap()).unwrap();
        let k = semi_closed_form(&labels, &graph, &semi).unwrap();
        assert!(semi_balance_residual(&k, &labels, &graph, &semi).unwrap() <= 1e-8);

        let plain = SemiConfig::new(0.0, semi.reg).unwrap();
        let k = crate::laws::predict_k_infinity(&labels, &semi.reg).unwrap();
        assert!(semi_balance_residual(&k, &labels, &graph, &plain).unwrap() <= 1e-8);

        let z = semi_balance_residual(&SymmetricMatrix::zeros(12), &labels, &graph, &semi).unwrap();
        let modes = commuting_modes(&labels, &graph).unwrap();
        let want = (0..12)
            .map(|i| (modes.sigma[i] / semi.reg.lambda - (semi.reg.mu + semi.alpha * modes.nu[i])).abs())
            .fold(0.0, f64::max);
        assert_abs_diff_eq!(z, want, epsilon = 1e-10);

        let mut rng = rng_from_seed(9);
        let other = LabelSet::new(random_gaussian(12, 2, &mut rng)).unwrap();
        assert!(matches!(
            semi_balance_residual(&k, &other, &graph, &semi),
            Err(FlowError::NonCommuting(_))
        ));
    }

    #[test]
    fn semi_flow_reaches_intersection_law() {
        let (_, graph) = synth_clustered_task(12, 3, 1.0, 0.1, 10).unwrap();
        let (labels, _) = synth_commuting_task(&graph, &[(0, 6.0), (1, 5.0), (4, 9.0)]).unwrap();
        let semi = SemiConfig::new(0.3, RegularizationConfig::new(1.0, 0.5).unwrap()).unwrap();
        let cfg = FlowConfig { dt: Some(0.02), max_steps: 50_000, stop_grad_norm: 1e-10, ..FlowConfig::default() };
        let k0 = crate::supervised::default_init(12, 11);
        let run = semi_flow(&k0, &labels, &graph, &semi, &cfg).unwrap();
        assert!(run.converged());
        assert!(run.max_relative_increase() <= 1e-8);
        let modes = commuting_modes(&labels, &graph).unwrap();
        let got = rayleigh_quotients(&run.terminal().k, &modes.basis);
        let want = semi_spectrum(&modes.sigma, &modes.nu, &semi).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-3, "{g} vs {w}");
        }
    }
}

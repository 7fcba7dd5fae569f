//! Task objects: labels, label Gram matrices, augmentation graphs, regularization
//! configurations and synthetic clustered datasets.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, invalid, FlowError, Result};
use crate::linalg::{random_orthonormal, sym_eig, EigenDecomposition, GeneralMatrix, SymmetricMatrix};

/// Seeded generator used by every experiment.
pub type TaskRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> TaskRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Targets `Y` (N×C). One-hot columns are the usual case; any finite real `Y` is accepted.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSet {
    y: GeneralMatrix,
}

impl LabelSet {
    pub fn new(y: GeneralMatrix) -> Result<Self> {
        if y.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFinite("labels"));
        }
        Ok(Self { y })
    }

    /// One-hot labels from class assignments in `0..c`.
    pub fn one_hot(assignments: &[usize], c: usize) -> Result<Self> {
        let mut y = DMatrix::zeros(assignments.len(), c);
        for (i, &a) in assignments.iter().enumerate() {
            if a >= c {
                return Err(invalid(format!("class {a} out of range for C = {c}")));
            }
            y[(i, a)] = 1.0;
        }
        Ok(Self { y })
    }

    pub fn y(&self) -> &GeneralMatrix {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn c(&self) -> usize {
        self.y.ncols()
    }
}

/// `M_Y = YYᵀ` and its eigendecomposition.
pub fn label_gram(labels: &LabelSet) -> Result<(SymmetricMatrix, EigenDecomposition)> {
    let y = labels.y();
    let m = SymmetricMatrix::symmetrize(y * y.transpose());
    let eig = sym_eig(&m)?;
    Ok((m, eig))
}

/// Weighted undirected graph with its combinatorial Laplacian `L = D − A`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationGraph {
    pub adjacency: SymmetricMatrix,
    pub degree: Vec<f64>,
    pub laplacian: SymmetricMatrix,
}

impl AugmentationGraph {
    pub fn n(&self) -> usize {
        self.adjacency.dim()
    }
}

/// Builds `L = D − A` from a symmetric, nonnegative, zero-diagonal adjacency.
pub fn build_laplacian(adjacency: &SymmetricMatrix) -> Result<AugmentationGraph> {
    let n = adjacency.dim();
    if adjacency.iter().any(|&w| w < 0.0) {
        return Err(invalid("adjacency weights must be nonnegative"));
    }
    if (0..n).any(|i| adjacency[(i, i)] != 0.0) {
        return Err(invalid("adjacency must have a zero diagonal"));
    }
    let degree: Vec<f64> = (0..n).map(|i| adjacency.row(i).sum()).collect();
    let mut l = -adjacency.as_matrix().clone();
    for (i, d) in degree.iter().enumerate() {
        l[(i, i)] = *d;
    }
    Ok(AugmentationGraph {
        adjacency: adjacency.clone(),
        degree,
        laplacian: SymmetricMatrix::symmetrize(l),
    })
}

/// Readout ridge `λ` and feature decay `μ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizationConfig {
    pub lambda: f64,
    pub mu: f64,
}

impl RegularizationConfig {
    pub fn new(lambda: f64, mu: f64) -> Result<Self> {
        let cfg = Self { lambda, mu };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(invalid(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(invalid(format!("mu must be >= 0, got {}", self.mu)));
        }
        Ok(())
    }

    /// Truncation threshold `τ = λμ`.
    pub fn tau(&self) -> f64 {
        self.lambda * self.mu
    }
}

/// Parameters of the self-supervised energy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SSLConfig {
    pub beta: f64,
    pub epsilon: f64,
    pub mu: f64,
}

impl SSLConfig {
    pub fn new(beta: f64, epsilon: f64, mu: f64) -> Result<Self> {
        let cfg = Self { beta, epsilon, mu };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(invalid("beta must be > 0"));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(invalid("epsilon must be > 0"));
        }
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return Err(invalid("mu must be >= 0"));
        }
        Ok(())
    }

    /// Graph frequency above which modes are switched off: `½(β/ε − μ)`.
    pub fn lambda_cutoff(&self) -> f64 {
        0.5 * (self.beta / self.epsilon - self.mu)
    }
}

/// Supervised regularization plus a graph-smoothness weight `α`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemiConfig {
    pub alpha: f64,
    pub reg: RegularizationConfig,
}

impl SemiConfig {
    pub fn new(alpha: f64, reg: RegularizationConfig) -> Result<Self> {
        let cfg = Self { alpha, reg };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(invalid("alpha must be finite and >= 0"));
        }
        self.reg.validate()
    }
}

/// Balanced one-hot clusters with a block adjacency. The seed shuffles which nodes land
/// in which cluster.
pub fn synth_clustered_task(
    n: usize,
    c: usize,
    intra_weight: f64,
    inter_weight: f64,
    seed: u64,
) -> Result<(LabelSet, AugmentationGraph)> {
    if c == 0 || !n.is_multiple_of(c) {
        return Err(invalid(format!("C = {c} must divide N = {n}")));
    }
    if !(inter_weight >= 0.0 && intra_weight >= inter_weight) {
        return Err(invalid("need intra_weight >= inter_weight >= 0"));
    }
    let mut assignment: Vec<usize> = (0..n).map(|i| i % c).collect();
    assignment.shuffle(&mut rng_from_seed(seed));
    let labels = LabelSet::one_hot(&assignment, c)?;
    let a = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else if assignment[i] == assignment[j] {
            intra_weight
        } else {
            inter_weight
        }
    });
    let graph = build_laplacian(&SymmetricMatrix::new(a)?)?;
    Ok((labels, graph))
}

/// Labels built from Laplacian eigenvectors, so that `M_Y` and `L` commute exactly.
/// Each `(index, strength)` pair contributes the column `√strength · u_index`, where
/// `u_index` is the eigenvector of the `index`-th smallest Laplacian eigenvalue.
/// Returns the labels and the Laplacian eigenvalue of each chosen mode.
pub fn synth_commuting_task(
    graph: &AugmentationGraph,
    modes: &[(usize, f64)],
) -> Result<(LabelSet, Vec<f64>)> {
    let n = graph.n();
    let eig = sym_eig(&graph.laplacian)?;
    let mut y = DMatrix::zeros(n, modes.len());
    let mut nus = Vec::with_capacity(modes.len());
    for (col, &(idx, strength)) in modes.iter().enumerate() {
        if idx >= n {
            return Err(invalid(format!("mode index {idx} out of range for N = {n}")));
        }
        if strength < 0.0 {
            return Err(invalid("mode strength must be >= 0"));
        }
        // Ascending order: the smallest eigenvalue sits in the last column.
        let j = n - 1 - idx;
        y.set_column(col, &(eig.eigenvectors.column(j) * strength.sqrt()));
        nus.push(eig.eigenvalues[j]);
    }
    Ok((LabelSet::new(y)?, nus))
}

/// Labels `Y = Q·diag(√σ)` with `Q` a seeded random `N×C` orthonormal frame, so the nonzero
/// eigenvalues of `M_Y` are exactly `sigma`.
pub fn synth_spectral_task(n: usize, sigma: &[f64], seed: u64) -> Result<LabelSet> {
    if sigma.len() > n {
        return Err(invalid(format!("{} modes do not fit in N = {n}", sigma.len())));
    }
    if sigma.iter().any(|&s| !(s.is_finite() && s >= 0.0)) {
        return Err(invalid("label spectrum must be finite and >= 0"));
    }
    let mut q = random_orthonormal(n, sigma.len(), &mut rng_from_seed(seed));
    for (j, s) in sigma.iter().enumerate() {
        q.column_mut(j).scale_mut(s.sqrt());
    }
    LabelSet::new(q)
}

/// JSON dataset document `{"N":…, "C":…, "Y":[[…]], "A":[[…]]}` with row-major arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "Y")]
    pub y: Vec<Vec<f64>>,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(dim_mismatch(format!("{what} must be {nrows}x{ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl Dataset {
    pub fn from_task(labels: &LabelSet, graph: &AugmentationGraph) -> Result<Self> {
        if labels.n() != graph.n() {
            return Err(dim_mismatch("labels and graph disagree on N"));
        }
        Ok(Self {
            n: labels.n(),
            c: labels.c(),
            y: rows_of(labels.y()),
            a: rows_of(graph.adjacency.as_matrix()),
        })
    }

    pub fn into_task(&self) -> Result<(LabelSet, AugmentationGraph)> {
        let y = matrix_from_rows(&self.y, self.n, self.c, "Y")?;
        let a = matrix_from_rows(&self.a, self.n, self.n, "A")?;
        let labels = LabelSet::new(y)?;
        let graph = build_laplacian(&SymmetricMatrix::new(a)?)?;
        Ok((labels, graph))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn dump(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectral_task_has_prescribed_spectrum() {
        let labels = synth_spectral_task(10, &[5.0, 2.0, 0.5], 3).unwrap();
        let (_, eig) = label_gram(&labels).unwrap();
        for (got, want) in eig.eigenvalues.iter().zip([5.0, 2.0, 0.5, 0.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!(synth_spectral_task(2, &[1.0, 1.0, 1.0], 0).is_err());
    }
    use crate::linalg::{commutator_norm, effective_rank};
    use approx::assert_abs_diff_eq;

    #[test]
    fn gram_examples() {
        let (m, eig) = label_gram(&LabelSet::new(DMatrix::zeros(3, 2)).unwrap()).unwrap();
        assert_eq!(m.norm(), 0.0);
        assert!(eig.eigenvalues.iter().all(|&v| v == 0.0));
        let labels = LabelSet::one_hot(&[0, 1, 0, 1], 2).unwrap();
        let (m, eig) = label_gram(&labels).unwrap();
        for (got, want) in eig.eigenvalues.iter().zip([2.0, 2.0, 0.0, 0.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        assert!(effective_rank(&m, 1e-10) <= 2);
    }

    #[test]
    fn laplacian_examples() {
        let a = SymmetricMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let g = build_laplacian(&a).unwrap();
        assert_eq!(g.laplacian.as_matrix(), &DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        let e = sym_eig(&g.laplacian).unwrap();
        assert_abs_diff_eq!(e.eigenvalues[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(e.eigenvalues[1], 0.0, epsilon = 1e-12);

        let empty = build_laplacian(&SymmetricMatrix::zeros(4)).unwrap();
        assert_eq!(empty.laplacian.norm(), 0.0);

        let k3 = DMatrix::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 1.0 });
        let g = build_laplacian(&SymmetricMatrix::new(k3).unwrap()).unwrap();
        let e = sym_eig(&g.laplacian).unwrap();
        for (got, want) in e.eigenvalues.iter().zip([3.0, 3.0, 0.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn laplacian_rejects_negative_weights() {
        let a = SymmetricMatrix::new(DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0])).unwrap();
        assert!(build_laplacian(&a).is_err());
    }

    #[test]
    fn clustered_task_examples() {
        let (labels, graph) = synth_clustered_task(4, 2, 1.0, 0.0, 9).unwrap();
        let (m, _) = label_gram(&labels).unwrap();
        assert!(commutator_norm(&m, &graph.laplacian) <= 1e-10);
        let e = sym_eig(&graph.laplacian).unwrap();
        for (got, want) in e.eigenvalues.iter().zip([2.0, 2.0, 0.0, 0.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        let again = synth_clustered_task(4, 2, 1.0, 0.0, 9).unwrap();
        assert_eq!(again.0, labels);
        assert_eq!(again.1, graph);
        assert!(synth_clustered_task(5, 2, 1.0, 0.0, 0).is_err());
    }

    #[test]
    fn config_invariants() {
        let r = RegularizationConfig::new(0.5, 0.2).unwrap();
        assert_eq!(r.tau(), 0.5 * 0.2);
        assert!(RegularizationConfig::new(0.0, 1.0).is_err());
        let s = SSLConfig::new(2.0, 0.5, 1.0).unwrap();
        assert_eq!(s.lambda_cutoff(), 0.5 * (2.0 / 0.5 - 1.0));
        assert!(SemiConfig::new(-1.0, r).is_err());
    }

    #[test]
    fn commuting_task_commutes() {
        let (_, graph) = synth_clustered_task(12, 3, 1.0, 0.1, 3).unwrap();
        let (labels, nus) = synth_commuting_task(&graph, &[(0, 5.0), (3, 2.0)]).unwrap();
        let (m, _) = label_gram(&labels).unwrap();
        assert!(commutator_norm(&m, &graph.laplacian) <= 1e-10);
        assert_abs_diff_eq!(nus[0], 0.0, epsilon = 1e-10);
    }

    #[test]
    fn dataset_round_trip() {
        let (labels, graph) = synth_clustered_task(6, 3, 1.0, 0.2, 4).unwrap();
        let ds = Dataset::from_task(&labels, &graph).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task.json");
        ds.dump(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, ds);
        let (l2, g2) = back.into_task().unwrap();
        assert_eq!(l2, labels);
        assert_eq!(g2, graph);
    }
}

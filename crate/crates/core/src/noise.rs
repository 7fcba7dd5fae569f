//! Minibatch noise at the kernel and feature level.
//!
//! A batch is a sorted list of distinct row indices in `0..N`. The masked residual `R̃_B`
//! keeps the batch rows of `R` scaled by `N/B` and zeroes the rest, so `E[R̃_B] = R` under
//! uniform sampling without replacement.
//!
//! The kernel noise realization is `ζ_B = −(1/2λ)·A·D_B·A` with `A = (K + λI)⁻¹`. The
//! default drive `D_B = R̃Rᵀ + RR̃ᵀ − 2RRᵀ` is linear in `R̃` and therefore mean-zero over
//! batches; the quadratic drive `R̃R̃ᵀ − RRᵀ` is kept as [`NoiseForm::Quadratic`]. Both have
//! rank at most `2C`.

use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, invalid, FlowError, Result};
use crate::linalg::{
    column_space, numerical_rank, singular_values, sym_eig, symmetric_rank, GeneralMatrix, SymmetricMatrix,
    DEFAULT_RANK_TOL,
};
use crate::setup::LabelSet;
use crate::supervised::{resolvent, residual_mse, ridge_readout};

/// Upper bound on the number of batches [`enumerate_batches`] will produce.
pub const MAX_ENUMERATED_BATCHES: u128 = 100_000;

/// Drive used inside the kernel noise realization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseForm {
    /// `R̃Rᵀ + RR̃ᵀ − 2RRᵀ`.
    #[default]
    Linearized,
    /// `R̃R̃ᵀ − RRᵀ`.
    Quadratic,
}

fn check_batch(batch: &[usize], n: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(invalid("batch must be nonempty"));
    }
    let mut seen = vec![false; n];
    for &i in batch {
        if i >= n {
            return Err(invalid(format!("batch index {i} out of range for N = {n}")));
        }
        if seen[i] {
            return Err(invalid(format!("batch index {i} repeated")));
        }
        seen[i] = true;
    }
    Ok(())
}

/// `R̃_B`: batch rows of `R` scaled by `N/B`, all other rows zero.
pub fn masked_residual(r: &GeneralMatrix, batch: &[usize], n: usize) -> Result<GeneralMatrix> {
    if r.nrows() != n {
        return Err(dim_mismatch(format!("residual has {} rows, expected {n}", r.nrows())));
    }
    check_batch(batch, n)?;
    let scale = n as f64 / batch.len() as f64;
    let mut out = DMatrix::zeros(r.nrows(), r.ncols());
    for &i in batch {
        out.set_row(i, &(r.row(i) * scale));
    }
    Ok(out)
}

fn noise_from_parts(a: &SymmetricMatrix, r: &GeneralMatrix, r_tilde: &GeneralMatrix, lambda: f64, form: NoiseForm) -> SymmetricMatrix {
    let drive = match form {
        NoiseForm::Linearized => {
            let d = r_tilde - r;
            let cross = &d * r.transpose();
            let cross_t = cross.transpose();
            cross + cross_t
        }
        NoiseForm::Quadratic => r_tilde * r_tilde.transpose() - r * r.transpose(),
    };
    let am = a.as_matrix();
    SymmetricMatrix::symmetrize(am * drive * am * (-0.5 / lambda))
}

/// Kernel noise realization with the default [`NoiseForm::Linearized`] drive.
pub fn kernel_noise_matrix(k: &SymmetricMatrix, labels: &LabelSet, lambda: f64, batch: &[usize]) -> Result<SymmetricMatrix> {
    kernel_noise_matrix_with(k, labels, lambda, batch, NoiseForm::Linearized)
}

/// Kernel noise realization `−(1/2λ)·A·D_B·A` for the chosen drive.
pub fn kernel_noise_matrix_with(
    k: &SymmetricMatrix,
    labels: &LabelSet,
    lambda: f64,
    batch: &[usize],
    form: NoiseForm,
) -> Result<SymmetricMatrix> {
    let a = resolvent(k, lambda)?;
    let r = residual_mse(k, labels.y(), lambda)?;
    let r_tilde = masked_residual(&r, batch, labels.n())?;
    Ok(noise_from_parts(&a, &r, &r_tilde, lambda, form))
}

/// `ζ_Φ = Wᵀ(Δ_B − Δ̄)` for a `C×k` readout and `C×N` output-gradient matrices.
pub fn feature_noise_matrix(w: &GeneralMatrix, delta_batch: &GeneralMatrix, delta_mean: &GeneralMatrix) -> Result<GeneralMatrix> {
    if delta_batch.shape() != delta_mean.shape() {
        return Err(dim_mismatch("batch and mean output gradients differ in shape"));
    }
    if w.nrows() != delta_batch.nrows() {
        return Err(dim_mismatch(format!(
            "readout has {} rows but output gradients have {}",
            w.nrows(),
            delta_batch.nrows()
        )));
    }
    Ok(w.transpose() * (delta_batch - delta_mean))
}

/// One noise realization at both levels.
#[derive(Clone, Debug)]
pub struct NoiseSample {
    pub batch: Vec<usize>,
    pub batch_size: usize,
    pub c: usize,
    pub zeta_k: SymmetricMatrix,
    pub zeta_phi: GeneralMatrix,
}

/// Fixed state at which noise is sampled: features `Φ` (k×N), readout `W` (C×k), labels
/// and ridge. The kernel is `K = ΦᵀΦ`.
#[derive(Clone, Debug)]
pub struct NoiseModel {
    pub phi: GeneralMatrix,
    pub w: GeneralMatrix,
    pub labels: LabelSet,
    pub lambda: f64,
    pub form: NoiseForm,
    k: SymmetricMatrix,
    a: SymmetricMatrix,
    r: GeneralMatrix,
}

impl NoiseModel {
    pub fn new(phi: GeneralMatrix, w: GeneralMatrix, labels: LabelSet, lambda: f64) -> Result<Self> {
        if phi.ncols() != labels.n() {
            return Err(dim_mismatch("Phi columns must match label rows"));
        }
        if w.nrows() != labels.c() || w.ncols() != phi.nrows() {
            return Err(dim_mismatch(format!(
                "readout must be {}x{}, got {}x{}",
                labels.c(),
                phi.nrows(),
                w.nrows(),
                w.ncols()
            )));
        }
        let k = SymmetricMatrix::symmetrize(phi.transpose() * &phi);
        let a = resolvent(&k, lambda)?;
        let r = residual_mse(&k, labels.y(), lambda)?;
        Ok(Self { phi, w, labels, lambda, form: NoiseForm::Linearized, k, a, r })
    }

    /// Features `Φ = K^{1/2}` with the ridge-optimal readout.
    pub fn from_kernel(k: &SymmetricMatrix, labels: LabelSet, lambda: f64) -> Result<Self> {
        let phi = crate::linalg::psd_sqrt(k)?.into_inner();
        let w = ridge_readout(&phi, labels.y(), lambda)?;
        Self::new(phi, w, labels, lambda)
    }

    pub fn with_form(mut self, form: NoiseForm) -> Self {
        self.form = form;
        self
    }

    pub fn kernel(&self) -> &SymmetricMatrix {
        &self.k
    }

    pub fn residual(&self) -> &GeneralMatrix {
        &self.r
    }

    pub fn n(&self) -> usize {
        self.labels.n()
    }

    pub fn sample(&self, batch: &[usize]) -> Result<NoiseSample> {
        let r_tilde = masked_residual(&self.r, batch, self.n())?;
        let zeta_k = noise_from_parts(&self.a, &self.r, &r_tilde, self.lambda, self.form);
        let zeta_phi = feature_noise_matrix(&self.w, &r_tilde.transpose(), &self.r.transpose())?;
        let mut sorted = batch.to_vec();
        sorted.sort_unstable();
        Ok(NoiseSample { batch: sorted, batch_size: batch.len(), c: self.labels.c(), zeta_k, zeta_phi })
    }

    /// `‖(I − QQᵀ)ζ_K‖_F / ‖ζ_K‖_F` with `Q` an orthonormal basis of `A·[R̃_B, R]`; 0 for a
    /// zero realization.
    pub fn support_residual(&self, sample: &NoiseSample) -> Result<f64> {
        let norm = sample.zeta_k.norm();
        if norm == 0.0 {
            return Ok(0.0);
        }
        let r_tilde = masked_residual(&self.r, &sample.batch, self.n())?;
        let mut cols = DMatrix::zeros(self.n(), 2 * self.r.ncols());
        cols.columns_mut(0, self.r.ncols()).copy_from(&r_tilde);
        cols.columns_mut(self.r.ncols(), self.r.ncols()).copy_from(&self.r);
        let q = column_space(&(self.a.as_matrix() * cols), DEFAULT_RANK_TOL);
        let z = sample.zeta_k.as_matrix();
        let outside = z - &q * (q.transpose() * z);
        Ok(outside.norm() / norm)
    }
}

/// Uniform batch of size `b` drawn without replacement from the stream `index` of `seed`.
pub fn draw_batch(n: usize, b: usize, seed: u64, index: u64) -> Result<Vec<usize>> {
    if b == 0 || b > n {
        return Err(invalid(format!("batch size {b} must lie in 1..={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut batch = rand::seq::index::sample(&mut rng, n, b).into_vec();
    batch.sort_unstable();
    Ok(batch)
}

/// `count` realizations at uniform batches of size `b`; batch `i` uses stream `i` of `seed`,
/// so the result does not depend on scheduling.
pub fn sample_noise(model: &NoiseModel, b: usize, count: usize, seed: u64) -> Result<Vec<NoiseSample>> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| model.sample(&draw_batch(model.n(), b, seed, i)?))
        .collect()
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// All `b`-subsets of `0..n` in lexicographic order. Rejects more than
/// [`MAX_ENUMERATED_BATCHES`] subsets.
pub fn enumerate_batches(n: usize, b: usize) -> Result<Vec<Vec<usize>>> {
    if b == 0 || b > n {
        return Err(invalid(format!("batch size {b} must lie in 1..={n}")));
    }
    let total = binomial(n, b);
    if total > MAX_ENUMERATED_BATCHES {
        return Err(invalid(format!("{total} batches exceeds the enumeration limit")));
    }
    let mut out = Vec::with_capacity(total as usize);
    let mut cur: Vec<usize> = (0..b).collect();
    loop {
        out.push(cur.clone());
        let Some(pos) = (0..b).rev().find(|&i| cur[i] < n - b + i) else {
            break;
        };
        cur[pos] += 1;
        for j in pos + 1..b {
            cur[j] = cur[j - 1] + 1;
        }
    }
    Ok(out)
}

/// Mean kernel noise over every batch of size `b`.
pub fn exhaustive_mean_noise(model: &NoiseModel, b: usize) -> Result<SymmetricMatrix> {
    let batches = enumerate_batches(model.n(), b)?;
    let zetas: Vec<SymmetricMatrix> = batches
        .par_iter()
        .map(|batch| model.sample(batch).map(|s| s.zeta_k))
        .collect::<Result<_>>()?;
    let mut sum = DMatrix::zeros(model.n(), model.n());
    for z in &zetas {
        sum += z.as_matrix();
    }
    Ok(SymmetricMatrix::symmetrize(sum / zetas.len() as f64))
}

/// Measured rank structure of a set of noise realizations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseStats {
    pub num_samples: usize,
    /// Singular values of the mean-removed stacked realizations, descending.
    pub singular_values: Vec<f64>,
    pub rel_threshold: f64,
    /// Count of singular values above `rel_threshold · max`.
    pub covariance_rank: usize,
    pub per_realization_max_rank: usize,
    pub per_realization_max_feature_rank: usize,
    #[serde(rename = "reference_2C")]
    pub reference_2c: usize,
}

impl NoiseStats {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}

/// Half-vectorization with off-diagonal entries scaled by `√2`, so Euclidean norms match
/// Frobenius norms.
fn svec(s: &SymmetricMatrix) -> Vec<f64> {
    let n = s.dim();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for j in 0..n {
        out.push(s[(j, j)]);
        for i in (j + 1)..n {
            out.push(s[(i, j)] * std::f64::consts::SQRT_2);
        }
    }
    out
}

/// Singular spectrum of the centered stacked realizations plus per-realization ranks.
pub fn noise_covariance_stats(samples: &[NoiseSample], rel_threshold: f64) -> Result<NoiseStats> {
    if samples.len() < 2 {
        return Err(invalid("covariance statistics need at least two samples"));
    }
    let n = samples[0].zeta_k.dim();
    if samples.iter().any(|s| s.zeta_k.dim() != n) {
        return Err(dim_mismatch("noise samples differ in dimension"));
    }
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| svec(&s.zeta_k)).collect();
    let d = rows[0].len();
    let m = rows.len();
    let mut mean = vec![0.0; d];
    for row in &rows {
        for (acc, v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let stacked = DMatrix::from_fn(m, d, |i, j| rows[i][j] - mean[j]);
    let singular_values = singular_values(&stacked);
    // Centering leaves round-off of order ε·‖data‖ even for identical samples.
    let data_norm = rows.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let floor = 64.0 * f64::EPSILON * data_norm;
    let covariance_rank = match singular_values.first() {
        Some(&top) => singular_values.iter().filter(|&&v| v > (rel_threshold * top).max(floor)).count(),
        None => 0,
    };
    let ranks: Vec<(usize, usize)> = samples
        .par_iter()
        .map(|s| (symmetric_rank(&s.zeta_k, rel_threshold), numerical_rank(&s.zeta_phi, rel_threshold)))
        .collect();
    Ok(NoiseStats {
        num_samples: m,
        singular_values,
        rel_threshold,
        covariance_rank,
        per_realization_max_rank: ranks.iter().map(|r| r.0).max().unwrap_or(0),
        per_realization_max_feature_rank: ranks.iter().map(|r| r.1).max().unwrap_or(0),
        reference_2c: 2 * samples[0].c,
    })
}

/// Per-realization ranks before and after the congruence `ζ ↦ Θ^{1/2}ζΘ^{1/2}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CongruenceReport {
    pub ranks_before: Vec<usize>,
    pub ranks_after: Vec<usize>,
    pub bound: usize,
    /// Every realization keeps its rank.
    pub preserved: bool,
    /// Every transformed realization has rank at most `2C`.
    pub bound_holds: bool,
}

/// Applies the congruence by `Θ^{1/2}` to each kernel realization and re-measures rank.
pub fn preconditioned_noise_check(
    theta_sqrt: &SymmetricMatrix,
    samples: &[NoiseSample],
    rel_threshold: f64,
) -> Result<CongruenceReport> {
    let eig = sym_eig(theta_sqrt)?;
    let low = eig.min_eigenvalue();
    if low <= DEFAULT_RANK_TOL * eig.max_eigenvalue().abs() {
        return Err(FlowError::Singular("Theta^(1/2)"));
    }
    if let Some(s) = samples.iter().find(|s| s.zeta_k.dim() != theta_sqrt.dim()) {
        return Err(dim_mismatch(format!(
            "Theta^(1/2) is {0}x{0} but a sample is {1}x{1}",
            theta_sqrt.dim(),
            s.zeta_k.dim()
        )));
    }
    let t = theta_sqrt.as_matrix();
    let pairs: Vec<(usize, usize)> = samples
        .par_iter()
        .map(|s| {
            let mapped = SymmetricMatrix::symmetrize(t * s.zeta_k.as_matrix() * t);
            (symmetric_rank(&s.zeta_k, rel_threshold), symmetric_rank(&mapped, rel_threshold))
        })
        .collect();
    let bound = samples.first().map(|s| 2 * s.c).unwrap_or(0);
    let (ranks_before, ranks_after): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
    Ok(CongruenceReport {
        preserved: ranks_before == ranks_after,
        bound_holds: ranks_after.iter().all(|&r| r <= bound),
        ranks_before,
        ranks_after,
        bound,
    })
}

//! Closed-form steady states and their verifiers.
//!
//! Squared-loss kernels settle on the water-filling law `kᵢ = λ(√(σᵢ/τ) − 1)₊`, `τ = λμ`,
//! in the eigenbasis of `M_Y`. The fixed point satisfies
//! `λ[ΣM_YΣK + KΣM_YΣ] = 2μK`, which is the canonical residual here. With the normalized
//! drive `M = λ²ΣM_YΣ` it reads `KM + MK = 2λμK`.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{compact_svd, effective_rank, random_gaussian, sym_eig, GeneralMatrix, SymmetricMatrix};
use crate::setup::{label_gram, rng_from_seed, LabelSet, RegularizationConfig, SSLConfig, SemiConfig};
use crate::supervised::kernel_rhs_mse;

/// Relative guard band used when classifying a mode as active.
pub const ACTIVE_GUARD: f64 = 1e-9;

fn is_active(drive: f64, threshold: f64) -> bool {
    drive > threshold * (1.0 + ACTIVE_GUARD)
}

fn require_positive(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(invalid(format!("{name} must be > 0, got {v}")));
    }
    Ok(())
}

/// `kᵢ = λ(√(σᵢ/τ) − 1)₊` with `τ = λμ`.
pub fn water_filling_spectrum(sigma: &[f64], reg: &RegularizationConfig) -> Result<Vec<f64>> {
    require_positive("lambda", reg.lambda)?;
    require_positive("mu", reg.mu)?;
    let tau = reg.tau();
    Ok(sigma
        .iter()
        .map(|&s| if is_active(s, tau) { reg.lambda * ((s / tau).sqrt() - 1.0) } else { 0.0 })
        .collect())
}

/// `K∞ = U diag(k) Uᵀ` in the eigenbasis of `M_Y`.
pub fn predict_k_infinity(labels: &LabelSet, reg: &RegularizationConfig) -> Result<SymmetricMatrix> {
    let (_, eig) = label_gram(labels)?;
    let k = water_filling_spectrum(&eig.eigenvalues, reg)?;
    Ok(SymmetricMatrix::from_eigen(&k, &eig.eigenvectors))
}

/// `‖λ[ΣM_YΣK + KΣM_YΣ] − 2μK‖_F`.
pub fn fixed_point_residual(k: &SymmetricMatrix, labels: &LabelSet, reg: &RegularizationConfig) -> Result<f64> {
    Ok(kernel_rhs_mse(k, labels.y(), reg.lambda, reg.mu)?.norm())
}

/// Effective rank of `K` and whether it respects the bound `rank ≤ C`.
pub fn rank_compression_check(k: &SymmetricMatrix, c: usize, rel_threshold: f64) -> (usize, bool) {
    let r = effective_rank(k, rel_threshold);
    (r, r <= c)
}

/// Energies of the weight-decay / nuclear-norm comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuclearGap {
    /// `(μ/2)(‖W₁*‖² + ‖W₂*‖²)` for the balanced SVD split.
    pub optimal_energy: f64,
    /// `μ‖Z‖_*`.
    pub nuclear_penalty: f64,
    /// Smallest energy among the random factorizations.
    pub min_random_energy: f64,
}

/// Compares the balanced split `W₂ = UΣ^{1/2}`, `W₁ = Σ^{1/2}Vᵀ` of `Z = W₂W₁` with
/// `trials` random factorizations `W₂W₁ = Z` (inner dimension `rows + cols`).
pub fn nuclear_norm_gap(z: &GeneralMatrix, mu: f64, trials: usize, seed: u64) -> Result<NuclearGap> {
    require_positive("mu", mu)?;
    if trials == 0 {
        return Err(invalid("trials must be >= 1"));
    }
    let (u, s, v) = compact_svd(z, 1e-14);
    let nuclear_penalty = mu * s.iter().sum::<f64>();
    let mut w2 = u.clone();
    let mut w1 = v.transpose();
    for (j, sv) in s.iter().enumerate() {
        w2.column_mut(j).scale_mut(sv.sqrt());
        w1.row_mut(j).scale_mut(sv.sqrt());
    }
    let optimal_energy = 0.5 * mu * (w1.norm_squared() + w2.norm_squared());
    if s.is_empty() {
        return Ok(NuclearGap { optimal_energy, nuclear_penalty, min_random_energy: 0.0 });
    }
    let (rows, cols) = z.shape();
    let inner = rows + cols;
    let mut rng = rng_from_seed(seed);
    let mut min_random_energy = f64::INFINITY;
    for _ in 0..trials {
        // Random full-row-rank W₂, then W₁ = W₂⁺Z plus a null-space component.
        let scale = rng.random_range(0.2..5.0);
        let b2 = random_gaussian(rows, inner, &mut rng) * scale;
        let pinv = b2.clone().pseudo_inverse(1e-12).map_err(|e| invalid(e.to_string()))?;
        let null_proj = DMatrix::identity(inner, inner) - &pinv * &b2;
        let free = random_gaussian(inner, cols, &mut rng) * rng.random_range(0.0..1.0);
        let b1 = &pinv * z + null_proj * free;
        let energy = 0.5 * mu * (b1.norm_squared() + b2.norm_squared());
        min_random_energy = min_random_energy.min(energy);
    }
    Ok(NuclearGap { optimal_energy, nuclear_penalty, min_random_energy })
}

/// `kᵢ = max(0, β/(2νᵢ + μ) − ε)`.
pub fn ssl_spectrum(nu: &[f64], ssl: &SSLConfig) -> Result<Vec<f64>> {
    require_positive("beta", ssl.beta)?;
    require_positive("epsilon", ssl.epsilon)?;
    let cutoff = ssl.lambda_cutoff();
    nu.iter()
        .map(|&v| {
            let denom = 2.0 * v + ssl.mu;
            if denom == 0.0 {
                return Err(invalid("degenerate balance: 2 nu + mu == 0"));
            }
            if v >= cutoff - ACTIVE_GUARD * cutoff.abs() {
                return Ok(0.0);
            }
            Ok((ssl.beta / denom - ssl.epsilon).max(0.0))
        })
        .collect()
}

/// `kᵢ = λ(√(σᵢ/(λ(μ + ανᵢ))) − 1)₊`.
pub fn semi_spectrum(sigma: &[f64], nu: &[f64], semi: &SemiConfig) -> Result<Vec<f64>> {
    if sigma.len() != nu.len() {
        return Err(invalid("sigma and nu must have equal length"));
    }
    let lambda = semi.reg.lambda;
    require_positive("lambda", lambda)?;
    sigma
        .iter()
        .zip(nu)
        .map(|(&s, &v)| {
            let damp = semi.reg.mu + semi.alpha * v;
            if damp <= 0.0 {
                return Err(invalid("mu + alpha nu must be > 0"));
            }
            let tau = lambda * damp;
            Ok(if is_active(s, tau) { lambda * ((s / tau).sqrt() - 1.0) } else { 0.0 })
        })
        .collect()
}

/// `μᵢ* = max(0, λᵢ^X/μ − λ)`.
pub fn pca_ssl_spectrum(lambda_x: &[f64], lambda: f64, mu: f64) -> Result<Vec<f64>> {
    require_positive("mu", mu)?;
    Ok(lambda_x.iter().map(|&x| (x / mu - lambda).max(0.0)).collect())
}

/// Variant law `μᵢ* = max(0, √(sᵢ/μ) − λ)`. Kept separate from [`water_filling_spectrum`].
pub fn water_filling_alt(s: &[f64], lambda: f64, mu: f64) -> Result<Vec<f64>> {
    require_positive("mu", mu)?;
    Ok(s.iter().map(|&v| ((v / mu).sqrt() - lambda).max(0.0)).collect())
}

/// One row of a [`SpectralProfile`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub index: usize,
    pub drive: f64,
    pub predicted: f64,
    pub measured: f64,
}

impl ProfileRow {
    pub fn abs_err(&self) -> f64 {
        (self.measured - self.predicted).abs()
    }

    pub fn rel_err(&self) -> f64 {
        if self.predicted != 0.0 {
            self.abs_err() / self.predicted.abs()
        } else {
            self.abs_err()
        }
    }
}

/// Predicted versus measured kernel spectrum for one law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralProfile {
    pub law: String,
    pub params: BTreeMap<String, f64>,
    pub rows: Vec<ProfileRow>,
}

/// Error summary of a [`SpectralProfile`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileErrors {
    pub active_modes: usize,
    /// Largest relative error over modes with a positive prediction.
    pub max_rel_err_active: f64,
    /// Largest measured magnitude over modes predicted to vanish.
    pub max_abs_err_truncated: f64,
    /// Largest absolute error over all modes.
    pub max_abs_err: f64,
    /// Largest predicted eigenvalue.
    pub lambda_max: f64,
}

impl SpectralProfile {
    /// Pairs drives (sorted descending internally) with predictions and measurements that are
    /// already sorted in the same order.
    pub fn new(law: &str, params: &[(&str, f64)], drive: &[f64], predicted: &[f64], measured: &[f64]) -> Result<Self> {
        if drive.len() != predicted.len() || drive.len() != measured.len() {
            return Err(invalid("drive, predicted and measured must have equal length"));
        }
        if predicted.iter().any(|&k| k < 0.0) {
            return Err(invalid("predicted eigenvalues must be >= 0"));
        }
        let rows = (0..drive.len())
            .map(|i| ProfileRow { index: i, drive: drive[i], predicted: predicted[i], measured: measured[i] })
            .collect();
        Ok(Self {
            law: law.to_string(),
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            rows,
        })
    }

    pub fn errors(&self) -> ProfileErrors {
        let mut e = ProfileErrors {
            active_modes: 0,
            max_rel_err_active: 0.0,
            max_abs_err_truncated: 0.0,
            max_abs_err: 0.0,
            lambda_max: self.rows.iter().map(|r| r.predicted).fold(0.0, f64::max),
        };
        for r in &self.rows {
            e.max_abs_err = e.max_abs_err.max(r.abs_err());
            if r.predicted > 0.0 {
                e.active_modes += 1;
                e.max_rel_err_active = e.max_rel_err_active.max(r.rel_err());
            } else {
                e.max_abs_err_truncated = e.max_abs_err_truncated.max(r.abs_err());
            }
        }
        e
    }

    /// CSV with header `index,drive,predicted,measured,abs_err,rel_err`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(["index", "drive", "predicted", "measured", "abs_err", "rel_err"])?;
        for r in &self.rows {
            w.write_record([
                r.index.to_string(),
                r.drive.to_string(),
                r.predicted.to_string(),
                r.measured.to_string(),
                r.abs_err().to_string(),
                r.rel_err().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Water-filling profile of a terminal kernel: sorted eigenvalues of `K` against the law
/// evaluated on the sorted eigenvalues of `M_Y`.
pub fn water_filling_profile(k: &SymmetricMatrix, labels: &LabelSet, reg: &RegularizationConfig) -> Result<SpectralProfile> {
    let (_, eig) = label_gram(labels)?;
    let predicted = water_filling_spectrum(&eig.eigenvalues, reg)?;
    let measured = sym_eig(k)?.eigenvalues;
    SpectralProfile::new(
        "water_filling",
        &[("lambda", reg.lambda), ("mu", reg.mu), ("tau", reg.tau())],
        &eig.eigenvalues,
        &predicted,
        &measured,
    )
}

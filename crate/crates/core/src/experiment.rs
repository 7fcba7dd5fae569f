//! Config-driven experiments with CSV/JSON artifacts.
//!
//! An [`ExperimentConfig`] is a single JSON document. [`ExperimentConfig::preset`] supplies
//! desk-scale defaults per kind; a config file is merged over the preset and `key=value`
//! overrides (dotted paths allowed) are applied last. Every run writes
//! `<prefix>_trajectory.csv`, `<prefix>_spectrum.csv` and `<prefix>_report.json`. Data files
//! never contain wall-clock values, so identical configs give byte-identical CSVs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{invalid, Result};
use crate::laws::{semi_spectrum, ssl_spectrum, water_filling_profile, water_filling_spectrum, SpectralProfile};
use crate::linalg::{
    commutator_norm, effective_rank, random_gaussian, random_psd, rayleigh_quotients, subspace_overlap, sym_eig,
    GeneralMatrix, SymmetricMatrix, DEFAULT_RANK_TOL,
};
use crate::muon::{muon_feature_flow, muon_steady_state_check, MuonConfig};
use crate::noise::{exhaustive_mean_noise, noise_covariance_stats, preconditioned_noise_check, sample_noise, NoiseModel};
use crate::population::{flow_vs_static_risk, risk_decomposition, write_risk_csv, PopulationSpectrum, RiskRow};
use crate::setup::{
    label_gram, rng_from_seed, synth_clustered_task, synth_commuting_task, synth_spectral_task, AugmentationGraph,
    LabelSet, RegularizationConfig, SSLConfig, SemiConfig,
};
use crate::ssl::{commuting_modes, semi_balance_residual, semi_closed_form, semi_flow, ssl_flow};
use crate::supervised::{
    adiabatic_error_sweep, coupled_flow, default_init, integrate_kernel_flow, ridge_readout, FlowConfig, FlowRun,
    KernelRhs, StepRecord,
};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "KFLOW_OUT_DIR";

/// Relative threshold used for every reported effective rank.
pub const RANK_THRESHOLD: f64 = 1e-6;

/// Experiment selector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    #[default]
    Supervised,
    Ssl,
    Semi,
    Muon,
    Coupled,
    Noise,
    Risk,
    Adiabatic,
    PhaseSweep,
    AlignTrack,
    TruncationCurve,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 11] = [
        Self::Supervised,
        Self::Ssl,
        Self::Semi,
        Self::Muon,
        Self::Coupled,
        Self::Noise,
        Self::Risk,
        Self::Adiabatic,
        Self::PhaseSweep,
        Self::AlignTrack,
        Self::TruncationCurve,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Supervised => "supervised",
            Self::Ssl => "ssl",
            Self::Semi => "semi",
            Self::Muon => "muon",
            Self::Coupled => "coupled",
            Self::Noise => "noise",
            Self::Risk => "risk",
            Self::Adiabatic => "adiabatic",
            Self::PhaseSweep => "phase-sweep",
            Self::AlignTrack => "align-track",
            Self::TruncationCurve => "truncation-curve",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown experiment kind '{s}'"))
    }
}

/// How labels are synthesized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelModel {
    /// Balanced one-hot clusters; `C` must divide `N`.
    #[default]
    OneHot,
    /// i.i.d. standard normal `N×C` labels.
    Gaussian,
    /// `C` modes cycling through the bands `[20,50]`, `[5,10]`, `[2,3]`, `[0.1,0.5]` times
    /// `τ = λμ`, drawn uniformly inside each band.
    Banded,
    /// `C` strong modes log-spaced over `strong_band` and `N − C` weak modes log-spaced over
    /// `weak_band`.
    Tiered,
}

/// One experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub n: usize,
    pub c: usize,
    /// Feature width `k` of `Φ` (k×N).
    pub width: usize,
    pub labels: LabelModel,
    pub strong_band: (f64, f64),
    pub weak_band: (f64, f64),
    /// Number of graph clusters.
    pub clusters: usize,
    pub intra_weight: f64,
    pub inter_weight: f64,
    pub reg: RegularizationConfig,
    pub ssl: SSLConfig,
    pub alpha: f64,
    /// Semi-supervised modes `(Laplacian index from the smallest eigenvalue, strength)`.
    pub semi_modes: Vec<(usize, f64)>,
    pub muon: MuonConfig,
    pub rhs: KernelRhs,
    pub flow: FlowConfig,
    /// With a fixed `flow.dt`, runs `ceil(horizon/dt)` steps instead of `flow.max_steps`.
    pub horizon: Option<f64>,
    /// Horizon of the long run used for terminal checks.
    pub terminal_horizon: f64,
    pub batch_size: usize,
    pub num_samples: usize,
    pub exhaustive_n: usize,
    pub exhaustive_batch: usize,
    pub mu_grid: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub static_exponent_range: (f64, f64),
    pub modes: usize,
    pub sigma_eps2: f64,
    pub sample_count: f64,
    pub draws: usize,
    /// Artifact path prefix; defaults to `$KFLOW_OUT_DIR/<kind>` or `./<kind>`.
    pub out: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Supervised,
            seed: 0,
            n: 32,
            c: 4,
            width: 48,
            labels: LabelModel::OneHot,
            strong_band: (20.0, 40.0),
            weak_band: (0.01, 0.5),
            clusters: 2,
            intra_weight: 1.0,
            inter_weight: 0.05,
            reg: RegularizationConfig { lambda: 1.0, mu: 0.1 },
            ssl: SSLConfig { beta: 8.0, epsilon: 0.5, mu: 2.0 },
            alpha: 0.5,
            semi_modes: vec![(0, 30.0), (1, 20.0), (4, 12.0), (20, 25.0)],
            muon: MuonConfig { eta: 1.0, mu: 2.0, rank_tol: DEFAULT_RANK_TOL },
            rhs: KernelRhs::Mse,
            flow: FlowConfig::default(),
            horizon: None,
            terminal_horizon: 40.0,
            batch_size: 8,
            num_samples: 1000,
            exhaustive_n: 6,
            exhaustive_batch: 3,
            mu_grid: vec![],
            epsilons: vec![1e-1, 3e-2, 1e-2, 3e-3, 1e-3],
            static_exponent_range: (0.5, 2.0),
            modes: 50,
            sigma_eps2: 1.0,
            sample_count: 100.0,
            draws: 20,
            out: None,
        }
    }
}

/// `points` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![lo];
    }
    (0..points)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (points - 1) as f64).exp())
        .collect()
}

impl ExperimentConfig {
    /// Desk-scale defaults for `kind`.
    pub fn preset(kind: ExperimentKind) -> Self {
        let base = Self { kind, ..Self::default() };
        match kind {
            ExperimentKind::Supervised => Self {
                flow: FlowConfig { dt: Some(0.02), max_steps: 50_000, ..FlowConfig::default() },
                ..base
            },
            ExperimentKind::TruncationCurve => Self {
                n: 64,
                c: 4,
                labels: LabelModel::Banded,
                reg: RegularizationConfig { lambda: 0.5, mu: 0.1 },
                flow: FlowConfig { dt: Some(0.05), max_steps: 200_000, stop_grad_norm: 1e-10, ..FlowConfig::default() },
                ..base
            },
            ExperimentKind::Ssl => Self {
                n: 40,
                c: 2,
                flow: FlowConfig { dt: Some(0.02), max_steps: 100_000, stop_grad_norm: 1e-10, ..FlowConfig::default() },
                ..base
            },
            ExperimentKind::Semi => Self {
                n: 40,
                c: 2,
                reg: RegularizationConfig { lambda: 1.0, mu: 0.5 },
                flow: FlowConfig { dt: Some(0.01), max_steps: 200_000, stop_grad_norm: 1e-10, ..FlowConfig::default() },
                ..base
            },
            ExperimentKind::Muon => Self {
                n: 12,
                c: 2,
                width: 16,
                reg: RegularizationConfig { lambda: 1.0, mu: 2.0 },
                flow: FlowConfig { dt: Some(1e-3), record_every: 100, ..FlowConfig::default() },
                horizon: Some(1.0),
                terminal_horizon: 40.0,
                ..base
            },
            ExperimentKind::Coupled => Self {
                n: 32,
                c: 3,
                labels: LabelModel::Gaussian,
                width: 48,
                reg: RegularizationConfig { lambda: 1.0, mu: 0.5 },
                flow: FlowConfig { dt: Some(0.02), max_steps: 3000, record_every: 100, ..FlowConfig::default() },
                ..base
            },
            ExperimentKind::Noise => Self {
                n: 40,
                c: 3,
                width: 48,
                labels: LabelModel::Gaussian,
                reg: RegularizationConfig { lambda: 0.5, mu: 0.1 },
                ..base
            },
            ExperimentKind::Risk => Self { reg: RegularizationConfig { lambda: 1.0, mu: 0.1 }, c: 3, ..base },
            ExperimentKind::Adiabatic => Self {
                n: 16,
                c: 2,
                width: 24,
                reg: RegularizationConfig { lambda: 1.0, mu: 0.1 },
                horizon: Some(1.0),
                ..base
            },
            ExperimentKind::PhaseSweep => Self {
                n: 100,
                c: 10,
                labels: LabelModel::Tiered,
                strong_band: (20.0, 40.0),
                weak_band: (0.01, 0.5),
                reg: RegularizationConfig { lambda: 1.0, mu: 0.1 },
                mu_grid: log_grid(1e-3, 5.0, 20),
                flow: FlowConfig { dt: Some(0.04), record_every: 1_000_000, ..FlowConfig::default() },
                horizon: Some(10.0),
                ..base
            },
            ExperimentKind::AlignTrack => Self {
                n: 100,
                c: 10,
                reg: RegularizationConfig { lambda: 1.0, mu: 0.2 },
                flow: FlowConfig { dt: Some(0.05), record_every: 20, ..FlowConfig::default() },
                horizon: Some(40.0),
                ..base
            },
        }
    }

    /// Preset for `kind`, then `file` merged over it, then `overrides` applied in order.
    pub fn resolve(kind: ExperimentKind, file: Option<&Value>, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = serde_json::to_value(Self::preset(kind))?;
        if let Some(f) = file {
            merge(&mut doc, f);
        }
        for (k, v) in overrides {
            apply_override(&mut doc, k, v)?;
        }
        doc["kind"] = Value::String(kind.name().to_string());
        let cfg: Self = serde_json::from_value(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 {
            return Err(invalid("N and C must be >= 1"));
        }
        self.reg.validate()?;
        self.flow.validate()?;
        if let Some(h) = self.horizon {
            if !(h.is_finite() && h > 0.0) {
                return Err(invalid("horizon must be > 0"));
            }
        }
        match self.kind {
            ExperimentKind::Ssl => self.ssl.validate()?,
            ExperimentKind::Semi => SemiConfig::new(self.alpha, self.reg)?.validate()?,
            ExperimentKind::Muon => self.muon.validate()?,
            ExperimentKind::Noise => {
                if self.batch_size == 0 || self.batch_size > self.n || self.num_samples < 2 {
                    return Err(invalid("noise needs 1 <= batch_size <= N and num_samples >= 2"));
                }
            }
            ExperimentKind::PhaseSweep => {
                if self.mu_grid.is_empty() || self.mu_grid.iter().any(|&m| m.is_nan() || m <= 0.0) {
                    return Err(invalid("mu_grid must be a nonempty list of positive values"));
                }
            }
            ExperimentKind::Adiabatic => {
                if self.epsilons.len() < 2 {
                    return Err(invalid("adiabatic sweep needs at least two epsilons"));
                }
            }
            ExperimentKind::Risk if self.modes < self.c || self.draws == 0 => {
                return Err(invalid("risk needs modes >= C and draws >= 1"));
            }
            _ => {}
        }
        Ok(())
    }

    fn flow_for_horizon(&self) -> FlowConfig {
        let mut f = self.flow;
        if let (Some(h), Some(dt)) = (self.horizon, f.dt) {
            f.max_steps = (h / dt).round() as usize;
            f.stop_grad_norm = f64::MIN_POSITIVE;
        }
        f
    }

    fn prefix(&self) -> PathBuf {
        match &self.out {
            Some(p) => PathBuf::from(p),
            None => {
                let dir = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
                dir.join(self.kind.name())
            }
        }
    }

    fn label_set(&self) -> Result<LabelSet> {
        match self.labels {
            LabelModel::OneHot => Ok(synth_clustered_task(self.n, self.c, 1.0, 0.0, self.seed)?.0),
            LabelModel::Gaussian => LabelSet::new(random_gaussian(self.n, self.c, &mut rng_from_seed(self.seed))),
            LabelModel::Banded => {
                let bands = [(20.0, 50.0), (5.0, 10.0), (2.0, 3.0), (0.1, 0.5)];
                let mut rng = rng_from_seed(self.seed ^ 0x5eed);
                let tau = self.reg.tau();
                let sigma: Vec<f64> = (0..self.c)
                    .map(|j| {
                        let (lo, hi) = bands[j % bands.len()];
                        rng.random_range(lo..hi) * tau
                    })
                    .collect();
                synth_spectral_task(self.n, &sigma, self.seed)
            }
            LabelModel::Tiered => {
                if self.c > self.n {
                    return Err(invalid("C must not exceed N"));
                }
                let mut sigma = log_grid(self.strong_band.0, self.strong_band.1, self.c);
                sigma.extend(log_grid(self.weak_band.0, self.weak_band.1, self.n - self.c));
                synth_spectral_task(self.n, &sigma, self.seed)
            }
        }
    }

    fn graph(&self) -> Result<AugmentationGraph> {
        Ok(synth_clustered_task(self.n, self.clusters, self.intra_weight, self.inter_weight, self.seed)?.1)
    }

    fn features(&self, salt: u64) -> GeneralMatrix {
        random_gaussian(self.width, self.n, &mut rng_from_seed(self.seed.wrapping_add(salt))) / (self.n as f64).sqrt()
    }
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// Sets `key` (dotted path) to `raw`, parsed as JSON when possible and as a string
/// otherwise.
pub fn apply_override(doc: &mut Value, key: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(invalid(format!("bad override key '{key}'")));
        }
        let obj = match cur {
            Value::Object(o) => o,
            Value::Null => {
                *cur = Value::Object(Default::default());
                cur.as_object_mut().expect("just set")
            }
            _ => return Err(invalid(format!("override '{key}' descends into a non-object"))),
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

/// Parses `key=value`.
pub fn parse_override(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("override '{s}' is not key=value"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Comparison used by an [`Assertion`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    AtMost,
    AtLeast,
    Equal,
}

/// One checked claim.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub value: f64,
    pub relation: Relation,
    pub tolerance: f64,
    pub passed: bool,
}

impl Assertion {
    pub fn new(name: &str, value: f64, relation: Relation, tolerance: f64) -> Self {
        let passed = match relation {
            Relation::AtMost => value <= tolerance,
            Relation::AtLeast => value >= tolerance,
            Relation::Equal => value == tolerance,
        };
        Self { name: name.to_string(), value, relation, tolerance, passed }
    }

    pub fn at_most(name: &str, value: f64, tol: f64) -> Self {
        Self::new(name, value, Relation::AtMost, tol)
    }

    pub fn at_least(name: &str, value: f64, tol: f64) -> Self {
        Self::new(name, value, Relation::AtLeast, tol)
    }

    pub fn holds(name: &str, ok: bool) -> Self {
        Self::new(name, if ok { 1.0 } else { 0.0 }, Relation::Equal, 1.0)
    }
}

/// Outcome of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub assertions: Vec<Assertion>,
    pub metrics: BTreeMap<String, f64>,
    pub artifacts: Vec<String>,
    pub wall_clock_seconds: f64,
    pub error: Option<String>,
    pub passed: bool,
}

impl ExperimentReport {
    /// 0 on pass, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            1
        }
    }
}

#[derive(Default)]
struct Outcome {
    assertions: Vec<Assertion>,
    metrics: BTreeMap<String, f64>,
    trajectory: Table,
    spectrum: Table,
    risk_rows: Vec<RiskRow>,
}

impl Outcome {
    fn metric(&mut self, key: &str, v: f64) {
        self.metrics.insert(key.to_string(), v);
    }

    fn check(&mut self, a: Assertion) {
        self.assertions.push(a);
    }
}

/// Header plus numeric rows.
#[derive(Default, Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: vec![] }
    }

    fn push(&mut self, row: Vec<f64>) {
        self.rows.push(row);
    }

    fn from_steps(steps: &[StepRecord]) -> Self {
        let mut t = Self::new(&["t", "value", "trace", "rhs_norm"]);
        for s in steps {
            t.push(vec![s.t, s.value, s.trace, s.rhs_norm]);
        }
        t
    }

    fn from_profile(p: &SpectralProfile) -> Self {
        let mut t = Self::new(&["index", "drive", "predicted", "measured", "abs_err", "rel_err"]);
        for r in &p.rows {
            t.push(vec![r.index as f64, r.drive, r.predicted, r.measured, r.abs_err(), r.rel_err()]);
        }
        t
    }

    /// LF line endings, `.` decimal separator, mandatory header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn eigenvalue_table(k: &SymmetricMatrix) -> Result<Table> {
    let mut t = Table::new(&["index", "eigenvalue"]);
    for (i, v) in sym_eig(k)?.eigenvalues.iter().enumerate() {
        t.push(vec![i as f64, *v]);
    }
    Ok(t)
}

fn descent_checks(out: &mut Outcome, steps: &[StepRecord], mu: f64) {
    let inc = steps
        .windows(2)
        .map(|w| w[1].value - w[0].value - 1e-8 * (1.0 + w[0].value.abs()))
        .fold(f64::NEG_INFINITY, f64::max);
    out.check(Assertion::at_most("loss_increase_beyond_tolerance", inc.max(0.0), 0.0));
    if mu > 0.0 {
        let bound = 2.0 * steps[0].value / mu;
        let worst = steps.iter().map(|s| s.trace - bound).fold(f64::NEG_INFINITY, f64::max);
        out.check(Assertion::at_most("trace_excess_over_2_loss0_over_mu", worst.max(0.0), 0.0));
    }
}

fn truncation_checks(out: &mut Outcome, profile: &SpectralProfile, rel_tol: f64, abs_rel_tol: f64) {
    let e = profile.errors();
    out.metric("active_modes", e.active_modes as f64);
    out.metric("lambda_max", e.lambda_max);
    out.check(Assertion::at_most("max_rel_err_active", e.max_rel_err_active, rel_tol));
    out.check(Assertion::at_most("max_abs_err_truncated", e.max_abs_err_truncated, abs_rel_tol * e.lambda_max));
}

fn run_supervised(cfg: &ExperimentConfig, truncation: bool) -> Result<Outcome> {
    let labels = cfg.label_set()?;
    let k0 = default_init(cfg.n, cfg.seed);
    let run = integrate_kernel_flow(&k0, cfg.rhs, &labels, &cfg.reg, &cfg.flow)?;
    let mut out = Outcome { trajectory: Table::from_steps(&run.steps), ..Outcome::default() };
    let k = &run.terminal().k;
    let profile = water_filling_profile(k, &labels, &cfg.reg)?;
    out.spectrum = Table::from_profile(&profile);
    out.metric("terminal_effective_loss", run.terminal().eff_loss);
    out.metric("terminal_rank", effective_rank(k, RANK_THRESHOLD) as f64);
    out.metric("steps", run.steps.len() as f64);
    out.check(Assertion::holds("converged", run.converged()));
    if matches!(cfg.rhs, KernelRhs::Mse | KernelRhs::General) {
        descent_checks(&mut out, &run.steps, cfg.reg.mu);
        truncation_checks(&mut out, &profile, 1e-2, 1e-6);
    }
    if !truncation {
        out.check(Assertion::at_most("terminal_rank_minus_c", out.metrics["terminal_rank"] - cfg.c as f64, 0.0));
    }
    Ok(out)
}

fn run_ssl(cfg: &ExperimentConfig) -> Result<Outcome> {
    let graph = cfg.graph()?;
    let k0 = SymmetricMatrix::identity(cfg.n);
    let run = ssl_flow(&k0, &graph, &cfg.ssl, &cfg.flow)?;
    let mut out = Outcome { trajectory: Table::from_steps(&run.steps), ..Outcome::default() };
    let k = &run.terminal().k;
    let eig = sym_eig(&graph.laplacian)?;
    let measured = rayleigh_quotients(k, &eig.eigenvectors);
    let predicted = ssl_spectrum(&eig.eigenvalues, &cfg.ssl)?;
    let profile = SpectralProfile::new(
        "rectified_hyperbolic",
        &[("beta", cfg.ssl.beta), ("epsilon", cfg.ssl.epsilon), ("mu", cfg.ssl.mu)],
        &eig.eigenvalues,
        &predicted,
        &measured,
    )?;
    out.spectrum = Table::from_profile(&profile);
    let cutoff = cfg.ssl.lambda_cutoff();
    let predicted_passband = eig.eigenvalues.iter().filter(|&&v| v < cutoff).count();
    let measured_passband = effective_rank(k, RANK_THRESHOLD);
    out.metric("lambda_cutoff", cutoff);
    out.metric("predicted_passband", predicted_passband as f64);
    out.metric("measured_passband", measured_passband as f64);
    out.check(Assertion::holds("converged", run.converged()));
    out.check(Assertion::at_most("max_abs_err", profile.errors().max_abs_err, 1e-4));
    out.check(Assertion::at_most("commutator_k_l", commutator_norm(k, &graph.laplacian), 1e-6));
    out.check(Assertion::new("passband_count", measured_passband as f64, Relation::Equal, predicted_passband as f64));
    Ok(out)
}

fn run_semi(cfg: &ExperimentConfig) -> Result<Outcome> {
    let graph = cfg.graph()?;
    let (labels, _) = synth_commuting_task(&graph, &cfg.semi_modes)?;
    let semi = SemiConfig::new(cfg.alpha, cfg.reg)?;
    let closed = semi_closed_form(&labels, &graph, &semi)?;
    let residual = semi_balance_residual(&closed, &labels, &graph, &semi)?;
    let k0 = default_init(cfg.n, cfg.seed);
    let run = semi_flow(&k0, &labels, &graph, &semi, &cfg.flow)?;
    let mut out = Outcome { trajectory: Table::from_steps(&run.steps), ..Outcome::default() };
    let modes = commuting_modes(&labels, &graph)?;
    let k = &run.terminal().k;
    let measured = rayleigh_quotients(k, &modes.basis);
    let predicted = semi_spectrum(&modes.sigma, &modes.nu, &semi)?;
    let mut order: Vec<usize> = (0..modes.sigma.len()).collect();
    order.sort_by(|&a, &b| modes.sigma[b].total_cmp(&modes.sigma[a]).then(modes.nu[a].total_cmp(&modes.nu[b])));
    let pick = |v: &[f64]| order.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let profile = SpectralProfile::new(
        "spectral_intersection",
        &[("alpha", cfg.alpha), ("lambda", cfg.reg.lambda), ("mu", cfg.reg.mu)],
        &pick(&modes.sigma),
        &pick(&predicted),
        &pick(&measured),
    )?;
    out.spectrum = Table::from_profile(&profile);
    let supervised_limit = semi_spectrum(&modes.sigma, &modes.nu, &SemiConfig::new(0.0, cfg.reg)?)?;
    let water = water_filling_spectrum(&modes.sigma, &cfg.reg)?;
    let alpha_zero_gap = supervised_limit.iter().zip(&water).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    out.check(Assertion::holds("converged", run.converged()));
    out.check(Assertion::at_most("closed_form_balance_residual", residual, 1e-8));
    out.check(Assertion::at_most("flow_max_abs_err", profile.errors().max_abs_err, 1e-3));
    out.check(Assertion::at_most("alpha_zero_gap", alpha_zero_gap, 0.0));
    Ok(out)
}

fn run_muon(cfg: &ExperimentConfig) -> Result<Outcome> {
    let labels = cfg.label_set()?;
    let phi0 = cfg.features(1);
    let k0 = SymmetricMatrix::symmetrize(phi0.transpose() * &phi0);
    let flow = cfg.flow_for_horizon();
    let feat = muon_feature_flow(&phi0, &labels, cfg.reg.lambda, &cfg.muon, &flow)?;
    let kern = integrate_kernel_flow(&k0, KernelRhs::MuonMse(cfg.muon), &labels, &cfg.reg, &flow)?;
    let mut out = Outcome { trajectory: Table::new(&["t", "kernel_gap", "trace_phi", "trace_k"]), ..Outcome::default() };
    let mut gap = 0.0f64;
    for (a, b) in feat.states.iter().zip(&kern.states) {
        let ka = a.kernel();
        let d = (ka.as_matrix() - b.k.as_matrix()).norm() / b.k.norm().max(1.0);
        gap = gap.max(d);
        out.trajectory.push(vec![b.t, d, ka.trace(), b.k.trace()]);
    }
    let same_grid = feat.states.len() == kern.states.len();
    out.check(Assertion::holds("same_snapshot_grid", same_grid));
    out.check(Assertion::at_most("phi_vs_k_max_rel_gap", gap, 1e-4));
    let dt = flow.dt.unwrap_or(1e-3);
    let long = FlowConfig { max_steps: (cfg.terminal_horizon / dt).round() as usize, ..flow };
    let terminal = integrate_kernel_flow(&k0, KernelRhs::MuonMse(cfg.muon), &labels, &cfg.reg, &long)?;
    let report = muon_steady_state_check(&terminal.terminal().k, cfg.c, &cfg.muon)?;
    out.spectrum = eigenvalue_table(&terminal.terminal().k)?;
    out.metric("saturation", report.saturation);
    out.check(Assertion::at_most("terminal_rank_minus_c", report.rank as f64 - cfg.c as f64, 0.0));
    out.check(Assertion::at_most("saturation_max_rel_dev", report.max_rel_deviation, 1e-3));
    Ok(out)
}

fn run_coupled(cfg: &ExperimentConfig) -> Result<Outcome> {
    let labels = cfg.label_set()?;
    let phi0 = cfg.features(1);
    let w0 = random_gaussian(cfg.c, cfg.width, &mut rng_from_seed(cfg.seed.wrapping_add(2))) / (cfg.width as f64).sqrt();
    let run = coupled_flow(&phi0, &w0, &labels, &cfg.reg, 1.0, 1.0, &cfg.flow)?;
    let mut out = Outcome { trajectory: Table::from_steps(&run.steps), ..Outcome::default() };
    let k = run.terminal().kernel();
    out.spectrum = eigenvalue_table(&k)?;
    let rank = effective_rank(&k, RANK_THRESHOLD);
    out.metric("terminal_rank", rank as f64);
    out.metric("terminal_objective", run.terminal().objective);
    out.check(Assertion::at_most("terminal_rank_minus_c", rank as f64 - cfg.c as f64, 0.0));
    Ok(out)
}

fn run_noise(cfg: &ExperimentConfig) -> Result<Outcome> {
    let labels = cfg.label_set()?;
    let phi = cfg.features(1);
    let w = ridge_readout(&phi, labels.y(), cfg.reg.lambda)?;
    let model = NoiseModel::new(phi, w, labels, cfg.reg.lambda)?;
    let samples = sample_noise(&model, cfg.batch_size, cfg.num_samples, cfg.seed)?;
    let stats = noise_covariance_stats(&samples, DEFAULT_RANK_TOL)?;
    let mut out = Outcome { trajectory: Table::new(&["sample", "kernel_rank", "feature_rank", "support_residual"]), ..Outcome::default() };
    let mut violations = 0usize;
    let mut feature_violations = 0usize;
    let mut worst_support = 0.0f64;
    for (i, s) in samples.iter().enumerate() {
        let r = crate::linalg::symmetric_rank(&s.zeta_k, DEFAULT_RANK_TOL);
        let fr = crate::linalg::numerical_rank(&s.zeta_phi, DEFAULT_RANK_TOL);
        let sup = model.support_residual(s)?;
        violations += usize::from(r > 2 * cfg.c);
        feature_violations += usize::from(fr > cfg.c);
        worst_support = worst_support.max(sup);
        out.trajectory.push(vec![i as f64, r as f64, fr as f64, sup]);
    }
    out.spectrum = Table::new(&["index", "singular_value"]);
    for (i, v) in stats.singular_values.iter().enumerate() {
        out.spectrum.push(vec![i as f64, *v]);
    }
    out.metric("covariance_rank", stats.covariance_rank as f64);
    out.metric("reference_2C", stats.reference_2c as f64);
    out.metric("per_realization_max_rank", stats.per_realization_max_rank as f64);
    out.check(Assertion::at_most("kernel_rank_violations", violations as f64, 0.0));
    out.check(Assertion::at_most("feature_rank_violations", feature_violations as f64, 0.0));
    out.check(Assertion::at_most("support_residual", worst_support, 1e-8));

    let small_cfg = ExperimentConfig { n: cfg.exhaustive_n, labels: LabelModel::Gaussian, width: cfg.exhaustive_n + 2, ..cfg.clone() };
    let small_labels = small_cfg.label_set()?;
    let small_phi = small_cfg.features(3);
    let small_w = ridge_readout(&small_phi, small_labels.y(), cfg.reg.lambda)?;
    let small = NoiseModel::new(small_phi, small_w, small_labels, cfg.reg.lambda)?;
    let mean = exhaustive_mean_noise(&small, cfg.exhaustive_batch)?;
    out.check(Assertion::at_most("exhaustive_mean_max_abs", mean.amax(), 1e-12));

    let mut rng = rng_from_seed(cfg.seed.wrapping_add(7));
    let random_diag: Vec<f64> = (0..cfg.n).map(|_| rng.random_range(0.5..2.0)).collect();
    let mut kappa_diag: Vec<f64> = log_grid(1.0, 10.0, cfg.n);
    kappa_diag.reverse();
    for (name, diag) in [("random_pd", random_diag), ("kappa_100", kappa_diag)] {
        let rep = preconditioned_noise_check(&SymmetricMatrix::from_diagonal(&diag), &samples, DEFAULT_RANK_TOL)?;
        out.check(Assertion::holds(&format!("congruence_preserves_rank_{name}"), rep.preserved && rep.bound_holds));
    }
    Ok(out)
}

fn run_risk(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut out = Outcome { trajectory: Table::new(&["draw", "static_exponent", "flow_total", "static_total", "flow_neff1", "static_neff1"]), ..Outcome::default() };
    let l = cfg.reg.lambda;
    let n = cfg.sample_count;
    let collapse = risk_decomposition(&PopulationSpectrum::new(vec![0.0; 3], vec![1.0, -2.0, 0.5], cfg.sigma_eps2, n, l)?)?;
    out.check(Assertion::at_most("collapse_bias_gap", (collapse.bias - 5.25).abs(), 1e-12));
    out.check(Assertion::at_most("collapse_variance", collapse.variance, 0.0));
    let interp = risk_decomposition(&PopulationSpectrum::new(vec![1e12; 4], vec![1.0; 4], cfg.sigma_eps2, n, l)?)?;
    out.check(Assertion::at_most("interpolation_bias", interp.bias, 1e-20));
    out.check(Assertion::at_most("interpolation_variance_gap", (interp.variance - cfg.sigma_eps2 * 4.0 / n).abs(), 1e-9));
    let single = risk_decomposition(&PopulationSpectrum::new(vec![l], vec![1.0], cfg.sigma_eps2, n, l)?)?;
    out.check(Assertion::at_most("single_mode_bias_gap", (single.bias - 0.25).abs(), 1e-15));
    out.check(Assertion::at_most("single_mode_variance_gap", (single.variance - cfg.sigma_eps2 / (4.0 * n)).abs(), 1e-15));

    let tau = cfg.reg.tau();
    let mut rows: Vec<RiskRow> = Vec::new();
    let mut worse = 0usize;
    for d in 0..cfg.draws {
        let mut rng = rng_from_seed(cfg.seed.wrapping_add(d as u64));
        let mut sigma = vec![0.0; cfg.modes];
        let mut a = vec![0.0; cfg.modes];
        for i in 0..cfg.c {
            while n * a[i] * a[i] <= 2.0 * tau {
                a[i] = rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
            sigma[i] = n * a[i] * a[i];
        }
        let nu = rng.random_range(cfg.static_exponent_range.0..cfg.static_exponent_range.1);
        let cmp = flow_vs_static_risk(&a, &sigma, nu, &cfg.reg, cfg.sigma_eps2, n)?;
        worse += usize::from(!cmp.flow_not_worse());
        out.trajectory.push(vec![d as f64, nu, cmp.flow.total, cmp.static_row.total, cmp.flow.neff1, cmp.static_row.neff1]);
        for r in cmp.rows() {
            let mut r = r.clone();
            r.spectrum = format!("{}_{d}", r.spectrum);
            rows.push(r);
        }
    }
    out.metric("risk_rows", rows.len() as f64);
    out.check(Assertion::at_most("draws_where_flow_is_worse", worse as f64, 0.0));
    out.spectrum = Table::new(&["draw", "flow_total", "static_total"]);
    for r in &out.trajectory.rows {
        out.spectrum.push(vec![r[0], r[2], r[3]]);
    }
    out.risk_rows = rows;
    Ok(out)
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn run_adiabatic(cfg: &ExperimentConfig) -> Result<Outcome> {
    let labels = cfg.label_set()?;
    let phi0 = cfg.features(1);
    let w0 = ridge_readout(&phi0, labels.y(), cfg.reg.lambda)?;
    let horizon = cfg.horizon.unwrap_or(1.0);
    let points = adiabatic_error_sweep(&phi0, &w0, &labels, &cfg.reg, &cfg.epsilons, horizon)?;
    let mut out = Outcome { trajectory: Table::new(&["epsilon", "sup_error"]), ..Outcome::default() };
    for p in &points {
        out.trajectory.push(vec![p.epsilon, p.error]);
    }
    out.spectrum = eigenvalue_table(&SymmetricMatrix::symmetrize(phi0.transpose() * &phi0))?;
    let diverged = points.iter().any(|p| p.diverged);
    out.check(Assertion::holds("no_divergence", !diverged));
    let eps: Vec<f64> = points.iter().map(|p| p.epsilon).collect();
    let err: Vec<f64> = points.iter().map(|p| p.error).collect();
    let slope = log_log_slope(&eps, &err);
    out.metric("slope", slope);
    out.check(Assertion::at_least("slope_lower", slope, 0.8));
    out.check(Assertion::at_most("slope_upper", slope, 1.2));
    Ok(out)
}

/// Running median of width 3 (end points kept).
pub fn median3(v: &[f64]) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            if i == 0 || i + 1 == v.len() {
                v[i]
            } else {
                let mut w = [v[i - 1], v[i], v[i + 1]];
                w.sort_by(f64::total_cmp);
                w[1]
            }
        })
        .collect()
}

fn run_phase_sweep(cfg: &ExperimentConfig) -> Result<Outcome> {
    let labels = cfg.label_set()?;
    let (_, label_eig) = label_gram(&labels)?;
    let k0 = default_init(cfg.n, cfg.seed);
    let flow = cfg.flow_for_horizon();
    let mut out = Outcome { trajectory: Table::new(&["mu", "rank", "predicted_rank"]), ..Outcome::default() };
    let mut ranks = Vec::with_capacity(cfg.mu_grid.len());
    for &mu in &cfg.mu_grid {
        let reg = RegularizationConfig::new(cfg.reg.lambda, mu)?;
        let run = integrate_kernel_flow(&k0, KernelRhs::Mse, &labels, &reg, &flow)?;
        let rank = effective_rank(&run.terminal().k, RANK_THRESHOLD);
        let predicted = water_filling_spectrum(&label_eig.eigenvalues, &reg)?.iter().filter(|&&k| k > 0.0).count();
        out.trajectory.push(vec![mu, rank as f64, predicted as f64]);
        ranks.push(rank as f64);
    }
    out.spectrum = Table::new(&["index", "label_eigenvalue"]);
    for (i, v) in label_eig.eigenvalues.iter().enumerate() {
        out.spectrum.push(vec![i as f64, *v]);
    }
    let c = cfg.c as f64;
    let smooth = median3(&ranks);
    let rises = smooth.windows(2).filter(|w| w[1] > w[0]).count();
    out.check(Assertion::at_least("rank_at_smallest_mu", ranks[0], 5.0 * c));
    out.check(Assertion::at_most("rank_at_largest_mu", *ranks.last().expect("nonempty grid"), c));
    out.check(Assertion::at_most("smoothed_rank_increases", rises as f64, 0.0));
    Ok(out)
}

fn run_align_track(cfg: &ExperimentConfig) -> Result<Outcome> {
    let labels = cfg.label_set()?;
    let (m, m_eig) = label_gram(&labels)?;
    let c_rank = m_eig.count_above(RANK_THRESHOLD);
    let k0 = random_psd(cfg.n, cfg.n, &mut rng_from_seed(cfg.seed.wrapping_add(1)));
    let flow = cfg.flow_for_horizon();
    let run = integrate_kernel_flow(&k0, KernelRhs::Mse, &labels, &cfg.reg, &flow)?;
    let mut out = Outcome { trajectory: Table::new(&["t", "commutator", "overlap", "rank"]), ..Outcome::default() };
    let mut last = (f64::NAN, f64::NAN);
    for s in &run.states {
        let eig = sym_eig(&s.k)?;
        let rank = eig.count_above(RANK_THRESHOLD);
        let r = rank.min(c_rank).max(1);
        let overlap = subspace_overlap(&eig.top_vectors(r), &m_eig.top_vectors(r));
        let comm = commutator_norm(&s.k, &m);
        out.trajectory.push(vec![s.t, comm, overlap, rank as f64]);
        last = (comm, overlap);
    }
    out.spectrum = eigenvalue_table(&run.terminal().k)?;
    out.check(Assertion::at_most("terminal_commutator", last.0, 1e-4));
    out.check(Assertion::at_least("terminal_overlap", last.1, 0.99));
    Ok(out)
}

fn dispatch(cfg: &ExperimentConfig) -> Result<Outcome> {
    match cfg.kind {
        ExperimentKind::Supervised => run_supervised(cfg, false),
        ExperimentKind::TruncationCurve => run_supervised(cfg, true),
        ExperimentKind::Ssl => run_ssl(cfg),
        ExperimentKind::Semi => run_semi(cfg),
        ExperimentKind::Muon => run_muon(cfg),
        ExperimentKind::Coupled => run_coupled(cfg),
        ExperimentKind::Noise => run_noise(cfg),
        ExperimentKind::Risk => run_risk(cfg),
        ExperimentKind::Adiabatic => run_adiabatic(cfg),
        ExperimentKind::PhaseSweep => run_phase_sweep(cfg),
        ExperimentKind::AlignTrack => run_align_track(cfg),
    }
}

fn write_artifacts(cfg: &ExperimentConfig, out: &Outcome) -> Result<Vec<String>> {
    let prefix = cfg.prefix();
    if let Some(parent) = prefix.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let with_suffix = |s: &str| {
        let mut p = prefix.clone().into_os_string();
        p.push(s);
        PathBuf::from(p)
    };
    let traj = with_suffix("_trajectory.csv");
    let spec = with_suffix("_spectrum.csv");
    out.trajectory.write_csv(&traj)?;
    if cfg.kind == ExperimentKind::Risk {
        write_risk_csv(&spec, &out.risk_rows)?;
    } else {
        out.spectrum.write_csv(&spec)?;
    }
    Ok(vec![traj.display().to_string(), spec.display().to_string(), with_suffix("_report.json").display().to_string()])
}

/// Runs one experiment and writes its artifacts. Failures inside the run are reported with
/// `passed = false`; only a failure to write the report itself is returned as an error.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    let mut report = ExperimentReport {
        config: cfg.clone(),
        seed: cfg.seed,
        assertions: vec![],
        metrics: BTreeMap::new(),
        artifacts: vec![],
        wall_clock_seconds: 0.0,
        error: None,
        passed: false,
    };
    let result = cfg.validate().and_then(|_| dispatch(cfg)).and_then(|out| {
        let artifacts = write_artifacts(cfg, &out)?;
        Ok((out, artifacts))
    });
    match result {
        Ok((out, artifacts)) => {
            report.passed = out.assertions.iter().all(|a| a.passed);
            report.assertions = out.assertions;
            report.metrics = out.metrics;
            report.artifacts = artifacts;
        }
        Err(e) => report.error = Some(e.to_string()),
    }
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    if !report.artifacts.is_empty() {
        let path = report.artifacts.last().expect("report path").clone();
        std::fs::write(path, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(report)
}

/// Aggregate of a suite run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub reports: Vec<ExperimentReport>,
    pub passed: bool,
    pub failed: Vec<String>,
}

/// Runs every config (in parallel); reports keep manifest order and failures never abort
/// the suite.
pub fn run_suite(manifest: &[ExperimentConfig]) -> SuiteReport {
    let reports: Vec<ExperimentReport> = manifest
        .par_iter()
        .map(|cfg| {
            run_experiment(cfg).unwrap_or_else(|e| ExperimentReport {
                config: cfg.clone(),
                seed: cfg.seed,
                assertions: vec![],
                metrics: BTreeMap::new(),
                artifacts: vec![],
                wall_clock_seconds: 0.0,
                error: Some(e.to_string()),
                passed: false,
            })
        })
        .collect();
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} (seed {})", r.config.kind, r.seed))
        .collect();
    SuiteReport { passed: failed.is_empty(), failed, reports }
}

/// Reads a JSON config document.
pub fn load_config_value(path: impl AsRef<Path>) -> Result<Value> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Runs and returns only the kernel run; used by callers that need trajectories in memory.
pub fn supervised_run(cfg: &ExperimentConfig) -> Result<FlowRun<crate::supervised::SupervisedFlowState>> {
    let labels = cfg.label_set()?;
    integrate_kernel_flow(&default_init(cfg.n, cfg.seed), cfg.rhs, &labels, &cfg.reg, &cfg.flow)
}

/// Labels that `cfg` would synthesize.
pub fn labels_for(cfg: &ExperimentConfig) -> Result<LabelSet> {
    cfg.label_set()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_round_trips() {
        for k in ExperimentKind::ALL {
            assert_eq!(k.name().parse::<ExperimentKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
        assert!("bogus".parse::<ExperimentKind>().is_err());
    }

    #[test]
    fn overrides_follow_precedence() {
        let file = serde_json::json!({"n": 20, "reg": {"mu": 0.3}});
        let cfg = ExperimentConfig::resolve(
            ExperimentKind::Supervised,
            Some(&file),
            &[("reg.mu".into(), "0.4".into()), ("seed".into(), "9".into())],
        )
        .unwrap();
        assert_eq!(cfg.n, 20);
        assert_eq!(cfg.reg.mu, 0.4);
        assert_eq!(cfg.reg.lambda, 1.0);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let err = ExperimentConfig::resolve(ExperimentKind::Supervised, None, &[("reg.lambda".into(), "-1".into())]);
        assert!(err.is_err());
        let err = ExperimentConfig::resolve(ExperimentKind::Supervised, None, &[("nonsense".into(), "1".into())]);
        assert!(err.is_err());
    }

    #[test]
    fn median_and_slope() {
        assert_eq!(median3(&[5.0, 1.0, 4.0, 2.0]), vec![5.0, 4.0, 2.0, 2.0]);
        let x = [1e-1, 1e-2, 1e-3];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        assert!((log_log_slope(&x, &y) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_suite_passes() {
        let s = run_suite(&[]);
        assert!(s.passed && s.reports.is_empty());
    }

    #[test]
    fn supervised_run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("sup").display().to_string();
        let cfg = ExperimentConfig { n: 8, c: 2, out: Some(prefix), ..ExperimentConfig::preset(ExperimentKind::Supervised) };
        let report = run_experiment(&cfg).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.artifacts.len(), 3);
        let text = std::fs::read_to_string(&report.artifacts[0]).unwrap();
        assert!(text.starts_with("t,value,trace,rhs_norm\n"));
    }

    #[test]
    fn duplicated_configs_give_identical_results() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |name: &str| ExperimentConfig {
            n: 6,
            c: 2,
            out: Some(dir.path().join(name).display().to_string()),
            ..ExperimentConfig::preset(ExperimentKind::Supervised)
        };
        let s = run_suite(&[mk("a"), mk("b")]);
        assert!(s.passed);
        let a = std::fs::read(dir.path().join("a_trajectory.csv")).unwrap();
        let b = std::fs::read(dir.path().join("b_trajectory.csv")).unwrap();
        assert_eq!(a, b);
        assert_eq!(s.reports[0].metrics, s.reports[1].metrics);
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(1e-3, 10.0, 5);
        assert!((g[0] - 1e-3).abs() < 1e-15 && (g[4] - 10.0).abs() < 1e-12);
    }
}

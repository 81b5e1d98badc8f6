//! Regression models for effective buffer size and expected CPU usage.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const RHO_FLOOR: f64 = 1e-3;
const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("need at least {needed} samples to fit {basis}, got {got}")]
    InsufficientSamples { basis: String, needed: usize, got: usize },
    #[error("design matrix for {basis} is rank deficient: {} is collinear with earlier columns", .columns.join(", "))]
    RankDeficient { basis: String, columns: Vec<String> },
    #[error("non-finite value in training data for {basis}")]
    NonFinite { basis: String },
}

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("cannot read model file {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("cannot write model file {path}: {source}")]
    Write { path: String, source: std::io::Error },
    #[error("model file {path} is invalid: {message}")]
    Parse { path: String, message: String },
    #[error("unknown preset `{0}` (known: table1g-40, table1g-50, table1g-55)")]
    UnknownPreset(String),
}

/// Transform applied to ρ or d in the buffer model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhiKind {
    Linear,
    Quadratic,
    Inverse,
}

impl PhiKind {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            PhiKind::Linear => x,
            PhiKind::Quadratic => x * x,
            PhiKind::Inverse => 1.0 / x.max(RHO_FLOOR),
        }
    }

    fn name(self) -> &'static str {
        match self {
            PhiKind::Linear => "linear",
            PhiKind::Quadratic => "quadratic",
            PhiKind::Inverse => "inverse",
        }
    }
}

/// `β_e = max(0, K·φ1(ρ) + R·φ2(d) + intercept)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BufferModel {
    pub k: f64,
    pub r: f64,
    pub phi1: PhiKind,
    pub phi2: PhiKind,
    #[serde(default)]
    pub intercept: f64,
}

impl Default for BufferModel {
    fn default() -> Self {
        Self { k: 0.597, r: 1.48, phi1: PhiKind::Linear, phi2: PhiKind::Quadratic, intercept: 0.0 }
    }
}

impl BufferModel {
    pub fn predict(&self, rho: f64, d: f64) -> f64 {
        predict_buffer(rho, d, self)
    }

    fn basis_name(&self) -> String {
        format!("K*{}(rho) + R*{}(d)", self.phi1.name(), self.phi2.name())
    }
}

pub fn predict_buffer(rho: f64, d: f64, m: &BufferModel) -> f64 {
    (m.k * m.phi1.apply(rho) + m.r * m.phi2.apply(d) + m.intercept).max(0.0)
}

/// Transform applied to one CPU-model regressor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Term {
    Linear,
    Square,
    Log,
}

impl Term {
    /// Inputs are floored at 1 before the log.
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Term::Linear => x,
            Term::Square => x * x,
            Term::Log => x.max(1.0).ln(),
        }
    }

    fn render(self, var: &str) -> String {
        match self {
            Term::Linear => var.to_string(),
            Term::Square => format!("{var}^2"),
            Term::Log => format!("log({var})"),
        }
    }
}

/// Functional form `A·g(μ_prev) + B·h(β)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpuBasis {
    pub prev: Term,
    pub load: Term,
}

impl CpuBasis {
    pub const fn new(prev: Term, load: Term) -> Self {
        Self { prev, load }
    }

    fn columns(&self) -> [String; 3] {
        [self.prev.render("mu_prev"), self.load.render("beta"), "intercept".into()]
    }
}

impl Default for CpuBasis {
    fn default() -> Self {
        Self::new(Term::Linear, Term::Log)
    }
}

impl fmt::Display for CpuBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "A*{} + B*{}", self.prev.render("mu_prev"), self.load.render("beta"))
    }
}

/// The six candidate forms, labelled (a) to (f). Form (e) repeats (a).
pub const CANDIDATE_BASES: [(&str, CpuBasis); 6] = [
    ("a", CpuBasis::new(Term::Linear, Term::Log)),
    ("b", CpuBasis::new(Term::Linear, Term::Square)),
    ("c", CpuBasis::new(Term::Linear, Term::Linear)),
    ("d", CpuBasis::new(Term::Log, Term::Log)),
    ("e", CpuBasis::new(Term::Linear, Term::Log)),
    ("f", CpuBasis::new(Term::Square, Term::Log)),
];

/// `μ_exp = clamp(A·g(μ_prev) + B·h(β) + c, 0, 100)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpuModel {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    #[serde(flatten)]
    pub basis: CpuBasis,
}

impl Default for CpuModel {
    fn default() -> Self {
        cpu_preset("table1g-50").expect("built-in preset")
    }
}

impl CpuModel {
    pub fn predict(&self, beta: f64, mu_prev: f64) -> f64 {
        predict_cpu(beta, mu_prev, self)
    }

    /// Largest β whose unclamped prediction stays below `target`.
    ///
    /// Returns `None` when even β = 1 reaches the target, and `f64::INFINITY`
    /// when load has no positive effect.
    pub fn max_load_below(&self, target: f64, mu_prev: f64) -> Option<f64> {
        let base = self.a * self.basis.prev.apply(mu_prev) + self.c;
        let at_one = base + self.b * self.basis.load.apply(1.0);
        if at_one >= target {
            return None;
        }
        if self.b <= 0.0 {
            return Some(f64::INFINITY);
        }
        let h = (target - base) / self.b;
        let beta = match self.basis.load {
            Term::Linear => h,
            Term::Square => h.max(0.0).sqrt(),
            Term::Log => h.min(700.0).exp(),
        };
        Some(beta.max(1.0))
    }
}

/// β below 1 is treated as 1.
pub fn predict_cpu(beta: f64, mu_prev: f64, m: &CpuModel) -> f64 {
    let beta = beta.max(1.0);
    let raw = m.a * m.basis.prev.apply(mu_prev) + m.b * m.basis.load.apply(beta) + m.c;
    if raw.is_nan() {
        return 100.0;
    }
    raw.clamp(0.0, 100.0)
}

/// Coefficient triplets per CPU bound, all with basis (μ_prev, log β).
pub fn cpu_preset(name: &str) -> Result<CpuModel, ModelFileError> {
    let (a, b, c) = match name {
        "table1g-40" => (0.009, 0.001, 0.541),
        "table1g-50" => (0.008, 0.0024, 5.29),
        "table1g-55" => (0.09, 0.003, 1.96),
        other => return Err(ModelFileError::UnknownPreset(other.to_string())),
    };
    Ok(CpuModel { a, b, c, basis: CpuBasis::default() })
}

pub const PRESET_NAMES: [&str; 3] = ["table1g-40", "table1g-50", "table1g-55"];

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub basis: String,
    pub coefficients: Vec<f64>,
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    pub n_samples: usize,
}

impl FitReport {
    fn from_residuals(basis: String, coefficients: Vec<f64>, residuals: &[f64]) -> Self {
        let n = residuals.len() as f64;
        let mae = residuals.iter().map(|r| r.abs()).sum::<f64>() / n;
        let mse = residuals.iter().map(|r| r * r).sum::<f64>() / n;
        Self { basis, coefficients, mae, mse, rmse: mse.sqrt(), n_samples: residuals.len() }
    }
}

/// Ordinary least squares of `y` on the given columns plus an intercept.
///
/// Returns one coefficient per column followed by the intercept.
pub fn ols(basis: &str, names: &[String], columns: &[Vec<f64>], y: &[f64]) -> Result<(Vec<f64>, FitReport), FitError> {
    let n = y.len();
    let p = columns.len() + 1;
    if n < 3 * p {
        return Err(FitError::InsufficientSamples { basis: basis.to_string(), needed: 3 * p, got: n });
    }
    if y.iter().chain(columns.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(FitError::NonFinite { basis: basis.to_string() });
    }
    let mut x = DMatrix::<f64>::from_fn(n, p, |i, j| if j < columns.len() { columns[j][i] } else { 1.0 });
    // Unit-norm columns so the rank test does not depend on feature scale.
    let mut scale = vec![1.0; p];
    for (j, s) in scale.iter_mut().enumerate() {
        let norm = x.column(j).norm();
        if norm > 0.0 {
            *s = norm;
            x.column_mut(j).scale_mut(1.0 / norm);
        }
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let collinear: Vec<String> = (0..p)
        .filter(|&j| r[(j, j)].abs() < RANK_TOL)
        .map(|j| names.get(j).cloned().unwrap_or_else(|| "intercept".into()))
        .collect();
    if !collinear.is_empty() {
        return Err(FitError::RankDeficient { basis: basis.to_string(), columns: collinear });
    }
    let yv = DVector::from_column_slice(y);
    let qty = qr.q().transpose() * &yv;
    let sol = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| FitError::RankDeficient { basis: basis.to_string(), columns: names.to_vec() })?;
    let coef: Vec<f64> = sol.iter().zip(&scale).map(|(b, s)| b / s).collect();
    let residuals: Vec<f64> = (0..n)
        .map(|i| {
            let pred: f64 = (0..columns.len()).map(|j| coef[j] * columns[j][i]).sum::<f64>() + coef[p - 1];
            y[i] - pred
        })
        .collect();
    let report = FitReport::from_residuals(basis.to_string(), coef.clone(), &residuals);
    Ok((coef, report))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BufferSample {
    pub rho: f64,
    pub d: f64,
    pub beta_e: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpuSample {
    pub mu_prev: f64,
    pub beta: f64,
    pub mu: f64,
}

pub fn fit_buffer_model(
    samples: &[BufferSample],
    phi1: PhiKind,
    phi2: PhiKind,
) -> Result<(BufferModel, FitReport), FitError> {
    let probe = BufferModel { k: 0.0, r: 0.0, phi1, phi2, intercept: 0.0 };
    let names = [format!("{}(rho)", phi1.name()), format!("{}(d)", phi2.name())];
    let cols =
        vec![samples.iter().map(|s| phi1.apply(s.rho)).collect(), samples.iter().map(|s| phi2.apply(s.d)).collect()];
    let y: Vec<f64> = samples.iter().map(|s| s.beta_e).collect();
    let (coef, report) = ols(&probe.basis_name(), &names, &cols, &y)?;
    Ok((BufferModel { k: coef[0], r: coef[1], intercept: coef[2], ..probe }, report))
}

pub fn fit_cpu_model(samples: &[CpuSample], basis: CpuBasis) -> Result<(CpuModel, FitReport), FitError> {
    let cols = vec![
        samples.iter().map(|s| basis.prev.apply(s.mu_prev)).collect(),
        samples.iter().map(|s| basis.load.apply(s.beta.max(1.0))).collect(),
    ];
    let y: Vec<f64> = samples.iter().map(|s| s.mu).collect();
    let (coef, report) = ols(&basis.to_string(), &basis.columns(), &cols, &y)?;
    Ok((CpuModel { a: coef[0], b: coef[1], c: coef[2], basis }, report))
}

/// Like [`fit_cpu_model`], but drops columns that make the design singular
/// and pins their coefficients to zero.
pub fn fit_cpu_model_reduced(samples: &[CpuSample], basis: CpuBasis) -> Result<(CpuModel, FitReport), FitError> {
    match fit_cpu_model(samples, basis) {
        Err(FitError::RankDeficient { .. }) => {}
        other => return other,
    }
    let feats: [Vec<f64>; 2] = [
        samples.iter().map(|s| basis.prev.apply(s.mu_prev)).collect(),
        samples.iter().map(|s| basis.load.apply(s.beta.max(1.0))).collect(),
    ];
    let names = basis.columns();
    let y: Vec<f64> = samples.iter().map(|s| s.mu).collect();
    // Try keeping the load term first, then the previous-CPU term, then neither.
    for keep in [vec![1usize], vec![0], vec![]] {
        let cols: Vec<Vec<f64>> = keep.iter().map(|&j| feats[j].clone()).collect();
        let kept: Vec<String> = keep.iter().map(|&j| names[j].clone()).collect();
        if let Ok((coef, report)) = ols(&basis.to_string(), &kept, &cols, &y) {
            let mut full = [0.0; 2];
            for (slot, &j) in keep.iter().enumerate() {
                full[j] = coef[slot];
            }
            let c = *coef.last().expect("intercept");
            let report = FitReport { coefficients: vec![full[0], full[1], c], ..report };
            return Ok((CpuModel { a: full[0], b: full[1], c, basis }, report));
        }
    }
    fit_cpu_model(samples, basis)
}

#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub label: &'static str,
    pub basis: CpuBasis,
    pub outcome: Result<(CpuModel, FitReport), String>,
}

impl SweepEntry {
    pub fn report(&self) -> Option<&FitReport> {
        self.outcome.as_ref().ok().map(|(_, r)| r)
    }
}

/// Fits every candidate form and sorts by MSE, failed fits last.
pub fn candidate_basis_sweep(samples: &[CpuSample]) -> Vec<SweepEntry> {
    sweep_over(samples, &CANDIDATE_BASES)
}

pub fn sweep_over(samples: &[CpuSample], bases: &[(&'static str, CpuBasis)]) -> Vec<SweepEntry> {
    let mut out: Vec<SweepEntry> = bases
        .iter()
        .map(|&(label, basis)| SweepEntry {
            label,
            basis,
            outcome: fit_cpu_model(samples, basis).map_err(|e| e.to_string()),
        })
        .collect();
    out.sort_by(|x, y| {
        let key = |e: &SweepEntry| e.report().map(|r| r.mse).unwrap_or(f64::INFINITY);
        key(x).total_cmp(&key(y))
    });
    out
}

/// Prints the sweep as a MAE/MSE/RMSE table.
pub fn format_sweep(entries: &[SweepEntry]) -> String {
    let mut s = format!(
        "{:<4} {:<26} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12}\n",
        "form", "basis", "A", "B", "intercept", "MAE", "MSE", "RMSE"
    );
    for e in entries {
        match &e.outcome {
            Ok((m, r)) => s.push_str(&format!(
                "({})  {:<26} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>12.6}\n",
                e.label,
                e.basis.to_string(),
                m.a,
                m.b,
                m.c,
                r.mae,
                r.mse,
                r.rmse
            )),
            Err(msg) => s.push_str(&format!("({})  {:<26} failed: {msg}\n", e.label, e.basis.to_string())),
        }
    }
    s
}

/// Both models, as persisted in a TOML model file.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelSet {
    pub buffer: BufferModel,
    pub cpu: CpuModel,
}

impl ModelSet {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelFileError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| ModelFileError::Read { path: path.display().to_string(), source })?;
        toml::from_str(&text)
            .map_err(|e| ModelFileError::Parse { path: path.display().to_string(), message: e.to_string() })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelFileError> {
        let path = path.as_ref();
        let text = toml::to_string(self).expect("model set serializes");
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)
                .map_err(|source| ModelFileError::Write { path: parent.display().to_string(), source })?;
        }
        std::fs::write(path, text).map_err(|source| ModelFileError::Write { path: path.display().to_string(), source })
    }
}

//! Spillover structures `alpha = A gamma` and the estimators built on them.
//!
//! Given the fitted system `(a, B)`, the effect parameters solve the
//! weighted least-squares problem
//!
//! ```text
//! gamma_W = argmin_g | W^{1/2} ((I - B)(Y_t - A g) - a - g_t) |
//!         = (A' M_W A)^{-1} A' (I - B)' W ((I - B) Y_t - a - g_t),
//! M_W = (I - B)' W (I - B),
//! ```
//!
//! which needs `A' M_W A` non-singular (Condition IN).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::PanelData;
use crate::scm::ScmFit;

pub const DEFAULT_CONDITION_THRESHOLD: f64 = 1e8;
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct SpilloverStructure {
    a: DMatrix<f64>,
    labels: Vec<String>,
    warnings: Vec<String>,
}

impl SpilloverStructure {
    pub fn new(a: DMatrix<f64>, labels: Vec<String>) -> Result<Self> {
        let (n, k) = a.shape();
        if k == 0 || k > n {
            return Err(Error::Validation(format!("structure needs 1 <= k <= N, got k = {k}, N = {n}")));
        }
        if labels.len() != k {
            return Err(Error::Validation(format!("{} labels for {k} parameters", labels.len())));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("structure matrix has non-finite entries".into()));
        }
        let sv = a.clone().svd(false, false).singular_values;
        let smax = sv.max();
        if smax == 0.0 || sv.min() <= RANK_TOL * smax {
            return Err(Error::Validation("structure matrix A must have full column rank".into()));
        }
        Ok(Self { a, labels, warnings: Vec::new() })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn n_units(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.a.ncols()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

/// Spillover patterns with 0-based unit indices.
#[derive(Debug, Clone, PartialEq)]
pub enum Pattern {
    /// One effect per treated unit plus one common spillover on `affected`.
    EqualHit { treated: Vec<usize>, affected: Vec<usize> },
    /// Treated unit 0 plus a spillover `b * exp(-d_i)`. `distances` has
    /// length N (entry 0 ignored) or N-1 (units 1..N).
    DistanceDecay { distances: Vec<f64> },
    /// One free effect per treated unit and per affected unit.
    Range { treated: Vec<usize>, affected: Vec<usize> },
    Custom { matrix: DMatrix<f64> },
}

impl Pattern {
    /// Range pattern with unit 0 treated.
    pub fn range(affected: impl IntoIterator<Item = usize>) -> Self {
        Pattern::Range { treated: vec![0], affected: affected.into_iter().collect() }
    }
}

fn check_indices(n: usize, treated: &[usize], affected: &[usize]) -> Result<()> {
    if treated.is_empty() {
        return Err(Error::Validation("at least one treated unit is required".into()));
    }
    let all: Vec<usize> = treated.iter().chain(affected).copied().collect();
    for (k, &i) in all.iter().enumerate() {
        if i >= n {
            return Err(Error::Validation(format!("unit index {} out of range for N = {n}", i + 1)));
        }
        if all[..k].contains(&i) {
            return Err(Error::Validation(format!("duplicate unit index {}", i + 1)));
        }
    }
    Ok(())
}

pub fn build_structure(pattern: &Pattern, n: usize) -> Result<SpilloverStructure> {
    match pattern {
        Pattern::EqualHit { treated, affected } => {
            check_indices(n, treated, affected)?;
            if affected.is_empty() {
                return Err(Error::Validation("equal-hit pattern needs a non-empty affected set".into()));
            }
            let k = treated.len() + 1;
            let mut a = DMatrix::zeros(n, k);
            let mut labels: Vec<String> = Vec::with_capacity(k);
            for (c, &i) in treated.iter().enumerate() {
                a[(i, c)] = 1.0;
                labels.push(format!("effect:{}", i + 1));
            }
            for &i in affected {
                a[(i, k - 1)] = 1.0;
            }
            labels.push("spillover:common".into());
            let mut s = SpilloverStructure::new(a, labels)?;
            if treated.len() + affected.len() == n {
                s.warnings.push(
                    "every control is equally affected; Condition IN cannot hold for this structure".into(),
                );
            }
            Ok(s)
        }
        Pattern::DistanceDecay { distances } => {
            let offset = match distances.len() {
                l if l == n => 1,
                l if l + 1 == n => 0,
                l => {
                    return Err(Error::Validation(format!("distance pattern needs N or N-1 distances, got {l}")));
                }
            };
            if distances.iter().any(|d| !d.is_finite()) {
                return Err(Error::Validation("distances must be finite".into()));
            }
            let mut a = DMatrix::zeros(n, 2);
            a[(0, 0)] = 1.0;
            for i in 1..n {
                a[(i, 1)] = (-distances[i - 1 + offset]).exp();
            }
            SpilloverStructure::new(a, vec!["effect:1".into(), "spillover:decay".into()])
        }
        Pattern::Range { treated, affected } => {
            check_indices(n, treated, affected)?;
            let k = treated.len() + affected.len();
            let mut a = DMatrix::zeros(n, k);
            let mut labels = Vec::with_capacity(k);
            for (c, &i) in treated.iter().enumerate() {
                a[(i, c)] = 1.0;
                labels.push(format!("effect:{}", i + 1));
            }
            for (c, &i) in affected.iter().enumerate() {
                a[(i, treated.len() + c)] = 1.0;
                labels.push(format!("spillover:{}", i + 1));
            }
            SpilloverStructure::new(a, labels)
        }
        Pattern::Custom { matrix } => {
            if matrix.nrows() != n {
                return Err(Error::Validation(format!("custom matrix has {} rows, N = {n}", matrix.nrows())));
            }
            let labels = (1..=matrix.ncols()).map(|c| format!("gamma:{c}")).collect();
            SpilloverStructure::new(matrix.clone(), labels)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureKindName {
    Range,
    Equal,
    Distance,
    Custom,
}

/// Structure file. Unit numbers are 1-based row positions in the panel;
/// `treated` defaults to `[1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureSpec {
    pub kind: StructureKindName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub treated: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affected: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distances: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
}

impl StructureSpec {
    pub fn to_pattern(&self) -> Result<Pattern> {
        let zero_based = |v: &[usize], what: &str| -> Result<Vec<usize>> {
            v.iter()
                .map(|&i| {
                    i.checked_sub(1).ok_or_else(|| Error::Validation(format!("{what} unit numbers start at 1")))
                })
                .collect()
        };
        let treated = zero_based(self.treated.as_deref().unwrap_or(&[1]), "treated")?;
        let affected = || -> Result<Vec<usize>> {
            let a = self
                .affected
                .as_deref()
                .ok_or_else(|| Error::Validation("structure kind needs an `affected` list".into()))?;
            zero_based(a, "affected")
        };
        Ok(match self.kind {
            StructureKindName::Range => Pattern::Range { treated, affected: affected()? },
            StructureKindName::Equal => Pattern::EqualHit { treated, affected: affected()? },
            StructureKindName::Distance => Pattern::DistanceDecay {
                distances: self
                    .distances
                    .clone()
                    .ok_or_else(|| Error::Validation("distance structure needs `distances`".into()))?,
            },
            StructureKindName::Custom => {
                let rows = self
                    .matrix
                    .as_ref()
                    .ok_or_else(|| Error::Validation("custom structure needs `matrix`".into()))?;
                let k = rows.first().map_or(0, Vec::len);
                if rows.iter().any(|r| r.len() != k) {
                    return Err(Error::Validation("custom matrix rows differ in length".into()));
                }
                Pattern::Custom { matrix: DMatrix::from_fn(rows.len(), k, |i, j| rows[i][j]) }
            }
        })
    }

    pub fn build(&self, n: usize) -> Result<SpilloverStructure> {
        build_structure(&self.to_pattern()?, n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvertibilityDiagnostic {
    /// Smallest singular value and condition number of `(I - B) A`.
    pub min_sv_ia: f64,
    pub cond_ia: f64,
    /// Smallest eigenvalue and condition number of `A' M_W A`.
    pub min_sv_amwa: f64,
    pub cond_amwa: f64,
    pub threshold: f64,
    pub passed: bool,
}

fn condition(values: &DVector<f64>) -> (f64, f64) {
    let max = values.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let min = values.min();
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    (min, cond)
}

/// `(I - B)' W`; `None` means identity.
fn weighted_transpose(i_minus_b: &DMatrix<f64>, w: Option<&DMatrix<f64>>) -> DMatrix<f64> {
    match w {
        Some(w) => i_minus_b.tr_mul(w),
        None => i_minus_b.transpose(),
    }
}

/// Condition IN check for structure matrix `a` against `I - B`.
pub fn invertibility(
    a: &DMatrix<f64>,
    i_minus_b: &DMatrix<f64>,
    w: Option<&DMatrix<f64>>,
    threshold: f64,
) -> InvertibilityDiagnostic {
    let ia = i_minus_b * a;
    let (min_sv_ia, cond_ia) = condition(&ia.clone().svd(false, false).singular_values);
    let h = a.transpose() * weighted_transpose(i_minus_b, w) * &ia;
    let h = (&h + h.transpose()) * 0.5;
    let (min_sv_amwa, cond_amwa) = condition(&h.symmetric_eigenvalues());
    let cond_amwa = if cond_amwa.is_finite() { cond_amwa } else { f64::INFINITY };
    InvertibilityDiagnostic { min_sv_ia, cond_ia, min_sv_amwa, cond_amwa, threshold, passed: cond_amwa <= threshold }
}

pub fn check_invertibility(
    structure: &SpilloverStructure,
    fit: &ScmFit,
    w: Option<&DMatrix<f64>>,
    threshold: f64,
) -> InvertibilityDiagnostic {
    invertibility(&structure.a, &fit.i_minus_b(), w, threshold)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Weighting {
    Identity,
    /// Ridge-stabilised inverse residual covariance.
    Efficient,
    Custom(DMatrix<f64>),
}

impl Weighting {
    pub fn label(&self) -> &'static str {
        match self {
            Weighting::Identity => "identity",
            Weighting::Efficient => "efficient",
            Weighting::Custom(_) => "custom",
        }
    }

    /// Materialised `N x N` weight matrix.
    pub fn resolve(&self, fit: &ScmFit) -> Result<DMatrix<f64>> {
        let n = fit.n_units();
        match self {
            Weighting::Identity => Ok(DMatrix::identity(n, n)),
            Weighting::Efficient => efficient_weight(fit),
            Weighting::Custom(w) => {
                if w.shape() != (n, n) {
                    return Err(Error::Validation(format!("weight matrix must be {n}x{n}, got {:?}", w.shape())));
                }
                Ok(w.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectEstimate {
    /// Period column the estimate refers to.
    pub period: usize,
    pub gamma_hat: DVector<f64>,
    pub alpha_hat: DVector<f64>,
    pub weighting: String,
    /// Norm of `A'(I-B)'W[(I-B)(Y_t - A gamma) - a - g_t]`.
    pub foc_residual: f64,
    pub condition_number: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EffectRecord {
    pub period: String,
    pub gamma_hat: Vec<f64>,
    pub gamma_labels: Vec<String>,
    pub alpha_hat: Vec<f64>,
    pub weighting: String,
    pub foc_residual: f64,
    pub condition_number: f64,
}

impl EffectEstimate {
    pub fn to_record(&self, panel: &PanelData, structure: &SpilloverStructure) -> EffectRecord {
        EffectRecord {
            period: panel.period_labels()[self.period].clone(),
            gamma_hat: self.gamma_hat.iter().copied().collect(),
            gamma_labels: structure.labels.clone(),
            alpha_hat: self.alpha_hat.iter().copied().collect(),
            weighting: self.weighting.clone(),
            foc_residual: self.foc_residual,
            condition_number: self.condition_number,
        }
    }
}

/// Effect estimate at period column `t_post` with weighting `weighting`.
pub fn estimate_effects(
    fit: &ScmFit,
    panel: &PanelData,
    structure: &SpilloverStructure,
    weighting: &Weighting,
    t_post: usize,
    threshold: f64,
) -> Result<EffectEstimate> {
    if !panel.is_post(t_post) {
        return Err(Error::Domain(format!(
            "period column {t_post} is not post-treatment (T = {}, T+m = {})",
            panel.pre_periods(),
            panel.n_periods()
        )));
    }
    if structure.n_units() != fit.n_units() {
        return Err(Error::Validation(format!(
            "structure has {} rows, fit has {} units",
            structure.n_units(),
            fit.n_units()
        )));
    }
    let w = weighting.resolve(fit)?;
    let target = panel.column(t_post);
    let mut est = estimate_with(fit, &target, &fit.offset_at(t_post), structure, &w, threshold)?;
    est.period = t_post;
    est.weighting = weighting.label().into();
    Ok(est)
}

/// Core estimator on an explicit outcome vector and offset.
pub fn estimate_with(
    fit: &ScmFit,
    y: &DVector<f64>,
    offset: &DVector<f64>,
    structure: &SpilloverStructure,
    w: &DMatrix<f64>,
    threshold: f64,
) -> Result<EffectEstimate> {
    let a = &structure.a;
    let i_minus_b = fit.i_minus_b();
    let diag = invertibility(a, &i_minus_b, Some(w), threshold);
    if !diag.passed {
        return Err(Error::Singular(Box::new(diag)));
    }
    let k_mat = i_minus_b.tr_mul(w);
    let ia = &i_minus_b * a;
    let lhs = a.tr_mul(&(&k_mat * &ia));
    let lhs = (&lhs + lhs.transpose()) * 0.5;
    let base = &i_minus_b * y - fit.intercepts() - offset;
    let rhs = a.tr_mul(&(&k_mat * &base));
    let gamma = match lhs.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => lhs
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::SingularMatrix("A'M_W A could not be factorised".into()))?,
    };
    let alpha = a * &gamma;
    let resid = &base - &ia * &gamma;
    let foc_residual = a.tr_mul(&(&k_mat * resid)).norm();
    Ok(EffectEstimate {
        period: 0,
        gamma_hat: gamma,
        alpha_hat: alpha,
        weighting: String::new(),
        foc_residual,
        condition_number: diag.cond_amwa,
    })
}

/// `G = A (A' M_W A)^{-1} A' (I - B)' W`, mapping `(I-B)Y - a - g` to `alpha`.
pub fn effect_gain(structure: &SpilloverStructure, fit: &ScmFit, w: Option<&DMatrix<f64>>, threshold: f64) -> Result<DMatrix<f64>> {
    let a = &structure.a;
    let i_minus_b = fit.i_minus_b();
    let diag = invertibility(a, &i_minus_b, w, threshold);
    if !diag.passed {
        return Err(Error::Singular(Box::new(diag)));
    }
    let k_mat = weighted_transpose(&i_minus_b, w);
    let lhs = a.tr_mul(&(&k_mat * &i_minus_b * a));
    let lhs = (&lhs + lhs.transpose()) * 0.5;
    let proj = a.tr_mul(&k_mat);
    let solved = match lhs.clone().cholesky() {
        Some(ch) => ch.solve(&proj),
        None => lhs.lu().solve(&proj).ok_or_else(|| Error::SingularMatrix("A'M_W A".into()))?,
    };
    Ok(a * solved)
}

/// Inverse of the ridge-stabilised residual covariance
/// `T^{-1} sum_t u_t u_t' + lambda I`, `lambda = 1e-8 trace / N`.
pub fn efficient_weight(fit: &ScmFit) -> Result<DMatrix<f64>> {
    efficient_weight_from_residuals(fit.residuals())
}

/// Same as [`efficient_weight`] on an explicit `T x N` residual matrix.
pub fn efficient_weight_from_residuals(residuals: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (t, n) = residuals.shape();
    if t < n + 1 {
        return Err(Error::Validation(format!(
            "efficient weighting needs T >= N + 1 residual periods (T = {t}, N = {n}); use identity weighting"
        )));
    }
    let omega = residuals.tr_mul(residuals) / t as f64;
    let ridge = 1e-8 * omega.trace() / n as f64;
    let eig = (omega + DMatrix::identity(n, n) * ridge).symmetric_eigen();
    let smallest = eig.eigenvalues.min();
    if !(ridge > 0.0) || !(smallest > 0.0) || eig.eigenvalues.max() / smallest > 1e15 {
        return Err(Error::SingularMatrix(
            "residual covariance is singular even after ridge; use identity weighting".into(),
        ));
    }
    let inv = DVector::from_iterator(n, eig.eigenvalues.iter().map(|v| 1.0 / v));
    let w = &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose();
    Ok((&w + w.transpose()) * 0.5)
}

/// One estimate per post period. A single structure is reused for every
/// period; otherwise one structure per post period is required.
pub fn estimate_multi_period(
    fit: &ScmFit,
    panel: &PanelData,
    structures: &[SpilloverStructure],
    weighting: &Weighting,
    threshold: f64,
) -> Result<Vec<EffectEstimate>> {
    let m = panel.post_periods();
    if structures.len() != m && structures.len() != 1 {
        return Err(Error::Validation(format!("{} structures for {m} post periods", structures.len())));
    }
    (0..m)
        .map(|s| {
            let t = panel.post_column(s);
            let structure = &structures[if structures.len() == 1 { 0 } else { s }];
            estimate_effects(fit, panel, structure, weighting, t, threshold)
                .map_err(|e| Error::Period { period: panel.period_labels()[t].clone(), source: Box::new(e) })
        })
        .collect()
}

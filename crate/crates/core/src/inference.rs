//! End-of-sample instability tests.
//!
//! Every test compares a post-treatment statistic `P` with the empirical
//! distribution of the same statistic evaluated on pre-treatment periods
//! (or, for the placebo test, across units) and rejects when `P` exceeds
//! the inf-definition `(1 - tau)` quantile of that sample.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{CovariatePanel, PanelData};
use crate::scm::{fit_all_excluding_from, fit_unit_excluding, ScmFit};
use crate::solver::SolverOptions;
use crate::spillover::{effect_gain, SpilloverStructure};

/// `inf{x : F_T(x) >= 1 - tau}`: the `ceil((1 - tau) T)`-th order statistic.
/// Returns negative infinity when `tau >= 1` (every `x` qualifies).
pub fn empirical_quantile(values: &[f64], tau: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Validation("empirical quantile of an empty sample".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Validation("empirical quantile of a sample containing NaN".into()));
    }
    let t = values.len();
    let rank = order_statistic_rank(t, tau);
    if rank == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[rank - 1])
}

/// Smallest `k` with `k / t >= 1 - tau`, clamped to `[0, t]`.
fn order_statistic_rank(t: usize, tau: f64) -> usize {
    let target = (1.0 - tau) * t as f64;
    // Absorb representation error, e.g. 0.95 * 100 landing just above 95.
    let k = (target - 1e-9).ceil();
    k.clamp(0.0, t as f64) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Andrews,
    Spillover,
    Joint,
    Placebo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestResult {
    pub kind: TestKind,
    pub statistic: f64,
    pub null_sample: Vec<f64>,
    pub critical_value: f64,
    pub p_value: f64,
    pub reject: bool,
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl TestResult {
    fn from_sample(kind: TestKind, statistic: f64, null_sample: Vec<f64>, tau: f64) -> Result<Self> {
        let critical_value = empirical_quantile(&null_sample, tau)?;
        let exceed = null_sample.iter().filter(|&&p| p >= statistic).count();
        Ok(Self {
            kind,
            statistic,
            p_value: exceed as f64 / null_sample.len() as f64,
            reject: statistic > critical_value,
            critical_value,
            null_sample,
            tau,
            period: None,
            warnings: Vec::new(),
        })
    }

    fn at(mut self, panel: &PanelData, t: usize) -> Self {
        self.period = Some(panel.period_labels()[t].clone());
        self
    }
}

/// Settings for leave-one-out refits of the null sample.
#[derive(Debug, Clone, Copy, Default)]
pub struct Refit<'a> {
    pub covariates: Option<&'a CovariatePanel>,
    pub options: SolverOptions,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau <= 1.0 {
        Ok(())
    } else {
        Err(Error::Validation(format!("significance level must be in (0, 1], got {tau}")))
    }
}

fn check_post(panel: &PanelData, t: usize) -> Result<()> {
    if panel.is_post(t) {
        Ok(())
    } else {
        Err(Error::Domain(format!("period column {t} is not post-treatment")))
    }
}

/// Andrews' P-test on the treated unit's synthetic-control residual.
pub fn andrews_p_test(fit: &ScmFit, panel: &PanelData, tau: f64, t_post: usize, loo: Option<Refit<'_>>) -> Result<TestResult> {
    check_tau(tau)?;
    check_post(panel, t_post)?;
    let statistic = fit.residual_at(panel, t_post)[0].powi(2);
    let null_sample: Vec<f64> = match loo {
        None => fit.residuals().column(0).iter().map(|u| u * u).collect(),
        Some(refit) => (0..panel.pre_periods())
            .into_par_iter()
            .map(|t| {
                let start = fit.weights().row(0).transpose();
                let unit = fit_unit_excluding(panel, 0, refit.covariates, t, refit.options, Some(&start))?;
                let y = panel.column(t);
                let mut u = y[0] - unit.intercept - unit.weights.dot(&y);
                if let Some(cov) = refit.covariates.filter(|c| c.dim() > 0) {
                    u -= cov.z(0, t).dot(&unit.covariate_coef);
                }
                Ok(u * u)
            })
            .collect::<Result<_>>()?,
    };
    Ok(TestResult::from_sample(TestKind::Andrews, statistic, null_sample, tau)?.at(panel, t_post))
}

/// [`andrews_p_test`] with precomputed null draws; only the treated unit's
/// residuals are used.
pub fn andrews_p_test_with(fit: &ScmFit, panel: &PanelData, tau: f64, t_post: usize, draws: &NullDraws) -> Result<TestResult> {
    check_tau(tau)?;
    check_post(panel, t_post)?;
    let statistic = fit.residual_at(panel, t_post)[0].powi(2);
    let null_sample = draws.residuals.iter().map(|u| u[0] * u[0]).collect();
    Ok(TestResult::from_sample(TestKind::Andrews, statistic, null_sample, tau)?.at(panel, t_post))
}

#[derive(Debug, Clone, PartialEq)]
pub enum TestWeighting {
    Identity,
    /// `(C G Omega G' C')^{-1}` with `Omega = T^{-1} sum u_t u_t'`.
    Studentized,
    Custom(DMatrix<f64>),
}

/// `H0: C alpha = d` at level `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisSpec {
    c: DMatrix<f64>,
    d: DVector<f64>,
    tau: f64,
    weighting: TestWeighting,
}

impl HypothesisSpec {
    pub fn new(c: DMatrix<f64>, d: DVector<f64>, tau: f64, weighting: TestWeighting) -> Result<Self> {
        let r = c.nrows();
        if r == 0 || c.ncols() == 0 {
            return Err(Error::Validation("hypothesis needs at least one restriction".into()));
        }
        if d.len() != r {
            return Err(Error::Validation(format!("C has {r} rows but d has {} entries", d.len())));
        }
        if c.iter().chain(d.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("hypothesis entries must be finite".into()));
        }
        if r > c.ncols() {
            return Err(Error::Validation("C full row rank required (more rows than units)".into()));
        }
        let sv = c.clone().svd(false, false).singular_values;
        if sv.min() <= 1e-10 * sv.max() {
            return Err(Error::Validation("C full row rank required".into()));
        }
        check_tau(tau)?;
        if let TestWeighting::Custom(w) = &weighting {
            if w.shape() != (r, r) {
                return Err(Error::Validation(format!("test weight matrix must be {r}x{r}")));
            }
        }
        Ok(Self { c, d, tau, weighting })
    }

    /// `alpha_unit = value`.
    pub fn single(n: usize, unit: usize, value: f64, tau: f64) -> Result<Self> {
        let mut c = DMatrix::zeros(1, n);
        if unit >= n {
            return Err(Error::Validation(format!("unit {unit} out of range")));
        }
        c[(0, unit)] = 1.0;
        Self::new(c, DVector::from_element(1, value), tau, TestWeighting::Identity)
    }

    /// No spillovers: every control effect is zero, `C = [0 I_{N-1}]`.
    pub fn no_spillover(n: usize, tau: f64) -> Result<Self> {
        let c = DMatrix::from_fn(n - 1, n, |r, j| if j == r + 1 { 1.0 } else { 0.0 });
        Self::new(c, DVector::zeros(n - 1), tau, TestWeighting::Identity)
    }

    pub fn with_weighting(mut self, weighting: TestWeighting) -> Result<Self> {
        let r = self.c.nrows();
        if let TestWeighting::Custom(w) = &weighting {
            if w.shape() != (r, r) {
                return Err(Error::Validation(format!("test weight matrix must be {r}x{r}")));
            }
        }
        self.weighting = weighting;
        Ok(self)
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn d(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

/// Hypothesis file: `{"C": [[...], ...], "d": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HypothesisFile {
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    pub d: Vec<f64>,
}

impl HypothesisFile {
    pub fn to_spec(&self, n: usize, tau: f64, weighting: TestWeighting) -> Result<HypothesisSpec> {
        if self.c.iter().any(|row| row.len() != n) {
            return Err(Error::Validation(format!("every row of C must have N = {n} entries")));
        }
        let c = DMatrix::from_fn(self.c.len(), n, |i, j| self.c[i][j]);
        HypothesisSpec::new(c, DVector::from_column_slice(&self.d), tau, weighting)
    }
}

/// Everything needed to evaluate `(C G v)' W (C G v)` for one post period.
struct QuadraticForm {
    cg: DMatrix<f64>,
    w: DMatrix<f64>,
    warnings: Vec<String>,
}

impl QuadraticForm {
    fn build(fit: &ScmFit, structure: &SpilloverStructure, hyp: &HypothesisSpec, threshold: f64) -> Result<Self> {
        if hyp.c.ncols() != fit.n_units() {
            return Err(Error::Validation(format!(
                "C has {} columns, panel has {} units",
                hyp.c.ncols(),
                fit.n_units()
            )));
        }
        let gain = effect_gain(structure, fit, None, threshold)?;
        let cg = &hyp.c * gain;
        let r = cg.nrows();
        let mut warnings = Vec::new();
        let w = match &hyp.weighting {
            TestWeighting::Identity => DMatrix::identity(r, r),
            TestWeighting::Custom(w) => w.clone(),
            TestWeighting::Studentized => {
                let res = fit.residuals();
                let omega = res.tr_mul(res) / res.nrows() as f64;
                let s = &cg * omega * cg.transpose();
                let s = (&s + s.transpose()) * 0.5;
                let eig = s.clone().symmetric_eigenvalues();
                match s.cholesky().filter(|_| eig.min() > 1e-12 * eig.max().max(f64::MIN_POSITIVE)) {
                    Some(ch) => ch.inverse(),
                    None => {
                        warnings.push("studentizing matrix is singular; using identity weighting".into());
                        DMatrix::identity(r, r)
                    }
                }
            }
        };
        Ok(Self { cg, w, warnings })
    }

    fn eval_raw(&self, v: &DVector<f64>) -> f64 {
        (v.transpose() * &self.w * v)[(0, 0)]
    }

    /// Quadratic form in `C G u`.
    fn eval(&self, u: &DVector<f64>) -> f64 {
        self.eval_raw(&(&self.cg * u))
    }

    fn statistic(&self, fit: &ScmFit, panel: &PanelData, hyp: &HypothesisSpec, t: usize) -> f64 {
        // C alpha_hat - d, with alpha_hat = G((I - B) Y_t - a - g_t).
        let base = fit.i_minus_b() * panel.column(t) - fit.intercepts() - fit.offset_at(t);
        self.eval_raw(&(&self.cg * base - &hyp.d))
    }
}

/// Pre-treatment draws behind the null samples of the P-tests.
///
/// Plug-in draws are the full-sample residuals `u_t`. Leave-one-out draws
/// refit the system without period `t`, take its residual at `t`, and
/// also rebuild `G` from that refit, so each null statistic is formed the
/// way the post-treatment one is: from estimates that never saw the period.
#[derive(Debug, Clone)]
pub struct NullDraws {
    residuals: Vec<DVector<f64>>,
    refits: Option<Vec<ScmFit>>,
}

impl NullDraws {
    pub fn new(fit: &ScmFit, panel: &PanelData, loo: Option<Refit<'_>>) -> Result<Self> {
        match loo {
            None => Ok(Self { residuals: fit.residuals().row_iter().map(|r| r.transpose()).collect(), refits: None }),
            Some(refit) => {
                let refits: Vec<ScmFit> = (0..panel.pre_periods())
                    .into_par_iter()
                    .map(|t| fit_all_excluding_from(panel, refit.covariates, t, refit.options, fit))
                    .collect::<Result<_>>()?;
                let residuals = refits.iter().enumerate().map(|(t, f)| f.residual_at(panel, t)).collect();
                Ok(Self { residuals, refits: Some(refits) })
            }
        }
    }

    pub fn residuals(&self) -> &[DVector<f64>] {
        &self.residuals
    }

    pub fn is_leave_one_out(&self) -> bool {
        self.refits.is_some()
    }

    fn sample(&self, form: &QuadraticForm, structure: &SpilloverStructure, c: &DMatrix<f64>, threshold: f64) -> Result<Vec<f64>> {
        match &self.refits {
            None => Ok(self.residuals.iter().map(|u| form.eval(u)).collect()),
            Some(refits) => refits
                .iter()
                .zip(&self.residuals)
                .map(|(f, u)| Ok(form.eval_raw(&(c * effect_gain(structure, f, None, threshold)? * u))))
                .collect(),
        }
    }
}

/// Spillover-adjusted P-test of `C alpha = d` at period column `t_post`.
pub fn spillover_p_test(
    fit: &ScmFit,
    panel: &PanelData,
    structure: &SpilloverStructure,
    hyp: &HypothesisSpec,
    t_post: usize,
    loo: Option<Refit<'_>>,
    threshold: f64,
) -> Result<TestResult> {
    check_post(panel, t_post)?;
    let draws = NullDraws::new(fit, panel, loo)?;
    spillover_p_test_with(fit, panel, structure, hyp, t_post, &draws, threshold)
}

/// [`spillover_p_test`] with precomputed null draws, which can be shared
/// across tests on the same fit.
pub fn spillover_p_test_with(
    fit: &ScmFit,
    panel: &PanelData,
    structure: &SpilloverStructure,
    hyp: &HypothesisSpec,
    t_post: usize,
    draws: &NullDraws,
    threshold: f64,
) -> Result<TestResult> {
    check_post(panel, t_post)?;
    let form = QuadraticForm::build(fit, structure, hyp, threshold)?;
    let statistic = form.statistic(fit, panel, hyp, t_post);
    let null_sample = draws.sample(&form, structure, &hyp.c, threshold)?;
    let mut result = TestResult::from_sample(TestKind::Spillover, statistic, null_sample, hyp.tau)?.at(panel, t_post);
    result.warnings = form.warnings;
    Ok(result)
}

/// Joint test over all post periods: the statistic sums the per-period
/// statistics and the null sample sums the same forms over rolling windows
/// of `m` consecutive pre-treatment periods (`T - m + 1` windows).
/// `structures` and `hyps` hold one entry per post period, or a single
/// entry reused for all of them.
pub fn joint_p_test(
    fit: &ScmFit,
    panel: &PanelData,
    structures: &[SpilloverStructure],
    hyps: &[HypothesisSpec],
    loo: Option<Refit<'_>>,
    threshold: f64,
) -> Result<TestResult> {
    let m = panel.post_periods();
    let t_pre = panel.pre_periods();
    if m > t_pre {
        return Err(Error::Validation(format!("joint test needs m <= T (m = {m}, T = {t_pre})")));
    }
    let pick = |len: usize, s: usize| if len == 1 { 0 } else { s };
    if (structures.len() != m && structures.len() != 1) || (hyps.len() != m && hyps.len() != 1) {
        return Err(Error::Validation(format!(
            "joint test needs 1 or {m} structures and hypotheses (got {} and {})",
            structures.len(),
            hyps.len()
        )));
    }
    let taus: Vec<f64> = hyps.iter().map(|h| h.tau).collect();
    if taus.iter().any(|&t| t != taus[0]) {
        return Err(Error::Validation("joint test hypotheses must share one significance level".into()));
    }

    let draws = NullDraws::new(fit, panel, loo)?;
    let mut statistic = 0.0;
    let mut per_period: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut warnings = Vec::new();
    for s in 0..m {
        let hyp = &hyps[pick(hyps.len(), s)];
        let structure = &structures[pick(structures.len(), s)];
        let form = QuadraticForm::build(fit, structure, hyp, threshold)?;
        statistic += form.statistic(fit, panel, hyp, panel.post_column(s));
        per_period.push(draws.sample(&form, structure, &hyp.c, threshold)?);
        warnings.extend(form.warnings);
    }
    let null_sample: Vec<f64> =
        (0..=t_pre - m).map(|t| (0..m).map(|s| per_period[s][t + s]).sum()).collect();
    let mut result = TestResult::from_sample(TestKind::Joint, statistic, null_sample, taus[0])?;
    result.warnings = warnings;
    Ok(result)
}

/// Placebo test across units: the treated unit's squared residual against
/// the squared residuals of all N units at the same period.
pub fn placebo_test(fit: &ScmFit, panel: &PanelData, tau: f64, t_post: usize) -> Result<TestResult> {
    check_tau(tau)?;
    check_post(panel, t_post)?;
    let u = fit.residual_at(panel, t_post);
    let null_sample: Vec<f64> = u.iter().map(|v| v * v).collect();
    Ok(TestResult::from_sample(TestKind::Placebo, null_sample[0], null_sample, tau)?.at(panel, t_post))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

/// Equal-tailed interval `[est - q_{1-tau/2}, est - q_{tau/2}]` from a
/// signed null sample of estimation errors.
pub fn interval_from_sample(estimate: f64, errors: &[f64], level: f64) -> Result<ConfidenceInterval> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Validation(format!("confidence level must be in (0, 1), got {level}")));
    }
    let tau = 1.0 - level;
    let upper_q = empirical_quantile(errors, tau / 2.0)?;
    let lower_q = empirical_quantile(errors, 1.0 - tau / 2.0)?;
    Ok(ConfidenceInterval { estimate, lower: estimate - upper_q, upper: estimate - lower_q, level })
}

/// Interval for the contrast `c' alpha` at period column `t_post`, by
/// inverting the spillover P-test with signed errors `c' G u_t`.
pub fn effect_confidence_interval(
    fit: &ScmFit,
    panel: &PanelData,
    structure: &SpilloverStructure,
    contrast: &DVector<f64>,
    level: f64,
    t_post: usize,
    threshold: f64,
) -> Result<ConfidenceInterval> {
    check_post(panel, t_post)?;
    if contrast.len() != fit.n_units() {
        return Err(Error::Validation(format!("contrast must have N = {} entries", fit.n_units())));
    }
    let gain = effect_gain(structure, fit, None, threshold)?;
    let cg = contrast.transpose() * gain;
    let base = fit.i_minus_b() * panel.column(t_post) - fit.intercepts() - fit.offset_at(t_post);
    let estimate = (&cg * base)[(0, 0)];
    let errors: Vec<f64> = fit.residuals().row_iter().map(|u| (&cg * u.transpose())[(0, 0)]).collect();
    interval_from_sample(estimate, &errors, level)
}

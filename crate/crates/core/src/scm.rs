//! The full system of synthetic controls: every unit is fitted on all the
//! others as if it were the treated one, giving the intercept vector `a`,
//! the weight matrix `B` (row `i` = unit `i`'s donor weights, zero
//! diagonal) and the pre-treatment residuals `u_t = (I - B) Y_t - a - g_t`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{CovariatePanel, PanelData};
use crate::solver::{solve_simplex_ls_from, SimplexLsProblem, SolverOptions};

const COVARIATE_TOL: f64 = 1e-12;
const COVARIATE_MAX_ROUNDS: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct UnitFit {
    pub unit: usize,
    pub intercept: f64,
    /// Length N, zero at `unit`.
    pub weights: DVector<f64>,
    /// Length p; empty without covariates.
    pub covariate_coef: DVector<f64>,
    pub objective: f64,
    pub kkt_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScmFit {
    intercepts: DVector<f64>,
    weights: DMatrix<f64>,
    m_hat: DMatrix<f64>,
    residuals: DMatrix<f64>,
    covariate_coefs: Option<Vec<DVector<f64>>>,
    /// `g_{i,t} = z_{i,t}' pi_i` for every period, `N x (T+m)`.
    offsets: Option<DMatrix<f64>>,
    kkt_gaps: Vec<f64>,
}

impl ScmFit {
    /// System built from known `(a, B)` rather than estimated; residuals are
    /// evaluated on the panel's pre-treatment block.
    pub fn from_parts(intercepts: DVector<f64>, weights: DMatrix<f64>, panel: &PanelData) -> Result<Self> {
        let n = panel.n_units();
        if intercepts.len() != n || weights.shape() != (n, n) {
            return Err(Error::Validation(format!(
                "(a, B) shapes ({}, {:?}) do not match N = {n}",
                intercepts.len(),
                weights.shape()
            )));
        }
        let periods: Vec<usize> = (0..panel.pre_periods()).collect();
        Ok(Self::assemble(intercepts, weights, None, None, vec![0.0; n], panel, &periods))
    }

    fn assemble(
        intercepts: DVector<f64>,
        weights: DMatrix<f64>,
        covariate_coefs: Option<Vec<DVector<f64>>>,
        offsets: Option<DMatrix<f64>>,
        kkt_gaps: Vec<f64>,
        panel: &PanelData,
        periods: &[usize],
    ) -> Self {
        let n = intercepts.len();
        let i_minus_b = DMatrix::identity(n, n) - &weights;
        let m_hat = i_minus_b.tr_mul(&i_minus_b);
        let mut fit = Self {
            intercepts,
            weights,
            m_hat,
            residuals: DMatrix::zeros(periods.len(), n),
            covariate_coefs,
            offsets,
            kkt_gaps,
        };
        for (r, &t) in periods.iter().enumerate() {
            let u = fit.residual_at(panel, t);
            fit.residuals.set_row(r, &u.transpose());
        }
        fit
    }

    pub fn n_units(&self) -> usize {
        self.intercepts.len()
    }

    pub fn intercepts(&self) -> &DVector<f64> {
        &self.intercepts
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    /// `(I - B)'(I - B)`.
    pub fn m_hat(&self) -> &DMatrix<f64> {
        &self.m_hat
    }

    pub fn i_minus_b(&self) -> DMatrix<f64> {
        DMatrix::identity(self.n_units(), self.n_units()) - &self.weights
    }

    /// Pre-treatment residuals, one row per fitted period (`T x N`).
    pub fn residuals(&self) -> &DMatrix<f64> {
        &self.residuals
    }

    pub fn covariate_coefs(&self) -> Option<&[DVector<f64>]> {
        self.covariate_coefs.as_deref()
    }

    pub fn kkt_gaps(&self) -> &[f64] {
        &self.kkt_gaps
    }

    /// Covariate offset vector `g_t` (zero without covariates).
    pub fn offset_at(&self, t: usize) -> DVector<f64> {
        match &self.offsets {
            Some(g) => g.column(t).into_owned(),
            None => DVector::zeros(self.n_units()),
        }
    }

    /// `Y_t - a - B Y_t - g_t` at any period column.
    pub fn residual_at(&self, panel: &PanelData, t: usize) -> DVector<f64> {
        let y = panel.column(t);
        let mut u = &y - &self.weights * &y - &self.intercepts;
        if let Some(g) = &self.offsets {
            u -= g.column(t);
        }
        u
    }

    pub fn to_record(&self) -> ScmFitRecord {
        ScmFitRecord {
            intercepts: self.intercepts.iter().copied().collect(),
            weight_matrix: rows(&self.weights),
            residuals: rows(&self.residuals),
            covariate_coefs: self
                .covariate_coefs
                .as_ref()
                .map(|c| c.iter().map(|v| v.iter().copied().collect()).collect()),
            kkt_gaps: self.kkt_gaps.clone(),
        }
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// JSON form of a fitted system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmFitRecord {
    pub intercepts: Vec<f64>,
    pub weight_matrix: Vec<Vec<f64>>,
    pub residuals: Vec<Vec<f64>>,
    pub covariate_coefs: Option<Vec<Vec<f64>>>,
    pub kkt_gaps: Vec<f64>,
}

/// Fits unit `i` on the pre-treatment periods.
pub fn fit_unit(
    panel: &PanelData,
    i: usize,
    covariates: Option<&CovariatePanel>,
    options: SolverOptions,
) -> Result<UnitFit> {
    let periods: Vec<usize> = (0..panel.pre_periods()).collect();
    fit_unit_on(panel, i, covariates, &periods, options, None)
}

/// Fits unit `i` without pre-treatment period `t` (leave-one-out),
/// optionally warm-started from length-N weights `start`.
pub fn fit_unit_excluding(
    panel: &PanelData,
    i: usize,
    covariates: Option<&CovariatePanel>,
    t: usize,
    options: SolverOptions,
    start: Option<&DVector<f64>>,
) -> Result<UnitFit> {
    let periods: Vec<usize> = (0..panel.pre_periods()).filter(|&s| s != t).collect();
    fit_unit_on(panel, i, covariates, &periods, options, start)
}

fn fit_unit_on(
    panel: &PanelData,
    i: usize,
    covariates: Option<&CovariatePanel>,
    periods: &[usize],
    options: SolverOptions,
    start: Option<&DVector<f64>>,
) -> Result<UnitFit> {
    let n = panel.n_units();
    if i >= n {
        return Err(Error::Domain(format!("unit index {i} out of range for N = {n}")));
    }
    debug_assert!(periods.iter().all(|&t| t < panel.pre_periods()));
    let y = panel.outcomes();
    let donors: Vec<usize> = (0..n).filter(|&j| j != i).collect();
    let target = DVector::from_iterator(periods.len(), periods.iter().map(|&t| y[(i, t)]));
    let donor_matrix = DMatrix::from_fn(periods.len(), donors.len(), |r, c| y[(donors[c], periods[r])]);

    let embed = |w: &DVector<f64>| {
        let mut full = DVector::zeros(n);
        for (c, &j) in donors.iter().enumerate() {
            full[j] = w[c];
        }
        full
    };

    let start = start.map(|w| DVector::from_iterator(donors.len(), donors.iter().map(|&j| w[j])));
    let covariates = covariates.filter(|c| c.dim() > 0);
    let Some(cov) = covariates else {
        let problem = SimplexLsProblem::new(target, donor_matrix)?;
        let sol = solve_simplex_ls_from(&problem, options, start.as_ref())?;
        return Ok(UnitFit {
            unit: i,
            intercept: sol.intercept,
            weights: embed(&sol.weights),
            covariate_coef: DVector::zeros(0),
            objective: sol.objective,
            kkt_gap: sol.kkt_gap,
        });
    };

    // Block-coordinate descent: simplex step for (a, b) given pi, then
    // unconstrained least squares for (a, pi) given b.
    let z = cov.unit_design(i, periods);
    let p = z.ncols();
    let mut design = DMatrix::from_element(periods.len(), p + 1, 1.0);
    design.columns_mut(1, p).copy_from(&z);
    let design_svd = design.clone().svd(true, true);

    let mut pi = DVector::zeros(p);
    let mut intercept = 0.0;
    let mut weights = DVector::zeros(donors.len());
    let mut kkt_gap = 0.0;
    let mut previous = f64::INFINITY;
    let mut objective = f64::INFINITY;
    for _ in 0..COVARIATE_MAX_ROUNDS {
        let adjusted = &target - &z * &pi;
        let warm = if objective.is_finite() { Some(&weights) } else { start.as_ref() };
        let sol = solve_simplex_ls_from(&SimplexLsProblem::new(adjusted, donor_matrix.clone())?, options, warm)?;
        weights = sol.weights;
        kkt_gap = sol.kkt_gap;

        let remainder = &target - &donor_matrix * &weights;
        let coef = design_svd
            .solve(&remainder, 1e-12)
            .map_err(|e| Error::SingularMatrix(format!("covariate design for unit {i}: {e}")))?;
        intercept = coef[0];
        pi = coef.rows(1, p).into_owned();
        let resid = &remainder - &design * &coef;
        objective = resid.norm_squared() / periods.len() as f64;
        if (previous - objective).abs() < COVARIATE_TOL {
            break;
        }
        previous = objective;
    }
    Ok(UnitFit { unit: i, intercept, weights: embed(&weights), covariate_coef: pi, objective, kkt_gap })
}

/// Fits every unit on the pre-treatment block and assembles the system.
pub fn fit_all(panel: &PanelData, covariates: Option<&CovariatePanel>, options: SolverOptions) -> Result<ScmFit> {
    let periods: Vec<usize> = (0..panel.pre_periods()).collect();
    fit_all_on(panel, covariates, &periods, options, None)
}

/// Fits the system without pre-treatment period `t` (leave-one-out).
pub fn fit_all_excluding(
    panel: &PanelData,
    covariates: Option<&CovariatePanel>,
    t: usize,
    options: SolverOptions,
) -> Result<ScmFit> {
    let periods: Vec<usize> = (0..panel.pre_periods()).filter(|&s| s != t).collect();
    fit_all_on(panel, covariates, &periods, options, None)
}

/// [`fit_all_excluding`] warm-started from the weights of `start`.
pub fn fit_all_excluding_from(
    panel: &PanelData,
    covariates: Option<&CovariatePanel>,
    t: usize,
    options: SolverOptions,
    start: &ScmFit,
) -> Result<ScmFit> {
    let periods: Vec<usize> = (0..panel.pre_periods()).filter(|&s| s != t).collect();
    fit_all_on(panel, covariates, &periods, options, Some(start.weights()))
}

fn fit_all_on(
    panel: &PanelData,
    covariates: Option<&CovariatePanel>,
    periods: &[usize],
    options: SolverOptions,
    start: Option<&DMatrix<f64>>,
) -> Result<ScmFit> {
    let n = panel.n_units();
    let fits: Vec<Result<UnitFit>> =
        (0..n)
        .into_par_iter()
        .map(|i| {
            let warm = start.map(|b| b.row(i).transpose());
            fit_unit_on(panel, i, covariates, periods, options, warm.as_ref())
        })
        .collect();
    if let Some(unit) = fits.iter().position(|f| f.is_err()) {
        let succeeded = fits.iter().enumerate().filter(|(_, f)| f.is_ok()).map(|(i, _)| i).collect();
        let source = fits.into_iter().nth(unit).and_then(|f| f.err()).expect("error located above");
        return Err(Error::UnitFit { unit, succeeded, source: Box::new(source) });
    }
    let fits: Vec<UnitFit> = fits.into_iter().map(|f| f.expect("errors handled above")).collect();

    let intercepts = DVector::from_iterator(n, fits.iter().map(|f| f.intercept));
    let mut weights = DMatrix::zeros(n, n);
    for f in &fits {
        weights.set_row(f.unit, &f.weights.transpose());
    }
    let kkt_gaps = fits.iter().map(|f| f.kkt_gap).collect();

    let with_covariates = covariates.filter(|c| c.dim() > 0);
    let (coefs, offsets) = match with_covariates {
        Some(cov) => {
            let offsets = DMatrix::from_fn(n, panel.n_periods(), |i, t| cov.z(i, t).dot(&fits[i].covariate_coef));
            (Some(fits.iter().map(|f| f.covariate_coef.clone()).collect()), Some(offsets))
        }
        None => (None, None),
    };
    Ok(ScmFit::assemble(intercepts, weights, coefs, offsets, kkt_gaps, panel, periods))
}

/// Classic spillover-blind SCM effect for unit 0 at post period column `t`.
pub fn scm_gap(fit: &ScmFit, panel: &PanelData, t: usize) -> Result<f64> {
    if !panel.is_post(t) {
        return Err(Error::Domain(format!(
            "period column {t} is not post-treatment (T = {}, T+m = {})",
            panel.pre_periods(),
            panel.n_periods()
        )));
    }
    Ok(fit.residual_at(panel, t)[0])
}

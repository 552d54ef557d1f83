//! Least squares with a free intercept and simplex-constrained slopes:
//!
//! ```text
//! min_{a, w}  (1/T) * sum_t (y_t - a - x_t'w)^2    s.t.  w >= 0, sum(w) = 1
//! ```
//!
//! The intercept is profiled out by demeaning, which leaves a convex QP in
//! `w` over the unit simplex with Hessian `2G`, `G = X~'X~ / T`. That QP is
//! solved by accelerated projected gradient (exact Euclidean projection,
//! step `1/lambda_max(G)`, adaptive momentum restart). Whenever the iterate
//! settles on a support set, the equality-constrained problem on that
//! support is solved directly and accepted if it certifies optimality.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Target bound on the KKT gap of the returned weights.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 100_000 }
    }
}

/// Target series and donor regressors (`T x q`, the unit's own column removed).
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexLsProblem {
    targets: DVector<f64>,
    regressors: DMatrix<f64>,
}

impl SimplexLsProblem {
    pub fn new(targets: DVector<f64>, regressors: DMatrix<f64>) -> Result<Self> {
        let t = targets.len();
        if t == 0 {
            return Err(Error::Validation("simplex LS needs at least one observation".into()));
        }
        if regressors.ncols() == 0 {
            return Err(Error::Validation("simplex LS needs at least one donor".into()));
        }
        if regressors.nrows() != t {
            return Err(Error::Validation(format!(
                "targets have {t} rows but regressors have {}",
                regressors.nrows()
            )));
        }
        if targets.iter().chain(regressors.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("simplex LS inputs must be finite".into()));
        }
        Ok(Self { targets, regressors })
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }

    pub fn regressors(&self) -> &DMatrix<f64> {
        &self.regressors
    }

    pub fn n_donors(&self) -> usize {
        self.regressors.ncols()
    }

    /// Mean squared residual at `(intercept, weights)`.
    pub fn objective(&self, intercept: f64, weights: &DVector<f64>) -> f64 {
        let fitted = &self.regressors * weights;
        let t = self.targets.len() as f64;
        self.targets.iter().zip(fitted.iter()).map(|(y, f)| (y - intercept - f).powi(2)).sum::<f64>() / t
    }

    fn demeaned(&self) -> Demeaned {
        let t = self.targets.len() as f64;
        let y_mean = self.targets.mean();
        let x_means = DVector::from_iterator(self.n_donors(), self.regressors.column_iter().map(|c| c.mean()));
        let y = self.targets.map(|v| v - y_mean);
        let mut x = self.regressors.clone();
        for (j, mut col) in x.column_iter_mut().enumerate() {
            col.add_scalar_mut(-x_means[j]);
        }
        let gram = x.tr_mul(&x) / t;
        let cross = x.tr_mul(&y) / t;
        let scale = self.regressors.amax().max(1.0);
        Demeaned { y_mean, x_means, gram, cross, centered_amax: x.amax(), scale }
    }
}

struct Demeaned {
    y_mean: f64,
    x_means: DVector<f64>,
    gram: DMatrix<f64>,
    cross: DVector<f64>,
    centered_amax: f64,
    scale: f64,
}

impl Demeaned {
    /// Gradient of the mean squared residual in `w`.
    fn gradient(&self, w: &DVector<f64>) -> DVector<f64> {
        (&self.gram * w - &self.cross) * 2.0
    }

    fn intercept(&self, w: &DVector<f64>) -> f64 {
        self.y_mean - self.x_means.dot(w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexLsSolution {
    pub intercept: f64,
    pub weights: DVector<f64>,
    /// Mean squared residual at the solution.
    pub objective: f64,
    pub kkt_gap: f64,
    pub iterations: usize,
    /// All demeaned donors were zero; weights fall back to uniform.
    pub degenerate: bool,
}

/// Euclidean projection onto `{w >= 0, sum(w) = 1}` (sort and threshold).
pub fn project_simplex(v: &DVector<f64>) -> DVector<f64> {
    let q = v.len();
    assert!(q > 0, "cannot project an empty vector onto the simplex");
    let mut sorted: Vec<f64> = v.iter().copied().collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (k + 1) as f64;
        if u - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.map(|x| (x - theta).max(0.0))
}

/// Weights at or below this are treated as inactive when checking KKT.
const ACTIVE_WEIGHT: f64 = 1e-12;

/// Largest violation of the simplex-QP optimality conditions at `weights`,
/// using the gradient of the mean squared residual: the gradient must be
/// constant across the support and no smaller than that value elsewhere.
/// Also includes the intercept's stationarity (mean residual zero).
fn kkt_gap_of(d: &Demeaned, weights: &DVector<f64>, intercept: f64) -> f64 {
    let g = d.gradient(weights);
    let mut hi = f64::NEG_INFINITY;
    let mut lo = f64::INFINITY;
    for (gj, wj) in g.iter().zip(weights.iter()) {
        if *wj > ACTIVE_WEIGHT {
            hi = hi.max(*gj);
            lo = lo.min(*gj);
        }
    }
    if !lo.is_finite() {
        return f64::INFINITY;
    }
    let mut gap = hi - lo;
    for (gj, wj) in g.iter().zip(weights.iter()) {
        if *wj <= ACTIVE_WEIGHT {
            gap = gap.max(lo - gj);
        }
    }
    let infeasible = weights.iter().map(|w| (-w).max(0.0)).fold(0.0, f64::max).max((weights.sum() - 1.0).abs());
    let mean_residual = 2.0 * (d.y_mean - intercept - d.x_means.dot(weights));
    gap.max(infeasible).max(mean_residual.abs())
}

/// Optimality certificate for a candidate solution of `problem`.
pub fn verify_kkt(problem: &SimplexLsProblem, solution: &SimplexLsSolution) -> f64 {
    assert_eq!(solution.weights.len(), problem.n_donors(), "solution/problem shape mismatch");
    let d = problem.demeaned();
    kkt_gap_of(&d, &solution.weights, solution.intercept)
}

/// Largest eigenvalue of the symmetric PSD Gram matrix. Computed exactly:
/// power iteration from a fixed start can stall on a lower eigenvalue and
/// underestimate the Lipschitz constant.
fn largest_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigenvalues().max()
}

/// Exact minimiser of the QP restricted to `support` with the inactive
/// weights pinned at zero: solves `[G_SS 1; 1' 0][w; -nu] = [c_S; 1]`.
fn solve_on_support(d: &Demeaned, support: &[usize]) -> Option<DVector<f64>> {
    let s = support.len();
    let mut kkt = DMatrix::zeros(s + 1, s + 1);
    let mut rhs = DVector::zeros(s + 1);
    for (a, &i) in support.iter().enumerate() {
        for (b, &j) in support.iter().enumerate() {
            kkt[(a, b)] = d.gram[(i, j)];
        }
        kkt[(a, s)] = 1.0;
        kkt[(s, a)] = 1.0;
        rhs[a] = d.cross[i];
    }
    rhs[s] = 1.0;
    let sol = kkt.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut w = DVector::zeros(d.gram.nrows());
    for (a, &i) in support.iter().enumerate() {
        if sol[a] < 0.0 {
            return None;
        }
        w[i] = sol[a];
    }
    Some(w)
}

fn finish(problem: &SimplexLsProblem, d: &Demeaned, weights: DVector<f64>, iterations: usize, degenerate: bool) -> SimplexLsSolution {
    let intercept = d.intercept(&weights);
    let kkt_gap = kkt_gap_of(d, &weights, intercept);
    let objective = problem.objective(intercept, &weights);
    SimplexLsSolution { intercept, weights, objective, kkt_gap, iterations, degenerate }
}

const POLISH_EVERY: usize = 10;

pub fn solve_simplex_ls(problem: &SimplexLsProblem, options: SolverOptions) -> Result<SimplexLsSolution> {
    solve_simplex_ls_from(problem, options, None)
}

/// As [`solve_simplex_ls`], starting from `start` (projected onto the
/// simplex) and first trying the exact solution on its support.
pub fn solve_simplex_ls_from(
    problem: &SimplexLsProblem,
    options: SolverOptions,
    start: Option<&DVector<f64>>,
) -> Result<SimplexLsSolution> {
    if !(options.tol > 0.0) {
        return Err(Error::Validation(format!("solver tolerance must be positive, got {}", options.tol)));
    }
    let q = problem.n_donors();
    let d = problem.demeaned();
    let uniform = DVector::from_element(q, 1.0 / q as f64);

    if d.centered_amax <= 1e-14 * d.scale {
        return Ok(finish(problem, &d, uniform, 0, true));
    }
    if q == 1 {
        return Ok(finish(problem, &d, uniform, 0, false));
    }

    let lipschitz = largest_eigenvalue(&d.gram);
    let step = 1.0 / lipschitz;

    let mut w = match start {
        Some(s) if s.len() == q && s.iter().all(|v| v.is_finite()) => project_simplex(s),
        _ => uniform.clone(),
    };
    let mut last_support: Vec<usize> = Vec::new();
    if start.is_some() {
        last_support = (0..q).filter(|&j| w[j] > 0.0).collect();
        if let Some(polished) = solve_on_support(&d, &last_support) {
            if kkt_gap_of(&d, &polished, d.intercept(&polished)) <= options.tol {
                return Ok(finish(problem, &d, polished, 0, false));
            }
        }
    }
    let mut z = w.clone();
    let mut momentum = 1.0_f64;
    let mut gap = f64::INFINITY;

    for iter in 1..=options.max_iter {
        let grad = &d.gram * &z - &d.cross;
        let next = project_simplex(&(&z - grad * step));
        // Restart momentum when the step moves against the previous direction.
        let restart = (&z - &next).dot(&(&next - &w)) > 0.0;
        let next_momentum = if restart { 1.0 } else { 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) };
        z = if restart { next.clone() } else { &next + (&next - &w) * ((momentum - 1.0) / next_momentum) };
        momentum = next_momentum;
        w = next;

        if iter % POLISH_EVERY == 0 || iter == options.max_iter {
            gap = kkt_gap_of(&d, &w, d.intercept(&w));
            if gap <= options.tol {
                return Ok(finish(problem, &d, w, iter, false));
            }
            let support: Vec<usize> = (0..q).filter(|&j| w[j] > 0.0).collect();
            if support != last_support {
                if let Some(polished) = solve_on_support(&d, &support) {
                    let polished_gap = kkt_gap_of(&d, &polished, d.intercept(&polished));
                    if polished_gap <= options.tol {
                        return Ok(finish(problem, &d, polished, iter, false));
                    }
                }
                last_support = support;
            }
        }
    }
    Err(Error::NoConvergence { iterations: options.max_iter, kkt_gap: gap, last_weights: w.iter().copied().collect() })
}

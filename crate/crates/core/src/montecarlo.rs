//! Replication experiments: bias/variance of effect estimators and
//! rejection rates of the tests, with deterministic per-replication seeds.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{concentrated_count, apply_effects, CointegratedFactorConfig, EffectPattern, FactorModel, ModelSpec, PatternKind, StationaryFactorConfig};
use crate::error::{Error, Result};
use crate::inference::{andrews_p_test_with, placebo_test, spillover_p_test_with, HypothesisSpec, NullDraws, Refit};
use crate::scm::{fit_all, scm_gap};
use crate::solver::SolverOptions;
use crate::spillover::{build_structure, estimate_effects, Pattern, SpilloverStructure, Weighting, DEFAULT_CONDITION_THRESHOLD};

/// Fraction of failed replications above which a cell is reported as failed.
pub const MAX_FAILURE_RATE: f64 = 0.01;

const LOADING_STREAM: u64 = u64::MAX;

/// 64-bit FNV-1a hash of a cell label.
pub fn cell_id(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for replication `rep` of the stream `cell`: independent of the
/// order in which replications are scheduled.
pub fn derive_seed(master: u64, cell: u64, rep: u64) -> u64 {
    splitmix(splitmix(splitmix(master) ^ cell) ^ rep)
}

/// Loading seed shared by every cell drawn from the same stream.
pub fn loading_seed(master: u64, stream: &str) -> u64 {
    derive_seed(master, cell_id(stream), LOADING_STREAM)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Scm,
    Sp,
}

impl Estimator {
    pub fn label(self) -> &'static str {
        match self {
            Self::Scm => "SCM",
            Self::Sp => "SP",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFamily {
    Placebo,
    Andrews,
    Sp,
}

impl TestFamily {
    pub fn label(self) -> &'static str {
        match self {
            Self::Placebo => "Placebo",
            Self::Andrews => "Andrews",
            Self::Sp => "SP",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    /// Reported cell name.
    pub label: String,
    /// Name of the random stream; cells sharing a stream share draws.
    pub stream: String,
    pub model: FactorModel,
    pub pattern: EffectPattern,
    pub estimators: Vec<Estimator>,
    pub tests: Vec<TestFamily>,
    /// Structure used by the SP estimator and the SP test.
    pub structure: SpilloverStructure,
    /// Hypothesis for the SP test; defaults to `alpha_1 = 0`.
    pub hypothesis: Option<HypothesisSpec>,
    pub reps: usize,
    pub tau: f64,
    /// Leave-one-out refits for the Andrews and SP null samples.
    pub loo: bool,
    pub master_seed: u64,
    pub solver: SolverOptions,
    pub condition_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: String,
    pub bias: f64,
    pub variance: f64,
    pub bias_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSummary {
    pub test: String,
    pub rejections: usize,
    pub rate: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub label: String,
    pub n_units: usize,
    pub pre_periods: usize,
    pub pattern: String,
    pub reps: usize,
    pub failures: usize,
    pub loading_seed: u64,
    pub estimators: Vec<EstimatorSummary>,
    pub tests: Vec<TestSummary>,
}

impl ExperimentResult {
    pub fn estimator(&self, e: Estimator) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|s| s.estimator == e.label())
    }

    pub fn test(&self, t: TestFamily) -> Option<&TestSummary> {
        self.tests.iter().find(|s| s.test == t.label())
    }
}

struct RepOutcome {
    errors: Vec<f64>,
    rejections: Vec<bool>,
}

impl ExperimentSpec {
    fn hypothesis(&self) -> Result<HypothesisSpec> {
        match &self.hypothesis {
            Some(h) => Ok(h.clone()),
            None => HypothesisSpec::single(self.structure.n_units(), 0, 0.0, self.tau),
        }
    }

    fn refit(&self) -> Option<Refit<'static>> {
        self.loo.then_some(Refit { covariates: None, options: self.solver })
    }

    fn loading_seed(&self) -> u64 {
        match &self.model {
            FactorModel::Stationary { config, .. } => config.loading_seed,
            FactorModel::Cointegrated { config, .. } => config.loading_seed,
        }
    }

    fn replicate(&self, rep: usize, hyp: &HypothesisSpec) -> Result<RepOutcome> {
        let seed = derive_seed(self.master_seed, cell_id(&self.stream), rep as u64);
        let panel = apply_effects(&self.model.simulate(seed)?, &self.pattern)?;
        let fit = fit_all(&panel, None, self.solver)?;
        let t = panel.pre_periods();
        let truth = self.pattern.alpha()[0];
        let mut errors = Vec::with_capacity(self.estimators.len());
        for e in &self.estimators {
            let est = match e {
                Estimator::Scm => scm_gap(&fit, &panel, t)?,
                Estimator::Sp => {
                    let est = estimate_effects(&fit, &panel, &self.structure, &Weighting::Identity, t, self.condition_threshold)?;
                    est.alpha_hat[0]
                }
            };
            errors.push(est - truth);
        }
        let needs_null = self.tests.iter().any(|t| *t != TestFamily::Placebo);
        let draws = if needs_null { Some(NullDraws::new(&fit, &panel, self.refit())?) } else { None };
        let mut rejections = Vec::with_capacity(self.tests.len());
        for test in &self.tests {
            let result = match test {
                TestFamily::Placebo => placebo_test(&fit, &panel, self.tau, t)?,
                TestFamily::Andrews => andrews_p_test_with(&fit, &panel, self.tau, t, draws.as_ref().expect("drawn above"))?,
                TestFamily::Sp => spillover_p_test_with(&fit, &panel, &self.structure, hyp, t, draws.as_ref().expect("drawn above"), self.condition_threshold)?,
            };
            rejections.push(result.reject);
        }
        Ok(RepOutcome { errors, rejections })
    }
}

fn run(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    if spec.reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    let hyp = spec.hypothesis()?;
    let (n, t, _) = spec.model.dims();
    // Collected in replication order, then reduced sequentially, so the
    // result does not depend on scheduling.
    let outcomes: Vec<Result<RepOutcome>> = (0..spec.reps).into_par_iter().map(|r| spec.replicate(r, &hyp)).collect();
    let failures = outcomes.iter().filter(|o| o.is_err()).count();
    if failures as f64 > MAX_FAILURE_RATE * spec.reps as f64 || failures == spec.reps {
        return Err(Error::CellFailed { cell: spec.label.clone(), failures, reps: spec.reps });
    }
    let ok: Vec<RepOutcome> = outcomes.into_iter().filter_map(|o| o.ok()).collect();
    let count = ok.len() as f64;

    let estimators = spec
        .estimators
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let bias = ok.iter().map(|o| o.errors[k]).sum::<f64>() / count;
            let variance = ok.iter().map(|o| (o.errors[k] - bias).powi(2)).sum::<f64>() / count;
            EstimatorSummary { estimator: e.label().into(), bias, variance, bias_se: (variance / count).sqrt() }
        })
        .collect();
    let tests = spec
        .tests
        .iter()
        .enumerate()
        .map(|(k, test)| {
            let rejections = ok.iter().filter(|o| o.rejections[k]).count();
            let rate = rejections as f64 / count;
            TestSummary { test: test.label().into(), rejections, rate, se: (rate * (1.0 - rate) / count).sqrt() }
        })
        .collect();
    Ok(ExperimentResult {
        label: spec.label.clone(),
        n_units: n,
        pre_periods: t,
        pattern: spec.pattern.kind().label().into(),
        reps: spec.reps,
        failures,
        loading_seed: spec.loading_seed(),
        estimators,
        tests,
    })
}

/// Bias and variance of each estimator of the treated unit's effect.
pub fn run_estimation_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    if spec.estimators.is_empty() {
        return Err(Error::Config("estimation experiment needs at least one estimator".into()));
    }
    run(spec)
}

/// Rejection rate of each test.
pub fn run_size_power_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    if spec.tests.is_empty() {
        return Err(Error::Config("size/power experiment needs at least one test".into()));
    }
    run(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub level: f64,
    pub structure: String,
    pub rejections: usize,
    pub reps: usize,
    pub rate: f64,
    pub se: f64,
}

/// Rejection rate of the no-spillover test as the spillover level varies,
/// under several (possibly misspecified) structures. `affected` lists the
/// controls that truly receive the spillover; `base.pattern` supplies the
/// treated unit's effect. Every level reuses the same draws.
pub fn run_misspecification_sweep(
    base: &ExperimentSpec,
    affected: &[usize],
    levels: &[f64],
    structures: &[(String, SpilloverStructure)],
) -> Result<Vec<SweepPoint>> {
    if levels.is_empty() || structures.is_empty() {
        return Err(Error::Config("sweep needs at least one level and one structure".into()));
    }
    if base.reps == 0 {
        return Err(Error::Config("reps must be at least 1".into()));
    }
    let (n, t, _) = base.model.dims();
    let hyp = HypothesisSpec::no_spillover(n, base.tau)?;
    let effect = base.pattern.alpha()[0];
    let mut points = Vec::new();
    for &level in levels {
        let mut alpha = DVector::zeros(n);
        alpha[0] = effect;
        for &i in affected {
            alpha[i] = level;
        }
        let pattern = EffectPattern::custom(alpha)?;
        let outcomes: Vec<Result<Vec<bool>>> = (0..base.reps)
            .into_par_iter()
            .map(|rep| {
                let seed = derive_seed(base.master_seed, cell_id(&base.stream), rep as u64);
                let panel = apply_effects(&base.model.simulate(seed)?, &pattern)?;
                let fit = fit_all(&panel, None, base.solver)?;
                let draws = NullDraws::new(&fit, &panel, base.refit())?;
                structures
                    .iter()
                    .map(|(_, s)| Ok(spillover_p_test_with(&fit, &panel, s, &hyp, t, &draws, base.condition_threshold)?.reject))
                    .collect()
            })
            .collect();
        let failures = outcomes.iter().filter(|o| o.is_err()).count();
        if failures as f64 > MAX_FAILURE_RATE * base.reps as f64 || failures == base.reps {
            return Err(Error::CellFailed { cell: format!("{} level {level}", base.label), failures, reps: base.reps });
        }
        let ok: Vec<Vec<bool>> = outcomes.into_iter().filter_map(|o| o.ok()).collect();
        for (k, (name, _)) in structures.iter().enumerate() {
            let rejections = ok.iter().filter(|r| r[k]).count();
            let rate = rejections as f64 / ok.len() as f64;
            points.push(SweepPoint {
                level,
                structure: name.clone(),
                rejections,
                reps: ok.len(),
                rate,
                se: (rate * (1.0 - rate) / ok.len() as f64).sqrt(),
            });
        }
    }
    Ok(points)
}

/// Which published experiment to reproduce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Table {
    /// Estimation, stationary factors.
    Estimation,
    /// Estimation, cointegrated factors.
    EstimationCointegrated,
    /// Test size (treated effect 0).
    Size,
    /// Test power (treated effect 5).
    Power,
}

impl Table {
    pub fn from_number(k: u32) -> Result<Self> {
        match k {
            1 => Ok(Self::Estimation),
            2 => Ok(Self::EstimationCointegrated),
            3 => Ok(Self::Size),
            4 => Ok(Self::Power),
            _ => Err(Error::Config(format!("unknown table {k}; expected 1, 2, 3 or 4"))),
        }
    }

    pub fn number(self) -> u32 {
        match self {
            Self::Estimation => 1,
            Self::EstimationCointegrated => 2,
            Self::Size => 3,
            Self::Power => 4,
        }
    }

    fn cointegrated(self) -> bool {
        self == Self::EstimationCointegrated
    }
}

pub const TREATMENT_EFFECT: f64 = 5.0;
pub const SPILLOVER_EFFECT: f64 = 3.0;

/// Model for one (N, T) cell with loadings fixed by the master seed.
pub fn cell_model(cointegrated: bool, n: usize, t: usize, master_seed: u64) -> Result<(FactorModel, String)> {
    let kind = if cointegrated { "cointegrated" } else { "stationary" };
    let stream = format!("{kind}/N={n}/T={t}");
    let seed = loading_seed(master_seed, &stream);
    let model = if cointegrated {
        ModelSpec::Cointegrated(CointegratedFactorConfig::new(n, t, 1, seed))
    } else {
        ModelSpec::Stationary(StationaryFactorConfig::new(n, t, 1, seed))
    }
    .build()?;
    Ok((model, stream))
}

/// Experiment specs for the three spillover patterns of a table cell.
pub fn table_cell_specs(table: Table, n: usize, t: usize, reps: usize, master_seed: u64) -> Result<Vec<ExperimentSpec>> {
    let (model, stream) = cell_model(table.cointegrated(), n, t, master_seed)?;
    let effect = if table == Table::Size { 0.0 } else { TREATMENT_EFFECT };
    let (estimators, tests) = match table {
        Table::Estimation | Table::EstimationCointegrated => (vec![Estimator::Scm, Estimator::Sp], vec![]),
        Table::Size | Table::Power => (vec![], vec![TestFamily::Placebo, TestFamily::Andrews, TestFamily::Sp]),
    };
    [PatternKind::None, PatternKind::Concentrated, PatternKind::Spreadout]
        .into_iter()
        .map(|kind| {
            let pattern = EffectPattern::of_kind(kind, n, effect, SPILLOVER_EFFECT)?;
            let mut affected = pattern.affected_controls();
            if affected.is_empty() {
                // Conservative: estimate as if a third of the controls were exposed.
                affected = (1..=concentrated_count(n)).collect();
            }
            Ok(ExperimentSpec {
                label: format!("table{}/N={n}/T={t}/{}", table.number(), kind.label()),
                stream: stream.clone(),
                model: model.clone(),
                pattern,
                estimators: estimators.clone(),
                tests: tests.clone(),
                structure: build_structure(&Pattern::range(affected), n)?,
                hypothesis: None,
                reps,
                tau: 0.05,
                loo: matches!(table, Table::Size | Table::Power),
                master_seed,
                solver: SolverOptions::default(),
                condition_threshold: DEFAULT_CONDITION_THRESHOLD,
            })
        })
        .collect()
}

pub fn run_table_cell(table: Table, n: usize, t: usize, reps: usize, master_seed: u64) -> Result<Vec<ExperimentResult>> {
    table_cell_specs(table, n, t, reps, master_seed)?
        .iter()
        .map(|spec| match table {
            Table::Estimation | Table::EstimationCointegrated => run_estimation_experiment(spec),
            Table::Size | Table::Power => run_size_power_experiment(spec),
        })
        .collect()
}

/// Settings of the misspecification sweep.
pub struct SweepDesign {
    pub base: ExperimentSpec,
    pub affected: Vec<usize>,
    pub structures: Vec<(String, SpilloverStructure)>,
}

/// N = 20, T = 50, treated effect 5, nine affected controls; the test
/// structures assume four, nine or fourteen affected controls.
pub fn misspecification_design(reps: usize, master_seed: u64) -> Result<SweepDesign> {
    let (n, t) = (20, 50);
    let (model, stream) = cell_model(false, n, t, master_seed)?;
    let structures = [("too_few", 4), ("correct", 9), ("too_many", 14)]
        .into_iter()
        .map(|(name, k)| Ok((name.to_string(), build_structure(&Pattern::range(1..=k), n)?)))
        .collect::<Result<Vec<_>>>()?;
    let base = ExperimentSpec {
        label: format!("misspecification/N={n}/T={t}"),
        stream,
        model,
        pattern: EffectPattern::none(n, TREATMENT_EFFECT),
        estimators: vec![],
        tests: vec![TestFamily::Sp],
        structure: structures[1].1.clone(),
        hypothesis: None,
        reps,
        tau: 0.05,
        loo: true,
        master_seed,
        solver: SolverOptions::default(),
        condition_threshold: DEFAULT_CONDITION_THRESHOLD,
    };
    Ok(SweepDesign { base, affected: (1..=9).collect(), structures })
}

/// Spillover levels 0, 0.25, ..., 2.
pub fn default_levels() -> Vec<f64> {
    (0..=8).map(|k| k as f64 * 0.25).collect()
}

/// Long-format table CSV: one row per (pattern, method, metric).
pub fn write_table_csv<W: Write>(table: Table, results: &[ExperimentResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Config(format!("writing CSV: {e}"));
    w.write_record(["table", "n", "t", "pattern", "method", "metric", "value", "se", "reps", "failures"]).map_err(io)?;
    for r in results {
        let prefix = [table.number().to_string(), r.n_units.to_string(), r.pre_periods.to_string(), r.pattern.clone()];
        let suffix = [r.reps.to_string(), r.failures.to_string()];
        let mut row = |method: &str, metric: &str, value: f64, se: String| {
            let mut rec: Vec<String> = prefix.to_vec();
            rec.extend([method.to_string(), metric.to_string(), format!("{value:.6}"), se]);
            rec.extend(suffix.iter().cloned());
            w.write_record(&rec).map_err(io)
        };
        for e in &r.estimators {
            row(&e.estimator, "bias", e.bias, format!("{:.6}", e.bias_se))?;
            row(&e.estimator, "variance", e.variance, String::new())?;
        }
        for s in &r.tests {
            row(&s.test, "rejection_rate", s.rate, format!("{:.6}", s.se))?;
        }
    }
    w.flush().map_err(|e| Error::Config(format!("writing CSV: {e}")))
}

pub fn write_sweep_csv<W: Write>(points: &[SweepPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Config(format!("writing CSV: {e}"));
    w.write_record(["level", "structure", "rate", "se", "reps"]).map_err(io)?;
    for p in points {
        w.write_record([format!("{:.2}", p.level), p.structure.clone(), format!("{:.6}", p.rate), format!("{:.6}", p.se), p.reps.to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::Config(format!("writing CSV: {e}")))
}

/// Trace of the empirical covariance of the rows of `draws`.
pub fn trace_variance(draws: &DMatrix<f64>) -> f64 {
    let r = draws.nrows() as f64;
    let mean = draws.row_mean();
    (0..draws.nrows()).map(|i| (draws.row(i) - &mean).norm_squared()).sum::<f64>() / r
}

//! Command-line driver: `fit`, `test`, `simulate`, `replicate`.
//!
//! Exit codes: 0 success, 2 invalid input (I/O, parse, configuration,
//! validation), 3 singular spillover system (Condition IN), 1 anything else.
//! Failures print one JSON object to stderr.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dgp::DgpSpec;
use crate::error::{Error, Result};
use crate::inference::{
    andrews_p_test_with, joint_p_test, placebo_test, spillover_p_test_with, HypothesisFile, NullDraws, Refit, TestResult,
    TestWeighting,
};
use crate::montecarlo::{
    default_levels, misspecification_design, run_misspecification_sweep, run_table_cell, table_cell_specs, write_sweep_csv,
    write_table_csv, ExperimentResult, SweepPoint, Table,
};
use crate::panel::{load_panel_csv, validate_panel, Diagnostic, LoadedPanel};
use crate::scm::{fit_all, ScmFitRecord};
use crate::solver::SolverOptions;
use crate::spillover::{
    check_invertibility, estimate_multi_period, EffectRecord, InvertibilityDiagnostic, SpilloverStructure, StructureSpec,
    Weighting, DEFAULT_CONDITION_THRESHOLD,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_SINGULAR: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "spillsynth", version, about = "Synthetic control estimation and inference under spillovers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the synthetic control system and estimate effects per post period.
    Fit(FitArgs),
    /// Run end-of-sample tests on a panel.
    Test(TestArgs),
    /// Simulate a panel from a DGP config.
    Simulate(SimulateArgs),
    /// Reproduce a simulation table or the misspecification sweep.
    Replicate(ReplicateArgs),
}

#[derive(Debug, Args)]
pub struct PanelArgs {
    /// Wide panel CSV: one row per unit, one column per period.
    #[arg(long)]
    pub panel: PathBuf,
    /// Label of the first post-treatment period.
    #[arg(long)]
    pub treatment_period: String,
    /// Number of post-treatment periods used.
    #[arg(long, default_value_t = 1)]
    pub post_periods: usize,
    /// Spillover structure JSON (1-based unit numbers).
    #[arg(long)]
    pub structure: PathBuf,
    /// Largest acceptable condition number of A'MA.
    #[arg(long, default_value_t = DEFAULT_CONDITION_THRESHOLD)]
    pub cond_threshold: f64,
    /// Write JSON here instead of stdout.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimationWeighting {
    Identity,
    Efficient,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub panel: PanelArgs,
    #[arg(long, value_enum, default_value_t = EstimationWeighting::Identity)]
    pub weighting: EstimationWeighting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Family {
    Sp,
    Andrews,
    Placebo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TestWeightingArg {
    Identity,
    Studentized,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    #[command(flatten)]
    pub panel: PanelArgs,
    /// Hypothesis JSON `{"C": [[...]], "d": [...]}`; required for the SP and joint tests.
    #[arg(long)]
    pub hypothesis: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    pub tau: f64,
    /// Test families to run (repeatable).
    #[arg(long = "family", value_enum, default_values_t = [Family::Sp])]
    pub families: Vec<Family>,
    /// Also run the joint test over all post periods.
    #[arg(long)]
    pub joint: bool,
    #[arg(long, value_enum, default_value_t = TestWeightingArg::Identity)]
    pub weighting: TestWeightingArg,
    /// Leave-one-out refits for the null sample.
    #[arg(long)]
    pub loo: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// DGP config JSON.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the panel CSV here instead of stdout.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplicateArgs {
    /// 1-4 for the tables, `fig3` for the misspecification sweep.
    #[arg(long)]
    pub table: String,
    /// `N,T` cell (tables only).
    #[arg(long)]
    pub cell: Option<String>,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    #[arg(long, default_value_t = 20240601)]
    pub seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Spillover levels for the sweep, comma separated (default 0, 0.25, ..., 2).
    #[arg(long)]
    pub levels: Option<String>,
    /// Use plug-in rather than leave-one-out null samples in the tests.
    #[arg(long)]
    pub plug_in: bool,
    /// Write the CSV here instead of stdout.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Also write the full results as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

/// `fit` output.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitOutput {
    pub units: Vec<String>,
    pub treatment_period: String,
    pub ignored_periods: usize,
    pub diagnostics: Vec<Diagnostic>,
    pub structure_labels: Vec<String>,
    pub structure_warnings: Vec<String>,
    pub invertibility: InvertibilityDiagnostic,
    pub fit: ScmFitRecord,
    pub effects: Vec<EffectRecord>,
}

/// `test` output.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestOutput {
    pub units: Vec<String>,
    pub null_sample: String,
    pub diagnostics: Vec<Diagnostic>,
    pub tests: Vec<TestResult>,
}

/// `replicate` JSON output.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicateOutput {
    pub table: String,
    pub master_seed: u64,
    pub reps: usize,
    pub leave_one_out: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cells: Vec<ExperimentResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepPoint>,
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_singular() {
        return EXIT_SINGULAR;
    }
    match err {
        Error::Io { .. } | Error::Parse { .. } | Error::Config(_) | Error::Validation(_) | Error::Json(_) => EXIT_INVALID,
        Error::Period { source, .. } => exit_code(source),
        _ => EXIT_FAILURE,
    }
}

fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::Io { .. } => "io",
        Error::Parse { .. } => "parse",
        Error::Config(_) => "config",
        Error::Validation(_) => "validation",
        Error::Domain(_) => "domain",
        Error::NoConvergence { .. } => "no_convergence",
        Error::UnitFit { .. } => "unit_fit",
        Error::Singular(_) => "singular",
        Error::SingularMatrix(_) => "singular_matrix",
        Error::Period { source, .. } => error_kind(source),
        Error::CellFailed { .. } => "cell_failed",
        Error::Json(_) => "json",
    }
}

fn singular_diagnostic(err: &Error) -> Option<&InvertibilityDiagnostic> {
    match err {
        Error::Singular(d) => Some(d),
        Error::Period { source, .. } | Error::UnitFit { source, .. } => singular_diagnostic(source),
        _ => None,
    }
}

/// The single JSON object printed on stderr for a failure.
pub fn error_json(err: &Error) -> serde_json::Value {
    let mut value = json!({
        "error": {
            "kind": error_kind(err),
            "message": err.to_string(),
            "exit_code": exit_code(err),
        }
    });
    if let Some(diag) = singular_diagnostic(err) {
        value["error"]["diagnostic"] = serde_json::to_value(diag).unwrap_or(serde_json::Value::Null);
    }
    value
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    match path {
        Some(p) => {
            let file = File::create(p).map_err(|source| Error::Io { path: p.display().to_string(), source })?;
            Ok(Box::new(BufWriter::new(file)))
        }
        None => Ok(Box::new(io::stdout().lock())),
    }
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let io_err = |source| Error::Io { path: path.map_or("<stdout>".into(), |p| p.display().to_string()), source };
    let mut out = open_output(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out).map_err(io_err)?;
    out.flush().map_err(io_err)
}

struct Prepared {
    loaded: LoadedPanel,
    structure: SpilloverStructure,
    diagnostics: Vec<Diagnostic>,
}

fn prepare(args: &PanelArgs) -> Result<Prepared> {
    let loaded = load_panel_csv(&args.panel, &args.treatment_period, args.post_periods)?;
    let spec: StructureSpec = read_json(&args.structure)?;
    let structure = spec.build(loaded.panel.n_units())?;
    let diagnostics = validate_panel(&loaded.panel);
    Ok(Prepared { loaded, structure, diagnostics })
}

pub fn cmd_fit(args: &FitArgs) -> Result<()> {
    let Prepared { loaded, structure, diagnostics } = prepare(&args.panel)?;
    let panel = &loaded.panel;
    let fit = fit_all(panel, None, SolverOptions::default())?;
    let weighting = match args.weighting {
        EstimationWeighting::Identity => Weighting::Identity,
        EstimationWeighting::Efficient => Weighting::Efficient,
    };
    let w = weighting.resolve(&fit)?;
    let invertibility = check_invertibility(&structure, &fit, Some(&w), args.panel.cond_threshold);
    if !invertibility.passed {
        return Err(Error::Singular(Box::new(invertibility)));
    }
    let estimates = estimate_multi_period(&fit, panel, std::slice::from_ref(&structure), &weighting, args.panel.cond_threshold)?;
    let output = FitOutput {
        units: panel.unit_labels().to_vec(),
        treatment_period: args.panel.treatment_period.clone(),
        ignored_periods: loaded.ignored_periods,
        diagnostics,
        structure_labels: structure.labels().to_vec(),
        structure_warnings: structure.warnings().to_vec(),
        invertibility,
        fit: fit.to_record(),
        effects: estimates.iter().map(|e| e.to_record(panel, &structure)).collect(),
    };
    write_json(&output, args.panel.output.as_deref())
}

pub fn cmd_test(args: &TestArgs) -> Result<()> {
    let Prepared { loaded, structure, diagnostics } = prepare(&args.panel)?;
    let panel = &loaded.panel;
    let n = panel.n_units();
    let weighting = match args.weighting {
        TestWeightingArg::Identity => TestWeighting::Identity,
        TestWeightingArg::Studentized => TestWeighting::Studentized,
    };
    let needs_hypothesis = args.joint || args.families.contains(&Family::Sp);
    let hypothesis = match (&args.hypothesis, needs_hypothesis) {
        (Some(path), _) => Some(read_json::<HypothesisFile>(path)?.to_spec(n, args.tau, weighting)?),
        (None, true) => return Err(Error::Config("--hypothesis is required for the SP and joint tests".into())),
        (None, false) => None,
    };
    let fit = fit_all(panel, None, SolverOptions::default())?;
    let refit = args.loo.then(Refit::default);
    let draws = NullDraws::new(&fit, panel, refit)?;
    let threshold = args.panel.cond_threshold;

    let mut tests = Vec::new();
    for family in &args.families {
        for s in 0..panel.post_periods() {
            let t = panel.post_column(s);
            let result = match family {
                Family::Sp => {
                    let hyp = hypothesis.as_ref().expect("checked above");
                    spillover_p_test_with(&fit, panel, &structure, hyp, t, &draws, threshold)
                        .map_err(|e| Error::Period { period: panel.period_labels()[t].clone(), source: Box::new(e) })?
                }
                Family::Andrews => andrews_p_test_with(&fit, panel, args.tau, t, &draws)?,
                Family::Placebo => placebo_test(&fit, panel, args.tau, t)?,
            };
            tests.push(result);
        }
    }
    if args.joint {
        let hyp = hypothesis.expect("checked above");
        tests.push(joint_p_test(&fit, panel, &[structure], &[hyp], refit, threshold)?);
    }
    let output = TestOutput {
        units: panel.unit_labels().to_vec(),
        null_sample: if args.loo { "leave_one_out" } else { "plug_in" }.into(),
        diagnostics,
        tests,
    };
    write_json(&output, args.panel.output.as_deref())
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let spec: DgpSpec = read_json(&args.config)?;
    let panel = spec.simulate(args.seed)?;
    let out = open_output(args.output.as_deref())?;
    panel.write_csv(out)
}

fn parse_cell(cell: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = cell.split(',').map(str::trim).collect();
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Config(format!("invalid --cell {cell:?}; expected N,T")));
    match parts.as_slice() {
        [n, t] => Ok((parse(n)?, parse(t)?)),
        _ => Err(Error::Config(format!("invalid --cell {cell:?}; expected N,T"))),
    }
}

fn parse_levels(levels: &str) -> Result<Vec<f64>> {
    levels
        .split(',')
        .map(|s| {
            let v: f64 = s.trim().parse().map_err(|_| Error::Config(format!("invalid level {s:?}")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Config(format!("invalid level {s:?}")))
            }
        })
        .collect()
}

fn replicate(args: &ReplicateArgs) -> Result<()> {
    if args.reps == 0 {
        return Err(Error::Config("--reps must be at least 1".into()));
    }
    let mut csv_buf = Vec::new();
    let output = if args.table == "fig3" {
        let mut design = misspecification_design(args.reps, args.seed)?;
        design.base.loo = !args.plug_in;
        let levels = match &args.levels {
            Some(l) => parse_levels(l)?,
            None => default_levels(),
        };
        let sweep = run_misspecification_sweep(&design.base, &design.affected, &levels, &design.structures)?;
        write_sweep_csv(&sweep, &mut csv_buf)?;
        ReplicateOutput {
            table: args.table.clone(),
            master_seed: args.seed,
            reps: args.reps,
            leave_one_out: design.base.loo,
            cells: vec![],
            sweep,
        }
    } else {
        let number: u32 = args.table.parse().map_err(|_| Error::Config(format!("unknown table {:?}", args.table)))?;
        let table = Table::from_number(number)?;
        let cell = args.cell.as_deref().ok_or_else(|| Error::Config("--cell N,T is required for tables".into()))?;
        let (n, t) = parse_cell(cell)?;
        let cells = if args.plug_in {
            table_cell_specs(table, n, t, args.reps, args.seed)?
                .into_iter()
                .map(|mut spec| {
                    spec.loo = false;
                    match table {
                        Table::Estimation | Table::EstimationCointegrated => crate::montecarlo::run_estimation_experiment(&spec),
                        Table::Size | Table::Power => crate::montecarlo::run_size_power_experiment(&spec),
                    }
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            run_table_cell(table, n, t, args.reps, args.seed)?
        };
        write_table_csv(table, &cells, &mut csv_buf)?;
        ReplicateOutput {
            table: args.table.clone(),
            master_seed: args.seed,
            reps: args.reps,
            leave_one_out: !args.plug_in && matches!(table, Table::Size | Table::Power),
            cells,
            sweep: vec![],
        }
    };
    let mut out = open_output(args.output.as_deref())?;
    let io_err = |source| Error::Io { path: args.output.as_ref().map_or("<stdout>".into(), |p| p.display().to_string()), source };
    out.write_all(&csv_buf).map_err(io_err)?;
    out.flush().map_err(io_err)?;
    if let Some(path) = &args.json {
        write_json(&output, Some(path))?;
    }
    Ok(())
}

pub fn cmd_replicate(args: &ReplicateArgs) -> Result<()> {
    match args.threads {
        Some(0) => Err(Error::Config("--threads must be at least 1".into())),
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| replicate(args)),
        None => replicate(args),
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Test(a) => cmd_test(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Replicate(a) => cmd_replicate(a),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(err) => {
            eprintln!("{}", error_json(&err));
            exit_code(&err)
        }
    }
}


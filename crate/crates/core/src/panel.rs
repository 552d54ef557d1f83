//! Observed outcome panel: N units by T pre-treatment plus m post-treatment
//! periods, with optional per-unit covariate series.
//!
//! Rows are units and columns are periods. The first row is the treated
//! unit. Estimators only ever see the pre-treatment block through
//! [`PanelData::pre`]; post-treatment columns are addressed explicitly.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DMatrixView, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PanelData {
    outcomes: DMatrix<f64>,
    unit_labels: Vec<String>,
    period_labels: Vec<String>,
    pre_periods: usize,
}

impl PanelData {
    /// Builds a panel from an `N x (T+m)` outcome matrix. `pre_periods` is T;
    /// every remaining column is post-treatment.
    pub fn new(
        outcomes: DMatrix<f64>,
        unit_labels: Vec<String>,
        period_labels: Vec<String>,
        pre_periods: usize,
    ) -> Result<Self> {
        let (n, cols) = outcomes.shape();
        if n < 3 {
            return Err(Error::Validation(format!("panel needs at least 3 units, got {n}")));
        }
        if pre_periods < 2 {
            return Err(Error::Validation(format!(
                "panel needs at least 2 pre-treatment periods, got {pre_periods}"
            )));
        }
        if cols <= pre_periods {
            return Err(Error::Validation("panel needs at least one post-treatment period".into()));
        }
        if unit_labels.len() != n || period_labels.len() != cols {
            return Err(Error::Validation(format!(
                "label counts ({} units, {} periods) do not match outcome shape {n}x{cols}",
                unit_labels.len(),
                period_labels.len()
            )));
        }
        if let Some((i, t)) = first_non_finite(&outcomes) {
            return Err(Error::Validation(format!(
                "non-finite outcome at unit {}, period {}",
                unit_labels[i], period_labels[t]
            )));
        }
        for (i, label) in unit_labels.iter().enumerate() {
            if unit_labels[..i].contains(label) {
                return Err(Error::Validation(format!("duplicate unit label {label:?}")));
            }
        }
        check_period_order(&period_labels)?;
        Ok(Self { outcomes, unit_labels, period_labels, pre_periods })
    }

    /// Unlabelled panel; units are named `1..=N` and periods `1..=T+m`.
    pub fn from_matrix(outcomes: DMatrix<f64>, pre_periods: usize) -> Result<Self> {
        let units = (1..=outcomes.nrows()).map(|i| i.to_string()).collect();
        let periods = (1..=outcomes.ncols()).map(|t| t.to_string()).collect();
        Self::new(outcomes, units, periods, pre_periods)
    }

    pub fn n_units(&self) -> usize {
        self.outcomes.nrows()
    }

    pub fn pre_periods(&self) -> usize {
        self.pre_periods
    }

    pub fn post_periods(&self) -> usize {
        self.outcomes.ncols() - self.pre_periods
    }

    pub fn n_periods(&self) -> usize {
        self.outcomes.ncols()
    }

    pub fn unit_labels(&self) -> &[String] {
        &self.unit_labels
    }

    pub fn period_labels(&self) -> &[String] {
        &self.period_labels
    }

    /// Pre-treatment block, `N x T`.
    pub fn pre(&self) -> DMatrixView<'_, f64> {
        self.outcomes.columns(0, self.pre_periods)
    }

    /// Post-treatment block, `N x m`.
    pub fn post(&self) -> DMatrixView<'_, f64> {
        self.outcomes.columns(self.pre_periods, self.post_periods())
    }

    /// Outcome vector `Y_t` for a 0-based period column.
    pub fn column(&self, t: usize) -> DVector<f64> {
        self.outcomes.column(t).into_owned()
    }

    /// Column index of the `s`-th post period (0-based `s`).
    pub fn post_column(&self, s: usize) -> usize {
        self.pre_periods + s
    }

    pub fn is_post(&self, t: usize) -> bool {
        t >= self.pre_periods && t < self.n_periods()
    }

    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }

    /// Same labels and timing, new outcome values.
    pub fn with_outcomes(&self, outcomes: DMatrix<f64>) -> Result<Self> {
        if outcomes.shape() != self.outcomes.shape() {
            return Err(Error::Validation(format!(
                "outcome shape {:?} does not match panel shape {:?}",
                outcomes.shape(),
                self.outcomes.shape()
            )));
        }
        Self::new(outcomes, self.unit_labels.clone(), self.period_labels.clone(), self.pre_periods)
    }

    /// Writes the wide CSV format read by [`load_panel_csv`]. Values use the
    /// shortest representation that parses back to the identical `f64`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut line = String::from("unit");
        for p in &self.period_labels {
            line.push(',');
            line.push_str(p);
        }
        line.push('\n');
        for (i, label) in self.unit_labels.iter().enumerate() {
            line.push_str(label);
            for t in 0..self.n_periods() {
                write!(line, ",{}", self.outcomes[(i, t)]).expect("write to String");
            }
            line.push('\n');
        }
        out.write_all(line.as_bytes()).map_err(|source| Error::Io { path: "<output>".into(), source })
    }
}

fn first_non_finite(m: &DMatrix<f64>) -> Option<(usize, usize)> {
    for t in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, t)].is_finite() {
                return Some((i, t));
            }
        }
    }
    None
}

/// Labels must be unique; if every label is numeric they must also increase.
fn check_period_order(labels: &[String]) -> Result<()> {
    for (t, label) in labels.iter().enumerate() {
        if labels[..t].contains(label) {
            return Err(Error::Validation(format!("duplicate period label {label:?}")));
        }
    }
    let numeric: Option<Vec<f64>> = labels.iter().map(|l| l.trim().parse::<f64>().ok()).collect();
    if let Some(values) = numeric {
        if let Some(w) = values.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Validation(format!(
                "period labels not strictly increasing at {:?} -> {:?}",
                labels[w],
                labels[w + 1]
            )));
        }
    }
    Ok(())
}

/// Per-unit covariate series `z_{i,t}`, stored as one `N x (T+m)` matrix per
/// covariate dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariatePanel {
    series: Vec<DMatrix<f64>>,
}

impl CovariatePanel {
    pub fn new(series: Vec<DMatrix<f64>>, panel: &PanelData) -> Result<Self> {
        for (k, z) in series.iter().enumerate() {
            if z.shape() != panel.outcomes.shape() {
                return Err(Error::Validation(format!(
                    "covariate {k} has shape {:?}, panel has {:?}",
                    z.shape(),
                    panel.outcomes.shape()
                )));
            }
            if first_non_finite(z).is_some() {
                return Err(Error::Validation(format!("covariate {k} has non-finite entries")));
            }
        }
        Ok(Self { series })
    }

    pub fn dim(&self) -> usize {
        self.series.len()
    }

    /// `z_{i,t}` as a length-p vector.
    pub fn z(&self, i: usize, t: usize) -> DVector<f64> {
        DVector::from_iterator(self.series.len(), self.series.iter().map(|z| z[(i, t)]))
    }

    /// Rows `periods`, one column per covariate: the design block for unit `i`.
    pub fn unit_design(&self, i: usize, periods: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(periods.len(), self.series.len(), |r, k| self.series[k][(i, periods[r])])
    }
}

#[derive(Debug, Clone)]
pub struct LoadedPanel {
    pub panel: PanelData,
    /// Period columns after `T+m` that were present in the file and dropped.
    pub ignored_periods: usize,
}

/// Reads a wide CSV: header `unit,<period>,<period>,...`, then one row per
/// unit. `T` is the number of periods before `treatment_period`.
pub fn load_panel_csv(
    path: impl AsRef<Path>,
    treatment_period: &str,
    post_periods: usize,
) -> Result<LoadedPanel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| Error::Io { path: path.display().to_string(), source })?;
    parse_panel_csv(&text, treatment_period, post_periods)
}

pub fn parse_panel_csv(text: &str, treatment_period: &str, post_periods: usize) -> Result<LoadedPanel> {
    if post_periods == 0 {
        return Err(Error::Config("post_periods must be at least 1".into()));
    }
    let (units, periods, values) = read_wide_csv(text)?;
    let treat = periods
        .iter()
        .position(|p| p == treatment_period)
        .ok_or_else(|| Error::Config(format!("treatment period {treatment_period:?} not in header")))?;
    if periods.len() - treat < post_periods {
        return Err(Error::Config(format!(
            "only {} periods from {treatment_period:?} onward, {post_periods} requested",
            periods.len() - treat
        )));
    }
    let keep = treat + post_periods;
    let ignored_periods = periods.len() - keep;
    let outcomes = DMatrix::from_fn(units.len(), keep, |i, t| values[i][t]);
    let panel = PanelData::new(outcomes, units, periods[..keep].to_vec(), treat)?;
    Ok(LoadedPanel { panel, ignored_periods })
}

type WideTable = (Vec<String>, Vec<String>, Vec<Vec<f64>>);

/// Parses header and numeric body of a wide CSV without any timing logic.
pub(crate) fn read_wide_csv(text: &str) -> Result<WideTable> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Parse { row: 0, column: 0, message: e.to_string() })?
        .clone();
    if header.len() < 2 {
        return Err(Error::Parse { row: 0, column: 0, message: "header needs a unit column and periods".into() });
    }
    let periods: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let mut units = Vec::new();
    let mut values = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| Error::Parse { row, column: 0, message: e.to_string() })?;
        if record.len() != header.len() {
            return Err(Error::Parse {
                row,
                column: record.len().saturating_sub(1).min(periods.len()),
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        units.push(record[0].to_owned());
        let mut row_values = Vec::with_capacity(periods.len());
        for (c, cell) in record.iter().skip(1).enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: c + 1,
                message: if cell.is_empty() { "missing value".into() } else { format!("not a number: {cell:?}") },
            })?;
            row_values.push(v);
        }
        values.push(row_values);
    }
    Ok((units, periods, values))
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    ZeroVariance,
    NearDuplicate,
    ShortPrePeriod,
}

const DUPLICATE_CORRELATION: f64 = 0.9999;

/// Data-quality warnings on the pre-treatment block. Never fails.
pub fn validate_panel(panel: &PanelData) -> Vec<Diagnostic> {
    let pre = panel.pre();
    let (n, t) = pre.shape();
    let mut out = Vec::new();

    let centered: Vec<DVector<f64>> = (0..n)
        .map(|i| {
            let row = pre.row(i).transpose();
            let mean = row.mean();
            row.map(|v| v - mean)
        })
        .collect();
    let norms: Vec<f64> = centered.iter().map(|c| c.norm()).collect();

    for i in 0..n {
        if norms[i] == 0.0 {
            out.push(Diagnostic {
                kind: DiagnosticKind::ZeroVariance,
                message: format!("zero variance: unit {}", panel.unit_labels[i]),
            });
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let identical = pre.row(i) == pre.row(j);
            let correlated = norms[i] > 0.0
                && norms[j] > 0.0
                && centered[i].dot(&centered[j]) / (norms[i] * norms[j]) > DUPLICATE_CORRELATION;
            if identical || correlated {
                out.push(Diagnostic {
                    kind: DiagnosticKind::NearDuplicate,
                    message: format!(
                        "near-duplicate units: {} and {}",
                        panel.unit_labels[i], panel.unit_labels[j]
                    ),
                });
            }
        }
    }
    if t < n {
        out.push(Diagnostic {
            kind: DiagnosticKind::ShortPrePeriod,
            message: format!("T = {t} pre-periods < N = {n} units; donor weights may be under-determined"),
        });
    }
    out
}

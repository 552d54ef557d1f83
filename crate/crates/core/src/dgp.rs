//! Factor-model panel generators for simulation studies.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::PanelData;

pub const DEFAULT_BURN_IN: usize = 500;

fn default_half() -> f64 {
    0.5
}
fn default_one() -> f64 {
    1.0
}
fn default_burn_in() -> usize {
    DEFAULT_BURN_IN
}

fn check_dims(n: usize, t: usize, m: usize, min_n: usize) -> Result<()> {
    if n < min_n {
        return Err(Error::Config(format!("n_units must be at least {min_n}, got {n}")));
    }
    if t < 2 || m == 0 {
        return Err(Error::Config(format!("need pre_periods >= 2 and post_periods >= 1 (got {t}, {m})")));
    }
    Ok(())
}

fn check_ar(name: &str, phi: f64) -> Result<()> {
    if phi.is_finite() && phi.abs() < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must satisfy |phi| < 1, got {phi}")))
    }
}

fn check_scale(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")))
    }
}

/// Stationary model `y_it = eta_t + lambda_t' mu_i + eps_it` with
/// `eta_t = c + phi eta_{t-1} + nu0`, `lambda1` AR(1), `lambda2` MA(1) around
/// a mean, `lambda3` ARMA(1,1), and loadings `mu_i ~ U[0,1]^3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationaryFactorConfig {
    pub n_units: usize,
    pub pre_periods: usize,
    pub post_periods: usize,
    #[serde(default)]
    pub loading_seed: u64,
    #[serde(default = "default_one")]
    pub eta_intercept: f64,
    #[serde(default = "default_half")]
    pub eta_ar: f64,
    #[serde(default = "default_half")]
    pub lambda1_ar: f64,
    #[serde(default = "default_one")]
    pub lambda2_mean: f64,
    #[serde(default = "default_half")]
    pub lambda2_ma: f64,
    #[serde(default = "default_half")]
    pub lambda3_ar: f64,
    #[serde(default = "default_half")]
    pub lambda3_ma: f64,
    #[serde(default = "default_one")]
    pub factor_sd: f64,
    #[serde(default = "default_one")]
    pub noise_sd: f64,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
}

impl StationaryFactorConfig {
    pub fn new(n_units: usize, pre_periods: usize, post_periods: usize, loading_seed: u64) -> Self {
        Self {
            n_units,
            pre_periods,
            post_periods,
            loading_seed,
            eta_intercept: 1.0,
            eta_ar: 0.5,
            lambda1_ar: 0.5,
            lambda2_mean: 1.0,
            lambda2_ma: 0.5,
            lambda3_ar: 0.5,
            lambda3_ma: 0.5,
            factor_sd: 1.0,
            noise_sd: 1.0,
            burn_in: DEFAULT_BURN_IN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_dims(self.n_units, self.pre_periods, self.post_periods, 3)?;
        check_ar("eta_ar", self.eta_ar)?;
        check_ar("lambda1_ar", self.lambda1_ar)?;
        check_ar("lambda3_ar", self.lambda3_ar)?;
        for (name, v) in [("eta_intercept", self.eta_intercept), ("lambda2_mean", self.lambda2_mean)] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }
        for (name, v) in [("lambda2_ma", self.lambda2_ma), ("lambda3_ma", self.lambda3_ma)] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }
        check_scale("factor_sd", self.factor_sd)?;
        check_scale("noise_sd", self.noise_sd)
    }

    /// N x 3 loadings, a pure function of `loading_seed`.
    pub fn loadings(&self) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.loading_seed);
        DMatrix::from_fn(self.n_units, 3, |_, _| rng.random::<f64>())
    }
}

/// Cointegrated model `y_it = lambda_t' mu_i + eps_it` with two random-walk
/// factors and one AR(1) factor. Units 0..4 load on (1,0,0), (0,1,0),
/// (1,0,0), (0,1,0); the rest draw U[0,1] loadings normalized to sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CointegratedFactorConfig {
    pub n_units: usize,
    pub pre_periods: usize,
    pub post_periods: usize,
    #[serde(default)]
    pub loading_seed: u64,
    #[serde(default = "default_half")]
    pub walk_scale: f64,
    #[serde(default = "default_half")]
    pub stationary_ar: f64,
    #[serde(default = "default_one")]
    pub factor_sd: f64,
    #[serde(default = "default_one")]
    pub noise_sd: f64,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
}

impl CointegratedFactorConfig {
    pub fn new(n_units: usize, pre_periods: usize, post_periods: usize, loading_seed: u64) -> Self {
        Self {
            n_units,
            pre_periods,
            post_periods,
            loading_seed,
            walk_scale: 0.5,
            stationary_ar: 0.5,
            factor_sd: 1.0,
            noise_sd: 1.0,
            burn_in: DEFAULT_BURN_IN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_dims(self.n_units, self.pre_periods, self.post_periods, 5)?;
        check_ar("stationary_ar", self.stationary_ar)?;
        check_scale("walk_scale", self.walk_scale)?;
        check_scale("factor_sd", self.factor_sd)?;
        check_scale("noise_sd", self.noise_sd)
    }

    pub fn loadings(&self) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.loading_seed);
        let fixed = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let mut mu = DMatrix::zeros(self.n_units, 3);
        for i in 0..self.n_units {
            if i < fixed.len() {
                mu.row_mut(i).copy_from_slice(&fixed[i]);
            } else {
                let raw: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>());
                let sum: f64 = raw.iter().sum();
                for (k, v) in raw.iter().enumerate() {
                    mu[(i, k)] = v / sum;
                }
            }
        }
        mu
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// A factor model with its loadings drawn once; `simulate` only draws
/// factor and noise innovations.
#[derive(Debug, Clone)]
pub enum FactorModel {
    Stationary { config: StationaryFactorConfig, loadings: DMatrix<f64> },
    Cointegrated { config: CointegratedFactorConfig, loadings: DMatrix<f64> },
}

impl FactorModel {
    pub fn stationary(config: StationaryFactorConfig) -> Result<Self> {
        config.validate()?;
        let loadings = config.loadings();
        Ok(Self::Stationary { config, loadings })
    }

    pub fn cointegrated(config: CointegratedFactorConfig) -> Result<Self> {
        config.validate()?;
        let loadings = config.loadings();
        Ok(Self::Cointegrated { config, loadings })
    }

    pub fn loadings(&self) -> &DMatrix<f64> {
        match self {
            Self::Stationary { loadings, .. } | Self::Cointegrated { loadings, .. } => loadings,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        match self {
            Self::Stationary { config: c, .. } => (c.n_units, c.pre_periods, c.post_periods),
            Self::Cointegrated { config: c, .. } => (c.n_units, c.pre_periods, c.post_periods),
        }
    }

    /// Observed-period factor paths, `(T+m) x 4` with columns
    /// `(eta, lambda1, lambda2, lambda3)`; `eta` is zero in the cointegrated model.
    pub fn factors(&self, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let (_, t, m) = self.dims();
        let periods = t + m;
        let mut out = DMatrix::zeros(periods, 4);
        match self {
            Self::Stationary { config: c, .. } => {
                let sd = c.factor_sd;
                let mut eta = c.eta_intercept / (1.0 - c.eta_ar);
                let mut l1 = 0.0;
                let mut nu2_prev = 0.0;
                let mut l3 = 0.0;
                let mut nu3_prev = 0.0;
                for s in 0..c.burn_in + periods {
                    let nu: [f64; 4] = std::array::from_fn(|_| sd * normal(rng));
                    eta = c.eta_intercept + c.eta_ar * eta + nu[0];
                    l1 = c.lambda1_ar * l1 + nu[1];
                    let l2 = c.lambda2_mean + nu[2] + c.lambda2_ma * nu2_prev;
                    nu2_prev = nu[2];
                    l3 = c.lambda3_ar * l3 + nu[3] + c.lambda3_ma * nu3_prev;
                    nu3_prev = nu[3];
                    if s >= c.burn_in {
                        out.row_mut(s - c.burn_in).copy_from_slice(&[eta, l1, l2, l3]);
                    }
                }
            }
            Self::Cointegrated { config: c, .. } => {
                let sd = c.factor_sd;
                let mut l3 = 0.0;
                for _ in 0..c.burn_in {
                    l3 = c.stationary_ar * l3 + sd * normal(rng);
                }
                let (mut l1, mut l2) = (0.0, 0.0);
                for s in 0..periods {
                    let nu: [f64; 3] = std::array::from_fn(|_| sd * normal(rng));
                    l1 += c.walk_scale * nu[0];
                    l2 += c.walk_scale * nu[1];
                    l3 = c.stationary_ar * l3 + nu[2];
                    out.row_mut(s).copy_from_slice(&[0.0, l1, l2, l3]);
                }
            }
        }
        out
    }

    /// Untreated outcomes `Y(0)` as an `N x (T+m)` panel.
    pub fn simulate(&self, seed: u64) -> Result<PanelData> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let factors = self.factors(&mut rng);
        let (n, t, m) = self.dims();
        let noise_sd = match self {
            Self::Stationary { config, .. } => config.noise_sd,
            Self::Cointegrated { config, .. } => config.noise_sd,
        };
        let mu = self.loadings();
        let mut y = DMatrix::zeros(n, t + m);
        for s in 0..t + m {
            let f = factors.row(s);
            for i in 0..n {
                let common = f[0] + f[1] * mu[(i, 0)] + f[2] * mu[(i, 1)] + f[3] * mu[(i, 2)];
                y[(i, s)] = common + noise_sd * normal(&mut rng);
            }
        }
        PanelData::from_matrix(y, t)
    }
}

pub fn simulate_stationary(config: &StationaryFactorConfig, seed: u64) -> Result<PanelData> {
    FactorModel::stationary(config.clone())?.simulate(seed)
}

pub fn simulate_cointegrated(config: &CointegratedFactorConfig, seed: u64) -> Result<PanelData> {
    FactorModel::cointegrated(config.clone())?.simulate(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    None,
    Concentrated,
    Spreadout,
    Custom,
}

impl PatternKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Concentrated => "concentrated",
            Self::Spreadout => "spreadout",
            Self::Custom => "custom",
        }
    }
}

/// Effects `alpha` added to every post-treatment column; unit 0 is treated.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectPattern {
    alpha: DVector<f64>,
    kind: PatternKind,
}

impl EffectPattern {
    pub fn custom(alpha: DVector<f64>) -> Result<Self> {
        if alpha.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("effect pattern entries must be finite".into()));
        }
        Ok(Self { alpha, kind: PatternKind::Custom })
    }

    /// Treated unit 0 gets `effect`; the first `affected` controls get `spillover`.
    fn leading(n: usize, affected: usize, effect: f64, spillover: f64, kind: PatternKind) -> Self {
        let alpha = DVector::from_fn(n, |i, _| match i {
            0 => effect,
            i if i <= affected => spillover,
            _ => 0.0,
        });
        Self { alpha, kind }
    }

    pub fn none(n: usize, effect: f64) -> Self {
        Self::leading(n, 0, effect, 0.0, PatternKind::None)
    }

    /// First `floor((N-1)/3)` controls receive the spillover.
    pub fn concentrated(n: usize, effect: f64, spillover: f64) -> Self {
        Self::leading(n, concentrated_count(n), effect, spillover, PatternKind::Concentrated)
    }

    /// First `floor(2(N-1)/3)` controls receive the spillover.
    pub fn spreadout(n: usize, effect: f64, spillover: f64) -> Self {
        Self::leading(n, spreadout_count(n), effect, spillover, PatternKind::Spreadout)
    }

    pub fn of_kind(kind: PatternKind, n: usize, effect: f64, spillover: f64) -> Result<Self> {
        match kind {
            PatternKind::None => Ok(Self::none(n, effect)),
            PatternKind::Concentrated => Ok(Self::concentrated(n, effect, spillover)),
            PatternKind::Spreadout => Ok(Self::spreadout(n, effect, spillover)),
            PatternKind::Custom => Err(Error::Config("custom pattern needs an explicit alpha vector".into())),
        }
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn kind(&self) -> PatternKind {
        self.kind
    }

    /// Control units with a nonzero effect.
    pub fn affected_controls(&self) -> Vec<usize> {
        (1..self.alpha.len()).filter(|&i| self.alpha[i] != 0.0).collect()
    }
}

pub fn concentrated_count(n: usize) -> usize {
    (n - 1) / 3
}

pub fn spreadout_count(n: usize) -> usize {
    2 * (n - 1) / 3
}

/// Adds `alpha` to every post-treatment column.
pub fn apply_effects(panel: &PanelData, pattern: &EffectPattern) -> Result<PanelData> {
    let n = panel.n_units();
    if pattern.alpha.len() != n {
        return Err(Error::Validation(format!(
            "effect pattern has {} entries, panel has {n} units",
            pattern.alpha.len()
        )));
    }
    let mut y = panel.outcomes().clone();
    for t in panel.pre_periods()..panel.n_periods() {
        let mut col = y.column_mut(t);
        col += &pattern.alpha;
    }
    panel.with_outcomes(y)
}

/// JSON description of a pattern for the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternSpec {
    pub kind: PatternKind,
    #[serde(default = "default_effect")]
    pub treatment_effect: f64,
    #[serde(default = "default_spillover")]
    pub spillover_effect: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
}

fn default_effect() -> f64 {
    5.0
}
fn default_spillover() -> f64 {
    3.0
}

impl Default for PatternSpec {
    fn default() -> Self {
        Self { kind: PatternKind::None, treatment_effect: 0.0, spillover_effect: 0.0, alpha: None }
    }
}

impl PatternSpec {
    pub fn build(&self, n: usize) -> Result<EffectPattern> {
        match (&self.alpha, self.kind) {
            (Some(a), PatternKind::Custom) => {
                if a.len() != n {
                    return Err(Error::Config(format!("alpha must have {n} entries, got {}", a.len())));
                }
                EffectPattern::custom(DVector::from_column_slice(a))
            }
            (Some(_), _) => Err(Error::Config("alpha is only allowed with kind \"custom\"".into())),
            (None, kind) => EffectPattern::of_kind(kind, n, self.treatment_effect, self.spillover_effect),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Stationary(StationaryFactorConfig),
    Cointegrated(CointegratedFactorConfig),
}

impl ModelSpec {
    pub fn build(&self) -> Result<FactorModel> {
        match self {
            Self::Stationary(c) => FactorModel::stationary(c.clone()),
            Self::Cointegrated(c) => FactorModel::cointegrated(c.clone()),
        }
    }
}

/// DGP config file consumed by `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSpec {
    pub model: ModelSpec,
    #[serde(default)]
    pub pattern: PatternSpec,
}

impl DgpSpec {
    /// Simulated panel with effects applied.
    pub fn simulate(&self, seed: u64) -> Result<PanelData> {
        let model = self.model.build()?;
        let panel = model.simulate(seed)?;
        let pattern = self.pattern.build(panel.n_units())?;
        apply_effects(&panel, &pattern)
    }
}

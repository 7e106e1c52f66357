//! Experiment runner: TOML configuration, dispatch and report files.
//!
//! A configuration has one-level sections `[experiment]`, `[market]`,
//! `[claim]`, `[constraint]`, `[driver]` and `[output]`. Runs write
//! `results.csv` (`name,value,stderr,method`) and `summary.txt` into the output
//! directory. Floats are printed in shortest round-trip form, so identical
//! configurations give byte-identical tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bsde::{
    solve_backward_euler_with, solve_linear, solve_picard, BsdeProblem, BsdeSolution,
    LinearDriverSpec, NodeSpec, PicardConfig,
};
use crate::market::{MarketModel, Scenario};
use crate::paths::{PathBundle, TimeGrid};
use crate::pricing::{self, ClaimSpec};
use crate::regression::{ConditionalExpectation, RegressionBasis};
use crate::stats;
use crate::utility::{self, ConstraintSet};
use crate::validation;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("numerical failure: {0}")]
    Numerical(#[from] crate::Error),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("validation failed: {0}")]
    Validation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) | CliError::Validation(_) => 1,
        }
    }
}

fn config_err(field: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paths: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    /// `polynomial` (default), `spline` or `bins`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub basis: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub basis_degree: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spline_knots: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ridge: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub control_grid: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wealth: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spot: Option<Vec<f64>>,
    /// `d × n` row-major.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<f64>>,
    /// `b - r1`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub excess: Option<Vec<f64>>,
    /// `b`; alternative to `excess`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub appreciation: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub borrow_rate: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaimSection {
    #[serde(rename = "type", skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub asset: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strike: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub face: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expression: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSection {
    #[serde(rename = "type", skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverSection {
    /// `linear`, `borrowing` or `min-linear`.
    #[serde(rename = "type", skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma2: Option<Vec<f64>>,
    /// Declared Lipschitz constant; defaults to the one implied by the data.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lipschitz: Option<f64>,
    /// `all`, `linear`, `backward-euler` or `picard`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub picard_weight: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub picard_max_iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub picard_tolerance: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub market: MarketSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub claim: Option<ClaimSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constraint: Option<ConstraintSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub driver: Option<DriverSection>,
    #[serde(default)]
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| config_err("toml", e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(s) = overrides.seed {
            self.experiment.seed = Some(s);
        }
        if let Some(p) = overrides.paths {
            self.experiment.paths = Some(p);
        }
        if let Some(k) = overrides.steps {
            self.experiment.steps = Some(k);
        }
        if let Some(o) = &overrides.out {
            self.output.dir = Some(o.display().to_string());
        }
    }
}

/// Command-line overrides of configuration values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Price,
    BorrowPrice,
    Utility,
    Solve,
    Validate,
}

impl Kind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "price" => Kind::Price,
            "borrow-price" => Kind::BorrowPrice,
            "utility" => Kind::Utility,
            "solve" => Kind::Solve,
            "validate" => Kind::Validate,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    All,
    Linear,
    BackwardEuler,
    Picard,
}

#[derive(Debug, Clone)]
pub enum DriverChoice {
    Linear(LinearDriverSpec),
    Borrowing,
    MinLinear(LinearDriverSpec, LinearDriverSpec),
}

#[derive(Debug, Clone)]
pub struct DriverSetup {
    pub choice: DriverChoice,
    pub lipschitz: Option<f64>,
    pub method: SolveMethod,
    pub picard: PicardConfig,
}

/// A configuration checked and turned into library objects.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub kind: Kind,
    pub seed: u64,
    pub paths: usize,
    pub steps: usize,
    pub horizon: f64,
    pub basis: RegressionBasis,
    pub control_grid: usize,
    pub wealth: f64,
    pub market: MarketModel,
    pub borrow_rate: Option<f64>,
    pub claim: Option<ClaimSpec>,
    pub constraint: Option<ConstraintSet>,
    pub driver: Option<DriverSetup>,
}

impl Resolved {
    pub fn grid(&self) -> crate::Result<TimeGrid> {
        TimeGrid::uniform(self.horizon, self.steps)
    }

    pub fn bundle(&self) -> crate::Result<PathBundle> {
        PathBundle::sample(&self.grid()?, self.market.n(), self.paths, self.seed)
    }
}

fn positive(field: &str, v: Option<f64>, default: Option<f64>) -> Result<f64, CliError> {
    let v = v.or(default).ok_or_else(|| config_err(field, "required"))?;
    if !(v > 0.0) || !v.is_finite() {
        return Err(config_err(field, format!("must be positive, got {v}")));
    }
    Ok(v)
}

fn resolve_market(m: &MarketSection) -> Result<MarketModel, CliError> {
    let rate = m
        .rate
        .ok_or_else(|| config_err("market.rate", "required"))?;
    let spot = m.spot.clone().unwrap_or_else(|| vec![1.0]);
    let d = m.d.unwrap_or(spot.len());
    let n = m.n.unwrap_or(d);
    if d == 0 || d > n {
        return Err(config_err(
            "market.d",
            format!("need 1 ≤ d ≤ n, got d={d}, n={n}"),
        ));
    }
    if spot.len() != d || spot.iter().any(|s| !(*s > 0.0)) {
        return Err(config_err(
            "market.spot",
            format!("need {d} positive prices"),
        ));
    }
    let sigma = m
        .sigma
        .clone()
        .ok_or_else(|| config_err("market.sigma", "required"))?;
    if sigma.len() != d * n {
        return Err(config_err(
            "market.sigma",
            format!("need {} entries (d×n row-major)", d * n),
        ));
    }
    let excess = match (&m.excess, &m.appreciation) {
        (Some(_), Some(_)) => {
            return Err(config_err(
                "market.excess",
                "give either excess or appreciation",
            ))
        }
        (Some(e), None) => e.clone(),
        (None, Some(b)) => b.iter().map(|x| x - rate).collect(),
        (None, None) => vec![0.0; d],
    };
    if excess.len() != d {
        return Err(config_err("market.excess", format!("need {d} entries")));
    }
    let model = MarketModel::constant(rate, excess, sigma, d, n)
        .map_err(|e| config_err("market", e.to_string()))?;
    Ok(model.with_initial_prices(spot))
}

fn expression_claim(expr: &str, d: usize) -> Result<ClaimSpec, CliError> {
    use evalexpr::{
        build_operator_tree, ContextWithMutableVariables, DefaultNumericTypes, HashMapContext,
        Value,
    };
    let tree = build_operator_tree::<DefaultNumericTypes>(expr)
        .map_err(|e| config_err("claim.expression", e.to_string()))?;
    let names: Vec<String> = (0..d).map(|i| format!("S{i}")).collect();
    for v in tree.iter_variable_identifiers() {
        if v != "S" && !names.iter().any(|n| n == v) {
            return Err(config_err(
                "claim.expression",
                format!("unknown variable `{v}`; use S or S0..S{}", d - 1),
            ));
        }
    }
    let tree = Arc::new(tree);
    let payoff: crate::bsde::PayoffFn = Arc::new(move |s: &[f64]| {
        let mut ctx = HashMapContext::<DefaultNumericTypes>::new();
        for (name, v) in names.iter().zip(s) {
            let _ = ctx.set_value(name.clone(), Value::Float(*v));
        }
        let _ = ctx.set_value("S".into(), Value::Float(s[0]));
        tree.eval_number_with_context(&ctx).unwrap_or(f64::NAN)
    });
    let probe = payoff(&vec![1.0; d]);
    if !probe.is_finite() {
        return Err(config_err(
            "claim.expression",
            "does not evaluate to a number",
        ));
    }
    Ok(ClaimSpec::new(expr.to_string(), payoff))
}

fn resolve_claim(c: &ClaimSection, d: usize) -> Result<ClaimSpec, CliError> {
    let kind = c
        .kind
        .as_deref()
        .ok_or_else(|| config_err("claim.type", "required"))?;
    let asset = c.asset.unwrap_or(0);
    if asset >= d {
        return Err(config_err("claim.asset", format!("must be below d = {d}")));
    }
    let strike = || {
        c.strike
            .ok_or_else(|| config_err("claim.strike", "required"))
    };
    Ok(match kind {
        "call" => ClaimSpec::call(asset, strike()?),
        "put" => ClaimSpec::put(asset, strike()?),
        "digital" => ClaimSpec::digital(asset, strike()?),
        "bond" => ClaimSpec::bond(c.face.unwrap_or(1.0)),
        "stock" => ClaimSpec::stock(asset),
        "expression" => {
            let e = c
                .expression
                .as_deref()
                .ok_or_else(|| config_err("claim.expression", "required"))?;
            expression_claim(e, d)?
        }
        other => return Err(config_err("claim.type", format!("unknown claim `{other}`"))),
    })
}

fn resolve_constraint(c: &ConstraintSection, d: usize) -> Result<ConstraintSet, CliError> {
    let kind = c
        .kind
        .as_deref()
        .ok_or_else(|| config_err("constraint.type", "required"))?;
    let need = |v: &Option<Vec<f64>>, f: &str| v.clone().ok_or_else(|| config_err(f, "required"));
    let set = match kind {
        "full" => ConstraintSet::FullSpace,
        "box" => ConstraintSet::Box {
            lower: need(&c.lower, "constraint.lower")?,
            upper: need(&c.upper, "constraint.upper")?,
        },
        "points" => ConstraintSet::FinitePointSet(
            c.points
                .clone()
                .ok_or_else(|| config_err("constraint.points", "required"))?,
        ),
        "ball" => ConstraintSet::Ball {
            center: need(&c.center, "constraint.center")?,
            radius: c
                .radius
                .ok_or_else(|| config_err("constraint.radius", "required"))?,
        },
        other => {
            return Err(config_err(
                "constraint.type",
                format!("unknown constraint `{other}`"),
            ))
        }
    };
    set.validate(d)
        .map_err(|e| config_err("constraint", e.to_string()))?;
    Ok(set)
}

fn resolve_driver(s: &DriverSection, n: usize) -> Result<DriverSetup, CliError> {
    let kind = s
        .kind
        .as_deref()
        .ok_or_else(|| config_err("driver.type", "required"))?;
    let linear = |phi: Option<f64>,
                  beta: Option<f64>,
                  gamma: &Option<Vec<f64>>,
                  suffix: &str|
     -> Result<LinearDriverSpec, CliError> {
        let gamma = gamma.clone().unwrap_or_else(|| vec![0.0; n]);
        if gamma.len() != n {
            return Err(config_err(
                &format!("driver.gamma{suffix}"),
                format!("need {n} entries"),
            ));
        }
        Ok(LinearDriverSpec::constant(
            phi.unwrap_or(0.0),
            beta.unwrap_or(0.0),
            gamma,
        ))
    };
    let choice = match kind {
        "linear" => DriverChoice::Linear(linear(s.phi, s.beta, &s.gamma, "")?),
        "borrowing" => DriverChoice::Borrowing,
        "min-linear" => DriverChoice::MinLinear(
            linear(s.phi, s.beta, &s.gamma, "")?,
            linear(s.phi2, s.beta2, &s.gamma2, "2")?,
        ),
        other => {
            return Err(config_err(
                "driver.type",
                format!("unknown driver `{other}`"),
            ))
        }
    };
    let method = match s.method.as_deref().unwrap_or("all") {
        "all" => SolveMethod::All,
        "linear" => SolveMethod::Linear,
        "backward-euler" => SolveMethod::BackwardEuler,
        "picard" => SolveMethod::Picard,
        other => {
            return Err(config_err(
                "driver.method",
                format!("unknown method `{other}`"),
            ))
        }
    };
    if let Some(c) = s.lipschitz {
        if !(c >= 0.0) {
            return Err(config_err("driver.lipschitz", "must be non-negative"));
        }
    }
    Ok(DriverSetup {
        choice,
        lipschitz: s.lipschitz,
        method,
        picard: PicardConfig {
            weight: s.picard_weight.unwrap_or(0.0),
            max_iterations: s.picard_max_iterations.unwrap_or(50),
            tolerance: s.picard_tolerance.unwrap_or(1e-10),
        },
    })
}

/// Checks a configuration and builds the objects it describes.
pub fn resolve(cfg: &ExperimentConfig) -> Result<Resolved, CliError> {
    let e = &cfg.experiment;
    let kind_name = e
        .kind
        .as_deref()
        .ok_or_else(|| config_err("experiment.kind", "required"))?;
    let kind = Kind::parse(kind_name).ok_or_else(|| {
        config_err(
            "experiment.kind",
            format!("unknown kind `{kind_name}`; expected price, borrow-price, utility, solve or validate"),
        )
    })?;
    let seed = e.seed.ok_or_else(|| {
        config_err(
            "experiment.seed",
            "required: every run needs an explicit seed",
        )
    })?;
    let paths = e
        .paths
        .ok_or_else(|| config_err("experiment.paths", "required"))?;
    let steps = e
        .steps
        .ok_or_else(|| config_err("experiment.steps", "required"))?;
    if paths == 0 {
        return Err(config_err("experiment.paths", "must be positive"));
    }
    if steps == 0 {
        return Err(config_err("experiment.steps", "must be positive"));
    }
    let horizon = positive("experiment.horizon", e.horizon, Some(1.0))?;
    let mut basis = match e.basis.as_deref().unwrap_or("polynomial") {
        "polynomial" => RegressionBasis::polynomial(e.basis_degree.unwrap_or(4)),
        "spline" => RegressionBasis::spline(e.spline_knots.unwrap_or(16)),
        "bins" => RegressionBasis::bins(e.bins.unwrap_or(32)),
        other => {
            return Err(config_err(
                "experiment.basis",
                format!("unknown basis `{other}`"),
            ))
        }
    };
    if let Some(r) = e.ridge {
        if !(r >= 0.0) {
            return Err(config_err("experiment.ridge", "must be non-negative"));
        }
        basis = basis.with_ridge(r);
    }
    let market = resolve_market(&cfg.market)?;
    let needed = basis.feature_count(market.d());
    if paths < needed {
        return Err(config_err(
            "experiment.paths",
            format!("{paths} paths cannot support {needed} regression features"),
        ));
    }
    let control_grid = e.control_grid.unwrap_or(21);
    if control_grid == 0 {
        return Err(config_err("experiment.control_grid", "must be positive"));
    }
    let wealth = positive("experiment.wealth", e.wealth, Some(1.0))?;
    let claim = cfg
        .claim
        .as_ref()
        .map(|c| resolve_claim(c, market.d()))
        .transpose()?;
    let constraint = cfg
        .constraint
        .as_ref()
        .map(|c| resolve_constraint(c, market.d()))
        .transpose()?;
    let driver = cfg
        .driver
        .as_ref()
        .map(|s| resolve_driver(s, market.n()))
        .transpose()?;
    let borrow_rate = cfg.market.borrow_rate;
    match kind {
        Kind::Price if claim.is_none() => {
            return Err(config_err("claim", "required for kind = price"))
        }
        Kind::BorrowPrice if claim.is_none() => {
            return Err(config_err("claim", "required for kind = borrow-price"))
        }
        Kind::BorrowPrice if borrow_rate.is_none() => {
            return Err(config_err(
                "market.borrow_rate",
                "required for kind = borrow-price",
            ))
        }
        Kind::Utility if constraint.is_none() => {
            return Err(config_err("constraint", "required for kind = utility"))
        }
        Kind::Solve if driver.is_none() => {
            return Err(config_err("driver", "required for kind = solve"))
        }
        Kind::Solve if claim.is_none() => {
            return Err(config_err("claim", "required for kind = solve"))
        }
        _ if matches!(
            driver,
            Some(DriverSetup {
                choice: DriverChoice::Borrowing,
                ..
            })
        ) && borrow_rate.is_none() =>
        {
            return Err(config_err(
                "market.borrow_rate",
                "required for the borrowing driver",
            ))
        }
        _ => {}
    }
    Ok(Resolved {
        kind,
        seed,
        paths,
        steps,
        horizon,
        basis,
        control_grid,
        wealth,
        market,
        borrow_rate,
        claim,
        constraint,
        driver,
    })
}

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub name: String,
    pub value: f64,
    pub stderr: Option<f64>,
    pub method: String,
}

impl ResultRow {
    pub fn new(name: &str, value: f64, stderr: Option<f64>, method: &str) -> Self {
        Self {
            name: name.into(),
            value,
            stderr,
            method: method.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub kind: Kind,
    pub seed: u64,
    pub version: &'static str,
    pub config_echo: String,
    pub rows: Vec<ResultRow>,
    pub wall_time: f64,
    /// Validation failures (empty for ordinary runs).
    pub failures: Vec<String>,
}

impl RunReport {
    pub fn results_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["name", "value", "stderr", "method"])
            .expect("in-memory write");
        for r in &self.rows {
            let se = r.stderr.map(|s| s.to_string()).unwrap_or_default();
            w.write_record([
                r.name.as_str(),
                &r.value.to_string(),
                &se,
                r.method.as_str(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "bsdelab {}", self.version);
        let _ = writeln!(s, "kind: {:?}", self.kind);
        let _ = writeln!(s, "seed: {}", self.seed);
        let _ = writeln!(s, "wall_time_seconds: {:.3}", self.wall_time);
        let _ = writeln!(s, "\nresults:");
        for r in &self.rows {
            match r.stderr {
                Some(se) => {
                    let _ = writeln!(
                        s,
                        "  {:<36} {:>14.6} ± {:.6}  [{}]",
                        r.name, r.value, se, r.method
                    );
                }
                None => {
                    let _ = writeln!(
                        s,
                        "  {:<36} {:>14.6}            [{}]",
                        r.name, r.value, r.method
                    );
                }
            }
        }
        if !self.failures.is_empty() {
            let _ = writeln!(s, "\nfailures:");
            for f in &self.failures {
                let _ = writeln!(s, "  {f}");
            }
        }
        let _ = writeln!(s, "\nconfig:\n{}", self.config_echo);
        s
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir).map_err(io)?;
        fs::write(dir.join("results.csv"), self.results_csv()).map_err(io)?;
        fs::write(dir.join("summary.txt"), self.summary()).map_err(io)?;
        Ok(())
    }
}

fn hedge_rows(
    rows: &mut Vec<ResultRow>,
    report: &pricing::PriceReport,
    xi: &[f64],
    scenario: &Scenario<'_>,
) -> crate::Result<()> {
    if let (Some(z), Some(_)) = (&report.z, &report.pi) {
        let replay = pricing::hedge_replay(report.price, z, xi, scenario)?;
        rows.push(ResultRow::new("hedge_rmse", replay.rmse, None, "replay"));
    }
    Ok(())
}

fn run_price(r: &Resolved, rows: &mut Vec<ResultRow>) -> crate::Result<()> {
    let claim = r.claim.as_ref().expect("checked in resolve");
    let bundle = r.bundle()?;
    let sc = r.market.scenario(&bundle)?;
    let ce = ConditionalExpectation::new(&sc, &r.basis)?;
    let fair = pricing::fair_price(claim, &ce)?;
    let emm = pricing::emm_price(claim, &sc)?;
    rows.push(ResultRow::new(
        "fair_price",
        fair.price,
        Some(fair.stderr),
        &fair.method,
    ));
    rows.push(ResultRow::new(
        "emm_price",
        emm.price,
        Some(emm.stderr),
        &emm.method,
    ));
    if let Some(w) = &fair.wealth {
        let se = fair.diagnostics.as_ref().map(|d| d.node_stderr[0]);
        rows.push(ResultRow::new(
            "wealth_y0",
            w.scalar(0, 0),
            se,
            "linear-adjoint",
        ));
    }
    let xi = claim.values(&sc)?;
    hedge_rows(rows, &fair, &xi, &sc)
}

fn run_borrow(r: &Resolved, rows: &mut Vec<ResultRow>) -> crate::Result<()> {
    let claim = r.claim.as_ref().expect("checked in resolve");
    let big = NodeSpec::scalar(r.borrow_rate.expect("checked in resolve"));
    let bundle = r.bundle()?;
    let sc = r.market.scenario(&bundle)?;
    let ce = ConditionalExpectation::new(&sc, &r.basis)?;
    let nonlinear = pricing::borrowing_price(claim, &big, &ce)?;
    let dual =
        pricing::borrowing_price_dual(claim, &big, &pricing::dual_grid(r.control_grid), &sc)?;
    let fair = pricing::deflator_price(claim, &sc)?;
    rows.push(ResultRow::new(
        "borrowing_price",
        nonlinear.price,
        Some(nonlinear.stderr),
        &nonlinear.method,
    ));
    rows.push(ResultRow::new(
        "borrowing_price_dual",
        dual.report.price,
        Some(dual.report.stderr),
        &dual.report.method,
    ));
    rows.push(ResultRow::new(
        "dual_best_beta",
        dual.best_beta(),
        None,
        "borrowing-dual",
    ));
    rows.push(ResultRow::new(
        "fair_price_lending_rate",
        fair.price,
        Some(fair.stderr),
        &fair.method,
    ));
    Ok(())
}

fn run_utility(r: &Resolved, rows: &mut Vec<ResultRow>) -> crate::Result<()> {
    let set = r.constraint.as_ref().expect("checked in resolve");
    let bundle = r.bundle()?;
    let sc = r.market.scenario(&bundle)?;
    let report = utility::log_utility_value(r.wealth, set, &sc)?;
    let logs = utility::terminal_log_wealth(r.wealth, &report.driver.rho, &sc)?;
    let (m, se) = stats::mean_and_stderr(&logs);
    rows.push(ResultRow::new(
        "value",
        report.value,
        Some(report.stderr),
        "driver-integral",
    ));
    rows.push(ResultRow::new(
        "optimal_log_wealth",
        m,
        Some(se),
        "wealth-replay",
    ));
    rows.push(ResultRow::new(
        "driver_bound",
        report.f_bound,
        None,
        "bound",
    ));
    rows.push(ResultRow::new(
        "fraction_bound",
        report.rho_bound,
        None,
        "bound",
    ));
    rows.push(ResultRow::new(
        "unconverged_projections",
        report.driver.unconverged as f64,
        None,
        "projected-gradient",
    ));
    Ok(())
}

/// The configured driver as a BSDE problem with terminal `claim`.
pub fn driver_problem(
    r: &Resolved,
    setup: &DriverSetup,
    claim: &ClaimSpec,
    scenario: &Scenario<'_>,
) -> BsdeProblem {
    let payoff = claim.payoff().clone();
    let problem = match &setup.choice {
        DriverChoice::Linear(spec) => spec.to_problem(payoff),
        DriverChoice::Borrowing => {
            let big = NodeSpec::scalar(r.borrow_rate.expect("checked in resolve"));
            let c = pricing::borrowing_lipschitz(scenario, &big);
            BsdeProblem::new(pricing::borrowing_driver(big), payoff, c).with_zero_bound(0.0)
        }
        DriverChoice::MinLinear(a, b) => {
            let (fa, fb) = (a.driver(), b.driver());
            BsdeProblem::new(
                Arc::new(move |ctx, y, z| fa(ctx, y, z).min(fb(ctx, y, z))),
                payoff,
                a.lipschitz().max(b.lipschitz()),
            )
            .with_zero_bound(a.phi.bound().max(b.phi.bound()))
        }
    };
    match setup.lipschitz {
        Some(c) => BsdeProblem::new(
            problem.driver_fn().clone(),
            problem.terminal_fn().clone(),
            c,
        )
        .with_zero_bound(problem.zero_bound()),
        None => problem,
    }
}

/// Stability precondition of the explicit scheme for the configured driver.
pub fn check_stability(r: &Resolved, problem: &BsdeProblem) -> crate::Result<()> {
    let h = r.horizon / r.steps as f64;
    if !(h * problem.lipschitz() < 1.0) {
        return Err(crate::Error::InvalidArgument(format!(
            "explicit step unstable: Δt·C = {:.4} ≥ 1; increase the number of steps",
            h * problem.lipschitz()
        )));
    }
    Ok(())
}

fn run_solve(r: &Resolved, rows: &mut Vec<ResultRow>) -> crate::Result<()> {
    let setup = r.driver.as_ref().expect("checked in resolve");
    let claim = r.claim.as_ref().expect("checked in resolve");
    let bundle = r.bundle()?;
    let sc = r.market.scenario(&bundle)?;
    let ce = ConditionalExpectation::new(&sc, &r.basis)?;
    let problem = driver_problem(r, setup, claim, &sc);
    let xi = claim.values(&sc)?;
    let push = |rows: &mut Vec<ResultRow>, name: &str, sol: &BsdeSolution| {
        rows.push(ResultRow::new(
            name,
            sol.y0(),
            Some(sol.y0_stderr()),
            &sol.diagnostics.method,
        ));
    };
    let all = setup.method == SolveMethod::All;
    if all || setup.method == SolveMethod::Linear {
        if let DriverChoice::Linear(spec) = &setup.choice {
            push(rows, "y0_linear", &solve_linear(spec, &xi, &ce)?);
        } else if setup.method == SolveMethod::Linear {
            return Err(crate::Error::invalid(
                "the linear solver needs a linear driver",
            ));
        }
    }
    if all || setup.method == SolveMethod::BackwardEuler {
        check_stability(r, &problem)?;
        push(
            rows,
            "y0_backward_euler",
            &solve_backward_euler_with(&problem, &xi, &ce)?,
        );
    }
    if all || setup.method == SolveMethod::Picard {
        let mut cfg = setup.picard;
        if cfg.weight <= 0.0 {
            let c = problem.lipschitz();
            cfg.weight = (4.0 * (2.0 + r.horizon) * c * c).max(1.0);
        }
        let sol = solve_picard(&problem, &cfg, &ce)?;
        rows.push(ResultRow::new(
            "picard_iterations",
            sol.diagnostics.iterations as f64,
            None,
            "picard",
        ));
        let worst = sol
            .diagnostics
            .contraction_ratios
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        rows.push(ResultRow::new("picard_max_ratio", worst, None, "picard"));
        rows.push(ResultRow::new(
            "picard_ratio_bound",
            cfg.contraction_bound(problem.lipschitz(), r.horizon),
            None,
            "picard",
        ));
        push(rows, "y0_picard", &sol);
    }
    Ok(())
}

/// Runs the experiment described by `cfg` with `overrides` applied.
pub fn run_config(cfg: &ExperimentConfig, overrides: &Overrides) -> Result<RunReport, CliError> {
    let mut cfg = cfg.clone();
    cfg.apply(overrides);
    let resolved = resolve(&cfg)?;
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    match resolved.kind {
        Kind::Price => run_price(&resolved, &mut rows)?,
        Kind::BorrowPrice => run_borrow(&resolved, &mut rows)?,
        Kind::Utility => run_utility(&resolved, &mut rows)?,
        Kind::Solve => run_solve(&resolved, &mut rows)?,
        Kind::Validate => failures = run_validation(&resolved, &mut rows)?,
    }
    Ok(RunReport {
        kind: resolved.kind,
        seed: resolved.seed,
        version: VERSION,
        config_echo: cfg.to_toml(),
        rows,
        wall_time: start.elapsed().as_secs_f64(),
        failures,
    })
}

fn run_validation(r: &Resolved, rows: &mut Vec<ResultRow>) -> crate::Result<Vec<String>> {
    let outcomes = validation::run_suites(r)?;
    let mut failures = Vec::new();
    for o in outcomes {
        let method = if o.passed { "pass" } else { "fail" };
        rows.push(ResultRow::new(&o.name, o.slack, None, method));
        if !o.passed {
            failures.push(format!("{}: {}", o.name, o.detail));
        }
    }
    Ok(failures)
}

fn output_dir(cfg: &ExperimentConfig, overrides: &Overrides) -> PathBuf {
    overrides
        .out
        .clone()
        .or_else(|| cfg.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

/// `run <config>`: writes the report files and returns the report.
pub fn run(path: &Path, overrides: &Overrides) -> Result<RunReport, CliError> {
    let cfg = ExperimentConfig::load(path)?;
    let report = run_config(&cfg, overrides)?;
    report.write(&output_dir(&cfg, overrides))?;
    if !report.failures.is_empty() {
        return Err(CliError::Validation(report.failures.join("; ")));
    }
    Ok(report)
}

/// `validate <config>`: runs the invariant suites on the configured market.
pub fn validate(path: &Path, overrides: &Overrides) -> Result<RunReport, CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.experiment.kind = Some("validate".into());
    let report = run_config(&cfg, overrides)?;
    report.write(&output_dir(&cfg, overrides))?;
    if !report.failures.is_empty() {
        return Err(CliError::Validation(report.failures.join("; ")));
    }
    Ok(report)
}

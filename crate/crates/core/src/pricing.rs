//! Claim pricing: deflator and risk-neutral prices with hedge extraction in
//! complete markets, and the market with a higher borrowing rate, priced by
//! its nonlinear BSDE and by the family of fictitious linear markets.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::bsde::{
    solve_backward_euler_with, solve_linear, BsdeProblem, Diagnostics, DriverFn, LinearDriverSpec,
    NodeSpec, PayoffFn,
};
use crate::linalg;
use crate::market::{deflator, emm_weights, NodeContext, Scenario};
use crate::paths::{dot, DiscreteProcess};
use crate::regression::ConditionalExpectation;
use crate::stats;
use crate::{Error, Result};

/// European claim paid at the horizon as a function of the risky prices.
#[derive(Clone)]
pub struct ClaimSpec {
    label: String,
    payoff: PayoffFn,
}

impl fmt::Debug for ClaimSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ClaimSpec({})", self.label)
    }
}

impl ClaimSpec {
    pub fn new(label: impl Into<String>, payoff: PayoffFn) -> Self {
        Self {
            label: label.into(),
            payoff,
        }
    }

    pub fn call(asset: usize, strike: f64) -> Self {
        Self::new(
            format!("call(S{asset}, {strike})"),
            Arc::new(move |s| (s[asset] - strike).max(0.0)),
        )
    }

    pub fn put(asset: usize, strike: f64) -> Self {
        Self::new(
            format!("put(S{asset}, {strike})"),
            Arc::new(move |s| (strike - s[asset]).max(0.0)),
        )
    }

    pub fn bond(face: f64) -> Self {
        Self::new(format!("bond({face})"), Arc::new(move |_| face))
    }

    pub fn digital(asset: usize, strike: f64) -> Self {
        Self::new(
            format!("digital(S{asset}, {strike})"),
            Arc::new(move |s| if s[asset] > strike { 1.0 } else { 0.0 }),
        )
    }

    pub fn stock(asset: usize) -> Self {
        Self::new(format!("stock(S{asset})"), Arc::new(move |s| s[asset]))
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn payoff(&self) -> &PayoffFn {
        &self.payoff
    }

    /// Payoff on every path; must be finite and non-negative.
    pub fn values(&self, scenario: &Scenario<'_>) -> Result<Vec<f64>> {
        let xi: Vec<f64> = (0..scenario.n_paths())
            .into_par_iter()
            .map(|p| (self.payoff)(scenario.terminal_risky(p)))
            .collect();
        if let Some(p) = xi.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "claim {} is not finite on path {p}",
                self.label
            )));
        }
        if let Some(p) = xi.iter().position(|v| *v < 0.0) {
            return Err(Error::Data(format!(
                "claim {} is negative on path {p}",
                self.label
            )));
        }
        let second = xi.iter().map(|v| v * v).sum::<f64>();
        if !second.is_finite() {
            return Err(Error::Data(format!(
                "claim {} has no finite second moment",
                self.label
            )));
        }
        Ok(xi)
    }
}

#[derive(Debug, Clone)]
pub struct PriceReport {
    pub price: f64,
    pub stderr: f64,
    pub method: String,
    /// Wealth (value) process when a BSDE was solved.
    pub wealth: Option<DiscreteProcess>,
    /// `Z = σ*π`.
    pub z: Option<DiscreteProcess>,
    /// Amounts invested in each risky asset, `π = (σ*)⁻¹Z`, when `σ` is square.
    pub pi: Option<DiscreteProcess>,
    pub diagnostics: Option<Diagnostics>,
}

impl PriceReport {
    fn sample(method: &str, samples: &[f64]) -> Self {
        let (price, stderr) = stats::mean_and_stderr(samples);
        Self {
            price,
            stderr,
            method: method.into(),
            wealth: None,
            z: None,
            pi: None,
            diagnostics: None,
        }
    }
}

fn rate_spec(scenario: &Scenario<'_>, scale: f64) -> NodeSpec {
    if scenario.model().is_constant() {
        NodeSpec::scalar(scale * scenario.rate().at(0, 0)[0])
    } else {
        NodeSpec::dynamic(
            1,
            scenario.model().bounds().rate,
            Arc::new(move |ctx, out| out[0] = scale * ctx.rate),
        )
    }
}

fn premium_bound(scenario: &Scenario<'_>) -> f64 {
    let b = scenario.model().bounds();
    if b.ellipticity_lower > 0.0 {
        b.excess / b.ellipticity_lower
    } else {
        f64::INFINITY
    }
}

fn premium_spec(scenario: &Scenario<'_>, scale: f64) -> NodeSpec {
    if scenario.model().is_constant() {
        NodeSpec::Constant(
            scenario
                .theta()
                .at(0, 0)
                .iter()
                .map(|x| scale * x)
                .collect(),
        )
    } else {
        let n = scenario.model().n();
        NodeSpec::dynamic(
            n,
            premium_bound(scenario),
            Arc::new(move |ctx, out| {
                for (o, t) in out.iter_mut().zip(ctx.theta) {
                    *o = scale * t;
                }
            }),
        )
    }
}

/// The wealth equation as a linear BSDE: `φ = 0`, `β = -r`, `γ = -θ`.
pub fn wealth_driver(scenario: &Scenario<'_>) -> LinearDriverSpec {
    LinearDriverSpec {
        phi: NodeSpec::scalar(0.0),
        beta: rate_spec(scenario, -1.0),
        gamma: premium_spec(scenario, -1.0),
    }
}

/// `π = (σ*)⁻¹Z` at every node; `None` when `σ` is not square or singular.
fn portfolio(scenario: &Scenario<'_>, z: &DiscreteProcess) -> Option<DiscreteProcess> {
    let model = scenario.model();
    if !model.is_complete() {
        return None;
    }
    let n = model.n();
    let grid = scenario.bundle().grid_arc().clone();
    let pi = DiscreteProcess::from_node_fn(grid, n, scenario.n_paths(), |p, k, out| {
        let sigma = scenario.sigma().at(p, k);
        let mut st = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                st[j * n + i] = sigma[i * n + j];
            }
        }
        match linalg::solve_square(&st, n, z.at(p, k)) {
            Some(v) => out.copy_from_slice(&v),
            None => out.iter_mut().for_each(|x| *x = f64::NAN),
        }
    });
    pi.values().iter().all(|v| v.is_finite()).then_some(pi)
}

/// `𝔭(ξ) = E[ξ H⁰_T]`, with the wealth process and hedge from the linear
/// BSDE of the wealth equation.
pub fn fair_price(claim: &ClaimSpec, ce: &ConditionalExpectation<'_>) -> Result<PriceReport> {
    let scenario = ce.scenario();
    let xi = claim.values(scenario)?;
    let h = deflator(scenario, 0)?.terminal();
    let samples: Vec<f64> = xi.iter().zip(&h).map(|(a, b)| a * b).collect();
    let mut report = PriceReport::sample("deflator", &samples);
    let sol = solve_linear(&wealth_driver(scenario), &xi, ce)?;
    report.pi = portfolio(scenario, &sol.z);
    report.wealth = Some(sol.y);
    report.z = Some(sol.z);
    report.diagnostics = Some(sol.diagnostics);
    Ok(report)
}

/// Deflator price only, without a regression solve.
pub fn deflator_price(claim: &ClaimSpec, scenario: &Scenario<'_>) -> Result<PriceReport> {
    let xi = claim.values(scenario)?;
    let h = deflator(scenario, 0)?.terminal();
    let samples: Vec<f64> = xi.iter().zip(&h).map(|(a, b)| a * b).collect();
    Ok(PriceReport::sample("deflator", &samples))
}

/// `E^Q[e^{-∫r} ξ]` with `dQ/dP` from [`emm_weights`].
pub fn emm_price(claim: &ClaimSpec, scenario: &Scenario<'_>) -> Result<PriceReport> {
    let xi = claim.values(scenario)?;
    let q = emm_weights(scenario);
    let disc = scenario.discount_factors();
    let samples: Vec<f64> = xi
        .iter()
        .zip(&q)
        .zip(&disc)
        .map(|((x, w), d)| w * d * x)
        .collect();
    Ok(PriceReport::sample("emm", &samples))
}

fn check_borrowing_rate(scenario: &Scenario<'_>, borrow: &NodeSpec) -> Result<()> {
    if borrow.dim() != 1 {
        return Err(Error::invalid("borrowing rate must be scalar"));
    }
    if !scenario.model().is_complete() {
        return Err(Error::invalid("the borrowing market needs d = n"));
    }
    let steps = scenario.steps();
    let bad = (0..scenario.n_paths()).into_par_iter().find_map_first(|p| {
        (0..steps).find_map(|k| {
            let ctx = scenario.context(p, k);
            let r_big = borrow.eval_scalar(&ctx);
            (!(r_big >= ctx.rate)).then_some((p, k, r_big, ctx.rate))
        })
    });
    if let Some((p, k, big, r)) = bad {
        return Err(Error::InvalidArgument(format!(
            "borrowing rate {big} is below the lending rate {r} at node {k} of path {p}"
        )));
    }
    Ok(())
}

fn inverse_ones(ctx: &NodeContext<'_>) -> Vec<f64> {
    ctx.sigma_inverse_ones()
        .unwrap_or_else(|| vec![f64::NAN; ctx.n])
}

/// `b(t, y, z) = -r y - θ·z + (R - r)(y - (σ⁻¹1)·z)⁻`.
pub fn borrowing_driver(borrow: NodeSpec) -> DriverFn {
    Arc::new(move |ctx, y, z| {
        let r_big = borrow.eval_scalar(ctx);
        let s = inverse_ones(ctx);
        let short = (y - dot(&s, z)).min(0.0);
        -ctx.rate * y - dot(ctx.theta, z) - (r_big - ctx.rate) * short
    })
}

/// Lipschitz constant of [`borrowing_driver`] under `|δy| + |δz|`.
pub(crate) fn borrowing_lipschitz(scenario: &Scenario<'_>, borrow: &NodeSpec) -> f64 {
    let steps = scenario.steps();
    let per_path: Vec<f64> = (0..scenario.n_paths())
        .into_par_iter()
        .map(|p| {
            (0..steps)
                .map(|k| {
                    let ctx = scenario.context(p, k);
                    let spread = borrow.eval_scalar(&ctx) - ctx.rate;
                    let s = linalg::norm(&inverse_ones(&ctx));
                    (ctx.rate.abs() + spread).max(linalg::norm(ctx.theta) + spread * s)
                })
                .fold(0.0, f64::max)
        })
        .collect();
    per_path.into_iter().fold(0.0, f64::max)
}

/// Price in the market where borrowing costs `R ≥ r`, as `Y₀` of the BSDE
/// with driver [`borrowing_driver`].
pub fn borrowing_price(
    claim: &ClaimSpec,
    borrow: &NodeSpec,
    ce: &ConditionalExpectation<'_>,
) -> Result<PriceReport> {
    let scenario = ce.scenario();
    check_borrowing_rate(scenario, borrow)?;
    let xi = claim.values(scenario)?;
    let problem = BsdeProblem::new(
        borrowing_driver(borrow.clone()),
        claim.payoff().clone(),
        borrowing_lipschitz(scenario, borrow),
    )
    .with_zero_bound(0.0);
    let sol = solve_backward_euler_with(&problem, &xi, ce)?;
    Ok(PriceReport {
        price: sol.y0(),
        stderr: sol.y0_stderr(),
        method: "borrowing-bsde".into(),
        pi: portfolio(scenario, &sol.z),
        wealth: Some(sol.y),
        z: Some(sol.z),
        diagnostics: Some(sol.diagnostics),
    })
}

#[derive(Debug, Clone)]
pub struct DualPriceReport {
    pub report: PriceReport,
    /// Fractions `λ` of the grid; `β = -r - λ(R - r)`.
    pub lambdas: Vec<f64>,
    /// `β` at the first node of the first path for each grid point.
    pub betas: Vec<f64>,
    pub prices: Vec<f64>,
    pub stderrs: Vec<f64>,
    pub best: usize,
}

impl DualPriceReport {
    pub fn best_beta(&self) -> f64 {
        self.betas[self.best]
    }
}

/// `n` equally spaced fractions in `[0, 1]` (`{0}` when `n = 1`).
pub fn dual_grid(points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..points)
            .map(|i| i as f64 / (points - 1) as f64)
            .collect(),
    }
}

/// `sup_λ E[Γ^λ_T ξ]` over fictitious markets with short rate `-β`,
/// `β = -r - λ(R - r)`, and `Γ^λ = E(∫β dt - ∫(θ + (β + r)σ⁻¹1)·dW)`.
/// For constant rates this is the grid of constant `β ∈ [-R, -r]`; `λ = 0`
/// reproduces the deflator price exactly.
pub fn borrowing_price_dual(
    claim: &ClaimSpec,
    borrow: &NodeSpec,
    lambdas: &[f64],
    scenario: &Scenario<'_>,
) -> Result<DualPriceReport> {
    if lambdas.is_empty() {
        return Err(Error::invalid("dual grid is empty"));
    }
    if lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(Error::invalid("dual fractions must lie in [0, 1]"));
    }
    check_borrowing_rate(scenario, borrow)?;
    let xi = claim.values(scenario)?;
    let grid = scenario.bundle().grid();
    let n = scenario.model().n();
    let results: Vec<(f64, f64, f64)> = lambdas
        .par_iter()
        .map(|&lambda| {
            let beta0 = {
                let ctx = scenario.context(0, 0);
                -ctx.rate - lambda * (borrow.eval_scalar(&ctx) - ctx.rate)
            };
            let samples: Vec<f64> = (0..scenario.n_paths())
                .into_par_iter()
                .map(|p| {
                    let dw = scenario.bundle().path_increments(p);
                    let mut gamma = vec![0.0; n];
                    let mut log = 0.0;
                    for k in 0..grid.steps() {
                        let ctx = scenario.context(p, k);
                        let spread = borrow.eval_scalar(&ctx) - ctx.rate;
                        let beta = -ctx.rate - lambda * spread;
                        let s = inverse_ones(&ctx);
                        for j in 0..n {
                            gamma[j] = -ctx.theta[j] + lambda * spread * s[j];
                        }
                        log += (beta - 0.5 * dot(&gamma, &gamma)) * grid.dt(k)
                            + dot(&gamma, &dw[k * n..(k + 1) * n]);
                    }
                    xi[p] * log.exp()
                })
                .collect();
            let (m, se) = stats::mean_and_stderr(&samples);
            (beta0, m, se)
        })
        .collect();
    let mut best = 0;
    for (i, r) in results.iter().enumerate() {
        if r.1 > results[best].1 {
            best = i;
        }
    }
    let prices: Vec<f64> = results.iter().map(|r| r.1).collect();
    let stderrs: Vec<f64> = results.iter().map(|r| r.2).collect();
    Ok(DualPriceReport {
        report: PriceReport {
            price: prices[best],
            stderr: stderrs[best],
            method: "borrowing-dual".into(),
            wealth: None,
            z: None,
            pi: None,
            diagnostics: None,
        },
        lambdas: lambdas.to_vec(),
        betas: results.iter().map(|r| r.0).collect(),
        prices,
        stderrs,
        best,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HedgeReplay {
    pub terminal_wealth: Vec<f64>,
    /// Root mean square of `X_T - ξ`.
    pub rmse: f64,
    pub mean_error: f64,
}

/// Runs the self-financing wealth equation
/// `X_{k+1} = X_k + r_k X_k Δt_k + Z_k·(ΔW_k + θ_k Δt_k)` forward from `x0`
/// with the hedge `Z = σ*π` evaluated at the left endpoint.
pub fn hedge_replay(
    x0: f64,
    z: &DiscreteProcess,
    xi: &[f64],
    scenario: &Scenario<'_>,
) -> Result<HedgeReplay> {
    let bundle = scenario.bundle();
    if !z.same_grid(bundle.grid()) || z.n_paths() != bundle.n_paths() || z.dim() != bundle.dim() {
        return Err(Error::invalid("hedge process does not match the scenario"));
    }
    if xi.len() != bundle.n_paths() {
        return Err(Error::Dimension(
            "one terminal value per path expected".into(),
        ));
    }
    let grid = bundle.grid();
    let terminal: Vec<f64> = (0..bundle.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut x = x0;
            for k in 0..grid.steps() {
                let h = grid.dt(k);
                let zk = z.at(p, k);
                let ctx = scenario.context(p, k);
                let dw = bundle.increment(p, k);
                let excess: f64 = zk
                    .iter()
                    .zip(dw)
                    .zip(ctx.theta)
                    .map(|((zj, w), t)| zj * (w + t * h))
                    .sum();
                x += ctx.rate * x * h + excess;
            }
            x
        })
        .collect();
    let errors: Vec<f64> = terminal.iter().zip(xi).map(|(a, b)| a - b).collect();
    Ok(HedgeReplay {
        rmse: stats::rms(&errors),
        mean_error: stats::mean(&errors),
        terminal_wealth: terminal,
    })
}

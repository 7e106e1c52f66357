//! Invariant suites run by `validate` at the configured scale.
//!
//! Statistical checks use multiples of the measured standard error, so a
//! smaller path count widens the tolerance by `1/√n` automatically. Slack is
//! `tolerance - observed`; a suite passes when its slack is non-negative.

use std::sync::Arc;

use crate::bsde::{
    apriori_gap, solve_backward_euler_with, solve_linear, solve_picard, BsdeProblem,
    LinearDriverSpec, PayoffFn, PicardConfig,
};
use crate::cli::{driver_problem, DriverChoice, Resolved};
use crate::concave::essinf_envelope;
use crate::market::{deflator, Scenario};
use crate::paths::DiscreteProcess;
use crate::pricing::{self, ClaimSpec};
use crate::regression::{ConditionalExpectation, RegressionBasis};
use crate::stats;
use crate::utility;
use crate::Result;

/// Multiple of the standard error used by statistical checks.
pub const SE_MULTIPLE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOutcome {
    pub name: String,
    pub passed: bool,
    pub slack: f64,
    pub detail: String,
}

impl SuiteOutcome {
    fn new(name: &str, slack: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            passed: slack >= 0.0,
            slack,
            detail,
        }
    }
}

fn increment_moments(sc: &Scenario<'_>) -> SuiteOutcome {
    let bundle = sc.bundle();
    let grid = bundle.grid();
    let n = bundle.dim();
    let mut worst = f64::INFINITY;
    let mut detail = String::new();
    for j in 0..n {
        let k = grid.steps() - 1;
        let dt = grid.dt(k);
        let xs: Vec<f64> = (0..bundle.n_paths())
            .map(|p| bundle.increment(p, k)[j] / dt.sqrt())
            .collect();
        let (m, se) = stats::mean_and_stderr(&xs);
        let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let (v, se_v) = stats::mean_and_stderr(&sq);
        let slack = (SE_MULTIPLE * se - m.abs()).min(SE_MULTIPLE * se_v - (v - 1.0).abs());
        if slack < worst {
            worst = slack;
            detail = format!("component {j}: mean {m:.4}, variance {v:.4}");
        }
    }
    SuiteOutcome::new("paths.increment_moments", worst, detail)
}

fn ellipticity(r: &Resolved) -> Result<SuiteOutcome> {
    let e = r.market.validate_ellipticity(r.horizon, 1000, r.seed)?;
    let slack = (e.min_singular - e.declared_lower).min(e.declared_upper - e.max_singular);
    Ok(SuiteOutcome::new(
        "market.ellipticity",
        slack,
        format!(
            "singular values in [{:.4}, {:.4}]",
            e.min_singular, e.max_singular
        ),
    ))
}

/// `E[H_T P_T] = P_0` for the bond and every stock.
fn deflator_martingale(sc: &Scenario<'_>) -> Result<SuiteOutcome> {
    let h = deflator(sc, 0)?.terminal();
    let bonds = sc.discount_factors();
    let bond: Vec<f64> = h.iter().zip(&bonds).map(|(h, b)| h / b).collect();
    let (m, se) = stats::mean_and_stderr(&bond);
    let mut worst = SE_MULTIPLE * se - (m - 1.0).abs();
    let mut detail = format!("bond {m:.5}");
    let p0 = sc.model().initial_prices().to_vec();
    for (i, p0i) in p0.iter().enumerate() {
        let xs: Vec<f64> = h
            .iter()
            .enumerate()
            .map(|(p, hp)| hp * sc.terminal_risky(p)[i] / p0i)
            .collect();
        let (m, se) = stats::mean_and_stderr(&xs);
        let slack = SE_MULTIPLE * se - (m - 1.0).abs();
        if slack < worst {
            worst = slack;
            detail = format!("asset {i}: {m:.5}");
        }
    }
    Ok(SuiteOutcome::new(
        "market.deflator_martingale",
        worst,
        detail,
    ))
}

fn test_claim(r: &Resolved) -> ClaimSpec {
    r.claim.clone().unwrap_or_else(|| {
        let spot = r.market.initial_prices()[0];
        ClaimSpec::call(0, spot)
    })
}

fn test_spec(sc: &Scenario<'_>, phi: f64) -> LinearDriverSpec {
    let rate = sc.rate().at(0, 0)[0];
    let theta: Vec<f64> = sc.theta().at(0, 0).iter().map(|t| -t).collect();
    LinearDriverSpec::constant(phi, -rate, theta)
}

/// Linear adjoint, backward Euler and Picard on a linear problem.
fn solver_agreement(
    r: &Resolved,
    ce: &ConditionalExpectation<'_>,
    xi: &[f64],
    payoff: &PayoffFn,
) -> Result<Vec<SuiteOutcome>> {
    let sc = ce.scenario();
    let spec = test_spec(sc, 0.1 * stats::mean(xi).abs().max(1.0));
    let problem = spec.to_problem(payoff.clone());
    let linear = solve_linear(&spec, xi, ce)?;
    let euler = solve_backward_euler_with(&problem, xi, ce)?;
    let c = problem.lipschitz();
    let step = r.horizon / r.steps as f64;
    let scale = linear.y0().abs().max(1.0);
    let tol = SE_MULTIPLE * (linear.y0_stderr() + euler.y0_stderr()) + c * step * scale;
    let gap = (linear.y0() - euler.y0()).abs();
    let mut out = vec![SuiteOutcome::new(
        "bsde.solver_agreement",
        tol - gap,
        format!(
            "linear {:.5}, backward Euler {:.5}",
            linear.y0(),
            euler.y0()
        ),
    )];

    let weight = (4.0 * (2.0 + r.horizon) * c * c).max(1.0);
    let cfg = PicardConfig {
        weight,
        max_iterations: 50,
        tolerance: 1e-10 * scale * scale,
    };
    let picard = solve_picard(&problem, &cfg, ce)?;
    let bound = cfg.contraction_bound(c, r.horizon) + 0.1;
    let worst = picard
        .diagnostics
        .contraction_ratios
        .iter()
        .cloned()
        .fold(0.0, f64::max);
    out.push(SuiteOutcome::new(
        "bsde.picard_contraction",
        bound - worst,
        format!("max ratio {worst:.4} against {bound:.4}"),
    ));
    Ok(out)
}

/// Ordered data give ordered solutions at every node.
fn comparison(
    ce: &ConditionalExpectation<'_>,
    xi: &[f64],
    payoff: &PayoffFn,
) -> Result<SuiteOutcome> {
    let sc = ce.scenario();
    let low = test_spec(sc, 0.0).to_problem(payoff.clone());
    let high = test_spec(sc, 0.05).to_problem(payoff.clone());
    let shifted: Vec<f64> = xi.iter().map(|x| x + 0.01).collect();
    let y_low = solve_backward_euler_with(&low, xi, ce)?;
    let y_high = solve_backward_euler_with(&high, &shifted, ce)?;
    let mut worst = f64::INFINITY;
    let mut at = 0;
    for k in 0..=sc.steps() {
        let se = y_low.diagnostics.node_stderr[k].max(y_high.diagnostics.node_stderr[k]);
        for p in 0..sc.n_paths() {
            let s = y_high.y.scalar(p, k) - y_low.y.scalar(p, k) + 3.0 * se;
            if s < worst {
                worst = s;
                at = k;
            }
        }
    }
    Ok(SuiteOutcome::new(
        "bsde.comparison",
        worst,
        format!("tightest at node {at}"),
    ))
}

fn apriori(ce: &ConditionalExpectation<'_>, xi: &[f64], payoff: &PayoffFn) -> Result<SuiteOutcome> {
    let sc = ce.scenario();
    let first = test_spec(sc, 0.0);
    let second = test_spec(sc, 0.1);
    let p1 = first.to_problem(payoff.clone());
    let p2 = second.to_problem(Arc::new({
        let payoff = payoff.clone();
        move |s| payoff(s) * 1.05
    }));
    let xi2: Vec<f64> = xi.iter().map(|x| x * 1.05).collect();
    let s1 = solve_linear(&first, xi, ce)?;
    let s2 = solve_linear(&second, &xi2, ce)?;
    let c = p1.lipschitz();
    let report = apriori_gap(&s1, &s2, &p1, &p2, c * (2.0 + c) + 1.0, sc)?;
    Ok(SuiteOutcome::new(
        "bsde.apriori_estimates",
        report.slack_y().min(report.slack_z()),
        format!(
            "slack y {:.4e}, slack z {:.4e}",
            report.slack_y(),
            report.slack_z()
        ),
    ))
}

fn price_agreement(claim: &ClaimSpec, sc: &Scenario<'_>) -> Result<SuiteOutcome> {
    let fair = pricing::deflator_price(claim, sc)?;
    let emm = pricing::emm_price(claim, sc)?;
    let tol = SE_MULTIPLE * (fair.stderr + emm.stderr) + 1e-12 * fair.price.abs();
    Ok(SuiteOutcome::new(
        "pricing.measure_agreement",
        tol - (fair.price - emm.price).abs(),
        format!("deflator {:.5}, risk neutral {:.5}", fair.price, emm.price),
    ))
}

fn borrowing(
    r: &Resolved,
    claim: &ClaimSpec,
    ce: &ConditionalExpectation<'_>,
) -> Result<SuiteOutcome> {
    let big = crate::bsde::NodeSpec::scalar(r.borrow_rate.expect("caller checks"));
    let primal = pricing::borrowing_price(claim, &big, ce)?;
    let dual = pricing::borrowing_price_dual(
        claim,
        &big,
        &pricing::dual_grid(r.control_grid),
        ce.scenario(),
    )?;
    let tol = 0.01 * primal.price.abs() + 3.0 * (primal.stderr + dual.report.stderr);
    Ok(SuiteOutcome::new(
        "pricing.borrowing_duality",
        tol - (primal.price - dual.report.price).abs(),
        format!("bsde {:.5}, dual {:.5}", primal.price, dual.report.price),
    ))
}

fn envelope(
    ce: &ConditionalExpectation<'_>,
    xi: &[f64],
    payoff: &PayoffFn,
) -> Result<SuiteOutcome> {
    let sc = ce.scenario();
    let a = test_spec(sc, 0.0);
    let mut b = test_spec(sc, 0.02);
    b.beta = crate::bsde::NodeSpec::scalar(-sc.rate().at(0, 0)[0] - 0.05);
    let (fa, fb) = (a.driver(), b.driver());
    let problem = BsdeProblem::new(
        Arc::new(move |ctx, y, z| fa(ctx, y, z).min(fb(ctx, y, z))),
        payoff.clone(),
        a.lipschitz().max(b.lipschitz()),
    );
    let direct = solve_backward_euler_with(&problem, xi, ce)?;
    let env = essinf_envelope(xi, &[a, b], ce)?;
    let tol = 0.01 * direct.y0().abs() + SE_MULTIPLE * direct.y0_stderr();
    Ok(SuiteOutcome::new(
        "concave.envelope",
        tol - (env.y0() - direct.y0()).abs(),
        format!("envelope {:.5}, direct {:.5}", env.y0(), direct.y0()),
    ))
}

fn utility_suites(r: &Resolved, sc: &Scenario<'_>) -> Result<Vec<SuiteOutcome>> {
    let set = r.constraint.as_ref().expect("caller checks");
    let report = utility::log_utility_value(r.wealth, set, sc)?;
    let mut worst_feasible = f64::INFINITY;
    for p in 0..sc.n_paths().min(256) {
        for k in 0..sc.steps() {
            let c = report.driver.fraction.at(p, k);
            let inside = if set.contains(c, 1e-6) { 0.0 } else { -1.0 };
            worst_feasible = worst_feasible.min(inside);
        }
    }
    let mut out = vec![SuiteOutcome::new(
        "utility.feasible_optimum",
        worst_feasible,
        format!("{} unconverged projections", report.driver.unconverged),
    )];
    let logs = utility::terminal_log_wealth(r.wealth, &report.driver.rho, sc)?;
    let (best, _) = stats::mean_and_stderr(&logs);
    let (d, n) = (sc.model().d(), sc.model().n());
    let mut worst = f64::INFINITY;
    for shift in [0.5, 0.9, 1.1, 1.5] {
        // Scaled optimal fractions pulled back into the set.
        let perturbed = DiscreteProcess::from_node_fn(
            sc.bundle().grid_arc().clone(),
            n,
            sc.n_paths(),
            |p, k, out| {
                if k < sc.steps() {
                    let c: Vec<f64> = report
                        .driver
                        .fraction
                        .at(p, k)
                        .iter()
                        .map(|x| x * shift)
                        .collect();
                    let rho =
                        crate::linalg::transpose_apply(sc.sigma().at(p, k), d, n, &set.project(&c));
                    out.copy_from_slice(&rho);
                }
            },
        );
        let alt = utility::terminal_log_wealth(r.wealth, &perturbed, sc)?;
        let diff: Vec<f64> = alt.iter().zip(&logs).map(|(a, b)| a - b).collect();
        let (m, se) = stats::mean_and_stderr(&diff);
        worst = worst.min(3.0 * se - m);
    }
    out.push(SuiteOutcome::new(
        "utility.optimality",
        worst,
        format!("optimal E log X_T {best:.5}"),
    ));
    Ok(out)
}

/// Runs every suite applicable to the configuration, in a fixed order.
///
/// A configured driver that violates the explicit-scheme stability
/// precondition is reported as an error rather than a failed suite.
pub fn run_suites(r: &Resolved) -> Result<Vec<SuiteOutcome>> {
    let bundle = r.bundle()?;
    let sc = r.market.scenario(&bundle)?;
    let ce = ConditionalExpectation::new(&sc, &r.basis)?;
    let claim = test_claim(r);
    let xi = claim.values(&sc)?;
    let payoff = claim.payoff().clone();

    let mut out = vec![
        increment_moments(&sc),
        ellipticity(r)?,
        deflator_martingale(&sc)?,
    ];
    if let Some(setup) = &r.driver {
        let problem = driver_problem(r, setup, &claim, &sc);
        let sol = solve_backward_euler_with(&problem, &xi, &ce)?;
        let standard = problem.check_standard(&sc, 1000, 10.0 * sol.y0().abs().max(1.0), r.seed);
        out.push(SuiteOutcome::new(
            "bsde.configured_driver_standard",
            1.05 * standard.declared_lipschitz - standard.max_difference_ratio,
            format!(
                "observed Lipschitz ratio {:.4}",
                standard.max_difference_ratio
            ),
        ));
        if let DriverChoice::Linear(spec) = &setup.choice {
            let linear = solve_linear(spec, &xi, &ce)?;
            let tol = SE_MULTIPLE * (linear.y0_stderr() + sol.y0_stderr())
                + problem.lipschitz() * r.horizon / r.steps as f64 * linear.y0().abs().max(1.0);
            out.push(SuiteOutcome::new(
                "bsde.configured_driver_agreement",
                tol - (linear.y0() - sol.y0()).abs(),
                format!("linear {:.5}, backward Euler {:.5}", linear.y0(), sol.y0()),
            ));
        }
    }
    out.extend(solver_agreement(r, &ce, &xi, &payoff)?);
    // Ordering is checked under the order-preserving bin projection.
    let ordered = ConditionalExpectation::new(&sc, &RegressionBasis::bins(32.min(r.paths)))?;
    out.push(comparison(&ordered, &xi, &payoff)?);
    out.push(apriori(&ce, &xi, &payoff)?);
    out.push(envelope(&ce, &xi, &payoff)?);
    out.push(price_agreement(&claim, &sc)?);
    if r.borrow_rate.is_some() && r.market.d() == r.market.n() {
        out.push(borrowing(r, &claim, &ce)?);
    }
    if r.constraint.is_some() {
        out.extend(utility_suites(r, &sc)?);
    }
    Ok(out)
}

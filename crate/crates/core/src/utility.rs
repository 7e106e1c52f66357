//! Log-utility maximisation with portfolio constraints.
//!
//! Fractions of wealth `c` are restricted to a closed set `C̃ ⊆ ℝᵈ`; in
//! Brownian coordinates the constraint is `ρ ∈ C_t = σ_t* C̃`. The value is
//! `V(x) = log x + E ∫ f(t) dt` with `f = r + ½|θ|² - ½ dist(θ, C_t)²`, attained
//! by the projection `ρ̂` of `θ` onto `C_t`.

use std::sync::Arc;

use rayon::prelude::*;

use crate::bsde::{solve_backward_euler_with, BsdeProblem, BsdeSolution};
use crate::linalg;
use crate::market::Scenario;
use crate::paths::{dot, stochastic_exponential, DiscreteProcess};
use crate::regression::ConditionalExpectation;
use crate::stats;
use crate::{Error, Result};

pub const PG_MAX_ITERATIONS: usize = 500;
pub const PG_TOLERANCE: f64 = 1e-10;
const POWER_ITERATIONS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintSet {
    FullSpace,
    Box { lower: Vec<f64>, upper: Vec<f64> },
    FinitePointSet(Vec<Vec<f64>>),
    Ball { center: Vec<f64>, radius: f64 },
}

impl ConstraintSet {
    /// Checks non-emptiness and dimensions against `d` assets.
    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            ConstraintSet::FullSpace => Ok(()),
            ConstraintSet::Box { lower, upper } => {
                if lower.len() != d || upper.len() != d {
                    return Err(Error::Dimension(format!("box bounds must have length {d}")));
                }
                if lower.iter().zip(upper).any(|(l, u)| !(l <= u)) {
                    return Err(Error::invalid("box is empty: lower > upper"));
                }
                Ok(())
            }
            ConstraintSet::FinitePointSet(points) => {
                if points.is_empty() {
                    return Err(Error::invalid("point set is empty"));
                }
                if let Some(i) = points
                    .iter()
                    .position(|p| p.len() != d || p.iter().any(|x| !x.is_finite()))
                {
                    return Err(Error::Dimension(format!(
                        "point {i} is not a finite {d}-vector"
                    )));
                }
                Ok(())
            }
            ConstraintSet::Ball { center, radius } => {
                if center.len() != d {
                    return Err(Error::Dimension(format!(
                        "ball center must have length {d}"
                    )));
                }
                if !(*radius >= 0.0) || !radius.is_finite() {
                    return Err(Error::invalid(
                        "ball radius must be finite and non-negative",
                    ));
                }
                Ok(())
            }
        }
    }

    /// Euclidean projection in fraction space for the convex variants.
    pub fn project(&self, c: &[f64]) -> Vec<f64> {
        match self {
            ConstraintSet::FullSpace => c.to_vec(),
            ConstraintSet::Box { lower, upper } => c
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(x, (l, u))| x.clamp(*l, *u))
                .collect(),
            ConstraintSet::Ball { center, radius } => {
                let diff: Vec<f64> = c.iter().zip(center).map(|(a, b)| a - b).collect();
                let dist = linalg::norm(&diff);
                if dist <= *radius {
                    c.to_vec()
                } else {
                    center
                        .iter()
                        .zip(&diff)
                        .map(|(m, v)| m + v * radius / dist)
                        .collect()
                }
            }
            ConstraintSet::FinitePointSet(points) => {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (i, p) in points.iter().enumerate() {
                    let d2: f64 = p.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum();
                    if d2 < best_d {
                        best_d = d2;
                        best = i;
                    }
                }
                points[best].clone()
            }
        }
    }

    /// Membership, exact for points and with absolute tolerance `tol` otherwise.
    pub fn contains(&self, c: &[f64], tol: f64) -> bool {
        match self {
            ConstraintSet::FullSpace => true,
            ConstraintSet::Box { lower, upper } => c
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(x, (l, u))| *x >= l - tol && *x <= u + tol),
            ConstraintSet::Ball { center, radius } => {
                let d2: f64 = c.iter().zip(center).map(|(a, b)| (a - b).powi(2)).sum();
                d2.sqrt() <= radius + tol
            }
            ConstraintSet::FinitePointSet(points) => points.iter().any(|p| p.as_slice() == c),
        }
    }

    /// Norm of the smallest element, used in the driver bounds.
    pub fn min_norm(&self, d: usize) -> f64 {
        linalg::norm(&self.project(&vec![0.0; d]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `|θ - σ*c|`.
    pub distance: f64,
    /// `ρ = σ*c ∈ C_t`.
    pub point: Vec<f64>,
    /// Minimiser `c ∈ C̃`.
    pub fraction: Vec<f64>,
    pub iterations: usize,
    /// False when projected gradient stopped on the iteration cap.
    pub converged: bool,
}

/// Largest eigenvalue of `σσ*` by power iteration.
fn gram_spectral_bound(sigma: &[f64], d: usize, n: usize) -> f64 {
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let w = linalg::apply(sigma, d, n, &linalg::transpose_apply(sigma, d, n, &v));
        let norm = linalg::norm(&w);
        if norm == 0.0 {
            return 0.0;
        }
        lambda = dot(&v, &w);
        v = w.into_iter().map(|x| x / norm).collect();
    }
    // Rayleigh quotients approach the top eigenvalue from below; the final
    // norm is a safe upper estimate for the step size.
    let w = linalg::apply(sigma, d, n, &linalg::transpose_apply(sigma, d, n, &v));
    lambda.max(linalg::norm(&w))
}

fn finish(
    theta: &[f64],
    sigma: &[f64],
    d: usize,
    n: usize,
    fraction: Vec<f64>,
    iterations: usize,
    converged: bool,
) -> Projection {
    let point = linalg::transpose_apply(sigma, d, n, &fraction);
    let resid: Vec<f64> = theta.iter().zip(&point).map(|(a, b)| a - b).collect();
    Projection {
        distance: linalg::norm(&resid),
        point,
        fraction,
        iterations,
        converged,
    }
}

/// Minimises `|θ - σ*c|` over `c ∈ C̃`. Least squares for the full space,
/// enumeration (lowest index on ties) for point sets and projected gradient
/// with step `1/L` for boxes and balls.
pub fn constraint_distance(
    theta: &[f64],
    sigma: &[f64],
    d: usize,
    n: usize,
    set: &ConstraintSet,
) -> Result<Projection> {
    if theta.len() != n || sigma.len() != d * n {
        return Err(Error::Dimension(format!(
            "θ must have length {n} and σ {d}×{n}"
        )));
    }
    let sigma_theta = linalg::apply(sigma, d, n, theta);
    let least_squares = || {
        linalg::solve_gram(sigma, d, n, &sigma_theta, 1e-12).ok_or_else(|| Error::Degenerate {
            node: 0,
            detail: "σσ* is singular".into(),
        })
    };
    match set {
        ConstraintSet::FullSpace => Ok(finish(theta, sigma, d, n, least_squares()?, 0, true)),
        ConstraintSet::FinitePointSet(points) => {
            let mut best: Option<Projection> = None;
            for p in points {
                let cand = finish(theta, sigma, d, n, p.clone(), 0, true);
                if best.as_ref().is_none_or(|b| cand.distance < b.distance) {
                    best = Some(cand);
                }
            }
            best.ok_or_else(|| Error::invalid("point set is empty"))
        }
        ConstraintSet::Box { .. } | ConstraintSet::Ball { .. } => {
            let lip = gram_spectral_bound(sigma, d, n);
            let start = match least_squares() {
                Ok(c) => set.project(&c),
                Err(_) => set.project(&vec![0.0; d]),
            };
            if lip == 0.0 {
                return Ok(finish(theta, sigma, d, n, start, 0, true));
            }
            let mut c = start;
            for it in 1..=PG_MAX_ITERATIONS {
                let gram_c = linalg::apply(sigma, d, n, &linalg::transpose_apply(sigma, d, n, &c));
                let step: Vec<f64> = c
                    .iter()
                    .zip(gram_c.iter().zip(&sigma_theta))
                    .map(|(x, (g, s))| x - (g - s) / lip)
                    .collect();
                let next = set.project(&step);
                let moved: f64 = next
                    .iter()
                    .zip(&c)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                c = next;
                if moved * lip < PG_TOLERANCE {
                    return Ok(finish(theta, sigma, d, n, c, it, true));
                }
            }
            Ok(finish(theta, sigma, d, n, c, PG_MAX_ITERATIONS, false))
        }
    }
}

/// Driver values `f`, optimal `ρ̂` and fractions `ĉ` along a scenario.
#[derive(Debug, Clone)]
pub struct UtilityDriver {
    pub f: DiscreteProcess,
    pub rho: DiscreteProcess,
    pub fraction: DiscreteProcess,
    /// Node evaluations where projected gradient hit its iteration cap.
    pub unconverged: usize,
}

/// `f(t) = r + ½|θ|² - ½ dist(θ, σ*C̃)²` and the projection `ρ̂` at every node.
pub fn log_utility_driver(set: &ConstraintSet, scenario: &Scenario<'_>) -> Result<UtilityDriver> {
    let model = scenario.model();
    let (d, n) = (model.d(), model.n());
    set.validate(d)?;
    let grid = scenario.bundle().grid_arc().clone();
    let nodes = grid.nodes();
    let np = scenario.n_paths();

    let evaluate = |p: usize, k: usize| -> Result<(f64, Projection)> {
        let ctx = scenario.context(p, k);
        let proj = constraint_distance(ctx.theta, ctx.sigma, d, n, set).map_err(|e| match e {
            Error::Degenerate { detail, .. } => Error::Degenerate { node: k, detail },
            other => other,
        })?;
        let f = ctx.rate + 0.5 * dot(ctx.theta, ctx.theta) - 0.5 * proj.distance * proj.distance;
        Ok((f, proj))
    };

    let rows: Vec<Vec<(f64, Projection)>> = if scenario.model().is_constant() {
        let row = (0..nodes)
            .map(|k| evaluate(0, k))
            .collect::<Result<Vec<_>>>()?;
        vec![row]
    } else {
        (0..np)
            .into_par_iter()
            .map(|p| {
                (0..nodes)
                    .map(|k| evaluate(p, k))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?
    };
    let row = |p: usize| if rows.len() == 1 { &rows[0] } else { &rows[p] };
    let unconverged = rows
        .iter()
        .flatten()
        .filter(|(_, pr)| !pr.converged)
        .count();
    Ok(UtilityDriver {
        f: DiscreteProcess::from_node_fn(grid.clone(), 1, np, |p, k, out| out[0] = row(p)[k].0),
        rho: DiscreteProcess::from_node_fn(grid.clone(), n, np, |p, k, out| {
            out.copy_from_slice(&row(p)[k].1.point)
        }),
        fraction: DiscreteProcess::from_node_fn(grid, d, np, |p, k, out| {
            out.copy_from_slice(&row(p)[k].1.fraction)
        }),
        unconverged,
    })
}

/// Bounds `|f| ≤ M₁ + ½M₂² + ½(M₂ + K|c|)²` and `|ρ̂| ≤ 2M₂ + K|c|` from the
/// declared market bounds, with `c` the smallest element of `C̃`.
pub fn driver_bounds(set: &ConstraintSet, scenario: &Scenario<'_>) -> (f64, f64) {
    let model = scenario.model();
    let b = model.bounds();
    let m2 = if b.ellipticity_lower > 0.0 {
        b.excess / b.ellipticity_lower
    } else {
        f64::INFINITY
    };
    let kc = b.ellipticity_upper * set.min_norm(model.d());
    (
        b.rate + 0.5 * m2 * m2 + 0.5 * (m2 + kc).powi(2),
        2.0 * m2 + kc,
    )
}

#[derive(Debug, Clone)]
pub struct UtilityReport {
    pub value: f64,
    pub stderr: f64,
    pub driver: UtilityDriver,
    pub f_bound: f64,
    pub rho_bound: f64,
}

fn integrate_driver(f: &DiscreteProcess) -> Vec<f64> {
    let grid = f.grid();
    (0..f.n_paths())
        .into_par_iter()
        .map(|p| (0..grid.steps()).map(|k| f.scalar(p, k) * grid.dt(k)).sum())
        .collect()
}

/// `V(x) = log x + E Σ f(t_k) Δt_k`.
pub fn log_utility_value(
    x: f64,
    set: &ConstraintSet,
    scenario: &Scenario<'_>,
) -> Result<UtilityReport> {
    if !(x > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "initial wealth must be positive, got {x}"
        )));
    }
    let driver = log_utility_driver(set, scenario)?;
    let (m, se) = stats::mean_and_stderr(&integrate_driver(&driver.f));
    let (f_bound, rho_bound) = driver_bounds(set, scenario);
    Ok(UtilityReport {
        value: x.ln() + m,
        stderr: se,
        driver,
        f_bound,
        rho_bound,
    })
}

/// The same value through the BSDE `-dY = f dt - Z*dW`, `Y_T = 0`, solved by
/// backward Euler; `V(x) = log x + Y₀`.
pub fn log_utility_value_bsde(
    x: f64,
    set: &ConstraintSet,
    ce: &ConditionalExpectation<'_>,
) -> Result<(f64, BsdeSolution)> {
    if !(x > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "initial wealth must be positive, got {x}"
        )));
    }
    let scenario = ce.scenario();
    let driver = Arc::new(log_utility_driver(set, scenario)?.f);
    let problem = BsdeProblem::new(
        Arc::new(move |ctx, _, _| driver.scalar(ctx.path, ctx.node)),
        Arc::new(|_| 0.0),
        0.0,
    );
    let sol = solve_backward_euler_with(&problem, &vec![0.0; scenario.n_paths()], ce)?;
    Ok((x.ln() + sol.y0(), sol))
}

/// `X = x E(∫ r dt + ∫ ρ·(dW + θ dt))`.
pub fn wealth_from_fraction(
    x: f64,
    rho: &DiscreteProcess,
    scenario: &Scenario<'_>,
) -> Result<DiscreteProcess> {
    if !(x > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "initial wealth must be positive, got {x}"
        )));
    }
    let bundle = scenario.bundle();
    if !rho.same_grid(bundle.grid())
        || rho.n_paths() != bundle.n_paths()
        || rho.dim() != bundle.dim()
    {
        return Err(Error::invalid(
            "fraction process does not match the scenario grid",
        ));
    }
    let drift = DiscreteProcess::from_node_fn(
        bundle.grid_arc().clone(),
        1,
        bundle.n_paths(),
        |p, k, out| {
            let ctx = scenario.context(p, k);
            out[0] = ctx.rate + dot(rho.at(p, k), ctx.theta);
        },
    );
    let e = stochastic_exponential(&drift, rho, bundle)?;
    Ok(e.map(|v| x * v))
}

/// `log X_T` per path, accumulated in logarithms.
pub fn terminal_log_wealth(
    x: f64,
    rho: &DiscreteProcess,
    scenario: &Scenario<'_>,
) -> Result<Vec<f64>> {
    if !(x > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "initial wealth must be positive, got {x}"
        )));
    }
    let bundle = scenario.bundle();
    if !rho.same_grid(bundle.grid())
        || rho.n_paths() != bundle.n_paths()
        || rho.dim() != bundle.dim()
    {
        return Err(Error::invalid(
            "fraction process does not match the scenario grid",
        ));
    }
    let grid = bundle.grid();
    Ok((0..bundle.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut log = x.ln();
            for k in 0..grid.steps() {
                let ctx = scenario.context(p, k);
                let r = rho.at(p, k);
                log += (ctx.rate + dot(r, ctx.theta) - 0.5 * dot(r, r)) * grid.dt(k)
                    + dot(r, bundle.increment(p, k));
            }
            log
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_space_distance_vanishes_in_the_image() {
        let sigma = [1.0, 0.5, 0.0, 2.0];
        let theta = linalg::transpose_apply(&sigma, 2, 2, &[0.3, -0.1]);
        let p = constraint_distance(&theta, &sigma, 2, 2, &ConstraintSet::FullSpace).unwrap();
        assert!(p.distance < 1e-12);
    }

    #[test]
    fn origin_constraint_distance_is_norm() {
        let set = ConstraintSet::FinitePointSet(vec![vec![0.0, 0.0]]);
        let p = constraint_distance(&[0.3, 0.1], &[1.0, 0.0, 0.0, 1.0], 2, 2, &set).unwrap();
        assert!((p.distance - 0.1f64.sqrt()).abs() < 1e-15);
        assert_eq!(p.fraction, vec![0.0, 0.0]);
    }

    #[test]
    fn box_example() {
        let set = ConstraintSet::Box {
            lower: vec![0.0],
            upper: vec![0.5],
        };
        let p = constraint_distance(&[1.4], &[2.0], 1, 1, &set).unwrap();
        assert!((p.distance - 0.4).abs() < 1e-12);
        assert_eq!(p.fraction, vec![0.5]);
        assert!(p.converged);
    }

    #[test]
    fn point_set_ties_go_to_lowest_index() {
        let set = ConstraintSet::FinitePointSet(vec![vec![1.0], vec![-1.0]]);
        let p = constraint_distance(&[0.0], &[1.0], 1, 1, &set).unwrap();
        assert_eq!(p.fraction, vec![1.0]);
    }

    #[test]
    fn ball_projection_in_two_dimensions() {
        let set = ConstraintSet::Ball {
            center: vec![0.0, 0.0],
            radius: 0.1,
        };
        let p = constraint_distance(&[0.3, 0.4], &[1.0, 0.0, 0.0, 1.0], 2, 2, &set).unwrap();
        assert!((p.distance - 0.4).abs() < 1e-9);
        assert!(set.contains(&p.fraction, 1e-12));
    }

    #[test]
    fn invalid_sets_are_rejected() {
        assert!(ConstraintSet::FinitePointSet(vec![]).validate(1).is_err());
        assert!(ConstraintSet::Box {
            lower: vec![1.0],
            upper: vec![0.0]
        }
        .validate(1)
        .is_err());
        assert!(ConstraintSet::Ball {
            center: vec![0.0],
            radius: -1.0
        }
        .validate(1)
        .is_err());
        assert!(ConstraintSet::Ball {
            center: vec![0.0],
            radius: 1.0
        }
        .validate(2)
        .is_err());
    }
}

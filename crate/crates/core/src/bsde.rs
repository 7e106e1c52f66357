//! Solvers for scalar BSDEs `-dY = f(t, Y, Z) dt - Z*dW`, `Y_T = ξ`.
//!
//! Three routes are provided:
//!
//! - [`solve_linear`]: linear drivers `φ + βy + γ·z` through the adjoint
//!   process `Γ = E(∫β dt + ∫γ·dW)`, `Y_t = Γ_t⁻¹ E[ξΓ_T + ∫_t^T Γφ ds | F_t]`.
//! - [`solve_backward_euler`]: explicit backward recursion for Lipschitz
//!   drivers.
//! - [`solve_picard`]: fixed-point iteration of the frozen-driver map, with
//!   contraction ratios measured in the weighted norm
//!   `‖φ‖²_β = E Σ e^{βt_k} |φ_k|² Δt_k`.
//!
//! Conditional expectations come from a [`ConditionalExpectation`] built on
//! the scenario; `Z_k` is the projection of `(Y_{k+1} - E_k[Y_{k+1}]) ΔW_k / Δt_k`.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::market::{NodeContext, Scenario};
use crate::paths::{dot, DiscreteProcess};
use crate::regression::ConditionalExpectation;
use crate::stats;
use crate::{Error, Result};

pub type DriverFn = Arc<dyn Fn(&NodeContext<'_>, f64, &[f64]) -> f64 + Send + Sync>;
pub type PayoffFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type NodeFn = Arc<dyn Fn(&NodeContext<'_>, &mut [f64]) + Send + Sync>;

/// A vector-valued adapted process given as a function of the node context.
#[derive(Clone)]
pub enum NodeSpec {
    Constant(Vec<f64>),
    Dynamic { dim: usize, bound: f64, f: NodeFn },
}

impl fmt::Debug for NodeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeSpec::Constant(v) => write!(f, "Constant({v:?})"),
            NodeSpec::Dynamic { dim, bound, .. } => write!(f, "Dynamic(dim={dim}, bound={bound})"),
        }
    }
}

impl NodeSpec {
    pub fn scalar(v: f64) -> Self {
        NodeSpec::Constant(vec![v])
    }

    /// Dynamic spec with a declared bound on its Euclidean norm.
    pub fn dynamic(dim: usize, bound: f64, f: NodeFn) -> Self {
        NodeSpec::Dynamic { dim, bound, f }
    }

    pub fn dim(&self) -> usize {
        match self {
            NodeSpec::Constant(v) => v.len(),
            NodeSpec::Dynamic { dim, .. } => *dim,
        }
    }

    pub fn bound(&self) -> f64 {
        match self {
            NodeSpec::Constant(v) => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            NodeSpec::Dynamic { bound, .. } => *bound,
        }
    }

    #[inline]
    pub fn eval_into(&self, ctx: &NodeContext<'_>, out: &mut [f64]) {
        match self {
            NodeSpec::Constant(v) => out.copy_from_slice(v),
            NodeSpec::Dynamic { f, .. } => f(ctx, out),
        }
    }

    #[inline]
    pub fn eval_scalar(&self, ctx: &NodeContext<'_>) -> f64 {
        match self {
            NodeSpec::Constant(v) => v[0],
            NodeSpec::Dynamic { f, .. } => {
                let mut out = [0.0];
                f(ctx, &mut out);
                out[0]
            }
        }
    }

    pub fn negated(&self) -> Self {
        match self {
            NodeSpec::Constant(v) => NodeSpec::Constant(v.iter().map(|x| -x).collect()),
            NodeSpec::Dynamic { dim, bound, f } => {
                let f = f.clone();
                NodeSpec::Dynamic {
                    dim: *dim,
                    bound: *bound,
                    f: Arc::new(move |ctx, out| {
                        f(ctx, out);
                        out.iter_mut().for_each(|x| *x = -*x);
                    }),
                }
            }
        }
    }
}

/// Driver `f(t, y, z) = φ_t + β_t y + γ_t · z`.
#[derive(Debug, Clone)]
pub struct LinearDriverSpec {
    pub phi: NodeSpec,
    pub beta: NodeSpec,
    pub gamma: NodeSpec,
}

impl LinearDriverSpec {
    pub fn new(phi: NodeSpec, beta: NodeSpec, gamma: NodeSpec) -> Result<Self> {
        if phi.dim() != 1 || beta.dim() != 1 {
            return Err(Error::invalid("φ and β must be scalar"));
        }
        Ok(Self { phi, beta, gamma })
    }

    pub fn constant(phi: f64, beta: f64, gamma: Vec<f64>) -> Self {
        Self {
            phi: NodeSpec::scalar(phi),
            beta: NodeSpec::scalar(beta),
            gamma: NodeSpec::Constant(gamma),
        }
    }

    /// Lipschitz constant for `|f(y,z) - f(y',z')| ≤ C(|y-y'| + |z-z'|)`.
    pub fn lipschitz(&self) -> f64 {
        self.beta.bound().max(self.gamma.bound())
    }

    #[inline]
    pub fn eval(&self, ctx: &NodeContext<'_>, y: f64, z: &[f64]) -> f64 {
        let mut g = vec![0.0; z.len()];
        self.gamma.eval_into(ctx, &mut g);
        self.phi.eval_scalar(ctx) + self.beta.eval_scalar(ctx) * y + dot(&g, z)
    }

    pub fn driver(&self) -> DriverFn {
        let spec = self.clone();
        Arc::new(move |ctx, y, z| spec.eval(ctx, y, z))
    }

    pub fn to_problem(&self, terminal: PayoffFn) -> BsdeProblem {
        BsdeProblem::new(self.driver(), terminal, self.lipschitz())
            .with_zero_bound(self.phi.bound())
    }

    /// The driver `-f(-y, -z) = -φ + βy + γ·z`; its solution with terminal
    /// `-ξ` is `-Y`.
    pub fn mirrored(&self) -> Self {
        Self {
            phi: self.phi.negated(),
            beta: self.beta.clone(),
            gamma: self.gamma.clone(),
        }
    }

    /// Doubles (or generally scales) the inhomogeneous term.
    pub fn scaled_phi(&self, factor: f64) -> Self {
        let phi = match &self.phi {
            NodeSpec::Constant(v) => NodeSpec::Constant(v.iter().map(|x| x * factor).collect()),
            NodeSpec::Dynamic { dim, bound, f } => {
                let f = f.clone();
                NodeSpec::Dynamic {
                    dim: *dim,
                    bound: bound * factor.abs(),
                    f: Arc::new(move |ctx, out| {
                        f(ctx, out);
                        out.iter_mut().for_each(|x| *x *= factor);
                    }),
                }
            }
        };
        Self {
            phi,
            beta: self.beta.clone(),
            gamma: self.gamma.clone(),
        }
    }
}

/// Data `(f, ξ)` of a BSDE with a declared Lipschitz constant.
#[derive(Clone)]
pub struct BsdeProblem {
    driver: DriverFn,
    terminal: PayoffFn,
    lipschitz: f64,
    zero_bound: f64,
}

impl fmt::Debug for BsdeProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BsdeProblem")
            .field("lipschitz", &self.lipschitz)
            .field("zero_bound", &self.zero_bound)
            .finish_non_exhaustive()
    }
}

impl BsdeProblem {
    pub fn new(driver: DriverFn, terminal: PayoffFn, lipschitz: f64) -> Self {
        Self {
            driver,
            terminal,
            lipschitz,
            zero_bound: f64::INFINITY,
        }
    }

    /// Declared bound on `|f(t, 0, 0)|`.
    pub fn with_zero_bound(mut self, bound: f64) -> Self {
        self.zero_bound = bound;
        self
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn zero_bound(&self) -> f64 {
        self.zero_bound
    }

    #[inline]
    pub fn driver(&self, ctx: &NodeContext<'_>, y: f64, z: &[f64]) -> f64 {
        (self.driver)(ctx, y, z)
    }

    pub fn driver_fn(&self) -> &DriverFn {
        &self.driver
    }

    pub fn terminal_fn(&self) -> &PayoffFn {
        &self.terminal
    }

    pub fn with_terminal(&self, terminal: PayoffFn) -> Self {
        Self {
            terminal,
            ..self.clone()
        }
    }

    /// `ξ` on every path.
    pub fn terminal_values(&self, scenario: &Scenario<'_>) -> Vec<f64> {
        (0..scenario.n_paths())
            .into_par_iter()
            .map(|p| (self.terminal)(scenario.terminal_risky(p)))
            .collect()
    }

    /// Samples the driver on random nodes and `(y, z)` pairs in a box of half
    /// width `scale` and compares against the declared constants.
    pub fn check_standard(
        &self,
        scenario: &Scenario<'_>,
        samples: usize,
        scale: f64,
        seed: u64,
    ) -> StandardReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = scenario.model().n();
        let steps = scenario.steps();
        let mut report = StandardReport {
            declared_lipschitz: self.lipschitz,
            declared_zero_bound: self.zero_bound,
            max_zero_value: 0.0,
            max_difference_ratio: 0.0,
        };
        let zero = vec![0.0; n];
        for _ in 0..samples {
            let path = rng.random_range(0..scenario.n_paths());
            let k = rng.random_range(0..steps);
            let ctx = scenario.context(path, k);
            let f0 = self.driver(&ctx, 0.0, &zero);
            report.max_zero_value = report.max_zero_value.max(f0.abs());
            let draw = |rng: &mut ChaCha8Rng| -> (f64, Vec<f64>) {
                let y = rng.random_range(-scale..scale);
                let z = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
                (y, z)
            };
            let (y1, z1) = draw(&mut rng);
            let (y2, z2) = draw(&mut rng);
            let dist = (y1 - y2).abs()
                + z1.iter()
                    .zip(&z2)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
            if dist > 0.0 {
                let df = (self.driver(&ctx, y1, &z1) - self.driver(&ctx, y2, &z2)).abs();
                report.max_difference_ratio = report.max_difference_ratio.max(df / dist);
            }
        }
        report
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StandardReport {
    pub declared_lipschitz: f64,
    pub declared_zero_bound: f64,
    pub max_zero_value: f64,
    pub max_difference_ratio: f64,
}

impl StandardReport {
    /// Difference quotients stay within 5% of the declared constant and
    /// `f(·, 0, 0)` within its declared bound.
    pub fn holds(&self) -> bool {
        self.max_zero_value.is_finite()
            && self.max_zero_value <= self.declared_zero_bound * (1.0 + 1e-12)
            && self.max_difference_ratio <= 1.05 * self.declared_lipschitz
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub method: String,
    pub iterations: usize,
    pub contraction_ratios: Vec<f64>,
    pub condition_numbers: Vec<f64>,
    /// Monte Carlo standard error of `Y_k` at each node (0 at the terminal node).
    pub node_stderr: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BsdeSolution {
    pub y: DiscreteProcess,
    pub z: DiscreteProcess,
    pub diagnostics: Diagnostics,
}

impl BsdeSolution {
    /// `Y_0`, identical on all paths.
    pub fn y0(&self) -> f64 {
        self.y.scalar(0, 0)
    }

    pub fn y0_stderr(&self) -> f64 {
        self.diagnostics.node_stderr[0]
    }

    pub fn z0(&self) -> &[f64] {
        self.z.at(0, 0)
    }
}

fn check_terminal(xi: &[f64], n_paths: usize) -> Result<()> {
    if xi.len() != n_paths {
        return Err(Error::Dimension(format!(
            "{} terminal values for {n_paths} paths",
            xi.len()
        )));
    }
    if let Some(p) = xi.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!(
            "terminal value on path {p} is not finite"
        )));
    }
    let second = xi.iter().map(|v| v * v).sum::<f64>() / xi.len() as f64;
    if !second.is_finite() {
        return Err(Error::Data(
            "terminal value has no finite second moment".into(),
        ));
    }
    Ok(())
}

fn check_stability(lipschitz: f64, scenario: &Scenario<'_>) -> Result<()> {
    let h = scenario.bundle().grid().max_step();
    if !(h * lipschitz < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "explicit step unstable: Δt·C = {:.4} ≥ 1; increase the number of steps",
            h * lipschitz
        )));
    }
    Ok(())
}

/// Per-node process with scalar values, built from node-major columns.
fn scalar_process(scenario: &Scenario<'_>, columns: &[Vec<f64>]) -> DiscreteProcess {
    let grid = scenario.bundle().grid_arc().clone();
    let np = scenario.n_paths();
    DiscreteProcess::from_path_fn(grid, 1, np, |p, out| {
        for (k, col) in columns.iter().enumerate() {
            out[k] = col[p];
        }
    })
}

fn vector_process(scenario: &Scenario<'_>, columns: &[Vec<Vec<f64>>], n: usize) -> DiscreteProcess {
    let grid = scenario.bundle().grid_arc().clone();
    let np = scenario.n_paths();
    DiscreteProcess::from_path_fn(grid, n, np, |p, out| {
        for (k, node) in columns.iter().enumerate() {
            for j in 0..n {
                out[k * n + j] = node[j][p];
            }
        }
    })
}

/// `Z_k` from the martingale increment `Y_{k+1} - E_k[Y_{k+1}]`.
fn martingale_projection(
    ce: &ConditionalExpectation<'_>,
    k: usize,
    next: &[f64],
    next_mean: &[f64],
) -> Vec<Vec<f64>> {
    let scenario = ce.scenario();
    let bundle = scenario.bundle();
    let n = bundle.dim();
    let h = bundle.grid().dt(k);
    let targets: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            (0..scenario.n_paths())
                .into_par_iter()
                .map(|p| (next[p] - next_mean[p]) * bundle.increment(p, k)[j] / h)
                .collect()
        })
        .collect();
    let refs: Vec<&[f64]> = targets.iter().map(|v| v.as_slice()).collect();
    ce.estimate_many(k, &refs)
}

fn node_stderr(ce: &ConditionalExpectation<'_>, k: usize, pathwise: &[f64], fitted: &[f64]) -> f64 {
    if k == 0 {
        stats::mean_and_stderr(pathwise).1
    } else {
        ce.fitted_stderr(k, pathwise, fitted)
    }
}

/// Linear BSDE through its adjoint process.
pub fn solve_linear(
    spec: &LinearDriverSpec,
    xi: &[f64],
    ce: &ConditionalExpectation<'_>,
) -> Result<BsdeSolution> {
    let scenario = ce.scenario();
    let np = scenario.n_paths();
    check_terminal(xi, np)?;
    let grid = scenario.bundle().grid();
    let steps = grid.steps();
    let n = scenario.model().n();
    if spec.gamma.dim() != n {
        return Err(Error::Dimension(format!(
            "γ has dimension {} but n = {n}",
            spec.gamma.dim()
        )));
    }

    // Path-wise A_k = Γ_k⁻¹ (ξΓ_K + Σ_{j≥k} Γ_j φ_j Δt_j), stored path-major,
    // and the one-step factors Γ_{k+1}/Γ_k with φ_k.
    let nodes = steps + 1;
    let mut pathwise = vec![0.0; np * nodes];
    let mut factors = vec![0.0; np * 2 * steps];
    pathwise
        .par_chunks_mut(nodes)
        .zip(factors.par_chunks_mut(2 * steps))
        .enumerate()
        .for_each(|(p, (out, fac))| {
            let dw = scenario.bundle().path_increments(p);
            let mut gamma = vec![0.0; n];
            let mut adj = vec![1.0; nodes];
            let mut log = 0.0;
            for k in 0..steps {
                let ctx = scenario.context(p, k);
                let beta = spec.beta.eval_scalar(&ctx);
                spec.gamma.eval_into(&ctx, &mut gamma);
                let inc = (beta - 0.5 * dot(&gamma, &gamma)) * grid.dt(k)
                    + dot(&gamma, &dw[k * n..(k + 1) * n]);
                log += inc;
                adj[k + 1] = log.exp();
                fac[2 * k] = inc.exp();
                fac[2 * k + 1] = spec.phi.eval_scalar(&ctx);
            }
            let mut acc = xi[p] * adj[steps];
            out[steps] = xi[p];
            for k in (0..steps).rev() {
                acc += adj[k] * fac[2 * k + 1] * grid.dt(k);
                out[k] = acc / adj[k];
            }
        });
    let column = |k: usize| -> Vec<f64> { (0..np).map(|p| pathwise[p * nodes + k]).collect() };

    // Z comes from the one-step form Ỹ_k = E_k[(Γ_{k+1}/Γ_k) Ỹ_{k+1}] + φ_k Δt_k,
    // whose regression noise is smooth in the state; regressing the
    // independently fitted Y_{k+1} would differentiate its noise.
    let mut y_cols: Vec<Vec<f64>> = vec![Vec::new(); nodes];
    let mut z_cols: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; np]; n]; nodes];
    let mut se = vec![0.0; nodes];
    y_cols[steps] = xi.to_vec();
    let mut smooth = xi.to_vec();
    for k in (0..steps).rev() {
        let target = column(k);
        let weighted: Vec<f64> = (0..np)
            .map(|p| factors[p * 2 * steps + 2 * k] * smooth[p])
            .collect();
        let mut est = ce.estimate_many(k, &[&target, &weighted, &smooth]);
        let next_mean = est.pop().unwrap();
        let step_back = est.pop().unwrap();
        let fitted = est.pop().unwrap();
        se[k] = node_stderr(ce, k, &target, &fitted);
        z_cols[k] = martingale_projection(ce, k, &smooth, &next_mean);
        let h = grid.dt(k);
        smooth = (0..np)
            .map(|p| step_back[p] + factors[p * 2 * steps + 2 * k + 1] * h)
            .collect();
        y_cols[k] = fitted;
    }
    Ok(BsdeSolution {
        y: scalar_process(scenario, &y_cols),
        z: vector_process(scenario, &z_cols, n),
        diagnostics: Diagnostics {
            method: "linear-adjoint".into(),
            iterations: 1,
            contraction_ratios: Vec::new(),
            condition_numbers: ce.condition_numbers(),
            node_stderr: se,
        },
    })
}

/// Explicit backward Euler:
/// `Z_k = E_k[(Y_{k+1} - E_k Y_{k+1}) ΔW_k] / Δt_k`,
/// `Y_k = E_k[Y_{k+1}] + f(t_k, E_k[Y_{k+1}], Z_k) Δt_k`.
pub fn solve_backward_euler(
    problem: &BsdeProblem,
    ce: &ConditionalExpectation<'_>,
) -> Result<BsdeSolution> {
    let scenario = ce.scenario();
    let xi = problem.terminal_values(scenario);
    solve_backward_euler_with(problem, &xi, ce)
}

/// Backward Euler with explicitly supplied terminal values.
pub fn solve_backward_euler_with(
    problem: &BsdeProblem,
    xi: &[f64],
    ce: &ConditionalExpectation<'_>,
) -> Result<BsdeSolution> {
    let scenario = ce.scenario();
    check_stability(problem.lipschitz, scenario)?;
    backward_sweep(xi, ce, "backward-euler", |p, k, y, z| {
        problem.driver(&scenario.context(p, k), y, z)
    })
}

/// Shared backward recursion; `drift(path, k, ŷ, z)` is the driver term.
fn backward_sweep<F>(
    xi: &[f64],
    ce: &ConditionalExpectation<'_>,
    method: &str,
    drift: F,
) -> Result<BsdeSolution>
where
    F: Fn(usize, usize, f64, &[f64]) -> f64 + Sync,
{
    let scenario = ce.scenario();
    let np = scenario.n_paths();
    check_terminal(xi, np)?;
    let grid = scenario.bundle().grid();
    let steps = grid.steps();
    let n = scenario.model().n();
    let nodes = steps + 1;

    let mut y_cols: Vec<Vec<f64>> = vec![Vec::new(); nodes];
    let mut z_cols: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; np]; n]; nodes];
    let mut se = vec![0.0; nodes];
    let mut pathwise = xi.to_vec();
    y_cols[steps] = xi.to_vec();
    for k in (0..steps).rev() {
        let h = grid.dt(k);
        let yhat = ce.estimate(k, &y_cols[k + 1]);
        let z = martingale_projection(ce, k, &y_cols[k + 1], &yhat);
        let f: Vec<f64> = (0..np)
            .into_par_iter()
            .map(|p| {
                let zp: Vec<f64> = (0..n).map(|j| z[j][p]).collect();
                drift(p, k, yhat[p], &zp)
            })
            .collect();
        if let Some(p) = f.iter().position(|v| !v.is_finite()) {
            return Err(Error::Degenerate {
                node: k,
                detail: format!("driver is not finite on path {p}"),
            });
        }
        let y: Vec<f64> = yhat.iter().zip(&f).map(|(a, b)| a + b * h).collect();
        pathwise.iter_mut().zip(&f).for_each(|(g, b)| *g += b * h);
        se[k] = node_stderr(ce, k, &pathwise, &y);
        y_cols[k] = y;
        z_cols[k] = z;
    }
    Ok(BsdeSolution {
        y: scalar_process(scenario, &y_cols),
        z: vector_process(scenario, &z_cols, n),
        diagnostics: Diagnostics {
            method: method.into(),
            iterations: 1,
            contraction_ratios: Vec::new(),
            condition_numbers: ce.condition_numbers(),
            node_stderr: se,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardConfig {
    /// Weight `β` of the norm `‖·‖_β`.
    pub weight: f64,
    pub max_iterations: usize,
    /// Stop once `‖δY‖²_β + ‖δZ‖²_β` falls below this.
    pub tolerance: f64,
}

impl PicardConfig {
    /// Contraction factor `2(2+T)C²/β` guaranteed by the a priori estimates.
    pub fn contraction_bound(&self, lipschitz: f64, horizon: f64) -> f64 {
        2.0 * (2.0 + horizon) * lipschitz * lipschitz / self.weight
    }
}

/// `E Σ_{k<K} e^{βt_k} |φ_k|² Δt_k`.
pub fn weighted_norm_sq(p: &DiscreteProcess, weight: f64) -> f64 {
    let grid = p.grid();
    let w: Vec<f64> = (0..grid.steps())
        .map(|k| (weight * grid.time(k)).exp() * grid.dt(k))
        .collect();
    let per_path: Vec<f64> = (0..p.n_paths())
        .into_par_iter()
        .map(|path| {
            (0..grid.steps())
                .map(|k| {
                    let v = p.at(path, k);
                    w[k] * dot(v, v)
                })
                .sum()
        })
        .collect();
    stats::mean(&per_path)
}

fn difference(a: &DiscreteProcess, b: &DiscreteProcess) -> DiscreteProcess {
    let values = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| x - y)
        .collect();
    DiscreteProcess::from_values(a.grid_arc().clone(), a.dim(), a.n_paths(), values)
        .expect("matching processes")
}

/// Picard iteration `(y, z) ↦ (Y, Z)` where `(Y, Z)` solves the BSDE with the
/// frozen driver `f(t, y_t, z_t)`, starting from `(0, 0)` on a fixed bundle.
///
/// `diagnostics.iterations` is the index of the first iterate whose successor
/// moved by less than the tolerance; the returned solution is that successor.
pub fn solve_picard(
    problem: &BsdeProblem,
    config: &PicardConfig,
    ce: &ConditionalExpectation<'_>,
) -> Result<BsdeSolution> {
    let scenario = ce.scenario();
    let horizon = scenario.bundle().grid().horizon();
    let c = problem.lipschitz;
    let floor = 2.0 * (2.0 + horizon) * c * c;
    if !(config.weight > floor) {
        return Err(Error::InvalidArgument(format!(
            "Picard weight β = {} must exceed 2(2+T)C² = {floor}",
            config.weight
        )));
    }
    if config.max_iterations == 0 {
        return Err(Error::invalid("Picard needs at least one iteration"));
    }
    let xi = problem.terminal_values(scenario);
    let grid = scenario.bundle().grid_arc().clone();
    let (np, n) = (scenario.n_paths(), scenario.model().n());
    let mut current = BsdeSolution {
        y: DiscreteProcess::zeros(grid.clone(), 1, np),
        z: DiscreteProcess::zeros(grid, n, np),
        diagnostics: Diagnostics::default(),
    };
    let mut ratios = Vec::new();
    let mut previous_gap: Option<f64> = None;
    for m in 1..=config.max_iterations {
        let (y_prev, z_prev) = (&current.y, &current.z);
        let next = backward_sweep(&xi, ce, "picard", |p, k, _, _| {
            problem.driver(
                &scenario.context(p, k),
                y_prev.scalar(p, k),
                z_prev.at(p, k),
            )
        })?;
        let gap = weighted_norm_sq(&difference(&next.y, y_prev), config.weight)
            + weighted_norm_sq(&difference(&next.z, z_prev), config.weight);
        if let Some(prev) = previous_gap {
            ratios.push(if prev > 0.0 { gap / prev } else { 0.0 });
        }
        previous_gap = Some(gap);
        current = next;
        if gap < config.tolerance {
            current.diagnostics.iterations = (m - 1).max(1);
            current.diagnostics.contraction_ratios = ratios;
            current.diagnostics.method = "picard".into();
            return Ok(current);
        }
    }
    Err(Error::Convergence {
        iterations: config.max_iterations,
        ratios,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStats {
    pub rms: f64,
    pub max_abs: f64,
    pub per_step_rms: Vec<f64>,
}

/// Residual `Y_k - Y_{k+1} - f(t_k, Y_k, Z_k)Δt_k + Z_k·ΔW_k` of the discrete
/// equation, aggregated over paths and steps.
pub fn residual_check(
    problem: &BsdeProblem,
    solution: &BsdeSolution,
    scenario: &Scenario<'_>,
) -> ResidualStats {
    let bundle = scenario.bundle();
    let grid = bundle.grid();
    let steps = grid.steps();
    let np = scenario.n_paths();
    let per_path: Vec<Vec<f64>> = (0..np)
        .into_par_iter()
        .map(|p| {
            (0..steps)
                .map(|k| {
                    let ctx = scenario.context(p, k);
                    let y = solution.y.scalar(p, k);
                    let z = solution.z.at(p, k);
                    y - solution.y.scalar(p, k + 1) - problem.driver(&ctx, y, z) * grid.dt(k)
                        + dot(z, bundle.increment(p, k))
                })
                .collect()
        })
        .collect();
    let mut per_step_sq = vec![0.0; steps];
    let mut max_abs: f64 = 0.0;
    for row in &per_path {
        for (k, r) in row.iter().enumerate() {
            per_step_sq[k] += r * r;
            max_abs = max_abs.max(r.abs());
        }
    }
    let total: f64 = per_step_sq.iter().sum();
    ResidualStats {
        rms: (total / (np * steps) as f64).sqrt(),
        max_abs,
        per_step_rms: per_step_sq.iter().map(|s| (s / np as f64).sqrt()).collect(),
    }
}

/// Solves the BSDE with driver `f + c` for a consumption rate `c ≥ 0`; the
/// result is a supersolution of the original equation and dominates it.
pub fn supersolution_from_consumption(
    problem: &BsdeProblem,
    consumption: &NodeSpec,
    ce: &ConditionalExpectation<'_>,
) -> Result<BsdeSolution> {
    if consumption.dim() != 1 {
        return Err(Error::invalid("consumption rate must be scalar"));
    }
    let scenario = ce.scenario();
    let steps = scenario.steps();
    let negative = (0..scenario.n_paths()).into_par_iter().find_map_first(|p| {
        (0..steps).find_map(|k| {
            let c = consumption.eval_scalar(&scenario.context(p, k));
            (!(c >= 0.0)).then_some((p, k, c))
        })
    });
    if let Some((p, k, c)) = negative {
        return Err(Error::InvalidArgument(format!(
            "consumption rate {c} is negative at node {k} of path {p}"
        )));
    }
    let base = problem.driver.clone();
    let c = consumption.clone();
    let augmented = BsdeProblem {
        driver: Arc::new(move |ctx, y, z| base(ctx, y, z) + c.eval_scalar(ctx)),
        terminal: problem.terminal.clone(),
        lipschitz: problem.lipschitz,
        zero_bound: problem.zero_bound + consumption.bound(),
    };
    let mut sol = solve_backward_euler(&augmented, ce)?;
    sol.diagnostics.method = "supersolution".into();
    Ok(sol)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AprioriReport {
    pub weight: f64,
    pub lipschitz: f64,
    pub dy_norm_sq: f64,
    pub dz_norm_sq: f64,
    /// `e^{βT} E|δY_T|²`.
    pub terminal_term: f64,
    /// `‖δ₂f‖²_β`.
    pub driver_gap_sq: f64,
    pub bound_y: f64,
    pub bound_z: f64,
}

impl AprioriReport {
    pub fn slack_y(&self) -> f64 {
        self.bound_y - self.dy_norm_sq
    }

    pub fn slack_z(&self) -> f64 {
        self.bound_z - self.dz_norm_sq
    }

    pub fn satisfied(&self) -> bool {
        self.slack_y() >= 0.0 && self.slack_z() >= 0.0
    }
}

/// Evaluates both sides of the a priori estimates
/// `‖δY‖²_β ≤ T(e^{βT}E|δY_T|² + ‖δ₂f‖²_β/(β-2C-C²))` and
/// `‖δZ‖²_β ≤ (2+2C²T)(e^{βT}E|δY_T|² + ‖δ₂f‖²_β/(β-2C-C²))`,
/// with `δ₂f = f¹(Y², Z²) - f²(Y², Z²)` and `C` the constant of `f¹`.
pub fn apriori_gap(
    first: &BsdeSolution,
    second: &BsdeSolution,
    problem1: &BsdeProblem,
    problem2: &BsdeProblem,
    weight: f64,
    scenario: &Scenario<'_>,
) -> Result<AprioriReport> {
    let c = problem1.lipschitz;
    if !(weight > c * (2.0 + c)) {
        return Err(Error::InvalidArgument(format!(
            "weight β = {weight} must exceed C(2+C) = {}",
            c * (2.0 + c)
        )));
    }
    let grid = scenario.bundle().grid();
    let (steps, horizon) = (grid.steps(), grid.horizon());
    let dy = difference(&first.y, &second.y);
    let dz = difference(&first.z, &second.z);
    let terminal: Vec<f64> = (0..scenario.n_paths())
        .map(|p| dy.scalar(p, steps).powi(2))
        .collect();
    let terminal_term = (weight * horizon).exp() * stats::mean(&terminal);
    let gap = DiscreteProcess::from_node_fn(
        scenario.bundle().grid_arc().clone(),
        1,
        scenario.n_paths(),
        |p, k, out| {
            if k < steps {
                let ctx = scenario.context(p, k);
                let y = second.y.scalar(p, k);
                let z = second.z.at(p, k);
                out[0] = problem1.driver(&ctx, y, z) - problem2.driver(&ctx, y, z);
            }
        },
    );
    let driver_gap_sq = weighted_norm_sq(&gap, weight);
    let inner = terminal_term + driver_gap_sq / (weight - 2.0 * c - c * c);
    Ok(AprioriReport {
        weight,
        lipschitz: c,
        dy_norm_sq: weighted_norm_sq(&dy, weight),
        dz_norm_sq: weighted_norm_sq(&dz, weight),
        terminal_term,
        driver_gap_sq,
        bound_y: horizon * inner,
        bound_z: (2.0 + 2.0 * c * c * horizon) * inner,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::MarketModel;
    use crate::paths::{PathBundle, TimeGrid};
    use crate::regression::RegressionBasis;

    fn setup(paths: usize, steps: usize) -> (MarketModel, PathBundle) {
        let m = MarketModel::black_scholes(0.05, 0.2, 0.04, 100.0).unwrap();
        let g = TimeGrid::uniform(1.0, steps).unwrap();
        let b = PathBundle::sample(&g, 1, paths, 17).unwrap();
        (m, b)
    }

    fn constant_payoff(c: f64) -> PayoffFn {
        Arc::new(move |_| c)
    }

    #[test]
    fn zero_driver_keeps_constant() {
        let (m, b) = setup(2000, 10);
        let sc = m.scenario(&b).unwrap();
        let ce = ConditionalExpectation::new(&sc, &RegressionBasis::default()).unwrap();
        let spec = LinearDriverSpec::constant(0.0, 0.0, vec![0.0]);
        let sol = solve_linear(&spec, &vec![2.5; 2000], &ce).unwrap();
        assert!(sol.y.values().iter().all(|v| (v - 2.5).abs() < 1e-12));
        assert!(sol.z.values().iter().all(|v| v.abs() < 1e-12));

        let problem = spec.to_problem(constant_payoff(2.5));
        let be = solve_backward_euler(&problem, &ce).unwrap();
        assert!(be.y.values().iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn unit_inhomogeneity_integrates_time() {
        let (m, b) = setup(1000, 8);
        let sc = m.scenario(&b).unwrap();
        let ce = ConditionalExpectation::new(&sc, &RegressionBasis::default()).unwrap();
        let spec = LinearDriverSpec::constant(1.0, 0.0, vec![0.0]);
        let sol = solve_linear(&spec, &vec![0.0; 1000], &ce).unwrap();
        assert!((sol.y0() - 1.0).abs() < 1e-10);
        for k in 0..=8 {
            let t = b.grid().time(k);
            assert!((sol.y.scalar(3, k) - (1.0 - t)).abs() < 1e-10);
        }
    }

    #[test]
    fn terminal_node_is_exact() {
        let (m, b) = setup(1500, 10);
        let sc = m.scenario(&b).unwrap();
        let ce = ConditionalExpectation::new(&sc, &RegressionBasis::default()).unwrap();
        let payoff: PayoffFn = Arc::new(|s| (s[0] - 100.0).max(0.0));
        let spec = LinearDriverSpec::constant(0.3, -0.05, vec![0.1]);
        let problem = spec.to_problem(payoff.clone());
        let xi = problem.terminal_values(&sc);
        for sol in [
            solve_linear(&spec, &xi, &ce).unwrap(),
            solve_backward_euler(&problem, &ce).unwrap(),
            solve_picard(
                &problem,
                &PicardConfig {
                    weight: 1.0,
                    max_iterations: 30,
                    tolerance: 1e-12,
                },
                &ce,
            )
            .unwrap(),
        ] {
            assert_eq!(sol.y.terminal_values(), xi);
        }
    }

    #[test]
    fn stability_violation_is_reported() {
        let (m, b) = setup(500, 2);
        let sc = m.scenario(&b).unwrap();
        let ce = ConditionalExpectation::new(&sc, &RegressionBasis::default()).unwrap();
        let problem =
            LinearDriverSpec::constant(0.0, -3.0, vec![0.0]).to_problem(constant_payoff(1.0));
        let err = solve_backward_euler(&problem, &ce).unwrap_err();
        assert!(
            matches!(err, Error::InvalidArgument(ref m) if m.contains("increase the number of steps"))
        );
    }

    #[test]
    fn picard_zero_driver_converges_in_one_iteration() {
        let (m, b) = setup(2000, 10);
        let sc = m.scenario(&b).unwrap();
        let ce = ConditionalExpectation::new(&sc, &RegressionBasis::default()).unwrap();
        let payoff: PayoffFn = Arc::new(|s| s[0]);
        let problem = BsdeProblem::new(Arc::new(|_, _, _| 0.0), payoff, 0.0);
        let sol = solve_picard(
            &problem,
            &PicardConfig {
                weight: 1.0,
                max_iterations: 5,
                tolerance: 1e-20,
            },
            &ce,
        )
        .unwrap();
        assert_eq!(sol.diagnostics.iterations, 1);
        let xi = problem.terminal_values(&sc);
        assert!((sol.y0() - stats::mean(&xi)).abs() < 1e-9);
    }

    #[test]
    fn picard_rejects_small_weight_and_reports_non_convergence() {
        let (m, b) = setup(500, 10);
        let sc = m.scenario(&b).unwrap();
        let ce = ConditionalExpectation::new(&sc, &RegressionBasis::default()).unwrap();
        let problem =
            LinearDriverSpec::constant(0.1, 0.5, vec![0.5]).to_problem(constant_payoff(1.0));
        let cfg = PicardConfig {
            weight: 0.5,
            max_iterations: 10,
            tolerance: 1e-12,
        };
        assert!(matches!(
            solve_picard(&problem, &cfg, &ce),
            Err(Error::InvalidArgument(_))
        ));
        let cfg = PicardConfig {
            weight: 10.0,
            max_iterations: 2,
            tolerance: 1e-30,
        };
        match solve_picard(&problem, &cfg, &ce) {
            Err(Error::Convergence { iterations, ratios }) => {
                assert_eq!(iterations, 2);
                assert_eq!(ratios.len(), 1);
            }
            other => panic!("expected convergence failure, got {other:?}"),
        }
    }

    #[test]
    fn negative_consumption_is_rejected() {
        let (m, b) = setup(500, 5);
        let sc = m.scenario(&b).unwrap();
        let ce = ConditionalExpectation::new(&sc, &RegressionBasis::default()).unwrap();
        let problem = BsdeProblem::new(Arc::new(|_, _, _| 0.0), constant_payoff(0.0), 0.0);
        let err =
            supersolution_from_consumption(&problem, &NodeSpec::scalar(-0.1), &ce).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
        let sol = supersolution_from_consumption(&problem, &NodeSpec::scalar(1.0), &ce).unwrap();
        for k in 0..=5 {
            let t = b.grid().time(k);
            assert!((sol.y.scalar(0, k) - (1.0 - t)).abs() < 1e-12);
        }
    }

    #[test]
    fn apriori_identical_inputs_have_zero_gap() {
        let (m, b) = setup(800, 6);
        let sc = m.scenario(&b).unwrap();
        let ce = ConditionalExpectation::new(&sc, &RegressionBasis::default()).unwrap();
        let problem =
            LinearDriverSpec::constant(0.2, -0.05, vec![0.1]).to_problem(Arc::new(|s| s[0]));
        let sol = solve_backward_euler(&problem, &ce).unwrap();
        let r = apriori_gap(&sol, &sol, &problem, &problem, 1.0, &sc).unwrap();
        assert_eq!(r.dy_norm_sq, 0.0);
        assert_eq!(r.dz_norm_sq, 0.0);
        assert_eq!(r.bound_y, 0.0);
        assert_eq!(r.bound_z, 0.0);
        assert!(r.satisfied());
        assert!(apriori_gap(&sol, &sol, &problem, &problem, 0.1, &sc).is_err());
    }

    #[test]
    fn standard_check_flags_understated_lipschitz() {
        let (m, b) = setup(100, 5);
        let sc = m.scenario(&b).unwrap();
        let spec = LinearDriverSpec::constant(0.1, 0.3, vec![-0.2]);
        let ok = spec
            .to_problem(constant_payoff(0.0))
            .check_standard(&sc, 500, 10.0, 1);
        assert!(ok.holds(), "{ok:?}");
        let lying = BsdeProblem::new(spec.driver(), constant_payoff(0.0), 0.1).with_zero_bound(0.1);
        assert!(!lying.check_standard(&sc, 500, 10.0, 1).holds());
    }
}

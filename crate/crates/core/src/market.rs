//! The bond/stock market: coefficient specifications, simulated prices, the
//! risk premium, deflators and the risk-neutral density.
//!
//! The model stores the *excess* appreciation `b - r1` of the risky assets, so
//! the risk premium is the minimal-norm solution of `σθ = b - r1`,
//! `θ = σ*(σσ*)⁻¹(b - r1)`. Coefficients are functions of time and the current
//! risky prices.

use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;

use crate::linalg;
use crate::paths::{dot, DiscreteProcess, PathBundle};
use crate::{Error, Result};

/// Function of `(t, risky prices)`.
pub type StateFn<T> = Arc<dyn Fn(f64, &[f64]) -> T + Send + Sync>;

#[derive(Clone)]
pub enum Coefficient<T> {
    Constant(T),
    Dynamic(StateFn<T>),
}

impl<T: Clone> Coefficient<T> {
    pub fn eval(&self, t: f64, state: &[f64]) -> T {
        match self {
            Coefficient::Constant(v) => v.clone(),
            Coefficient::Dynamic(f) => f(t, state),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Coefficient::Constant(_))
    }
}

impl<T: fmt::Debug> fmt::Debug for Coefficient<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Constant(v) => write!(f, "Constant({v:?})"),
            Coefficient::Dynamic(_) => write!(f, "Dynamic(..)"),
        }
    }
}

/// Declared bounds: `|r| ≤ rate`, `|b - r1| ≤ excess` and
/// `ε|x| ≤ |σ*x| ≤ K|x|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub rate: f64,
    pub excess: f64,
    pub ellipticity_lower: f64,
    pub ellipticity_upper: f64,
}

#[derive(Debug, Clone)]
pub struct MarketModel {
    d: usize,
    n: usize,
    rate: Coefficient<f64>,
    excess: Coefficient<Vec<f64>>,
    sigma: Coefficient<Vec<f64>>,
    initial_prices: Vec<f64>,
    bounds: Bounds,
}

/// Relative eigenvalue threshold below which `σσ*` is treated as singular.
const SINGULAR_TOL: f64 = 1e-12;

impl MarketModel {
    /// Constant coefficients; `sigma` is `d × n` row-major. Bounds are taken
    /// from the values themselves. A singular `σ` is accepted here (prices can
    /// still be simulated) but any use of the risk premium fails.
    pub fn constant(
        rate: f64,
        excess: Vec<f64>,
        sigma: Vec<f64>,
        d: usize,
        n: usize,
    ) -> Result<Self> {
        check_dims(d, n, excess.len(), sigma.len())?;
        let ev = linalg::gram_eigenvalues(&sigma, d, n);
        let lower = ev[0].max(0.0).sqrt();
        let upper = ev[d - 1].sqrt();
        let bounds = Bounds {
            rate: rate.abs(),
            excess: linalg::norm(&excess),
            ellipticity_lower: lower,
            ellipticity_upper: upper,
        };
        Ok(Self {
            d,
            n,
            rate: Coefficient::Constant(rate),
            excess: Coefficient::Constant(excess),
            sigma: Coefficient::Constant(sigma),
            initial_prices: vec![1.0; d],
            bounds,
        })
    }

    /// One stock driven by one Brownian motion; `excess = b - r`.
    pub fn black_scholes(rate: f64, volatility: f64, excess: f64, spot: f64) -> Result<Self> {
        Ok(Self::constant(rate, vec![excess], vec![volatility], 1, 1)?
            .with_initial_prices(vec![spot]))
    }

    /// State-dependent coefficients with declared bounds.
    pub fn dynamic(
        d: usize,
        n: usize,
        rate: Coefficient<f64>,
        excess: Coefficient<Vec<f64>>,
        sigma: Coefficient<Vec<f64>>,
        bounds: Bounds,
    ) -> Result<Self> {
        if d == 0 || n == 0 || d > n {
            return Err(Error::invalid(format!("need 1 ≤ d ≤ n, got d={d}, n={n}")));
        }
        if !(bounds.ellipticity_lower >= 0.0
            && bounds.ellipticity_upper >= bounds.ellipticity_lower)
        {
            return Err(Error::invalid("ellipticity bounds must satisfy 0 ≤ ε ≤ K"));
        }
        Ok(Self {
            d,
            n,
            rate,
            excess,
            sigma,
            initial_prices: vec![1.0; d],
            bounds,
        })
    }

    pub fn with_initial_prices(mut self, prices: Vec<f64>) -> Self {
        assert_eq!(prices.len(), self.d, "one initial price per risky asset");
        assert!(
            prices.iter().all(|&p| p > 0.0),
            "initial prices must be positive"
        );
        self.initial_prices = prices;
        self
    }

    pub fn with_bounds(mut self, bounds: Bounds) -> Self {
        self.bounds = bounds;
        self
    }

    /// Number of risky assets.
    pub fn d(&self) -> usize {
        self.d
    }

    /// Brownian dimension.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn initial_prices(&self) -> &[f64] {
        &self.initial_prices
    }

    pub fn bounds(&self) -> Bounds {
        self.bounds
    }

    pub fn is_constant(&self) -> bool {
        self.rate.is_constant() && self.excess.is_constant() && self.sigma.is_constant()
    }

    /// Whether `σ` is square, so that hedges `π = (σ*)⁻¹Z` can be extracted.
    pub fn is_complete(&self) -> bool {
        self.d == self.n
    }

    pub fn rate_at(&self, t: f64, state: &[f64]) -> f64 {
        self.rate.eval(t, state)
    }

    pub fn excess_at(&self, t: f64, state: &[f64]) -> Vec<f64> {
        self.excess.eval(t, state)
    }

    pub fn sigma_at(&self, t: f64, state: &[f64]) -> Vec<f64> {
        self.sigma.eval(t, state)
    }

    /// Risk premium at a single `(t, state)`.
    pub fn risk_premium(&self, t: f64, state: &[f64]) -> Result<Vec<f64>> {
        let sigma = self.sigma_at(t, state);
        let excess = self.excess_at(t, state);
        risk_premium_from(&sigma, &excess, self.d, self.n, 0)
    }

    fn check_bounds(&self, rate: f64, excess: &[f64]) -> Result<()> {
        let slack = 1.0 + 1e-12;
        if rate.abs() > self.bounds.rate * slack {
            return Err(Error::Bound {
                name: "rate",
                value: rate,
                bound: self.bounds.rate,
            });
        }
        let e = linalg::norm(excess);
        if e > self.bounds.excess * slack {
            return Err(Error::Bound {
                name: "excess appreciation",
                value: e,
                bound: self.bounds.excess,
            });
        }
        Ok(())
    }

    /// Samples `samples` pairs `(t, state)` and checks the singular values of
    /// `σ*` against the declared ellipticity constants.
    pub fn validate_ellipticity(
        &self,
        horizon: f64,
        samples: usize,
        seed: u64,
    ) -> Result<EllipticityReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let time =
            Uniform::new_inclusive(0.0, horizon).map_err(|e| Error::invalid(e.to_string()))?;
        let mut report = EllipticityReport {
            samples,
            min_singular: f64::INFINITY,
            max_singular: 0.0,
            declared_lower: self.bounds.ellipticity_lower,
            declared_upper: self.bounds.ellipticity_upper,
        };
        for _ in 0..samples {
            let t = time.sample(&mut rng);
            let state: Vec<f64> = self
                .initial_prices
                .iter()
                .map(|&p| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    p * (0.5 * g).exp()
                })
                .collect();
            let ev = linalg::gram_eigenvalues(&self.sigma_at(t, &state), self.d, self.n);
            report.min_singular = report.min_singular.min(ev[0].max(0.0).sqrt());
            report.max_singular = report.max_singular.max(ev[self.d - 1].sqrt());
        }
        Ok(report)
    }

    /// Simulates prices and evaluates every coefficient along the bundle.
    pub fn scenario<'a>(&'a self, bundle: &'a PathBundle) -> Result<Scenario<'a>> {
        Scenario::build(self, bundle)
    }
}

fn check_dims(d: usize, n: usize, excess_len: usize, sigma_len: usize) -> Result<()> {
    if d == 0 || n == 0 || d > n {
        return Err(Error::invalid(format!("need 1 ≤ d ≤ n, got d={d}, n={n}")));
    }
    if excess_len != d {
        return Err(Error::Dimension(format!(
            "excess has {excess_len} entries, expected {d}"
        )));
    }
    if sigma_len != d * n {
        return Err(Error::Dimension(format!(
            "volatility has {sigma_len} entries, expected {d}×{n}"
        )));
    }
    Ok(())
}

/// Log-Euler simulation of the bond and the risky assets; exact for constant
/// coefficients. Checks the declared rate and excess bounds on every node.
fn price_paths(model: &MarketModel, bundle: &PathBundle) -> Result<DiscreteProcess> {
    if bundle.dim() != model.n {
        return Err(Error::Dimension(format!(
            "model has n={} Brownian factors but the bundle has {}",
            model.n,
            bundle.dim()
        )));
    }
    let grid = bundle.grid_arc().clone();
    let (d, n) = (model.d, model.n);
    let mut prices = DiscreteProcess::zeros(grid.clone(), d + 1, bundle.n_paths());
    let width = grid.nodes() * (d + 1);
    prices
        .values_mut()
        .par_chunks_mut(width)
        .enumerate()
        .try_for_each(|(path, out)| -> Result<()> {
            let dw = bundle.path_increments(path);
            let mut log_bond = 0.0;
            let mut s = model.initial_prices.clone();
            let mut log_s: Vec<f64> = s.iter().map(|x| x.ln()).collect();
            out[0] = 1.0;
            out[1..=d].copy_from_slice(&s);
            for k in 0..grid.steps() {
                let t = grid.time(k);
                let rk = model.rate_at(t, &s);
                let ek = model.excess_at(t, &s);
                let sk = model.sigma_at(t, &s);
                if ek.len() != d || sk.len() != d * n {
                    return Err(Error::Dimension(format!(
                        "coefficient functions returned wrong sizes at node {k}"
                    )));
                }
                model.check_bounds(rk, &ek)?;
                let h = grid.dt(k);
                let w = &dw[k * n..(k + 1) * n];
                log_bond += rk * h;
                let row = (k + 1) * (d + 1);
                out[row] = log_bond.exp();
                for i in 0..d {
                    let srow = &sk[i * n..(i + 1) * n];
                    log_s[i] += (rk + ek[i] - 0.5 * dot(srow, srow)) * h + dot(srow, w);
                    s[i] = log_s[i].exp();
                    out[row + 1 + i] = s[i];
                }
            }
            Ok(())
        })?;
    Ok(prices)
}

/// Minimal-norm `θ` with `σθ = excess`.
pub fn risk_premium_from(
    sigma: &[f64],
    excess: &[f64],
    d: usize,
    n: usize,
    node: usize,
) -> Result<Vec<f64>> {
    let u =
        linalg::solve_gram(sigma, d, n, excess, SINGULAR_TOL).ok_or_else(|| Error::Degenerate {
            node,
            detail: "σσ* is singular; risk premium undefined".into(),
        })?;
    Ok(linalg::transpose_apply(sigma, d, n, &u))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipticityReport {
    pub samples: usize,
    pub min_singular: f64,
    pub max_singular: f64,
    pub declared_lower: f64,
    pub declared_upper: f64,
}

impl EllipticityReport {
    pub fn holds(&self) -> bool {
        let tol = 1e-12;
        self.min_singular >= self.declared_lower * (1.0 - tol)
            && self.max_singular <= self.declared_upper * (1.0 + tol)
    }
}

/// Coefficient values along a bundle; stored once when they do not vary.
#[derive(Debug, Clone)]
pub enum Field {
    Uniform(Vec<f64>),
    Paths(DiscreteProcess),
}

impl Field {
    #[inline]
    pub fn at(&self, path: usize, k: usize) -> &[f64] {
        match self {
            Field::Uniform(v) => v,
            Field::Paths(p) => p.at(path, k),
        }
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self, Field::Uniform(_))
    }
}

/// Everything a driver may look at on one node of one path.
#[derive(Debug, Clone, Copy)]
pub struct NodeContext<'a> {
    pub path: usize,
    pub node: usize,
    pub t: f64,
    /// Length of the step leaving this node (zero at the terminal node).
    pub dt: f64,
    pub bond: f64,
    /// Risky asset prices.
    pub prices: &'a [f64],
    pub rate: f64,
    pub theta: &'a [f64],
    /// `d × n` row-major volatility.
    pub sigma: &'a [f64],
    pub d: usize,
    pub n: usize,
}

impl NodeContext<'_> {
    /// `σ⁻¹1` for a square volatility matrix.
    pub fn sigma_inverse_ones(&self) -> Option<Vec<f64>> {
        if self.d != self.n {
            return None;
        }
        linalg::solve_square(self.sigma, self.n, &vec![1.0; self.n])
    }
}

/// A market model evaluated along a path bundle.
#[derive(Debug, Clone)]
pub struct Scenario<'a> {
    model: &'a MarketModel,
    bundle: &'a PathBundle,
    prices: DiscreteProcess,
    rate: Field,
    theta: Field,
    sigma: Field,
}

impl<'a> Scenario<'a> {
    fn build(model: &'a MarketModel, bundle: &'a PathBundle) -> Result<Self> {
        let prices = price_paths(model, bundle)?;
        let grid = bundle.grid_arc().clone();
        let (d, n, np) = (model.d, model.n, bundle.n_paths());

        if model.is_constant() {
            let s0 = &model.initial_prices;
            let rate = model.rate_at(0.0, s0);
            let excess = model.excess_at(0.0, s0);
            let sigma = model.sigma_at(0.0, s0);
            let theta = risk_premium_from(&sigma, &excess, d, n, 0)?;
            return Ok(Self {
                model,
                bundle,
                prices,
                rate: Field::Uniform(vec![rate]),
                theta: Field::Uniform(theta),
                sigma: Field::Uniform(sigma),
            });
        }

        let nodes = grid.nodes();
        let mut rate = DiscreteProcess::zeros(grid.clone(), 1, np);
        let mut theta = DiscreteProcess::zeros(grid.clone(), n, np);
        let mut sigma = DiscreteProcess::zeros(grid.clone(), d * n, np);
        rate.values_mut()
            .par_chunks_mut(nodes)
            .zip(theta.values_mut().par_chunks_mut(nodes * n))
            .zip(sigma.values_mut().par_chunks_mut(nodes * d * n))
            .enumerate()
            .try_for_each(|(path, ((r, th), sg))| -> Result<()> {
                for k in 0..nodes {
                    let t = grid.time(k);
                    let s = &prices.at(path, k)[1..];
                    let sk = model.sigma_at(t, s);
                    let ek = model.excess_at(t, s);
                    r[k] = model.rate_at(t, s);
                    th[k * n..(k + 1) * n].copy_from_slice(&risk_premium_from(&sk, &ek, d, n, k)?);
                    sg[k * d * n..(k + 1) * d * n].copy_from_slice(&sk);
                }
                Ok(())
            })?;
        Ok(Self {
            model,
            bundle,
            prices,
            rate: Field::Paths(rate),
            theta: Field::Paths(theta),
            sigma: Field::Paths(sigma),
        })
    }

    pub fn model(&self) -> &MarketModel {
        self.model
    }

    pub fn bundle(&self) -> &PathBundle {
        self.bundle
    }

    pub fn n_paths(&self) -> usize {
        self.bundle.n_paths()
    }

    pub fn steps(&self) -> usize {
        self.bundle.grid().steps()
    }

    /// Bond price in component 0, risky prices in components `1..=d`.
    pub fn prices(&self) -> &DiscreteProcess {
        &self.prices
    }

    pub fn rate(&self) -> &Field {
        &self.rate
    }

    pub fn theta(&self) -> &Field {
        &self.theta
    }

    pub fn sigma(&self) -> &Field {
        &self.sigma
    }

    /// Risky prices at node `k`.
    #[inline]
    pub fn risky(&self, path: usize, k: usize) -> &[f64] {
        &self.prices.at(path, k)[1..]
    }

    /// Risky prices at the terminal node.
    pub fn terminal_risky(&self, path: usize) -> &[f64] {
        self.risky(path, self.steps())
    }

    #[inline]
    pub fn context(&self, path: usize, k: usize) -> NodeContext<'_> {
        let grid = self.bundle.grid();
        let p = self.prices.at(path, k);
        NodeContext {
            path,
            node: k,
            t: grid.time(k),
            dt: if k < grid.steps() { grid.dt(k) } else { 0.0 },
            bond: p[0],
            prices: &p[1..],
            rate: self.rate.at(path, k)[0],
            theta: self.theta.at(path, k),
            sigma: self.sigma.at(path, k),
            d: self.model.d,
            n: self.model.n,
        }
    }

    /// `∫_0^T r dt` along each path (left-endpoint sum).
    pub fn integrated_rate(&self) -> Vec<f64> {
        let grid = self.bundle.grid();
        (0..self.n_paths())
            .into_par_iter()
            .map(|p| {
                (0..grid.steps())
                    .map(|k| self.rate.at(p, k)[0] * grid.dt(k))
                    .sum()
            })
            .collect()
    }

    /// Discount factor `exp(-∫_0^T r dt)` per path.
    pub fn discount_factors(&self) -> Vec<f64> {
        self.integrated_rate()
            .into_iter()
            .map(|x| (-x).exp())
            .collect()
    }

    /// Risk premium as a process.
    pub fn risk_premium(&self) -> DiscreteProcess {
        let n = self.model.n;
        DiscreteProcess::from_node_fn(
            self.bundle.grid_arc().clone(),
            n,
            self.n_paths(),
            |p, k, out| out.copy_from_slice(self.theta.at(p, k)),
        )
    }
}

/// Risk premium along a bundle as an `n`-vector process.
pub fn risk_premium(model: &MarketModel, bundle: &PathBundle) -> Result<DiscreteProcess> {
    Ok(model.scenario(bundle)?.risk_premium())
}

/// Bond and risky prices along a bundle (`d + 1` components).
pub fn simulate_prices(model: &MarketModel, bundle: &PathBundle) -> Result<DiscreteProcess> {
    price_paths(model, bundle)
}

/// Deflator `H^s_t` for `t ≥ s`.
#[derive(Debug, Clone)]
pub struct DeflatorPaths {
    base: usize,
    nodes: usize,
    values: Vec<f64>,
}

impl DeflatorPaths {
    pub fn base(&self) -> usize {
        self.base
    }

    /// `H^s_{t_k}` on path `path`; `k` must be at least the base node.
    pub fn at(&self, path: usize, k: usize) -> f64 {
        assert!(
            k >= self.base,
            "deflator started at node {} has no value at node {k}",
            self.base
        );
        let width = self.nodes - self.base;
        self.values[path * width + (k - self.base)]
    }

    pub fn terminal(&self) -> Vec<f64> {
        let width = self.nodes - self.base;
        self.values.chunks(width).map(|c| c[width - 1]).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// `H^s = E(-∫_s r du - ∫_s θ·dW)` on every path.
pub fn deflator(scenario: &Scenario<'_>, start: usize) -> Result<DeflatorPaths> {
    let grid = scenario.bundle.grid();
    let nodes = grid.nodes();
    if start >= nodes {
        return Err(Error::invalid(format!(
            "start node {start} outside a grid of {nodes} nodes"
        )));
    }
    let n = scenario.model.n;
    let width = nodes - start;
    let mut values = vec![0.0; scenario.n_paths() * width];
    values
        .par_chunks_mut(width)
        .enumerate()
        .for_each(|(path, out)| {
            let dw = scenario.bundle.path_increments(path);
            let mut log = 0.0;
            out[0] = 1.0;
            for k in start..grid.steps() {
                let th = scenario.theta.at(path, k);
                let r = scenario.rate.at(path, k)[0];
                log += (-r - 0.5 * dot(th, th)) * grid.dt(k) - dot(th, &dw[k * n..(k + 1) * n]);
                out[k + 1 - start] = log.exp();
            }
        });
    Ok(DeflatorPaths {
        base: start,
        nodes,
        values,
    })
}

/// Risk-neutral density `dQ/dP = e^{∫r} H_T = E(-∫θ·dW)_T` per path.
pub fn emm_weights(scenario: &Scenario<'_>) -> Vec<f64> {
    let grid = scenario.bundle.grid();
    let n = scenario.model.n;
    (0..scenario.n_paths())
        .into_par_iter()
        .map(|path| {
            let dw = scenario.bundle.path_increments(path);
            let mut log = 0.0;
            for k in 0..grid.steps() {
                let th = scenario.theta.at(path, k);
                log += -0.5 * dot(th, th) * grid.dt(k) - dot(th, &dw[k * n..(k + 1) * n]);
            }
            log.exp()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::TimeGrid;
    use crate::stats::mean_and_stderr;

    #[test]
    fn scalar_risk_premium() {
        let m = MarketModel::black_scholes(0.05, 0.2, 0.06, 100.0).unwrap();
        let th = m.risk_premium(0.0, &[100.0]).unwrap();
        assert!((th[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn minimal_norm_risk_premium() {
        let m = MarketModel::constant(0.0, vec![0.2], vec![1.0, 0.0], 1, 2).unwrap();
        let th = m.risk_premium(0.0, &[1.0]).unwrap();
        assert_eq!(th, vec![0.2, 0.0]);
        let m = MarketModel::constant(0.0, vec![0.0], vec![0.3, 0.4], 1, 2).unwrap();
        assert_eq!(m.risk_premium(0.0, &[1.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn singular_volatility_is_degenerate() {
        let m = MarketModel::constant(0.0, vec![0.1, 0.1], vec![1.0, 2.0, 2.0, 4.0], 2, 2).unwrap();
        assert!(matches!(
            m.risk_premium(0.0, &[1.0, 1.0]),
            Err(Error::Degenerate { .. })
        ));
        let g = TimeGrid::uniform(1.0, 2).unwrap();
        let b = PathBundle::sample(&g, 2, 3, 1).unwrap();
        assert!(matches!(m.scenario(&b), Err(Error::Degenerate { .. })));
        assert!(
            !m.validate_ellipticity(1.0, 10, 0).unwrap().holds()
                || m.bounds().ellipticity_lower < 1e-6
        );
    }

    #[test]
    fn singular_dynamic_volatility_names_the_node() {
        let m = MarketModel::dynamic(
            1,
            1,
            Coefficient::Constant(0.0),
            Coefficient::Constant(vec![0.1]),
            Coefficient::Dynamic(Arc::new(|t, _| vec![if t > 0.5 { 0.0 } else { 0.2 }])),
            Bounds {
                rate: 1.0,
                excess: 1.0,
                ellipticity_lower: 0.1,
                ellipticity_upper: 1.0,
            },
        )
        .unwrap();
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        let b = PathBundle::sample(&g, 1, 3, 1).unwrap();
        match m.scenario(&b) {
            Err(Error::Degenerate { node, .. }) => assert_eq!(node, 3),
            other => panic!("expected degeneracy, got {other:?}"),
        }
    }

    #[test]
    fn riskless_market_prices() {
        let m = MarketModel::constant(0.03, vec![-0.03, -0.03], vec![0.0; 4], 2, 2).unwrap();
        let g = TimeGrid::uniform(1.0, 10).unwrap();
        let b = PathBundle::sample(&g, 2, 4, 2).unwrap();
        let prices = simulate_prices(&m, &b).unwrap();
        for p in 0..4 {
            for k in 0..=10 {
                let v = prices.at(p, k);
                assert!((v[2] - 1.0).abs() < 1e-14);
                assert!((v[0] - (0.03 * g.time(k)).exp()).abs() < 1e-14);
                assert!((v[1] - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rate_bound_is_enforced() {
        let m = MarketModel::dynamic(
            1,
            1,
            Coefficient::Dynamic(Arc::new(|t, _| 0.1 * t)),
            Coefficient::Constant(vec![0.0]),
            Coefficient::Constant(vec![0.2]),
            Bounds {
                rate: 0.05,
                excess: 1.0,
                ellipticity_lower: 0.2,
                ellipticity_upper: 0.2,
            },
        )
        .unwrap();
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        let b = PathBundle::sample(&g, 1, 2, 1).unwrap();
        assert!(matches!(
            m.scenario(&b),
            Err(Error::Bound { name: "rate", .. })
        ));
    }

    #[test]
    fn deflator_without_premium_is_discount() {
        let m = MarketModel::black_scholes(0.05, 0.2, 0.0, 1.0).unwrap();
        let g = TimeGrid::uniform(1.0, 20).unwrap();
        let b = PathBundle::sample(&g, 1, 8, 3).unwrap();
        let sc = m.scenario(&b).unwrap();
        let h = deflator(&sc, 0).unwrap();
        for v in h.terminal() {
            assert!((v - (-0.05f64).exp()).abs() < 1e-14);
        }
        assert!(emm_weights(&sc).iter().all(|&w| w == 1.0));
        let last = deflator(&sc, 20).unwrap();
        assert_eq!(last.values(), &[1.0; 8]);
        assert!(deflator(&sc, 21).is_err());
    }

    #[test]
    fn deflator_restarts_are_ratios() {
        let m = MarketModel::black_scholes(0.04, 0.25, 0.05, 1.0).unwrap();
        let g = TimeGrid::uniform(1.0, 12).unwrap();
        let b = PathBundle::sample(&g, 1, 50, 4).unwrap();
        let sc = m.scenario(&b).unwrap();
        let h0 = deflator(&sc, 0).unwrap();
        for s in [0, 3, 7, 12] {
            let hs = deflator(&sc, s).unwrap();
            for p in 0..50 {
                for k in s..=12 {
                    let ratio = h0.at(p, k) / h0.at(p, s);
                    assert!((hs.at(p, k) - ratio).abs() <= 1e-12 * ratio.abs());
                }
            }
        }
    }

    #[test]
    fn emm_weights_normalise() {
        let m = MarketModel::black_scholes(0.05, 0.2, 0.06, 1.0).unwrap();
        let g = TimeGrid::uniform(1.0, 10).unwrap();
        let b = PathBundle::sample(&g, 1, 20_000, 9).unwrap();
        let sc = m.scenario(&b).unwrap();
        let (mean, se) = mean_and_stderr(&emm_weights(&sc));
        assert!((mean - 1.0).abs() < 4.0 * se, "mean {mean} se {se}");
    }
}

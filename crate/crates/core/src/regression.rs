//! Least-squares estimates of conditional expectations on path ensembles.
//!
//! At each time node the targets are projected onto an affine span of state
//! features. Feature columns are centred and scaled before the normal
//! equations are formed, constant columns are absorbed into the intercept, and
//! a ridge term `λ` (default `1e-8 · n_paths`) is added to the non-intercept
//! diagonal. Every sum over paths is taken in fixed-size blocks so results do
//! not depend on the thread pool.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::market::Scenario;
use crate::{Error, Result};

/// Largest acceptable condition number of the scaled normal matrix.
pub const MAX_CONDITION: f64 = 1e12;

/// Default ridge per path.
pub const DEFAULT_RIDGE_PER_PATH: f64 = 1e-8;

const BLOCK: usize = 4096;

pub type FeatureFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

#[derive(Clone)]
pub enum FeatureMap {
    /// All monomials of total degree `1..=degree` in the (standardised) log
    /// prices of the risky assets; the intercept is always added.
    LogPricePolynomial { degree: usize },
    /// Per asset, the standardised log price and the hinges `(x - κ_j)⁺` at
    /// `knots` empirical quantiles of it at each node (additive across
    /// assets, no cross terms).
    LogPriceSpline { knots: usize },
    /// Per asset, step indicators `1{x ≥ κ_j}` at `bins - 1` empirical
    /// quantiles of the standardised log price. With one asset the fit is the
    /// bin mean, a positive (order-preserving) projection.
    LogPriceBins { bins: usize },
    /// User features of `(t, risky prices)`.
    Custom { count: usize, map: FeatureFn },
}

impl fmt::Debug for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureMap::LogPricePolynomial { degree } => write!(f, "LogPricePolynomial({degree})"),
            FeatureMap::LogPriceSpline { knots } => write!(f, "LogPriceSpline({knots})"),
            FeatureMap::LogPriceBins { bins } => write!(f, "LogPriceBins({bins})"),
            FeatureMap::Custom { count, .. } => write!(f, "Custom({count})"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegressionBasis {
    pub features: FeatureMap,
    /// Absolute ridge `λ`; `None` means `1e-8 · n_paths`.
    pub ridge: Option<f64>,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self::polynomial(4)
    }
}

impl RegressionBasis {
    pub fn polynomial(degree: usize) -> Self {
        Self {
            features: FeatureMap::LogPricePolynomial { degree },
            ridge: None,
        }
    }

    pub fn spline(knots: usize) -> Self {
        Self {
            features: FeatureMap::LogPriceSpline { knots },
            ridge: None,
        }
    }

    /// Piecewise-constant fit on `bins ≥ 1` quantile bins per asset.
    pub fn bins(bins: usize) -> Self {
        Self {
            features: FeatureMap::LogPriceBins { bins: bins.max(1) },
            ridge: None,
        }
    }

    pub fn custom(count: usize, map: FeatureFn) -> Self {
        Self {
            features: FeatureMap::Custom { count, map },
            ridge: None,
        }
    }

    pub fn with_ridge(mut self, ridge: f64) -> Self {
        self.ridge = Some(ridge);
        self
    }

    /// Number of regressors including the intercept for `d` risky assets.
    pub fn feature_count(&self, d: usize) -> usize {
        match &self.features {
            FeatureMap::LogPricePolynomial { degree } => binomial(d + degree, *degree),
            FeatureMap::LogPriceSpline { knots } => d * (knots + 1) + 1,
            FeatureMap::LogPriceBins { bins } => d * (bins - 1) + 1,
            FeatureMap::Custom { count, .. } => count + 1,
        }
    }

    fn ridge_for(&self, n_paths: usize) -> Result<f64> {
        let r = self
            .ridge
            .unwrap_or(DEFAULT_RIDGE_PER_PATH * n_paths as f64);
        if !(r >= 0.0 && r.is_finite()) {
            return Err(Error::invalid(format!(
                "ridge must be non-negative, got {r}"
            )));
        }
        Ok(r)
    }
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Exponent vectors of all monomials in `vars` variables with total degree in
/// `1..=degree`, graded then lexicographic.
fn monomial_exponents(vars: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut all = Vec::new();
    for total in 1..=degree {
        rec_exact(vars, total, &mut Vec::new(), &mut all);
    }
    all
}

fn rec_exact(vars: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if cur.len() + 1 == vars {
        cur.push(left);
        out.push(cur.clone());
        cur.pop();
        return;
    }
    for e in (0..=left).rev() {
        cur.push(e);
        rec_exact(vars, left - e, cur, out);
        cur.pop();
    }
}

/// Sums `f(i)` over `0..n` in fixed blocks; the block results are combined in
/// order so the total is independent of scheduling.
fn block_sum<F>(n: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let blocks: Vec<Vec<f64>> = (0..n.div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![0.0; width];
            for i in b * BLOCK..((b + 1) * BLOCK).min(n) {
                f(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; width];
    for b in blocks {
        for (t, v) in total.iter_mut().zip(b) {
            *t += v;
        }
    }
    total
}

/// A fitted least-squares projection for one design matrix.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    n_rows: usize,
    n_cols: usize,
    means: Vec<f64>,
    scales: Vec<f64>,
    kept: Vec<usize>,
    factor: Option<DMatrix<f64>>,
    condition: f64,
}

impl LeastSquares {
    /// Fits the normal equations for a row-major `n_rows × n_cols` design.
    pub fn fit(
        design: &[f64],
        n_rows: usize,
        n_cols: usize,
        ridge: f64,
        node: usize,
    ) -> Result<Self> {
        if design.len() != n_rows * n_cols {
            return Err(Error::Dimension(format!(
                "design has {} entries, expected {n_rows}×{n_cols}",
                design.len()
            )));
        }
        if n_rows == 0 {
            return Err(Error::invalid("regression needs at least one path"));
        }
        let nf = n_rows as f64;
        let sums = block_sum(n_rows, n_cols, |i, acc| {
            for (a, x) in acc.iter_mut().zip(&design[i * n_cols..(i + 1) * n_cols]) {
                *a += x;
            }
        });
        let means: Vec<f64> = sums.iter().map(|s| s / nf).collect();
        let sq = block_sum(n_rows, n_cols, |i, acc| {
            for j in 0..n_cols {
                let c = design[i * n_cols + j] - means[j];
                acc[j] += c * c;
            }
        });
        let scales: Vec<f64> = sq.iter().map(|s| (s / nf).sqrt()).collect();
        let kept: Vec<usize> = (0..n_cols)
            .filter(|&j| scales[j] > 0.0 && scales[j] > 1e-12 * means[j].abs())
            .collect();
        let p = kept.len();
        if n_rows < p + 1 {
            return Err(Error::invalid(format!(
                "regression at node {node} has {n_rows} paths for {} regressors",
                p + 1
            )));
        }
        let mut this = Self {
            n_rows,
            n_cols,
            means,
            scales,
            kept,
            factor: None,
            condition: 1.0,
        };
        if p == 0 {
            return Ok(this);
        }
        let gram = block_sum(n_rows, p * p, |i, acc| {
            let z = this.scaled_row(&design[i * n_cols..(i + 1) * n_cols]);
            for a in 0..p {
                for b in 0..p {
                    acc[a * p + b] += z[a] * z[b];
                }
            }
        });
        let mut g = DMatrix::from_row_slice(p, p, &gram);
        for a in 0..p {
            g[(a, a)] += ridge;
        }
        // The centred block is orthogonal to the intercept, whose Gram entry is n.
        let ev = (g.clone() / nf).symmetric_eigen().eigenvalues;
        let max = ev.iter().cloned().fold(1.0, f64::max);
        let min = ev.iter().cloned().fold(1.0, f64::min);
        let condition = if min > 0.0 { max / min } else { f64::INFINITY };
        if !(condition <= MAX_CONDITION) {
            return Err(Error::Conditioning { node, condition });
        }
        let chol = g
            .cholesky()
            .ok_or(Error::Conditioning { node, condition })?;
        this.factor = Some(chol.l());
        this.condition = condition;
        Ok(this)
    }

    fn scaled_row(&self, row: &[f64]) -> Vec<f64> {
        self.kept
            .iter()
            .map(|&j| (row[j] - self.means[j]) / self.scales[j])
            .collect()
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// Number of regressors actually used, intercept included.
    pub fn effective_regressors(&self) -> usize {
        self.kept.len() + 1
    }

    fn coefficients(&self, design: &[f64], targets: &[f64]) -> (f64, Vec<f64>) {
        let n = self.n_rows;
        let p = self.kept.len();
        let sums = block_sum(n, p + 1, |i, acc| {
            let y = targets[i];
            acc[0] += y;
            let z = self.scaled_row(&design[i * self.n_cols..(i + 1) * self.n_cols]);
            for a in 0..p {
                acc[a + 1] += z[a] * y;
            }
        });
        let intercept = sums[0] / n as f64;
        let beta = match &self.factor {
            None => Vec::new(),
            Some(l) => {
                let rhs = DVector::from_column_slice(&sums[1..]);
                let y = l.solve_lower_triangular(&rhs).expect("non-singular factor");
                let x = l
                    .transpose()
                    .solve_upper_triangular(&y)
                    .expect("non-singular factor");
                x.iter().cloned().collect()
            }
        };
        (intercept, beta)
    }

    /// Fitted values of the projection of `targets`.
    pub fn fitted(&self, design: &[f64], targets: &[f64]) -> Vec<f64> {
        assert_eq!(targets.len(), self.n_rows, "one target per design row");
        let (intercept, beta) = self.coefficients(design, targets);
        (0..self.n_rows)
            .into_par_iter()
            .map(|i| {
                let z = self.scaled_row(&design[i * self.n_cols..(i + 1) * self.n_cols]);
                intercept + z.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }
}

/// Projects per-path `targets` onto the affine span of per-path `features`
/// (row-major, `n_features` per path).
pub fn condexp_regress(
    targets: &[f64],
    features: &[f64],
    n_features: usize,
    ridge: Option<f64>,
) -> Result<Vec<f64>> {
    let n = targets.len();
    let lambda = ridge.unwrap_or(DEFAULT_RIDGE_PER_PATH * n as f64);
    if !(lambda >= 0.0) {
        return Err(Error::invalid("ridge must be non-negative"));
    }
    let ls = LeastSquares::fit(features, n, n_features, lambda, 0)?;
    Ok(ls.fitted(features, targets))
}

/// Node-wise conditional expectation operator on a scenario.
///
/// Node 0 carries the trivial σ-field, so expectations there are plain sample
/// means. Fits are computed once and reused for every target.
pub struct ConditionalExpectation<'s> {
    scenario: &'s Scenario<'s>,
    basis: RegressionBasis,
    fits: Vec<Option<NodeFit>>,
}

struct NodeFit {
    width: usize,
    /// Log-price standardisation per asset for polynomial features; `None`
    /// when the asset is deterministic at this node.
    standardise: Vec<Option<(f64, f64)>>,
    exponents: Vec<Vec<usize>>,
    /// Hinge or bin-edge locations per standardised asset (spline and bin features).
    knots: Vec<Vec<f64>>,
    ls: LeastSquares,
}

impl<'s> ConditionalExpectation<'s> {
    pub fn new(scenario: &'s Scenario<'s>, basis: &RegressionBasis) -> Result<Self> {
        let steps = scenario.steps();
        let n = scenario.n_paths();
        let ridge = basis.ridge_for(n)?;
        let needed = basis.feature_count(scenario.model().d());
        if n < needed {
            return Err(Error::invalid(format!(
                "{n} paths cannot support {needed} regression features"
            )));
        }
        let mut fits = Vec::with_capacity(steps + 1);
        fits.push(None);
        for k in 1..=steps {
            fits.push(Some(Self::fit_node(scenario, basis, k, ridge)?));
        }
        Ok(Self {
            scenario,
            basis: basis.clone(),
            fits,
        })
    }

    fn fit_node(
        scenario: &Scenario<'_>,
        basis: &RegressionBasis,
        k: usize,
        ridge: f64,
    ) -> Result<NodeFit> {
        let n = scenario.n_paths();
        let d = scenario.model().d();
        let standardise = |k: usize| -> Vec<Option<(f64, f64)>> {
            (0..d)
                .map(|i| {
                    let xs: Vec<f64> = (0..n).map(|p| scenario.risky(p, k)[i].ln()).collect();
                    let m = xs.iter().sum::<f64>() / n as f64;
                    let s = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64).sqrt();
                    if s > 1e-12 * m.abs().max(1.0) {
                        Some((m, s))
                    } else {
                        None
                    }
                })
                .collect()
        };
        let (standardise, exponents, knots, width) = match &basis.features {
            FeatureMap::LogPricePolynomial { degree } => {
                let st = standardise(k);
                let vars = st.iter().filter(|s| s.is_some()).count();
                let ex = if vars == 0 {
                    Vec::new()
                } else {
                    monomial_exponents(vars, *degree)
                };
                let w = ex.len();
                (st, ex, Vec::new(), w)
            }
            FeatureMap::LogPriceSpline { knots } => {
                let st = standardise(k);
                let q = quantile_edges(scenario, &st, k, *knots);
                let w = q.len() * (knots + 1);
                (st, Vec::new(), q, w)
            }
            FeatureMap::LogPriceBins { bins } => {
                let st = standardise(k);
                let q = quantile_edges(scenario, &st, k, bins - 1);
                let w = q.len() * (bins - 1);
                (st, Vec::new(), q, w)
            }
            FeatureMap::Custom { count, .. } => (Vec::new(), Vec::new(), Vec::new(), *count),
        };
        let mut fit = NodeFit {
            width,
            standardise,
            exponents,
            knots,
            ls: LeastSquares {
                n_rows: n,
                n_cols: 0,
                means: Vec::new(),
                scales: Vec::new(),
                kept: Vec::new(),
                factor: None,
                condition: 1.0,
            },
        };
        if width > 0 {
            let design = fit.design(scenario, &basis.features, k);
            fit.ls = LeastSquares::fit(&design, n, width, ridge, k)?;
        }
        Ok(fit)
    }

    pub fn basis(&self) -> &RegressionBasis {
        &self.basis
    }

    pub fn scenario(&self) -> &'s Scenario<'s> {
        self.scenario
    }

    /// Condition number of the fit at each node (1 at node 0).
    pub fn condition_numbers(&self) -> Vec<f64> {
        self.fits
            .iter()
            .map(|f| f.as_ref().map_or(1.0, |f| f.ls.condition))
            .collect()
    }

    /// Regressors used at node `k`, intercept included.
    pub fn regressors(&self, k: usize) -> usize {
        self.fits[k]
            .as_ref()
            .map_or(1, |f| f.ls.effective_regressors())
    }

    /// `E[target | F_k]` evaluated on every path.
    pub fn estimate(&self, k: usize, targets: &[f64]) -> Vec<f64> {
        self.estimate_many(k, &[targets]).pop().unwrap()
    }

    pub fn estimate_many(&self, k: usize, targets: &[&[f64]]) -> Vec<Vec<f64>> {
        let n = self.scenario.n_paths();
        match &self.fits[k] {
            None => targets
                .iter()
                .map(|t| vec![t.iter().sum::<f64>() / n as f64; n])
                .collect(),
            Some(fit) if fit.width == 0 => targets
                .iter()
                .map(|t| vec![fit.ls.coefficients(&[], t).0; n])
                .collect(),
            Some(fit) => {
                let design = fit.design(self.scenario, &self.basis.features, k);
                targets.iter().map(|t| fit.ls.fitted(&design, t)).collect()
            }
        }
    }

    /// Standard error of a fitted value at node `k`: residual scale times the
    /// square root of the average leverage `p / n`.
    pub fn fitted_stderr(&self, k: usize, targets: &[f64], fitted: &[f64]) -> f64 {
        let n = targets.len() as f64;
        let p = self.regressors(k) as f64;
        let rss: f64 = targets
            .iter()
            .zip(fitted)
            .map(|(y, f)| (y - f).powi(2))
            .sum();
        let dof = (n - p).max(1.0);
        (rss / dof).sqrt() * (p / n).sqrt()
    }
}

/// `count` empirical quantiles of each non-degenerate standardised log price.
fn quantile_edges(
    scenario: &Scenario<'_>,
    standardise: &[Option<(f64, f64)>],
    k: usize,
    count: usize,
) -> Vec<Vec<f64>> {
    let n = scenario.n_paths();
    standardise
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let (m, sd) = (*s)?;
            let mut xs: Vec<f64> = (0..n)
                .map(|p| (scenario.risky(p, k)[i].ln() - m) / sd)
                .collect();
            xs.sort_by(f64::total_cmp);
            Some(
                (1..=count)
                    .map(|j| xs[(j * (n - 1)) / (count + 1)])
                    .collect(),
            )
        })
        .collect()
}

impl NodeFit {
    fn design(&self, scenario: &Scenario<'_>, features: &FeatureMap, k: usize) -> Vec<f64> {
        let n = scenario.n_paths();
        let w = self.width;
        let mut design = vec![0.0; n * w];
        let t = scenario.bundle().grid().time(k);
        design.par_chunks_mut(w).enumerate().for_each(|(p, row)| {
            let s = scenario.risky(p, k);
            match features {
                FeatureMap::LogPricePolynomial { .. } => {
                    let xs: Vec<f64> = self
                        .standardise
                        .iter()
                        .zip(s)
                        .filter_map(|(st, &v)| st.map(|(m, sd)| (v.ln() - m) / sd))
                        .collect();
                    for (slot, ex) in row.iter_mut().zip(&self.exponents) {
                        *slot = ex
                            .iter()
                            .zip(&xs)
                            .map(|(&e, &x)| x.powi(e as i32))
                            .product();
                    }
                }
                FeatureMap::LogPriceSpline { .. } => {
                    let xs = self
                        .standardise
                        .iter()
                        .zip(s)
                        .filter_map(|(st, &v)| st.map(|(m, sd)| (v.ln() - m) / sd));
                    let mut slot = 0;
                    for (x, knots) in xs.zip(&self.knots) {
                        row[slot] = x;
                        slot += 1;
                        for kn in knots {
                            row[slot] = (x - kn).max(0.0);
                            slot += 1;
                        }
                    }
                }
                FeatureMap::LogPriceBins { .. } => {
                    let xs = self
                        .standardise
                        .iter()
                        .zip(s)
                        .filter_map(|(st, &v)| st.map(|(m, sd)| (v.ln() - m) / sd));
                    let mut slot = 0;
                    for (x, edges) in xs.zip(&self.knots) {
                        for e in edges {
                            row[slot] = if x >= *e { 1.0 } else { 0.0 };
                            slot += 1;
                        }
                    }
                }
                FeatureMap::Custom { map, .. } => map(t, s, row),
            }
        });
        design
    }
}

//! Time grids, Brownian path ensembles and the discrete stochastic calculus
//! every other module is built on.
//!
//! Storage is dense and path-major: a process with value dimension `m` on a
//! grid with `K` steps stores `n_paths * (K + 1) * m` floats, the increments of
//! a bundle `n_paths * K * n`. All integrals use left-endpoint evaluation, so
//! the value of an integrand at node `k` multiplies the increment of step `k`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::{Error, Result};

/// Ascending time nodes `0 = t_0 < t_1 < ... < t_K = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
    steps: Vec<f64>,
}

impl TimeGrid {
    /// Uniform grid with `steps` intervals of length `horizon / steps`.
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::invalid(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(Error::invalid("step count must be at least 1"));
        }
        let k = steps as f64;
        let mut times: Vec<f64> = (0..=steps).map(|i| horizon * (i as f64) / k).collect();
        times[steps] = horizon;
        Self::from_times(times)
    }

    /// Arbitrary strictly increasing grid starting at zero.
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::invalid("a grid needs at least two nodes"));
        }
        if times[0] != 0.0 {
            return Err(Error::invalid("first grid node must be 0"));
        }
        let steps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
        if let Some(bad) = steps.iter().position(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::invalid(format!(
                "grid not strictly increasing at step {bad}"
            )));
        }
        Ok(Self { times, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Number of steps `K`.
    pub fn steps(&self) -> usize {
        self.steps.len()
    }

    /// Number of nodes `K + 1`.
    pub fn nodes(&self) -> usize {
        self.times.len()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time(&self, k: usize) -> f64 {
        self.times[k]
    }

    /// Length of step `k`, i.e. `t_{k+1} - t_k`.
    pub fn dt(&self, k: usize) -> f64 {
        self.steps[k]
    }

    pub fn step_lengths(&self) -> &[f64] {
        &self.steps
    }

    pub fn max_step(&self) -> f64 {
        self.steps.iter().cloned().fold(0.0, f64::max)
    }
}

/// Seeded ensemble of discrete `n`-dimensional Brownian paths on a shared grid.
#[derive(Debug, Clone)]
pub struct PathBundle {
    grid: Arc<TimeGrid>,
    dim: usize,
    n_paths: usize,
    seed: Option<u64>,
    increments: Vec<f64>,
}

/// Generator for path `path` of a bundle seeded with `seed`.
///
/// Each path owns a ChaCha stream selected by its index, so the draws of a
/// path do not depend on how many paths exist or in which order they are
/// generated.
fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

impl PathBundle {
    /// Draws `n_paths` independent paths of an `n`-dimensional Brownian motion.
    pub fn sample(grid: &TimeGrid, dim: usize, n_paths: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("Brownian dimension must be at least 1"));
        }
        if n_paths == 0 {
            return Err(Error::invalid("path count must be at least 1"));
        }
        let k = grid.steps();
        let sqrt_dt: Vec<f64> = grid.step_lengths().iter().map(|h| h.sqrt()).collect();
        let mut increments = vec![0.0; n_paths * k * dim];
        increments
            .par_chunks_mut(k * dim)
            .enumerate()
            .for_each(|(path, chunk)| {
                let mut rng = path_rng(seed, path);
                for (step, row) in chunk.chunks_mut(dim).enumerate() {
                    for x in row.iter_mut() {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        *x = g * sqrt_dt[step];
                    }
                }
            });
        Ok(Self {
            grid: Arc::new(grid.clone()),
            dim,
            n_paths,
            seed: Some(seed),
            increments,
        })
    }

    /// Wraps externally supplied increments, laid out path-major then step.
    pub fn from_increments(
        grid: &TimeGrid,
        dim: usize,
        n_paths: usize,
        increments: Vec<f64>,
    ) -> Result<Self> {
        if dim == 0 || n_paths == 0 {
            return Err(Error::invalid("dimension and path count must be positive"));
        }
        let expected = n_paths * grid.steps() * dim;
        if increments.len() != expected {
            return Err(Error::Dimension(format!(
                "expected {expected} increments, got {}",
                increments.len()
            )));
        }
        Ok(Self {
            grid: Arc::new(grid.clone()),
            dim,
            n_paths,
            seed: None,
            increments,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn grid_arc(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Increment `ΔW_k` of path `path`.
    #[inline]
    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let k = self.grid.steps();
        let start = (path * k + step) * self.dim;
        &self.increments[start..start + self.dim]
    }

    /// All increments of one path, `K * n` values.
    pub fn path_increments(&self, path: usize) -> &[f64] {
        let len = self.grid.steps() * self.dim;
        &self.increments[path * len..(path + 1) * len]
    }

    /// Brownian position `W_{t_k}` along every path, as an `n`-vector process.
    pub fn brownian(&self) -> DiscreteProcess {
        let dim = self.dim;
        DiscreteProcess::from_path_fn(self.grid.clone(), dim, self.n_paths, |path, out| {
            let incs = self.path_increments(path);
            for k in 0..self.grid.steps() {
                for j in 0..dim {
                    out[(k + 1) * dim + j] = out[k * dim + j] + incs[k * dim + j];
                }
            }
        })
    }
}

/// Per-path, per-node values of an adapted process with value dimension `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteProcess {
    grid: Arc<TimeGrid>,
    dim: usize,
    n_paths: usize,
    values: Vec<f64>,
}

impl DiscreteProcess {
    pub fn zeros(grid: Arc<TimeGrid>, dim: usize, n_paths: usize) -> Self {
        let len = n_paths * grid.nodes() * dim;
        Self {
            grid,
            dim,
            n_paths,
            values: vec![0.0; len],
        }
    }

    /// The same vector at every node of every path.
    pub fn constant(grid: Arc<TimeGrid>, n_paths: usize, value: &[f64]) -> Self {
        let dim = value.len();
        let mut p = Self::zeros(grid, dim, n_paths);
        for chunk in p.values.chunks_mut(dim) {
            chunk.copy_from_slice(value);
        }
        p
    }

    pub fn from_values(
        grid: Arc<TimeGrid>,
        dim: usize,
        n_paths: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("process dimension must be positive"));
        }
        let expected = n_paths * grid.nodes() * dim;
        if values.len() != expected {
            return Err(Error::Dimension(format!(
                "expected {expected} process values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            grid,
            dim,
            n_paths,
            values,
        })
    }

    /// Builds a process path by path; `fill` receives a zeroed `(K+1) * m` slice.
    pub fn from_path_fn<F>(grid: Arc<TimeGrid>, dim: usize, n_paths: usize, fill: F) -> Self
    where
        F: Fn(usize, &mut [f64]) + Sync,
    {
        let mut p = Self::zeros(grid, dim, n_paths);
        let len = p.path_len();
        p.values
            .par_chunks_mut(len)
            .enumerate()
            .for_each(|(path, chunk)| fill(path, chunk));
        p
    }

    /// Builds a process node by node; `fill(path, k, out)` writes an `m`-vector.
    pub fn from_node_fn<F>(grid: Arc<TimeGrid>, dim: usize, n_paths: usize, fill: F) -> Self
    where
        F: Fn(usize, usize, &mut [f64]) + Sync,
    {
        Self::from_path_fn(grid, dim, n_paths, |path, chunk| {
            for (k, out) in chunk.chunks_mut(dim).enumerate() {
                fill(path, k, out);
            }
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn grid_arc(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    fn path_len(&self) -> usize {
        self.grid.nodes() * self.dim
    }

    /// Value vector at node `k` of path `path`.
    #[inline]
    pub fn at(&self, path: usize, k: usize) -> &[f64] {
        let start = path * self.path_len() + k * self.dim;
        &self.values[start..start + self.dim]
    }

    #[inline]
    pub fn at_mut(&mut self, path: usize, k: usize) -> &mut [f64] {
        let start = path * self.path_len() + k * self.dim;
        let dim = self.dim;
        &mut self.values[start..start + dim]
    }

    /// First component at node `k`; the natural accessor for scalar processes.
    #[inline]
    pub fn scalar(&self, path: usize, k: usize) -> f64 {
        self.values[path * self.path_len() + k * self.dim]
    }

    pub fn path(&self, path: usize) -> &[f64] {
        let len = self.path_len();
        &self.values[path * len..(path + 1) * len]
    }

    /// Component `j` at node `k` across all paths.
    pub fn column(&self, k: usize, j: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.at(p, k)[j]).collect()
    }

    /// Scalar values at node `k` across all paths.
    pub fn node_values(&self, k: usize) -> Vec<f64> {
        self.column(k, 0)
    }

    pub fn terminal_values(&self) -> Vec<f64> {
        self.node_values(self.grid.steps())
    }

    /// Sample mean of component `j` at node `k`.
    pub fn mean_at(&self, k: usize, j: usize) -> f64 {
        let s: f64 = (0..self.n_paths).map(|p| self.at(p, k)[j]).sum();
        s / self.n_paths as f64
    }

    pub fn map<F>(&self, f: F) -> DiscreteProcess
    where
        F: Fn(f64) -> f64 + Sync,
    {
        let values = self.values.par_iter().map(|&v| f(v)).collect();
        DiscreteProcess {
            grid: self.grid.clone(),
            dim: self.dim,
            n_paths: self.n_paths,
            values,
        }
    }

    pub(crate) fn same_grid(&self, grid: &TimeGrid) -> bool {
        same_grid(&self.grid, grid)
    }
}

pub(crate) fn same_grid(a: &TimeGrid, b: &TimeGrid) -> bool {
    std::ptr::eq(a, b) || a == b
}

fn check_against_bundle(p: &DiscreteProcess, bundle: &PathBundle, what: &str) -> Result<()> {
    if !p.same_grid(bundle.grid()) {
        return Err(Error::invalid(format!(
            "{what}: time grid differs from the bundle grid"
        )));
    }
    if p.n_paths() != bundle.n_paths() {
        return Err(Error::invalid(format!(
            "{what}: {} paths but the bundle has {}",
            p.n_paths(),
            bundle.n_paths()
        )));
    }
    Ok(())
}

/// Left-endpoint Itô sum `Σ_{j<k} Z_j · ΔW_j`, zero at node 0.
pub fn ito_integrate(integrand: &DiscreteProcess, bundle: &PathBundle) -> Result<DiscreteProcess> {
    check_against_bundle(integrand, bundle, "integrand")?;
    if integrand.dim() != bundle.dim() {
        return Err(Error::invalid(format!(
            "integrand has dimension {} but the Brownian motion has {}",
            integrand.dim(),
            bundle.dim()
        )));
    }
    let n = bundle.dim();
    let steps = bundle.grid().steps();
    Ok(DiscreteProcess::from_path_fn(
        bundle.grid_arc().clone(),
        1,
        bundle.n_paths(),
        |path, out| {
            let z = integrand.path(path);
            let dw = bundle.path_increments(path);
            let mut acc = 0.0;
            for k in 0..steps {
                acc += dot(&z[k * n..(k + 1) * n], &dw[k * n..(k + 1) * n]);
                out[k + 1] = acc;
            }
        },
    ))
}

/// `exp(Σ_{j<k} [a_j - ½|v_j|²] Δt_j + Σ_{j<k} v_j · ΔW_j)`, equal to 1 at node 0.
pub fn stochastic_exponential(
    drift: &DiscreteProcess,
    vol: &DiscreteProcess,
    bundle: &PathBundle,
) -> Result<DiscreteProcess> {
    check_against_bundle(drift, bundle, "drift")?;
    check_against_bundle(vol, bundle, "volatility")?;
    if drift.dim() != 1 {
        return Err(Error::invalid(
            "drift of a stochastic exponential must be scalar",
        ));
    }
    if vol.dim() != bundle.dim() {
        return Err(Error::invalid(format!(
            "volatility has dimension {} but the Brownian motion has {}",
            vol.dim(),
            bundle.dim()
        )));
    }
    let n = bundle.dim();
    let grid = bundle.grid();
    Ok(DiscreteProcess::from_path_fn(
        bundle.grid_arc().clone(),
        1,
        bundle.n_paths(),
        |path, out| {
            let a = drift.path(path);
            let v = vol.path(path);
            let dw = bundle.path_increments(path);
            let mut log = 0.0;
            out[0] = 1.0;
            for k in 0..grid.steps() {
                let vk = &v[k * n..(k + 1) * n];
                log += (a[k] - 0.5 * dot(vk, vk)) * grid.dt(k) + dot(vk, &dw[k * n..(k + 1) * n]);
                out[k + 1] = log.exp();
            }
        },
    ))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_grid_nodes() {
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        assert_eq!(g.times(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        let g = TimeGrid::uniform(2.0, 1).unwrap();
        assert_eq!(g.times(), &[0.0, 2.0]);
        let g = TimeGrid::uniform(0.5, 50).unwrap();
        assert_eq!(g.nodes(), 51);
        assert_eq!(g.horizon(), 0.5);
        for k in 0..50 {
            assert!((g.dt(k) - 0.01).abs() < 1e-15);
        }
    }

    #[test]
    fn grid_rejects_bad_arguments() {
        assert!(matches!(
            TimeGrid::uniform(0.0, 4),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            TimeGrid::uniform(-1.0, 4),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            TimeGrid::uniform(1.0, 0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(TimeGrid::from_times(vec![0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(TimeGrid::from_times(vec![0.1, 1.0]).is_err());
    }

    #[test]
    fn bundle_is_reproducible() {
        let g = TimeGrid::uniform(1.0, 10).unwrap();
        let a = PathBundle::sample(&g, 2, 64, 7).unwrap();
        let b = PathBundle::sample(&g, 2, 64, 7).unwrap();
        assert_eq!(a.increments(), b.increments());
        let c = PathBundle::sample(&g, 2, 64, 8).unwrap();
        assert_ne!(a.increments(), c.increments());
    }

    #[test]
    fn path_streams_do_not_depend_on_bundle_size() {
        let g = TimeGrid::uniform(1.0, 5).unwrap();
        let small = PathBundle::sample(&g, 1, 3, 11).unwrap();
        let large = PathBundle::sample(&g, 1, 300, 11).unwrap();
        for p in 0..3 {
            assert_eq!(small.path_increments(p), large.path_increments(p));
        }
    }

    #[test]
    fn bundle_rejects_zero_sizes() {
        let g = TimeGrid::uniform(1.0, 5).unwrap();
        assert!(PathBundle::sample(&g, 0, 3, 1).is_err());
        assert!(PathBundle::sample(&g, 1, 0, 1).is_err());
    }

    #[test]
    fn zero_integrand_gives_zero() {
        let g = TimeGrid::uniform(1.0, 8).unwrap();
        let b = PathBundle::sample(&g, 2, 16, 1).unwrap();
        let z = DiscreteProcess::zeros(b.grid_arc().clone(), 2, 16);
        let i = ito_integrate(&z, &b).unwrap();
        assert!(i.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_integrand_reproduces_path() {
        let g = TimeGrid::uniform(1.0, 8).unwrap();
        let b = PathBundle::sample(&g, 1, 16, 3).unwrap();
        let one = DiscreteProcess::constant(b.grid_arc().clone(), 16, &[1.0]);
        let i = ito_integrate(&one, &b).unwrap();
        let w = b.brownian();
        assert_eq!(i.values(), w.values());
    }

    #[test]
    fn deterministic_step_integrand_is_exact_sum() {
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        let incs = vec![0.5, -0.25, 1.0, 0.125];
        let b = PathBundle::from_increments(&g, 1, 1, incs.clone()).unwrap();
        let steps = [2.0, 2.0, -1.0, -1.0, 7.0];
        let z = DiscreteProcess::from_values(b.grid_arc().clone(), 1, 1, steps.to_vec()).unwrap();
        let i = ito_integrate(&z, &b).unwrap();
        let expected = [0.0, 1.0, 0.5, -0.5, -0.625];
        assert_eq!(i.values(), &expected);
    }

    #[test]
    fn integration_rejects_other_grids() {
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        let h = TimeGrid::uniform(1.0, 5).unwrap();
        let b = PathBundle::sample(&g, 1, 4, 1).unwrap();
        let z = DiscreteProcess::zeros(Arc::new(h), 1, 4);
        assert!(matches!(
            ito_integrate(&z, &b),
            Err(Error::InvalidArgument(_))
        ));
        let drift = DiscreteProcess::zeros(b.grid_arc().clone(), 1, 4);
        assert!(matches!(
            stochastic_exponential(&drift, &z, &b),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn exponential_of_zero_is_one() {
        let g = TimeGrid::uniform(1.0, 6).unwrap();
        let b = PathBundle::sample(&g, 2, 10, 5).unwrap();
        let a = DiscreteProcess::zeros(b.grid_arc().clone(), 1, 10);
        let v = DiscreteProcess::zeros(b.grid_arc().clone(), 2, 10);
        let e = stochastic_exponential(&a, &v, &b).unwrap();
        assert!(e.values().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn exponential_of_constant_drift() {
        let g = TimeGrid::uniform(1.0, 10).unwrap();
        let b = PathBundle::sample(&g, 1, 5, 5).unwrap();
        let a = DiscreteProcess::constant(b.grid_arc().clone(), 5, &[0.07]);
        let v = DiscreteProcess::zeros(b.grid_arc().clone(), 1, 5);
        let e = stochastic_exponential(&a, &v, &b).unwrap();
        for p in 0..5 {
            for k in 0..=10 {
                let t = g.time(k);
                assert!((e.scalar(p, k) - (0.07 * t).exp()).abs() < 1e-14);
            }
        }
    }
}

//! Convex duality for concave drivers: numeric polar functions, the
//! conjugacy relation, linear control families and the envelope of their
//! solutions.
//!
//! For a concave driver `f` the polar is `F(β, γ) = sup_{y,z} (f - βy - γ·z)`
//! and `f = inf_{β,γ} (F + βy + γ·z)`. The solution of the BSDE with driver
//! `f` is the essential infimum of the solutions with the linear drivers
//! `F(β, γ) + βy + γ·z`. Convex drivers are handled through
//! `-f(t, -y, -z)`, see [`mirror`].

use std::sync::Arc;

use rayon::prelude::*;

use crate::bsde::{solve_linear, BsdeSolution, DriverFn, LinearDriverSpec, NodeSpec};
use crate::paths::{dot, DiscreteProcess};
use crate::regression::ConditionalExpectation;
use crate::{Error, Result};

/// Values above this are treated as divergent.
pub const INFINITY_THRESHOLD: f64 = 1e12;
pub const DEFAULT_YZ_POINTS: usize = 41;

/// Rectangular grid over `(y, z) ∈ ℝ × ℝⁿ`.
#[derive(Debug, Clone, PartialEq)]
pub struct YzGrid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    points: usize,
}

impl YzGrid {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, points: usize) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::invalid(
                "grid bounds must have matching non-zero length",
            ));
        }
        if points < 3 {
            return Err(Error::invalid("need at least 3 points per axis"));
        }
        if lower
            .iter()
            .zip(&upper)
            .any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite())
        {
            return Err(Error::invalid("grid bounds must satisfy lower < upper"));
        }
        let total = (points as f64).powi(lower.len() as i32);
        if total > 5e7 {
            return Err(Error::invalid(format!(
                "grid with {total} points is too large"
            )));
        }
        Ok(Self {
            lower,
            upper,
            points,
        })
    }

    /// `[-half_y, half_y] × [-half_z, half_z]ⁿ`.
    pub fn symmetric(half_y: f64, half_z: f64, n: usize, points: usize) -> Result<Self> {
        let mut upper = vec![half_y];
        upper.extend(std::iter::repeat_n(half_z, n));
        let lower = upper.iter().map(|x| -x).collect();
        Self::new(lower, upper, points)
    }

    /// Box of half width five times the root mean square of `Y` and of each
    /// component of `Z` in a pilot solution.
    pub fn from_pilot(pilot: &BsdeSolution, points: usize) -> Result<Self> {
        let rms = |p: &DiscreteProcess, j: usize| -> f64 {
            let dim = p.dim();
            let vals = p.values();
            let count = vals.len() / dim;
            let s: f64 = vals.iter().skip(j).step_by(dim).map(|v| v * v).sum();
            let r = (s / count as f64).sqrt();
            if r > 1e-8 {
                5.0 * r
            } else {
                1.0
            }
        };
        let mut upper = vec![rms(&pilot.y, 0)];
        for j in 0..pilot.z.dim() {
            upper.push(rms(&pilot.z, j));
        }
        let lower = upper.iter().map(|x| -x).collect();
        Self::new(lower, upper, points)
    }

    /// Number of coordinates, `1 + n`.
    pub fn dims(&self) -> usize {
        self.lower.len()
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn step(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / (self.points - 1) as f64
    }

    fn coordinate(&self, axis: usize, i: isize) -> f64 {
        if i == self.points as isize - 1 {
            self.upper[axis]
        } else {
            self.lower[axis] + i as f64 * self.step(axis)
        }
    }

    fn len(&self) -> usize {
        self.points.pow(self.dims() as u32)
    }

    fn decode(&self, mut idx: usize, out: &mut [isize]) {
        for slot in out.iter_mut().rev() {
            *slot = (idx % self.points) as isize;
            idx /= self.points;
        }
    }

    fn point(&self, index: &[isize], out: &mut [f64]) {
        for (a, (&i, slot)) in index.iter().zip(out.iter_mut()).enumerate() {
            *slot = self.coordinate(a, i);
        }
    }
}

/// `-f(-y, -z)`: concave when `f` is convex, with the same Lipschitz constant.
pub fn mirror(driver: DriverFn) -> DriverFn {
    Arc::new(move |ctx, y, z| {
        let neg: Vec<f64> = z.iter().map(|v| -v).collect();
        -driver(ctx, -y, &neg)
    })
}

/// `sup_{(y,z) ∈ grid} f(y, z) - βy - γ·z`, or `+∞` when the maximum sits on
/// the boundary and the objective still increases one step outward, or when
/// it exceeds [`INFINITY_THRESHOLD`]. Ties go to the lowest grid index.
pub fn polar(f: &dyn Fn(f64, &[f64]) -> f64, beta: f64, gamma: &[f64], grid: &YzGrid) -> f64 {
    assert_eq!(
        gamma.len() + 1,
        grid.dims(),
        "control and grid dimensions differ"
    );
    let dims = grid.dims();
    let objective = |x: &[f64]| f(x[0], &x[1..]) - beta * x[0] - dot(gamma, &x[1..]);
    let mut index = vec![0isize; dims];
    let mut x = vec![0.0; dims];
    let mut best = f64::NEG_INFINITY;
    let mut best_index = vec![0isize; dims];
    for i in 0..grid.len() {
        grid.decode(i, &mut index);
        grid.point(&index, &mut x);
        let v = objective(&x);
        if v > best {
            best = v;
            best_index.copy_from_slice(&index);
        }
    }
    if !(best < INFINITY_THRESHOLD) {
        return f64::INFINITY;
    }
    let last = grid.points as isize - 1;
    let tol = 1e-12 * (1.0 + best.abs());
    for a in 0..dims {
        let outward = match best_index[a] {
            0 => -1,
            i if i == last => 1,
            _ => continue,
        };
        grid.point(&best_index, &mut x);
        x[a] += outward as f64 * grid.step(a);
        if objective(&x) > best + tol {
            return f64::INFINITY;
        }
    }
    best
}

/// Finite set of constant controls `(β, γ)` in the box `[-C, C]^{n+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    bound: f64,
    n: usize,
    /// Points per axis for product grids, `None` for explicit lists.
    resolution: Option<usize>,
    controls: Vec<(f64, Vec<f64>)>,
}

impl ControlGrid {
    /// Product grid with `points` values per axis.
    pub fn uniform(bound: f64, n: usize, points: usize) -> Result<Self> {
        if !(bound >= 0.0) || points == 0 {
            return Err(Error::invalid(
                "control grid needs C ≥ 0 and at least one point",
            ));
        }
        let axis: Vec<f64> = if points == 1 {
            vec![0.0]
        } else {
            (0..points)
                .map(|i| -bound + 2.0 * bound * i as f64 / (points - 1) as f64)
                .collect()
        };
        let total = points.pow(n as u32 + 1);
        let mut controls = Vec::with_capacity(total);
        for i in 0..total {
            let mut idx = i;
            let mut coords = vec![0.0; n + 1];
            for slot in coords.iter_mut().rev() {
                *slot = axis[idx % points];
                idx /= points;
            }
            controls.push((coords[0], coords[1..].to_vec()));
        }
        Ok(Self {
            bound,
            n,
            resolution: Some(points),
            controls,
        })
    }

    pub fn from_points(bound: f64, n: usize, controls: Vec<(f64, Vec<f64>)>) -> Result<Self> {
        if controls.is_empty() {
            return Err(Error::invalid("control grid is empty"));
        }
        let tol = 1e-12 * bound.max(1.0);
        for (i, (b, g)) in controls.iter().enumerate() {
            if g.len() != n {
                return Err(Error::Dimension(format!(
                    "control {i} has γ of length {}",
                    g.len()
                )));
            }
            if b.abs() > bound + tol || g.iter().any(|x| x.abs() > bound + tol) {
                return Err(Error::InvalidArgument(format!(
                    "control {i} lies outside [-{bound}, {bound}]"
                )));
            }
        }
        Ok(Self {
            bound,
            n,
            resolution: None,
            controls,
        })
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn resolution(&self) -> Option<usize> {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    pub fn controls(&self) -> &[(f64, Vec<f64>)] {
        &self.controls
    }
}

/// Polar values over a control grid at one evaluation context.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarTable {
    pub controls: ControlGrid,
    pub values: Vec<f64>,
}

impl PolarTable {
    pub fn build(
        f: &(dyn Fn(f64, &[f64]) -> f64 + Sync),
        controls: &ControlGrid,
        grid: &YzGrid,
    ) -> Self {
        let values = controls
            .controls()
            .par_iter()
            .map(|(b, g)| polar(f, *b, g, grid))
            .collect();
        Self {
            controls: controls.clone(),
            values,
        }
    }

    pub fn finite_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_finite()).count()
    }
}

/// `F + βy + γ·z` with `F` finite.
pub fn linear_family_driver(
    polar_value: f64,
    beta: f64,
    gamma: &[f64],
) -> Result<LinearDriverSpec> {
    if !polar_value.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "polar value is infinite at β = {beta}, γ = {gamma:?}"
        )));
    }
    Ok(LinearDriverSpec::constant(
        polar_value,
        beta,
        gamma.to_vec(),
    ))
}

/// Linear drivers for every control of a table; fails on any infinite entry.
pub fn linear_family(table: &PolarTable) -> Result<Vec<LinearDriverSpec>> {
    table
        .controls
        .controls()
        .iter()
        .zip(&table.values)
        .map(|((b, g), &v)| linear_family_driver(v, *b, g))
        .collect()
}

/// `min` over finite table entries of `F + βy + γ·z`.
pub fn conjugate_reconstruct(table: &PolarTable, y: f64, z: &[f64]) -> Result<f64> {
    table
        .controls
        .controls()
        .iter()
        .zip(&table.values)
        .filter(|(_, v)| v.is_finite())
        .map(|((b, g), v)| v + b * y + dot(g, z))
        .min_by(f64::total_cmp)
        .ok_or_else(|| Error::invalid("polar table has no finite entry"))
}

/// Path-wise, node-wise extremum over a family of linear solutions.
#[derive(Debug, Clone)]
pub struct Envelope {
    pub y: DiscreteProcess,
    /// Index of the achieving control per path and node, path-major.
    pub argopt: Vec<u32>,
    /// `Y₀` of each family member.
    pub member_y0: Vec<f64>,
    /// Standard error of each member's `Y₀`.
    pub member_stderr: Vec<f64>,
}

impl Envelope {
    pub fn y0(&self) -> f64 {
        self.y.scalar(0, 0)
    }

    /// Standard error of the member attaining the envelope at node 0.
    pub fn y0_stderr(&self) -> f64 {
        self.member_stderr[self.argopt[0] as usize]
    }

    pub fn control_at(&self, path: usize, k: usize) -> usize {
        let nodes = self.y.grid().nodes();
        self.argopt[path * nodes + k] as usize
    }
}

/// Solves every linear problem on the same scenario and takes the
/// node-wise minimum; ties go to the lowest index.
pub fn essinf_envelope(
    xi: &[f64],
    family: &[LinearDriverSpec],
    ce: &ConditionalExpectation<'_>,
) -> Result<Envelope> {
    envelope(xi, family, ce, |a, b| a < b)
}

/// As [`essinf_envelope`] with the maximum, for convex drivers.
pub fn esssup_envelope(
    xi: &[f64],
    family: &[LinearDriverSpec],
    ce: &ConditionalExpectation<'_>,
) -> Result<Envelope> {
    envelope(xi, family, ce, |a, b| a > b)
}

fn envelope<F>(
    xi: &[f64],
    family: &[LinearDriverSpec],
    ce: &ConditionalExpectation<'_>,
    better: F,
) -> Result<Envelope>
where
    F: Fn(f64, f64) -> bool + Sync,
{
    if family.is_empty() {
        return Err(Error::invalid("control family is empty"));
    }
    let solutions: Vec<BsdeSolution> = family
        .par_iter()
        .map(|spec| solve_linear(spec, xi, ce))
        .collect::<Result<_>>()?;
    let first = &solutions[0].y;
    let nodes = first.grid().nodes();
    let mut y = first.clone();
    let mut argopt = vec![0u32; first.n_paths() * nodes];
    y.values_mut()
        .par_iter_mut()
        .zip(argopt.par_iter_mut())
        .enumerate()
        .for_each(|(i, (v, arg))| {
            for (j, s) in solutions.iter().enumerate().skip(1) {
                let cand = s.y.values()[i];
                if better(cand, *v) {
                    *v = cand;
                    *arg = j as u32;
                }
            }
        });
    Ok(Envelope {
        y,
        argopt,
        member_y0: solutions.iter().map(|s| s.y0()).collect(),
        member_stderr: solutions.iter().map(|s| s.y0_stderr()).collect(),
    })
}

/// The node spec `φ = F` for a polar value that varies with the node.
pub fn dynamic_polar_phi(
    driver: DriverFn,
    beta: f64,
    gamma: Vec<f64>,
    grid: YzGrid,
    bound: f64,
) -> NodeSpec {
    NodeSpec::dynamic(
        1,
        bound,
        Arc::new(move |ctx, out| {
            let f = |y: f64, z: &[f64]| driver(ctx, y, z);
            out[0] = polar(&f, beta, &gamma, &grid);
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_grid(points: usize) -> YzGrid {
        YzGrid::new(vec![-10.0], vec![10.0], points).unwrap()
    }

    #[test]
    fn polar_of_linear_driver_is_its_intercept() {
        let grid = YzGrid::symmetric(5.0, 5.0, 2, 21).unwrap();
        let f = |y: f64, z: &[f64]| 0.7 + 0.3 * y - 0.2 * z[0] + 0.1 * z[1];
        let v = polar(&f, 0.3, &[-0.2, 0.1], &grid);
        assert!((v - 0.7).abs() < 1e-12);
        assert_eq!(polar(&f, 0.4, &[-0.2, 0.1], &grid), f64::INFINITY);
    }

    #[test]
    fn polar_of_negative_absolute_value() {
        let grid = line_grid(41);
        let f = |y: f64, _: &[f64]| -y.abs();
        for beta in [-1.0, -0.5, 0.0, 0.25, 1.0] {
            assert_eq!(polar(&f, beta, &[], &grid), 0.0, "β = {beta}");
        }
        for beta in [-1.5, 1.01, 2.0] {
            assert_eq!(polar(&f, beta, &[], &grid), f64::INFINITY, "β = {beta}");
        }
    }

    #[test]
    fn reconstruction_of_negative_absolute_value() {
        let grid = line_grid(41);
        let f = |y: f64, _: &[f64]| -y.abs();
        let controls = ControlGrid::from_points(
            1.0,
            0,
            [-1.0, -0.5, 0.0, 0.5, 1.0]
                .iter()
                .map(|b| (*b, vec![]))
                .collect(),
        )
        .unwrap();
        let table = PolarTable::build(&f, &controls, &grid);
        assert_eq!(table.finite_count(), 5);
        for y in [-3.0, -0.7, 0.0, 0.2, 4.0] {
            let r = conjugate_reconstruct(&table, y, &[]).unwrap();
            assert!(r >= f(y, &[]) - 1e-12);
            assert!(r - f(y, &[]) <= 0.5 * y.abs() + 1e-12);
        }
    }

    #[test]
    fn empty_or_infinite_tables_are_rejected() {
        let controls = ControlGrid::from_points(2.0, 0, vec![(2.0, vec![])]).unwrap();
        let table = PolarTable::build(&|y: f64, _: &[f64]| -y.abs(), &controls, &line_grid(11));
        assert!(conjugate_reconstruct(&table, 0.0, &[]).is_err());
        assert!(linear_family(&table).is_err());
        assert!(ControlGrid::from_points(1.0, 0, vec![]).is_err());
        assert!(ControlGrid::from_points(1.0, 1, vec![(0.5, vec![1.5])]).is_err());
    }

    #[test]
    fn linear_family_driver_round_trip() {
        let spec = linear_family_driver(0.0, 0.0, &[0.0]).unwrap();
        assert_eq!(spec.lipschitz(), 0.0);
        assert!(linear_family_driver(f64::INFINITY, 0.0, &[0.0]).is_err());
    }

    #[test]
    fn uniform_control_grid_stays_in_box() {
        let g = ControlGrid::uniform(0.5, 2, 3).unwrap();
        assert_eq!(g.len(), 27);
        assert!(g
            .controls()
            .iter()
            .all(|(b, z)| b.abs() <= 0.5 && z.iter().all(|x| x.abs() <= 0.5)));
        assert_eq!(g.controls()[0], (-0.5, vec![-0.5, -0.5]));
    }
}

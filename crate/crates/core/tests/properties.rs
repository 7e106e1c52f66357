//! Property tests for the module invariants.

use std::sync::Arc;

use bsdelab::bsde::{
    solve_backward_euler_with, solve_linear, solve_picard, BsdeProblem, LinearDriverSpec, NodeSpec,
    PicardConfig,
};
use bsdelab::cli::{run_config, ExperimentConfig, Overrides};
use bsdelab::concave::{essinf_envelope, esssup_envelope, polar, YzGrid};
use bsdelab::market::{deflator, MarketModel};
use bsdelab::paths::{
    ito_integrate, stochastic_exponential, DiscreteProcess, PathBundle, TimeGrid,
};
use bsdelab::pricing::{self, ClaimSpec};
use bsdelab::regression::{ConditionalExpectation, RegressionBasis};
use bsdelab::utility::{self, constraint_distance, ConstraintSet};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bundle(steps: usize, dim: usize, paths: usize, seed: u64) -> PathBundle {
    PathBundle::sample(&TimeGrid::uniform(1.0, steps).unwrap(), dim, paths, seed).unwrap()
}

/// Random well-conditioned `n × n` volatility, row-major.
fn random_sigma(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n * n)
        .map(|i| {
            let off = rng.random_range(-0.05..0.05);
            if i / n == i % n {
                0.2 + rng.random_range(0.0..0.2)
            } else {
                off
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn bundles_ignore_thread_count(seed in any::<u64>(), dim in 1usize..3) {
        let grid = TimeGrid::uniform(1.0, 7).unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| PathBundle::sample(&grid, dim, 300, seed).unwrap());
        let b = four.install(|| PathBundle::sample(&grid, dim, 300, seed).unwrap());
        prop_assert_eq!(a.increments(), b.increments());
    }

    #[test]
    fn stochastic_exponentials_are_positive(seed in any::<u64>(), a in -3.0f64..3.0, v in -3.0f64..3.0) {
        let b = bundle(20, 2, 200, seed);
        let grid = b.grid_arc().clone();
        let drift = DiscreteProcess::from_node_fn(grid.clone(), 1, 200, |p, k, out| out[0] = a * ((p + k) as f64).sin());
        let vol = DiscreteProcess::from_node_fn(grid, 2, 200, |_, k, out| {
            out[0] = v;
            out[1] = -v * (k as f64 / 20.0);
        });
        let e = stochastic_exponential(&drift, &vol, &b).unwrap();
        prop_assert!(e.values().iter().all(|x| *x > 0.0));
    }

    #[test]
    fn changing_a_later_increment_leaves_earlier_nodes(seed in any::<u64>(), k in 0usize..10, bump in -2.0f64..2.0) {
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let base = PathBundle::sample(&grid, 1, 50, seed).unwrap();
        let mut inc = base.increments().to_vec();
        for p in 0..50 {
            inc[p * 10 + k] += bump;
        }
        let moved = PathBundle::from_increments(&grid, 1, 50, inc).unwrap();
        let run = |b: &PathBundle| {
            let g = b.grid_arc().clone();
            let drift = DiscreteProcess::from_node_fn(g.clone(), 1, 50, |_, _, out| out[0] = 0.1);
            let vol = DiscreteProcess::from_node_fn(g, 1, 50, |_, _, out| out[0] = 0.3);
            let e = stochastic_exponential(&drift, &vol, b).unwrap();
            let w = b.brownian();
            let i = ito_integrate(&e, b).unwrap();
            (e, w, i)
        };
        let (e1, w1, i1) = run(&base);
        let (e2, w2, i2) = run(&moved);
        for p in 0..50 {
            for node in 0..=k {
                prop_assert_eq!(e1.at(p, node), e2.at(p, node));
                prop_assert_eq!(w1.at(p, node), w2.at(p, node));
                prop_assert_eq!(i1.at(p, node), i2.at(p, node));
            }
        }
    }

    #[test]
    fn ito_sum_of_step_function_is_exact(seed in any::<u64>(), levels in prop::collection::vec(-5.0f64..5.0, 8)) {
        let b = bundle(8, 1, 20, seed);
        let lv = levels.clone();
        let z = DiscreteProcess::from_node_fn(b.grid_arc().clone(), 1, 20, move |_, k, out| out[0] = lv[k.min(7)]);
        let i = ito_integrate(&z, &b).unwrap();
        for p in 0..20 {
            let mut acc = 0.0;
            for (k, level) in levels.iter().enumerate() {
                acc += level * b.increment(p, k)[0];
                prop_assert_eq!(i.scalar(p, k + 1), acc);
            }
        }
    }

    #[test]
    fn risk_premium_matches_direct_solve(seed in any::<u64>(), n in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = random_sigma(&mut rng, n);
        let excess: Vec<f64> = (0..n).map(|_| rng.random_range(-0.1..0.1)).collect();
        let m = MarketModel::constant(0.02, excess.clone(), sigma.clone(), n, n).unwrap();
        let b = bundle(3, n, 4, seed);
        let sc = m.scenario(&b).unwrap();
        let direct = DMatrix::from_row_slice(n, n, &sigma).lu().solve(&DVector::from_vec(excess)).unwrap();
        for (a, e) in sc.theta().at(0, 0).iter().zip(direct.iter()) {
            prop_assert!((a - e).abs() <= 1e-12, "{} vs {}", a, e);
        }
    }

    #[test]
    fn deflators_compose_and_prices_stay_positive(seed in any::<u64>(), start in 0usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = random_sigma(&mut rng, 2);
        let m = MarketModel::constant(0.03, vec![0.05, -0.02], sigma, 2, 2).unwrap().with_initial_prices(vec![50.0, 80.0]);
        let b = bundle(10, 2, 100, seed);
        let sc = m.scenario(&b).unwrap();
        let h0 = deflator(&sc, 0).unwrap();
        let hs = deflator(&sc, start).unwrap();
        for p in 0..100 {
            for k in start..=10 {
                let ratio = h0.at(p, k) / h0.at(p, start);
                prop_assert!((hs.at(p, k) - ratio).abs() <= 1e-12 * ratio.max(1.0));
                prop_assert!(h0.at(p, k) > 0.0);
                prop_assert!(sc.risky(p, k).iter().all(|x| *x > 0.0));
            }
        }
    }

    #[test]
    fn every_solver_ends_on_the_terminal_value(seed in any::<u64>(), phi in -1.0f64..1.0, beta in -0.5f64..0.5, gamma in -0.5f64..0.5) {
        let m = MarketModel::black_scholes(0.03, 0.2, 0.04, 100.0).unwrap();
        let b = bundle(10, 1, 500, seed);
        let sc = m.scenario(&b).unwrap();
        let ce = ConditionalExpectation::new(&sc, &RegressionBasis::default()).unwrap();
        let claim = ClaimSpec::put(0, 100.0);
        let xi = claim.values(&sc).unwrap();
        let spec = LinearDriverSpec::constant(phi, beta, vec![gamma]);
        let problem = spec.to_problem(claim.payoff().clone());
        let c = problem.lipschitz();
        let cfg = PicardConfig { weight: 4.0 * 3.0 * c * c + 1.0, max_iterations: 40, tolerance: 1e-12 };
        let sols = [
            solve_linear(&spec, &xi, &ce).unwrap(),
            solve_backward_euler_with(&problem, &xi, &ce).unwrap(),
            solve_picard(&problem, &cfg, &ce).unwrap(),
        ];
        for s in &sols {
            for (p, x) in xi.iter().enumerate() {
                prop_assert_eq!(s.y.scalar(p, 10), *x);
            }
        }
    }

    #[test]
    fn doubling_data_doubles_the_linear_solution(seed in any::<u64>(), phi in -1.0f64..1.0, beta in -0.5f64..0.5, gamma in -0.5f64..0.5) {
        let m = MarketModel::black_scholes(0.03, 0.2, 0.04, 100.0).unwrap();
        let b = bundle(10, 1, 800, seed);
        let sc = m.scenario(&b).unwrap();
        let ce = ConditionalExpectation::new(&sc, &RegressionBasis::default()).unwrap();
        let xi = ClaimSpec::call(0, 95.0).values(&sc).unwrap();
        let xi2: Vec<f64> = xi.iter().map(|x| 2.0 * x).collect();
        let one = solve_linear(&LinearDriverSpec::constant(phi, beta, vec![gamma]), &xi, &ce).unwrap();
        let two = solve_linear(&LinearDriverSpec::constant(2.0 * phi, beta, vec![gamma]), &xi2, &ce).unwrap();
        for (a, b) in one.y.values().iter().zip(two.y.values()) {
            prop_assert!((2.0 * a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn non_negative_data_give_non_negative_values(seed in any::<u64>(), phi in 0.0f64..1.0, beta in -0.5f64..0.5, gamma in -0.5f64..0.5, strike in 80.0f64..120.0) {
        let m = MarketModel::black_scholes(0.03, 0.25, 0.04, 100.0).unwrap();
        let b = bundle(20, 1, 2000, seed);
        let sc = m.scenario(&b).unwrap();
        let ce = ConditionalExpectation::new(&sc, &RegressionBasis::bins(32)).unwrap();
        let claim = ClaimSpec::call(0, strike);
        let xi = claim.values(&sc).unwrap();
        let problem = LinearDriverSpec::constant(phi, beta, vec![gamma]).to_problem(claim.payoff().clone());
        let sol = solve_backward_euler_with(&problem, &xi, &ce).unwrap();
        for k in 0..=20 {
            let se = sol.diagnostics.node_stderr[k];
            for p in 0..2000 {
                prop_assert!(sol.y.scalar(p, k) >= -3.0 * se);
            }
        }
    }

    #[test]
    fn ordered_data_give_ordered_solutions(seed in any::<u64>(), extra in 0.0f64..0.5, kink in 0.0f64..0.3, bump in 0.0f64..1.0) {
        let m = MarketModel::black_scholes(0.03, 0.25, 0.04, 100.0).unwrap();
        let b = bundle(20, 1, 2000, seed);
        let sc = m.scenario(&b).unwrap();
        let ce = ConditionalExpectation::new(&sc, &RegressionBasis::bins(32)).unwrap();
        let lower = LinearDriverSpec::constant(0.1, -0.2, vec![0.3]);
        let f2 = lower.driver();
        let f1 = {
            let f2 = f2.clone();
            Arc::new(move |ctx: &bsdelab::market::NodeContext<'_>, y: f64, z: &[f64]| f2(ctx, y, z) + extra + kink * z[0].abs())
        };
        let high = BsdeProblem::new(f1, Arc::new(move |s: &[f64]| (s[0] - 100.0).max(0.0) * (1.0 + bump)), 0.3 + kink);
        let low = BsdeProblem::new(f2, Arc::new(|s: &[f64]| (s[0] - 100.0).max(0.0)), 0.3);
        let y1 = solve_backward_euler_with(&high, &high.terminal_values(&sc), &ce).unwrap();
        let y2 = solve_backward_euler_with(&low, &low.terminal_values(&sc), &ce).unwrap();
        for k in 0..=20 {
            let se = y1.diagnostics.node_stderr[k].max(y2.diagnostics.node_stderr[k]);
            for p in 0..2000 {
                prop_assert!(y1.y.scalar(p, k) >= y2.y.scalar(p, k) - 3.0 * se);
            }
        }
    }

    #[test]
    fn fenchel_inequality_on_the_grid(a in 0.1f64..2.0, b in -1.0f64..1.0, beta in -1.0f64..1.0, gamma in -1.0f64..1.0) {
        // Concave test driver: f(y, z) = b - a y² / 2 - |z|.
        let f = move |y: f64, z: &[f64]| b - 0.5 * a * y * y - z[0].abs();
        let grid = YzGrid::symmetric(3.0, 3.0, 1, 41).unwrap();
        let value = polar(&f, beta, &[gamma], &grid);
        prop_assume!(value.is_finite());
        let hy = grid.step(0);
        let hz = grid.step(1);
        for i in 0..41 {
            for j in 0..41 {
                let y = -3.0 + i as f64 * hy;
                let z = -3.0 + j as f64 * hz;
                prop_assert!(f(y, &[z]) <= value + beta * y + gamma * z + 1e-12);
            }
        }
    }

    #[test]
    fn envelopes_shrink_when_controls_are_added_and_mirror_exactly(seed in any::<u64>(), phis in prop::collection::vec(-0.5f64..0.5, 3), betas in prop::collection::vec(-0.3f64..0.3, 3)) {
        let m = MarketModel::black_scholes(0.03, 0.2, 0.04, 100.0).unwrap();
        let b = bundle(10, 1, 1000, seed);
        let sc = m.scenario(&b).unwrap();
        let ce = ConditionalExpectation::new(&sc, &RegressionBasis::default()).unwrap();
        let xi = ClaimSpec::call(0, 100.0).values(&sc).unwrap();
        let family: Vec<LinearDriverSpec> = phis
            .iter()
            .zip(&betas)
            .map(|(p, b)| LinearDriverSpec::constant(*p, *b, vec![0.1 * b]))
            .collect();
        let small = essinf_envelope(&xi, &family[..2], &ce).unwrap();
        let large = essinf_envelope(&xi, &family, &ce).unwrap();
        for (s, l) in small.y.values().iter().zip(large.y.values()) {
            prop_assert!(l <= s);
        }
        let mirrored: Vec<LinearDriverSpec> = family.iter().map(|f| f.mirrored()).collect();
        let neg: Vec<f64> = xi.iter().map(|x| -x).collect();
        let sup = esssup_envelope(&neg, &mirrored, &ce).unwrap();
        for (a, b) in sup.y.values().iter().zip(large.y.values()) {
            prop_assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn prices_respect_claim_order(seed in any::<u64>(), k1 in 80.0f64..120.0, gap in 0.0f64..20.0) {
        let m = MarketModel::black_scholes(0.04, 0.2, 0.04, 100.0).unwrap();
        let b = bundle(10, 1, 4000, seed);
        let sc = m.scenario(&b).unwrap();
        let ce = ConditionalExpectation::new(&sc, &RegressionBasis::default()).unwrap();
        let (high, low) = (ClaimSpec::call(0, k1), ClaimSpec::call(0, k1 + gap));
        let big = NodeSpec::scalar(0.06);
        let a = [
            pricing::fair_price(&high, &ce).unwrap(),
            pricing::emm_price(&high, &sc).unwrap(),
            pricing::borrowing_price(&high, &big, &ce).unwrap(),
        ];
        let z = [
            pricing::fair_price(&low, &ce).unwrap(),
            pricing::emm_price(&low, &sc).unwrap(),
            pricing::borrowing_price(&low, &big, &ce).unwrap(),
        ];
        for (h, l) in a.iter().zip(&z) {
            prop_assert!(h.price >= l.price - 3.0 * h.stderr.max(l.stderr));
            prop_assert!(l.price >= -3.0 * l.stderr);
        }
    }

    #[test]
    fn every_fictitious_market_is_a_lower_bound(seed in any::<u64>(), strike in 85.0f64..115.0, spread in 0.0f64..0.05) {
        let m = MarketModel::black_scholes(0.03, 0.2, 0.05, 100.0).unwrap();
        let b = bundle(20, 1, 4000, seed);
        let sc = m.scenario(&b).unwrap();
        let ce = ConditionalExpectation::new(&sc, &RegressionBasis::default()).unwrap();
        let claim = ClaimSpec::call(0, strike);
        let big = NodeSpec::scalar(0.03 + spread);
        let primal = pricing::borrowing_price(&claim, &big, &ce).unwrap();
        let dual = pricing::borrowing_price_dual(&claim, &big, &pricing::dual_grid(11), &sc).unwrap();
        for (p, se) in dual.prices.iter().zip(&dual.stderrs) {
            prop_assert!(*p <= primal.price + 3.0 * primal.stderr.max(*se), "{} > {}", p, primal.price);
        }
    }

    #[test]
    fn projections_are_feasible_and_optimal(seed in any::<u64>(), which in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = random_sigma(&mut rng, 2);
        let theta: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let set = match which {
            0 => ConstraintSet::Box { lower: vec![-0.5, 0.0], upper: vec![0.5, 1.0] },
            1 => ConstraintSet::Ball { center: vec![0.2, -0.1], radius: 0.7 },
            _ => ConstraintSet::FinitePointSet(vec![vec![0.0, 0.0], vec![1.0, 0.5], vec![-0.3, 0.8]]),
        };
        let proj = constraint_distance(&theta, &sigma, 2, 2, &set).unwrap();
        prop_assert!(set.contains(&proj.fraction, 1e-12));
        for _ in 0..1000 {
            let c = match &set {
                ConstraintSet::FinitePointSet(pts) => pts[rng.random_range(0..pts.len())].clone(),
                _ => set.project(&[rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]),
            };
            let sc: Vec<f64> = (0..2).map(|j| sigma[j] * c[0] + sigma[2 + j] * c[1]).collect();
            let dist = ((theta[0] - sc[0]).powi(2) + (theta[1] - sc[1]).powi(2)).sqrt();
            prop_assert!(proj.distance <= dist + 1e-9);
        }
    }

    #[test]
    fn optimal_fractions_stay_bounded(seed in any::<u64>(), radius in 0.1f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = random_sigma(&mut rng, 2);
        let m = MarketModel::constant(0.02, vec![0.06, 0.03], sigma, 2, 2).unwrap();
        let b = bundle(5, 2, 50, seed);
        let sc = m.scenario(&b).unwrap();
        let set = ConstraintSet::Ball { center: vec![0.5, 0.5], radius };
        let driver = utility::log_utility_driver(&set, &sc).unwrap();
        let (_, rho_bound) = utility::driver_bounds(&set, &sc);
        for p in 0..50 {
            for k in 0..5 {
                let r = driver.rho.at(p, k);
                prop_assert!((r[0] * r[0] + r[1] * r[1]).sqrt() <= rho_bound + 1e-12);
            }
        }
    }

    #[test]
    fn config_echo_reproduces_the_run(seed in 0u64..1000, paths in 200usize..600, strike in 90.0f64..110.0) {
        let text = format!(
            "[experiment]\nkind = \"price\"\nseed = {seed}\npaths = {paths}\nsteps = 5\n\n[market]\nrate = 0.03\nsigma = [0.2]\nspot = [100.0]\nexcess = [0.04]\n\n[claim]\ntype = \"call\"\nstrike = {strike}\n"
        );
        let cfg = ExperimentConfig::parse(&text).unwrap();
        let first = run_config(&cfg, &Overrides::default()).unwrap();
        let echoed = ExperimentConfig::parse(&first.config_echo).unwrap();
        prop_assert_eq!(&echoed, &cfg);
        let second = run_config(&echoed, &Overrides::default()).unwrap();
        prop_assert_eq!(first.results_csv(), second.results_csv());
    }
}

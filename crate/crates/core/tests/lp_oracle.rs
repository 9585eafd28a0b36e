mod common;

use absfw::lp::{solve_lp, solve_lp_from, solve_lp_warm, LpProblem, LpStatus};
use common::{random_lp as random_problem, vertex_oracle};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn check_against_oracle(p: &LpProblem) {
    let sol = solve_lp(p).unwrap();
    match vertex_oracle(p) {
        Some(v) => {
            assert_eq!(sol.status, LpStatus::Optimal, "{p:?}");
            assert!((sol.objective_value - v).abs() <= 1e-8, "{} vs {v}: {p:?}", sol.objective_value);
            assert!(p.max_violation(&sol.x) <= 1e-8);
        }
        None => assert_eq!(sol.status, LpStatus::Infeasible, "{p:?}"),
    }
}

#[test]
fn fifty_random_lps_match_vertex_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut feasible = 0;
    for _ in 0..50 {
        let p = random_problem(&mut rng);
        if vertex_oracle(&p).is_some() {
            feasible += 1;
        }
        check_against_oracle(&p);
    }
    assert!(feasible >= 10);
}

#[test]
fn duals_reproduce_reduced_costs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let p = random_problem(&mut rng);
        let sol = solve_lp(&p).unwrap();
        if sol.status != LpStatus::Optimal {
            continue;
        }
        for j in 0..p.n() {
            let mut r = p.objective[j];
            for (i, y) in sol.ineq_duals.iter().enumerate() {
                r -= y * p.ineq_lhs[[i, j]];
            }
            for (i, w) in sol.eq_duals.iter().enumerate() {
                r -= w * p.eq_lhs[[i, j]];
            }
            // bound reduced costs: nonnegative at lower, nonpositive at upper
            let at_lo = (sol.x[j] - p.lower[j]).abs() < 1e-9;
            let at_hi = (sol.x[j] - p.upper[j]).abs() < 1e-9;
            if !at_lo && !at_hi {
                assert!(r.abs() < 1e-7, "interior column {j} with reduced cost {r}");
            } else if at_lo && !at_hi {
                assert!(r > -1e-7);
            } else if at_hi && !at_lo {
                assert!(r < 1e-7);
            }
        }
        assert!(sol.ineq_duals.iter().all(|&y| y <= 1e-9));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn random_lps_match_oracle(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_problem(&mut rng);
        check_against_oracle(&p);
    }

    #[test]
    fn warm_start_from_any_box_point_agrees(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_problem(&mut rng);
        let start: Vec<f64> = (0..p.n()).map(|j| rng.random_range(p.lower[j]..=p.upper[j])).collect();
        let cold = solve_lp(&p).unwrap();
        let warm = solve_lp_from(&p, &start).unwrap();
        prop_assert_eq!(cold.status, warm.status);
        if cold.status == LpStatus::Optimal {
            prop_assert!((cold.objective_value - warm.objective_value).abs() <= 1e-8);
        }
    }
}

/// `p` with inequality row `r` replaced by `h_r - hi <= G_r x <= h_r - lo`
/// and a new objective.
fn with_slack_bounds(p: &LpProblem, r: usize, lo: f64, hi: f64, objective: Vec<f64>) -> LpProblem {
    let n = p.n();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut rhs = Vec::new();
    for i in 0..p.ineq_rhs.len() {
        let g: Vec<f64> = (0..n).map(|j| p.ineq_lhs[[i, j]]).collect();
        if i != r {
            rows.push(g);
            rhs.push(p.ineq_rhs[i]);
            continue;
        }
        if lo.is_finite() {
            rows.push(g.clone());
            rhs.push(p.ineq_rhs[i] - lo);
        }
        if hi.is_finite() {
            rows.push(g.iter().map(|v| -v).collect());
            rhs.push(hi - p.ineq_rhs[i]);
        }
    }
    let g = Array2::from_shape_fn((rows.len(), n), |(i, j)| rows[i][j]);
    let mut q = p.clone();
    q.objective = objective;
    q.with_inequalities(g, rhs)
}

/// Solves a random problem warm, then changes one row's slack bounds and the
/// objective, and compares against a fresh solve of the changed problem.
fn check_reoptimize(seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random_problem(&mut rng);
    if p.ineq_rhs.is_empty() {
        return;
    }
    let (sol, warm) = solve_lp_warm(&p, &p.lower).unwrap();
    let Some(warm) = warm else {
        assert_eq!(sol.status, LpStatus::Infeasible);
        return;
    };
    let r = rng.random_range(0..p.ineq_rhs.len());
    let gx: f64 = (0..p.n()).map(|j| p.ineq_lhs[[r, j]] * sol.x[j]).sum();
    let slack = p.ineq_rhs[r] - gx;
    let (lo, hi) = match rng.random_range(0..3) {
        0 => (f64::NEG_INFINITY, slack),
        1 => (slack, f64::INFINITY),
        _ => (slack - 0.5, slack + 0.5),
    };
    let scale = rng.random_range(0.2..2.0);
    let extra = rng.random_range(-2.0..2.0);
    let objective: Vec<f64> = (0..p.n())
        .map(|j| scale * p.objective[j] + extra * p.ineq_lhs[[r, j]])
        .collect();
    let q = with_slack_bounds(&p, r, lo, hi, objective.clone());
    let fresh = vertex_oracle(&q).expect("current point stays feasible");
    let (re, _) = warm.reoptimize(&objective, &[(r, lo, hi)]).unwrap();
    assert_eq!(re.status, LpStatus::Optimal);
    assert!((re.objective_value - fresh).abs() <= 1e-8, "{} vs {fresh}", re.objective_value);
    assert!(q.max_violation(&re.x) <= 1e-8);
    let tol_scale = p.objective.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if warm.stays_optimal(scale, r, extra, lo, hi, tol_scale) {
        let here: f64 = objective.iter().zip(&sol.x).map(|(c, x)| c * x).sum();
        assert!((here - fresh).abs() <= 1e-7, "claimed optimal at {here}, optimum {fresh}");
    }
}

#[test]
fn reoptimize_after_slack_bound_change_matches_fresh_solve() {
    for seed in 0..300 {
        check_reoptimize(seed);
    }
}

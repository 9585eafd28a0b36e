mod common;

use absfw::aasm::Polytope;
use absfw::abstape::TapeBuilder;
use absfw::problems::{make_cb3i, make_maxq, make_mifflin2, make_wong2, Problem};
use absfw::solver::{
    estimate_curvature, loglog_slope, solve, step_schedule, SolveConfig, StopReason, Trace,
    Variant,
};
use common::*;
use proptest::prelude::*;

fn run(p: &Problem, variant: Variant, max_inner: usize, max_outer: usize) -> Trace {
    let cfg = SolveConfig {
        variant,
        max_inner,
        max_outer,
        ..SolveConfig::default()
    };
    solve(p, &cfg).unwrap()
}

/// `sum_i w_i (x_i - c_i)^2` on `[-1, 2]^n`, minimum 0 at `c`.
fn quadratic(w: &[f64], c: &[f64]) -> Problem {
    let n = w.len();
    let mut b = TapeBuilder::new(n);
    let x = b.inputs();
    let terms: Vec<_> = (0..n)
        .map(|i| {
            let u = b.affine(&[(x[i], 1.0)], -c[i]);
            let s = b.square(u);
            (s, w[i])
        })
        .collect();
    let y = b.affine(&terms, 0.0);
    Problem::new(
        "quadratic",
        b.finish(y).unwrap(),
        Polytope::cube(n, -1.0, 2.0).unwrap(),
        vec![-1.0; n],
        Some(0.0),
        true,
    )
    .unwrap()
}

/// Per-step primal progress: `f_{t+1} - f_t + alpha g_hat <= alpha^2/2 C_f (1 + eps)`.
/// A row that stops on the dual gap takes no step and is skipped.
fn check_progress(tr: &Trace) {
    let c_f = tr.curvature.c_f;
    let stop_row = (tr.stop == StopReason::DualGap).then_some(tr.iterations);
    for r in tr.steps() {
        if r.upper.is_nan() || Some(r.t) == stop_row {
            continue;
        }
        let eps = r.eps_hat.unwrap_or(0.0);
        let lhs = r.upper - r.f + r.alpha * r.g_hat;
        let rhs = 0.5 * r.alpha * r.alpha * c_f * (1.0 + eps);
        assert!(
            lhs <= rhs + 1e-8 * (1.0 + r.f.abs()),
            "{} t={}: {lhs} > {rhs}",
            tr.problem,
            r.t
        );
    }
}

/// `sum_{i<=t} E_i >= A_t G_t - 1e-6 A_t` and row alignment.
fn check_telescoping(tr: &Trace) {
    let mut sum_e = 0.0;
    for r in tr.steps() {
        if r.gap.is_nan() {
            continue;
        }
        sum_e += r.e_t;
        let (_, big_a, _) = step_schedule(r.t);
        assert!(sum_e >= big_a * r.gap - 1e-6 * big_a, "{} t={}", tr.problem, r.t);
    }
    for w in tr.records.windows(2) {
        assert_eq!(w[0].upper, w[1].f, "{} t={}", tr.problem, w[0].t);
        assert_eq!(w[1].t, w[0].t + 1);
    }
}

fn check_certificate(tr: &Trace, f_ref: f64) {
    for r in tr.steps() {
        assert!(r.upper - f_ref <= r.gap + 1e-8, "{} t={}: {} > {}", tr.problem, r.t, r.upper - f_ref, r.gap);
    }
}

#[test]
fn convex_runs_satisfy_progress_and_certificates() {
    for (p, mi) in [
        (make_maxq(6).unwrap(), 100),
        (make_maxq(6).unwrap(), 2),
        (make_wong2().unwrap(), 2),
        (make_cb3i(20).unwrap(), 2),
    ] {
        let tr = run(&p, Variant::Relaxed, mi, 400);
        check_progress(&tr);
        check_telescoping(&tr);
        check_certificate(&tr, p.f_ref.unwrap());
        let last = tr.records.last().unwrap();
        assert_eq!(tr.f_final, last.f);
    }
}

#[test]
fn nonconvex_runs_satisfy_progress() {
    let p = make_mifflin2(10).unwrap();
    let tr = run(&p, Variant::Relaxed, 10, 300);
    check_progress(&tr);
    check_telescoping(&tr);
}

#[test]
fn vanilla_steps_are_exact() {
    let p = make_maxq(4).unwrap();
    let tr = run(&p, Variant::Vanilla, 2, 200);
    assert!(tr.steps().all(|r| r.exact));
    assert!(tr.steps().all(|r| r.eps_hat == Some(0.0)));
}

#[test]
fn enumeration_measures_inner_suboptimality() {
    let p = make_maxq(4).unwrap();
    let cfg = SolveConfig {
        max_inner: 1,
        max_outer: 60,
        eps_enum_max_s: 6,
        ..SolveConfig::default()
    };
    let tr = solve(&p, &cfg).unwrap();
    assert!(tr.steps().all(|r| r.eps_hat.is_some_and(|e| e >= 0.0)));
    check_progress(&tr);
}

#[test]
fn dual_gap_stop_on_a_kink_minimum() {
    // |x1 - 0.5| + |x2 + 0.25| has its minimum inside the box
    let mut b = TapeBuilder::new(2);
    let x = b.inputs();
    let u = b.affine(&[(x[0], 1.0)], -0.5);
    let w = b.affine(&[(x[1], 1.0)], 0.25);
    let (au, aw) = (b.abs(u), b.abs(w));
    let y = b.add(au, aw);
    let p = Problem::new(
        "kinks",
        b.finish(y).unwrap(),
        Polytope::cube(2, -1.0, 1.0).unwrap(),
        vec![1.0, 1.0],
        Some(0.0),
        true,
    )
    .unwrap();
    let tr = run(&p, Variant::Relaxed, 100, 1000);
    assert_eq!(tr.stop, absfw::solver::StopReason::DualGap);
    assert!(tr.f_final <= 1e-6);
    assert_eq!(tr.curvature.c_f, 0.0);
    check_certificate(&tr, 0.0);
}

#[test]
fn heavy_ball_on_a_smooth_quadratic() {
    let p = quadratic(&[1.0, 2.0, 0.5], &[0.3, -0.2, 1.5]);
    let tr = run(&p, Variant::HeavyBall, 100, 300);
    check_certificate(&tr, 0.0);
    check_telescoping(&tr);
    assert!(tr.f_final <= 1e-2, "heavy ball reached {}", tr.f_final);
    // relaxed ASFW on the same problem for comparison
    let asfw = run(&p, Variant::Relaxed, 100, 300);
    assert!(asfw.f_final <= 1e-2);
}

#[test]
fn subgradient_fw_converges_on_smooth_quadratic() {
    let w = [1.0, 2.0, 0.5];
    let p = quadratic(&w, &[0.3, -0.2, 1.5]);
    let t_max = 2000;
    let tr = run(&p, Variant::SubgradientFw, 1, t_max);
    // classical bound f_T - f* <= 2 L D^2 / (T + 2) with L = 2 max w, D^2 = 3 * 3^2
    let bound = 2.0 * 4.0 * 27.0 / (t_max as f64 + 2.0);
    assert!(tr.f_final <= bound, "{} > {bound}", tr.f_final);
    let slope = loglog_slope(tr.records.iter().filter_map(|r| r.h.map(|h| (r.t as f64, h))), 100.0)
        .unwrap();
    assert!(slope <= -0.9, "slope {slope}");
}

#[test]
fn record_iterates_keeps_points() {
    let p = make_maxq(3).unwrap();
    let cfg = SolveConfig {
        max_outer: 5,
        record_iterates: true,
        ..SolveConfig::default()
    };
    let tr = solve(&p, &cfg).unwrap();
    assert_eq!(tr.records[0].x, p.start);
    for r in &tr.records {
        assert!((p.value(&r.x).unwrap() - r.f).abs() <= 1e-12);
    }
}

#[test]
fn curvature_of_smooth_quadratic_is_bounded_by_the_exact_constant() {
    let w = [1.0, 2.0, 0.5];
    let p = quadratic(&w, &[0.0; 3]);
    let est = estimate_curvature(&p, 400, 3).unwrap();
    // the linearization error is sum w_i d_i^2 <= max w * D^2, so C_f <= 2 max w D^2
    let exact = 2.0 * 2.0 * 27.0;
    assert!(est.c_f > 0.0 && est.c_f <= exact + 1e-9, "{}", est.c_f);
    assert!(est.gamma <= 2.0 + 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn curvature_vanishes_on_piecewise_linear_objectives(seed in any::<u64>(), n in 1usize..4, k in 1usize..4, m in 0usize..3) {
        let mut rng = rng(seed);
        let tape = random_max_tape(&mut rng, n, k, m);
        let c = random_box(&mut rng, n);
        let start = random_point(&mut rng, &c);
        let p = Problem::new("pl", tape, c, start, None, true).unwrap();
        let est = estimate_curvature(&p, 50, seed).unwrap();
        prop_assert_eq!(est.c_f, 0.0);
        prop_assert_eq!(est.gamma, 0.0);
    }

    #[test]
    fn piecewise_linear_runs_certify_progress(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let tape = random_max_tape(&mut rng, 3, 3, 2);
        let c = random_box(&mut rng, 3);
        let start = random_point(&mut rng, &c);
        let p = Problem::new("pl", tape, c, start, None, true).unwrap();
        let tr = run(&p, Variant::Relaxed, 2, 60);
        check_progress(&tr);
        check_telescoping(&tr);
        // model decrease is exact on PL objectives with C_f = 0
        for r in tr.steps().filter(|r| r.t < tr.iterations) {
            prop_assert!(r.upper <= r.f + 1e-9);
        }
    }
}

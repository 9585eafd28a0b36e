#![allow(dead_code)]

use absfw::abstape::{Tape, TapeBuilder};
use absfw::aasm::Polytope;
use absfw::lp::LpProblem;
use absfw::plmodel::AbsLinearForm;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `a'x + sum_j b_j |c_j + Z_j x|` with `b >= 0`: convex, no coupling.
pub fn random_separable(rng: &mut ChaCha8Rng, n: usize, s: usize, anchor: &[f64]) -> AbsLinearForm {
    let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..s).map(|_| rng.random_range(0.0..1.5)).collect();
    let z = Array2::from_shape_fn((s, n), |_| rng.random_range(-1.0..1.0));
    let c: Vec<f64> = (0..s).map(|_| rng.random_range(-1.0..1.0)).collect();
    let z_anchor: Vec<f64> = (0..s)
        .map(|j| c[j] + (0..n).map(|l| z[[j, l]] * anchor[l]).sum::<f64>())
        .collect();
    let value = (0..n).map(|l| a[l] * anchor[l]).sum::<f64>()
        + (0..s).map(|j| b[j] * z_anchor[j].abs()).sum::<f64>();
    AbsLinearForm::new(
        anchor.to_vec(),
        value,
        z_anchor,
        a,
        b,
        z,
        Array2::zeros((s, s)),
        Array2::zeros((s, s)),
    )
    .unwrap()
}

/// Max of `k` random affine functions plus `m` weighted absolute values of
/// affine functions; piecewise linear and convex, `s = k - 1 + m`.
pub fn random_max_tape(rng: &mut ChaCha8Rng, n: usize, k: usize, m: usize) -> Tape {
    let mut b = TapeBuilder::new(n);
    let x = b.inputs();
    let affine = |b: &mut TapeBuilder, rng: &mut ChaCha8Rng| {
        let terms: Vec<_> = x.iter().map(|&v| (v, rng.random_range(-1.0..1.0))).collect();
        b.affine(&terms, rng.random_range(-1.0..1.0))
    };
    let pieces: Vec<_> = (0..k).map(|_| affine(&mut b, rng)).collect();
    let mut out = b.max_all(&pieces);
    for _ in 0..m {
        let u = affine(&mut b, rng);
        let au = b.abs(u);
        let w = b.scale(rng.random_range(0.0..1.0), au);
        out = b.add(out, w);
    }
    b.finish(out).unwrap()
}

pub fn random_box(rng: &mut ChaCha8Rng, n: usize) -> Polytope {
    let lb: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..-0.5)).collect();
    let ub: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
    Polytope::new_box(lb, ub).unwrap()
}

pub fn random_point(rng: &mut ChaCha8Rng, c: &Polytope) -> Vec<f64> {
    (0..c.n())
        .map(|j| rng.random_range(c.lb()[j]..=c.ub()[j]))
        .collect()
}

/// Solves a small square system by Gaussian elimination with partial pivoting.
fn solve_square(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-10 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                for k in col..n {
                    a[r][k] -= f * a[col][k];
                }
                b[r] -= f * b[col];
            }
        }
    }
    Some((0..n).map(|i| b[i] / a[i][i]).collect())
}

/// Minimum over all basic feasible points, or `None` when no vertex is feasible.
pub fn vertex_oracle(p: &LpProblem) -> Option<f64> {
    let n = p.n();
    // every constraint as (row, rhs); equalities are always active
    let mut optional: Vec<(Vec<f64>, f64)> = Vec::new();
    for (row, &h) in p.ineq_lhs.rows().into_iter().zip(&p.ineq_rhs) {
        optional.push((row.to_vec(), h));
    }
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        optional.push((e.clone(), p.lower[j]));
        optional.push((e, p.upper[j]));
    }
    let eqs: Vec<(Vec<f64>, f64)> = p
        .eq_lhs
        .rows()
        .into_iter()
        .zip(&p.eq_rhs)
        .map(|(r, &e)| (r.to_vec(), e))
        .collect();
    if eqs.len() > n {
        return None;
    }
    let need = n - eqs.len();
    let k = optional.len();
    let mut best: Option<f64> = None;
    for mask in 0u32..(1 << k) {
        if mask.count_ones() as usize != need {
            continue;
        }
        let mut a: Vec<Vec<f64>> = eqs.iter().map(|(r, _)| r.clone()).collect();
        let mut b: Vec<f64> = eqs.iter().map(|(_, e)| *e).collect();
        for (i, (r, h)) in optional.iter().enumerate() {
            if mask & (1 << i) != 0 {
                a.push(r.clone());
                b.push(*h);
            }
        }
        if let Some(x) = solve_square(a, b) {
            if p.max_violation(&x) <= 1e-9 {
                let v: f64 = p.objective.iter().zip(&x).map(|(c, x)| c * x).sum();
                best = Some(best.map_or(v, |b: f64| b.min(v)));
            }
        }
    }
    best
}

/// Small random LP with a box, a few rows and at most one equality.
pub fn random_lp(rng: &mut ChaCha8Rng) -> LpProblem {
    let n = rng.random_range(1..=4);
    let m = rng.random_range(0..=4);
    let n_eq = rng.random_range(0..=1usize.min(n - 1));
    let lower: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..0.0)).collect();
    let upper: Vec<f64> = lower.iter().map(|l| l + rng.random_range(0.5..4.0)).collect();
    let objective: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let g = Array2::from_shape_fn((m, n), |_| rng.random_range(-2.0..2.0));
    let h: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..3.0)).collect();
    let e = Array2::from_shape_fn((n_eq, n), |_| rng.random_range(-2.0..2.0));
    let er: Vec<f64> = (0..n_eq).map(|_| rng.random_range(-1.0..1.0)).collect();
    LpProblem::boxed(objective, lower, upper)
        .with_inequalities(g, h)
        .with_equalities(e, er)
}

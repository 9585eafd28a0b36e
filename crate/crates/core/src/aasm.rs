//! Adapted active signature method: minimizes an abs-linear model over a
//! polytope by solving one LP per signature domain and moving to an adjacent
//! domain while that decreases the model.
//!
//! Everything is done in increment coordinates `d = v - x0` on the form
//! `d -> delta(alpha d)`. Local optimality at an LP solution is decided per
//! single flip of an active kink. A flip is first tested against a dual
//! certificate built from the current LP multipliers; only flips the
//! certificate cannot rule out are re-solved as LPs (warm-started at the
//! current point, which is feasible for every adjacent domain).

use ndarray::Array2;
use thiserror::Error;

use crate::lp::{solve_lp_from, solve_lp_warm, LpError, LpProblem, LpSolution, LpStatus, WarmTableau};
use crate::plmodel::{dot, AbsLinearForm, LinearPiece, SignatureVector};

const FEAS_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AasmError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid polytope: {0}")]
    InvalidPolytope(String),
    #[error("point is not in the polytope (violation {0:e})")]
    Infeasible(f64),
    #[error("step must lie in (0, 1], got {0}")]
    InvalidStep(f64),
    #[error("inner budget must be at least 1")]
    ZeroBudget,
    #[error("signature LP at the anchor is infeasible")]
    StartLpInfeasible,
    #[error(transparent)]
    Lp(#[from] LpError),
}

/// Compact feasible set: a finite box intersected with `G x <= h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    lb: Vec<f64>,
    ub: Vec<f64>,
    g: Array2<f64>,
    h: Vec<f64>,
}

impl Polytope {
    pub fn new_box(lb: Vec<f64>, ub: Vec<f64>) -> Result<Self, AasmError> {
        if lb.len() != ub.len() || lb.is_empty() {
            return Err(AasmError::InvalidPolytope(format!(
                "{} lower and {} upper bounds",
                lb.len(),
                ub.len()
            )));
        }
        for (j, (l, u)) in lb.iter().zip(&ub).enumerate() {
            if !l.is_finite() || !u.is_finite() || l > u {
                return Err(AasmError::InvalidPolytope(format!(
                    "bounds [{l}, {u}] of coordinate {j}"
                )));
            }
        }
        let n = lb.len();
        Ok(Polytope {
            lb,
            ub,
            g: Array2::zeros((0, n)),
            h: Vec::new(),
        })
    }

    /// The box `[lo, hi]^n`.
    pub fn cube(n: usize, lo: f64, hi: f64) -> Result<Self, AasmError> {
        Self::new_box(vec![lo; n], vec![hi; n])
    }

    pub fn with_rows(mut self, g: Array2<f64>, h: Vec<f64>) -> Result<Self, AasmError> {
        if g.ncols() != self.n() || g.nrows() != h.len() {
            return Err(AasmError::InvalidPolytope(format!(
                "row block {:?} with {} right-hand sides for n = {}",
                g.dim(),
                h.len(),
                self.n()
            )));
        }
        self.g = g;
        self.h = h;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.lb.len()
    }

    pub fn lb(&self) -> &[f64] {
        &self.lb
    }

    pub fn ub(&self) -> &[f64] {
        &self.ub
    }

    pub fn rows(&self) -> (&Array2<f64>, &[f64]) {
        (&self.g, &self.h)
    }

    pub fn has_rows(&self) -> bool {
        !self.h.is_empty()
    }

    /// `D = ||ub - lb||`, the diameter of the box.
    pub fn diameter(&self) -> f64 {
        self.lb
            .iter()
            .zip(&self.ub)
            .map(|(l, u)| (u - l) * (u - l))
            .sum::<f64>()
            .sqrt()
    }

    /// Largest violation of bounds and rows at `x`.
    pub fn violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for j in 0..self.n() {
            worst = worst.max(self.lb[j] - x[j]).max(x[j] - self.ub[j]);
        }
        for (row, h) in self.g.rows().into_iter().zip(&self.h) {
            worst = worst.max(dot(row.as_slice().unwrap(), x) - h);
        }
        worst
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.n() && self.violation(x) <= tol
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (j, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lb[j], self.ub[j]);
        }
    }

    /// A minimizer of `c'v` over the polytope and the simplex steps it took.
    /// Without rows this is the sign vertex: `lb_j` where `c_j >= 0`, else `ub_j`.
    pub fn linear_minimizer(&self, c: &[f64]) -> Result<(Vec<f64>, usize), AasmError> {
        if c.len() != self.n() {
            return Err(AasmError::DimensionMismatch(format!(
                "cost has {} entries, n = {}",
                c.len(),
                self.n()
            )));
        }
        if !self.has_rows() {
            let v = (0..self.n())
                .map(|j| if c[j] >= 0.0 { self.lb[j] } else { self.ub[j] })
                .collect();
            return Ok((v, 0));
        }
        let p = LpProblem::boxed(c.to_vec(), self.lb.clone(), self.ub.clone())
            .with_inequalities(self.g.clone(), self.h.clone());
        let sol = solve_lp_from(&p, &self.lb)?;
        if sol.status != LpStatus::Optimal {
            return Err(AasmError::InvalidPolytope("the polytope is empty".into()));
        }
        Ok((sol.x, sol.pivot_count))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlSolveResult {
    pub v: Vec<f64>,
    /// `delta(form, alpha (v - x0))`.
    pub model_value: f64,
    /// Number of signature-domain LPs on the descent path.
    pub inner_iters: usize,
    /// Simplex steps of all LPs, probes included.
    pub pivot_total: usize,
    /// Whether `v` was certified locally optimal.
    pub exact: bool,
    pub signature: SignatureVector,
}

/// Minimizes `v -> delta(form, alpha (v - x0))` over `poly`, starting in the
/// signature domain of the anchor and visiting at most `max_inner` domains.
pub fn minimize_pl(
    form: &AbsLinearForm,
    poly: &Polytope,
    anchor: &[f64],
    alpha: f64,
    max_inner: usize,
) -> Result<PlSolveResult, AasmError> {
    if max_inner == 0 {
        return Err(AasmError::ZeroBudget);
    }
    let ctx = Context::new(form, poly, anchor, alpha)?;
    let mut pivots = 0;
    let sigma = ctx.form.anchor_signature();
    let zero = vec![0.0; ctx.n];
    let mut cur = ctx
        .solve_piece(sigma, &zero, &mut pivots)?
        .ok_or(AasmError::StartLpInfeasible)?;
    let mut inner = 1;
    let exact = loop {
        let next = ctx.examine(&cur, &mut pivots)?;
        match next {
            None => break true,
            Some(_) if inner >= max_inner => break false,
            Some(better) => {
                cur = better;
                inner += 1;
            }
        }
    };
    let v = ctx.point(&cur.d);
    let model_value = ctx.model_value(&v);
    Ok(PlSolveResult {
        v,
        model_value,
        inner_iters: inner,
        pivot_total: pivots,
        exact,
        signature: cur.sigma,
    })
}

/// Whether no single flip of a kink active at `v` leads to a domain whose LP
/// value is lower than the current one by more than `1e-10 (1 + |value|)`.
/// `v` should be LP-optimal on the closure of the domain of `sigma`.
pub fn local_opt_check(
    form: &AbsLinearForm,
    poly: &Polytope,
    anchor: &[f64],
    alpha: f64,
    v: &[f64],
    sigma: &SignatureVector,
) -> Result<bool, AasmError> {
    Ok(next_signature(form, poly, anchor, alpha, v, sigma)?.is_none())
}

/// An adjacent signature whose LP value is lower, or `None` when `v` is
/// locally optimal. Flips are probed in order of their multiplier estimate
/// (steepest first, ties by lowest kink index then `+1`); the first one that
/// descends is returned.
pub fn next_signature(
    form: &AbsLinearForm,
    poly: &Polytope,
    anchor: &[f64],
    alpha: f64,
    v: &[f64],
    sigma: &SignatureVector,
) -> Result<Option<SignatureVector>, AasmError> {
    let ctx = Context::new(form, poly, anchor, alpha)?;
    if v.len() != ctx.n || sigma.len() != ctx.form.s() {
        return Err(AasmError::DimensionMismatch(format!(
            "point of length {} / signature of length {} for n = {}, s = {}",
            v.len(),
            sigma.len(),
            ctx.n,
            ctx.form.s()
        )));
    }
    let d: Vec<f64> = v.iter().zip(anchor).map(|(v, x)| v - x).collect();
    let mut pivots = 0;
    let Some(cur) = ctx.solve_piece(sigma.clone(), &d, &mut pivots)? else {
        return Ok(None);
    };
    Ok(ctx.examine(&cur, &mut pivots)?.map(|s| s.sigma))
}

/// Global minimum of `delta(form, alpha (v - x0))` over `poly` by solving the
/// LP of every signature in `{-1,0,1}^s`. Exponential; for testing only.
pub fn enumerate_minimum(
    form: &AbsLinearForm,
    poly: &Polytope,
    anchor: &[f64],
    alpha: f64,
) -> Result<(f64, Vec<f64>), AasmError> {
    let ctx = Context::new(form, poly, anchor, alpha)?;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut pivots = 0;
    let zero = vec![0.0; ctx.n];
    for sigma in SignatureVector::enumerate(ctx.form.s()) {
        if let Some(sol) = ctx.solve_piece(sigma, &zero, &mut pivots)? {
            if best.as_ref().is_none_or(|(b, _)| sol.value < *b) {
                best = Some((sol.value, ctx.point(&sol.d)));
            }
        }
    }
    Ok(best.expect("the anchor's own signature domain is never empty"))
}

struct Context<'a> {
    n: usize,
    anchor: &'a [f64],
    poly: &'a Polytope,
    /// `d -> delta(alpha d)`.
    form: AbsLinearForm,
    lo: Vec<f64>,
    hi: Vec<f64>,
    /// Polytope rows shifted to increments: `G d <= h - G x0`.
    h_shift: Vec<f64>,
}

/// LP row of a kink: row `row` (inequalities first) reads
/// `coef g_j d + s = -coef q_j`, so its slack is `-coef z_j`.
#[derive(Debug, Clone, Copy)]
struct KinkRow {
    row: usize,
    coef: f64,
}

/// An LP-optimal point of one signature domain.
struct Solved {
    sigma: SignatureVector,
    piece: LinearPiece,
    rows: Vec<KinkRow>,
    /// Objective normalization `||grad||_inf` (1 when the gradient vanishes).
    omega: f64,
    sol: LpSolution,
    warm: Option<WarmTableau>,
    /// Number of inequality rows of the LP.
    n_ineq: usize,
    d: Vec<f64>,
    /// Piece value minus anchor value.
    value: f64,
}

impl<'a> Context<'a> {
    fn new(
        form: &AbsLinearForm,
        poly: &'a Polytope,
        anchor: &'a [f64],
        alpha: f64,
    ) -> Result<Self, AasmError> {
        let n = form.n();
        if poly.n() != n || anchor.len() != n {
            return Err(AasmError::DimensionMismatch(format!(
                "form n = {n}, polytope n = {}, anchor of length {}",
                poly.n(),
                anchor.len()
            )));
        }
        let off = form
            .anchor()
            .iter()
            .zip(anchor)
            .map(|(a, b)| (a - b).abs() / (1.0 + a.abs()))
            .fold(0.0, f64::max);
        if off > 1e-12 {
            return Err(AasmError::DimensionMismatch(
                "anchor differs from the form's anchor".into(),
            ));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(AasmError::InvalidStep(alpha));
        }
        let viol = poly.violation(anchor);
        if viol > FEAS_TOL {
            return Err(AasmError::Infeasible(viol));
        }
        let (g, h) = poly.rows();
        let h_shift = g
            .rows()
            .into_iter()
            .zip(h)
            .map(|(row, h)| h - dot(row.as_slice().unwrap(), anchor))
            .collect();
        Ok(Context {
            n,
            anchor,
            poly,
            form: form.scaled_increment(alpha),
            lo: poly.lb.iter().zip(anchor).map(|(l, x)| l - x).collect(),
            hi: poly.ub.iter().zip(anchor).map(|(u, x)| u - x).collect(),
            h_shift,
        })
    }

    fn point(&self, d: &[f64]) -> Vec<f64> {
        let mut v: Vec<f64> = self.anchor.iter().zip(d).map(|(x, d)| x + d).collect();
        self.poly.clamp(&mut v);
        v
    }

    fn model_value(&self, v: &[f64]) -> f64 {
        let d: Vec<f64> = v.iter().zip(self.anchor).map(|(v, x)| v - x).collect();
        self.form.delta(&d)
    }

    fn solve_piece(
        &self,
        sigma: SignatureVector,
        start: &[f64],
        pivots: &mut usize,
    ) -> Result<Option<Solved>, AasmError> {
        let piece = self.form.restrict_to_signature(&sigma);
        let s = sigma.len();
        let omega = piece.grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let omega = if omega > 0.0 { omega } else { 1.0 };
        let objective: Vec<f64> = piece.grad.iter().map(|g| g / omega).collect();

        let n_eq = sigma.entries().iter().filter(|&&e| e == 0).count();
        let (pg, _) = self.poly.rows();
        let n_ineq = s - n_eq + pg.nrows();
        let mut ineq = Array2::<f64>::zeros((n_ineq, self.n));
        let mut ineq_rhs = Vec::with_capacity(n_ineq);
        let mut eq = Array2::<f64>::zeros((n_eq, self.n));
        let mut eq_rhs = Vec::with_capacity(n_eq);
        let mut rows = Vec::with_capacity(s);
        for j in 0..s {
            let g = piece.row_grad.row(j);
            let q = piece.row_value[j];
            let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let scale = if scale > 0.0 { scale } else { 1.0 };
            match sigma.get(j) {
                0 => {
                    let k = eq_rhs.len();
                    eq.row_mut(k).assign(&g.mapv(|v| v / scale));
                    eq_rhs.push(-q / scale);
                    rows.push(KinkRow { row: n_ineq + k, coef: 1.0 / scale });
                }
                sg => {
                    let sg = sg as f64;
                    let k = ineq_rhs.len();
                    ineq.row_mut(k).assign(&g.mapv(|v| -sg * v / scale));
                    ineq_rhs.push(sg * q / scale);
                    rows.push(KinkRow { row: k, coef: -sg / scale });
                }
            }
        }
        for (row, h) in pg.rows().into_iter().zip(&self.h_shift) {
            let k = ineq_rhs.len();
            ineq.row_mut(k).assign(&row);
            ineq_rhs.push(*h);
        }
        let lp = LpProblem::boxed(objective, self.lo.clone(), self.hi.clone())
            .with_inequalities(ineq, ineq_rhs)
            .with_equalities(eq, eq_rhs);
        let (sol, warm) = solve_lp_warm(&lp, start)?;
        *pivots += sol.pivot_count;
        if sol.status != LpStatus::Optimal {
            return Ok(None);
        }
        let d = sol.x.clone();
        let value = piece.value_at_anchor - self.form.anchor_value() + dot(&piece.grad, &d);
        Ok(Some(Solved {
            sigma,
            piece,
            rows,
            omega,
            sol,
            warm,
            n_ineq,
            d,
            value,
        }))
    }

    /// First descending single flip in steepest-first order, or `None` if
    /// `cur` is locally optimal.
    fn examine(&self, cur: &Solved, pivots: &mut usize) -> Result<Option<Solved>, AasmError> {
        let s = cur.sigma.len();
        if s == 0 {
            return Ok(None);
        }
        let d = &cur.d;
        let piece = &cur.piece;
        // multipliers of the kink constraints w.r.t. z_j, in normalized units
        let pi: Vec<f64> = cur
            .rows
            .iter()
            .map(|r| {
                let y = if r.row < cur.n_ineq {
                    cur.sol.ineq_duals[r.row]
                } else {
                    cur.sol.eq_duals[r.row - cur.n_ineq]
                };
                r.coef * y
            })
            .collect();
        let b = self.form.b();
        let mut candidates: Vec<(f64, usize, i8, bool)> = Vec::new();
        let mut dz = vec![0.0; s];
        for i in 0..s {
            let gi = piece.row_grad.row(i);
            let gnorm = gi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let zi = piece.row_value[i] + dot(gi.as_slice().unwrap(), d);
            let size = 1.0
                + piece.row_value[i].abs()
                + gi.iter().zip(d).map(|(g, d)| (g * d).abs()).sum::<f64>();
            let sigma_i = cur.sigma.get(i);
            if sigma_i != 0 && zi.abs() > 1e-9 * size {
                continue;
            }
            if gnorm == 0.0 {
                // z_i is constant on the piece; flipping it changes nothing
                continue;
            }
            // sensitivity of later z_j to |z_i|
            dz[i] = 0.0;
            let mut beta = b[i];
            let mut pi_dz = 0.0;
            let mut pi_dz_abs = 0.0;
            let mut coupled = false;
            for j in i + 1..s {
                let mut v = 0.0;
                for &(k, m, l) in self.form.lower_entries(j) {
                    if k < i {
                        continue;
                    }
                    if k == i {
                        v += l;
                    } else {
                        v += m * dz[k] + l * cur.sigma.get(k) as f64 * dz[k];
                    }
                }
                dz[j] = v;
                if v != 0.0 {
                    coupled = true;
                    beta += b[j] * cur.sigma.get(j) as f64 * v;
                    pi_dz += pi[j] * v;
                    pi_dz_abs += (pi[j] * v).abs();
                }
            }
            let beta = beta / cur.omega;
            let tol = 1e-9 * (1.0 / gnorm + pi[i].abs() + beta.abs() + pi_dz_abs);
            for tau in [1i8, -1] {
                if tau == sigma_i {
                    continue;
                }
                let kappa = pi[i] + (tau - sigma_i) as f64 * (beta - pi_dz);
                if (tau as f64) * kappa < -tol {
                    candidates.push(((tau as f64) * kappa, i, tau, coupled));
                }
            }
        }
        // steepest certified flip first; the first descending probe wins
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(b.2.cmp(&a.2)));
        let tol_desc = 1e-10 * (1.0 + cur.value.abs());
        for (_, i, tau, coupled) in candidates {
            if !coupled {
                if let Some(warm) = &cur.warm {
                    // only the objective and the side of row i change
                    match self.warm_flip(cur, warm, i, tau, tol_desc, pivots)? {
                        Some(next) => return Ok(Some(next)),
                        None => continue,
                    }
                }
            }
            let sigma = cur.sigma.flipped(i, tau);
            let Some(next) = self.solve_piece(sigma, d, pivots)? else {
                continue;
            };
            if next.value < cur.value - tol_desc {
                return Ok(Some(next));
            }
        }
        Ok(None)
    }

    /// Re-optimizes the tableau of `cur` for the flip `sigma_i -> tau` of a
    /// kink that feeds no other switching variable: only the objective and
    /// the admissible sign of row `i`'s slack change. Returns the new domain
    /// if its value is lower by more than `tol_desc`. Both pieces agree on
    /// `z_i = 0`, so the new value is `cur.value + grad' (d' - d)`.
    fn warm_flip(
        &self,
        cur: &Solved,
        warm: &WarmTableau,
        i: usize,
        tau: i8,
        tol_desc: f64,
        pivots: &mut usize,
    ) -> Result<Option<Solved>, AasmError> {
        let step = (tau - cur.sigma.get(i)) as f64 * self.form.b()[i];
        let grad: Vec<f64> = cur
            .piece
            .grad
            .iter()
            .zip(cur.piece.row_grad.row(i))
            .map(|(g, gi)| g + step * gi)
            .collect();
        let omega = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        let omega = if omega > 0.0 { omega } else { 1.0 };
        let objective: Vec<f64> = grad.iter().map(|g| g / omega).collect();
        // tau z_i >= 0 with slack -coef z_i
        let r = cur.rows[i];
        let bound = if tau as f64 * r.coef > 0.0 {
            (r.row, f64::NEG_INFINITY, 0.0)
        } else {
            (r.row, 0.0, f64::INFINITY)
        };
        // new cost: (omega_old / omega) c + step / (coef omega) times row i's left-hand side
        let extra = step / (r.coef * omega);
        if warm.stays_optimal(cur.omega / omega, r.row, extra, bound.1, bound.2, 1.0) {
            return Ok(None);
        }
        let (sol, warm) = warm.reoptimize(&objective, &[bound])?;
        *pivots += sol.pivot_count;
        let d = sol.x.clone();
        let gain: f64 = grad.iter().zip(d.iter().zip(&cur.d)).map(|(g, (x, d))| g * (x - d)).sum();
        if gain >= -tol_desc {
            return Ok(None);
        }
        let sigma = cur.sigma.flipped(i, tau);
        let piece = self.form.restrict_to_signature(&sigma);
        let value = piece.value_at_anchor - self.form.anchor_value() + dot(&piece.grad, &d);
        Ok(Some(Solved {
            sigma,
            piece,
            rows: cur.rows.clone(),
            omega,
            sol,
            warm: Some(warm),
            n_ineq: cur.n_ineq,
            d,
            value,
        }))
    }
}

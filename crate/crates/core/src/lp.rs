//! Dense bounded-variable primal simplex.
//!
//! Solves `min c'x  s.t.  Gx <= h,  Ex = e,  lb <= x <= ub` with finite
//! bounds. Rows get slack columns (`[0, inf)` for inequalities, `[0, 0]` for
//! equalities); rows violated at the starting point get an artificial column
//! and are repaired in a first phase. Pricing is Dantzig with lowest-index
//! ties; after `10 (n + rows)` degenerate pivots the solver switches to
//! Bland's rule for the rest of the phase.
//!
//! Nonbasic columns may sit strictly between their bounds, which lets a solve
//! start from any point inside the box (see [`solve_lp_from`]). An optimal
//! tableau can be kept and re-optimized after the objective changes or row
//! slacks get new bounds ([`WarmTableau`]).

use ndarray::Array2;
use thiserror::Error;

const FEAS_TOL: f64 = 1e-8;
const OPT_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-11;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("bounds of variable {0} are not finite or are crossed")]
    InvalidBounds(usize),
    #[error("unbounded ray along column {0}")]
    Unbounded(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpProblem {
    pub objective: Vec<f64>,
    pub ineq_lhs: Array2<f64>,
    pub ineq_rhs: Vec<f64>,
    pub eq_lhs: Array2<f64>,
    pub eq_rhs: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl LpProblem {
    /// Box-constrained problem without rows.
    pub fn boxed(objective: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        let n = objective.len();
        LpProblem {
            objective,
            ineq_lhs: Array2::zeros((0, n)),
            ineq_rhs: Vec::new(),
            eq_lhs: Array2::zeros((0, n)),
            eq_rhs: Vec::new(),
            lower,
            upper,
        }
    }

    pub fn with_inequalities(mut self, lhs: Array2<f64>, rhs: Vec<f64>) -> Self {
        self.ineq_lhs = lhs;
        self.ineq_rhs = rhs;
        self
    }

    pub fn with_equalities(mut self, lhs: Array2<f64>, rhs: Vec<f64>) -> Self {
        self.eq_lhs = lhs;
        self.eq_rhs = rhs;
        self
    }

    pub fn n(&self) -> usize {
        self.objective.len()
    }

    fn validate(&self) -> Result<(), LpError> {
        let n = self.n();
        let bad = |msg: String| Err(LpError::DimensionMismatch(msg));
        if self.lower.len() != n || self.upper.len() != n {
            return bad(format!(
                "{n} variables but {} lower / {} upper bounds",
                self.lower.len(),
                self.upper.len()
            ));
        }
        if self.ineq_lhs.ncols() != n || self.ineq_lhs.nrows() != self.ineq_rhs.len() {
            return bad(format!(
                "inequality block {:?} with {} right-hand sides",
                self.ineq_lhs.dim(),
                self.ineq_rhs.len()
            ));
        }
        if self.eq_lhs.ncols() != n || self.eq_lhs.nrows() != self.eq_rhs.len() {
            return bad(format!(
                "equality block {:?} with {} right-hand sides",
                self.eq_lhs.dim(),
                self.eq_rhs.len()
            ));
        }
        for j in 0..n {
            let (l, u) = (self.lower[j], self.upper[j]);
            if !l.is_finite() || !u.is_finite() || l > u {
                return Err(LpError::InvalidBounds(j));
            }
        }
        Ok(())
    }

    /// Largest violation of rows and bounds at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (j, &v) in x.iter().enumerate() {
            worst = worst.max(self.lower[j] - v).max(v - self.upper[j]);
        }
        for (row, &h) in self.ineq_lhs.rows().into_iter().zip(&self.ineq_rhs) {
            let lhs: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            worst = worst.max(lhs - h);
        }
        for (row, &e) in self.eq_lhs.rows().into_iter().zip(&self.eq_rhs) {
            let lhs: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            worst = worst.max((lhs - e).abs());
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    pub x: Vec<f64>,
    pub objective_value: f64,
    /// Simplex iterations over both phases, bound flips included.
    pub pivot_count: usize,
    /// Multipliers `y` of the inequality rows (`y <= 0`) such that
    /// `c - G'y - E'w` is the vector of bound reduced costs.
    pub ineq_duals: Vec<f64>,
    /// Multipliers `w` of the equality rows.
    pub eq_duals: Vec<f64>,
}

/// Solves from the lower-bound corner.
pub fn solve_lp(p: &LpProblem) -> Result<LpSolution, LpError> {
    p.validate()?;
    let start = p.lower.clone();
    Ok(Tableau::new(p, &start).run(p)?.0)
}

/// Solves starting from `start` (clamped into the box). When `start`
/// satisfies every row within `1e-8` no first phase is needed.
pub fn solve_lp_from(p: &LpProblem, start: &[f64]) -> Result<LpSolution, LpError> {
    p.validate()?;
    if start.len() != p.n() {
        return Err(LpError::DimensionMismatch(format!(
            "start point has {} entries, problem has {}",
            start.len(),
            p.n()
        )));
    }
    let start: Vec<f64> = start
        .iter()
        .enumerate()
        .map(|(j, &v)| v.clamp(p.lower[j], p.upper[j]))
        .collect();
    Ok(Tableau::new(p, &start).run(p)?.0)
}

/// Like [`solve_lp_from`], also returning the final tableau when optimal.
pub fn solve_lp_warm(
    p: &LpProblem,
    start: &[f64],
) -> Result<(LpSolution, Option<WarmTableau>), LpError> {
    p.validate()?;
    if start.len() != p.n() {
        return Err(LpError::DimensionMismatch(format!(
            "start point has {} entries, problem has {}",
            start.len(),
            p.n()
        )));
    }
    let start: Vec<f64> = start
        .iter()
        .enumerate()
        .map(|(j, &v)| v.clamp(p.lower[j], p.upper[j]))
        .collect();
    let (sol, tab) = Tableau::new(p, &start).run(p)?;
    let warm = (sol.status == LpStatus::Optimal).then(|| WarmTableau {
        tab,
        lower: p.lower.clone(),
        upper: p.upper.clone(),
    });
    Ok((sol, warm))
}

/// Optimal tableau of a solved problem.
#[derive(Debug, Clone)]
pub struct WarmTableau {
    tab: Tableau,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl WarmTableau {
    pub fn rows(&self) -> usize {
        self.tab.m
    }

    /// Whether the current basis stays optimal for the objective
    /// `scale c + extra (G_r x)` (`G_r` the left-hand side of row `r`, `c`
    /// the objective last optimized) once row `r`'s slack gets bounds
    /// `[lo, hi]`. Needs no copy of the tableau. `tol_scale` is the largest
    /// objective coefficient magnitude, as in the optimality tolerance.
    pub fn stays_optimal(&self, scale: f64, r: usize, extra: f64, lo: f64, hi: f64, tol_scale: f64) -> bool {
        let t = &self.tab;
        let slack = t.n + r;
        let tol = OPT_TOL * tol_scale.max(1.0);
        // reduced costs of G_r x = rhs - s_r
        let basic_row = t.row_of[slack];
        for j in 0..t.cols {
            if t.row_of[j] != usize::MAX {
                continue;
            }
            let (l, h) = if j == slack { (lo, hi) } else { (t.lo[j], t.hi[j]) };
            if l == h {
                continue;
            }
            let row_term = if basic_row != usize::MAX {
                t.t[basic_row * t.cols + j]
            } else if j == slack {
                -1.0
            } else {
                0.0
            };
            let d = scale * t.dj[j] + extra * row_term;
            if (d < -tol && t.val[j] < h) || (d > tol && t.val[j] > l) {
                return false;
            }
        }
        true
    }

    /// Re-optimizes a copy with a new objective after giving the slacks of some
    /// rows new bounds `(row, lo, hi)`. Rows are numbered inequalities first.
    /// The slack of inequality row `i` is `h_i - G_i x`, that of equality row
    /// `i` is `e_i - E_i x`. New bounds must contain the slack's current
    /// value; the current point stays feasible and only phase two runs.
    /// Pivot counts cover the re-optimization only. Duals follow the same
    /// formula as in [`LpSolution`] and lose their sign convention on rows
    /// whose bounds changed.
    pub fn reoptimize(
        &self,
        objective: &[f64],
        slack_bounds: &[(usize, f64, f64)],
    ) -> Result<(LpSolution, WarmTableau), LpError> {
        let n = self.tab.n;
        if objective.len() != n {
            return Err(LpError::DimensionMismatch(format!(
                "objective has {} entries, problem has {n}",
                objective.len()
            )));
        }
        let mut tab = self.tab.clone();
        for &(r, lo, hi) in slack_bounds {
            let col = n + r;
            if r >= tab.m || lo > hi || tab.val[col] < lo - FEAS_TOL || tab.val[col] > hi + FEAS_TOL {
                return Err(LpError::InvalidBounds(col));
            }
            tab.lo[col] = lo;
            tab.hi[col] = hi;
        }
        tab.pivots = 0;
        let sol = tab.optimize(objective, &self.lower, &self.upper)?;
        let warm = WarmTableau {
            tab,
            lower: self.lower.clone(),
            upper: self.upper.clone(),
        };
        Ok((sol, warm))
    }
}

#[derive(Debug, Clone)]
struct Tableau {
    n: usize,
    m_ineq: usize,
    m: usize,
    cols: usize,
    /// Row-major `m x cols`, always `B^{-1} [A | I | A_art]`.
    t: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    /// Current value of every column (basic and nonbasic).
    val: Vec<f64>,
    basis: Vec<usize>,
    /// Row of each basic column, `usize::MAX` if nonbasic.
    row_of: Vec<usize>,
    cost: Vec<f64>,
    /// Reduced costs.
    dj: Vec<f64>,
    artificial_start: usize,
    pivots: usize,
    degenerate: usize,
    bland: bool,
    opt_tol: f64,
}

impl Tableau {
    fn new(p: &LpProblem, start: &[f64]) -> Tableau {
        let n = p.n();
        let m_ineq = p.ineq_rhs.len();
        let m = m_ineq + p.eq_rhs.len();
        let row = |i: usize| {
            if i < m_ineq {
                p.ineq_lhs.row(i)
            } else {
                p.eq_lhs.row(i - m_ineq)
            }
        };
        let rhs = |i: usize| {
            if i < m_ineq {
                p.ineq_rhs[i]
            } else {
                p.eq_rhs[i - m_ineq]
            }
        };
        // residual of each row at the start point
        let resid: Vec<f64> = (0..m)
            .map(|i| rhs(i) - row(i).iter().zip(start).map(|(a, x)| a * x).sum::<f64>())
            .collect();
        let needs_art: Vec<bool> = (0..m)
            .map(|i| {
                if i < m_ineq {
                    resid[i] < -FEAS_TOL
                } else {
                    resid[i].abs() > FEAS_TOL
                }
            })
            .collect();
        let n_art = needs_art.iter().filter(|&&b| b).count();
        let artificial_start = n + m;
        let cols = n + m + n_art;
        let mut t = vec![0.0; m * cols];
        let mut lo = vec![0.0; cols];
        let mut hi = vec![0.0; cols];
        let mut val = vec![0.0; cols];
        let mut basis = vec![0; m];
        let mut row_of = vec![usize::MAX; cols];
        lo[..n].copy_from_slice(&p.lower);
        hi[..n].copy_from_slice(&p.upper);
        val[..n].copy_from_slice(start);
        for i in m_ineq..m {
            hi[n + i] = 0.0;
        }
        for i in 0..m_ineq {
            hi[n + i] = f64::INFINITY;
        }
        let mut art = artificial_start;
        for i in 0..m {
            let r = &mut t[i * cols..(i + 1) * cols];
            for (dst, src) in r[..n].iter_mut().zip(row(i).iter()) {
                *dst = *src;
            }
            r[n + i] = 1.0;
            if needs_art[i] {
                // G x + s + sgn a = h with s = 0 gives a = |resid|
                let sgn = resid[i].signum();
                r[art] = sgn;
                // normalize so the basic artificial has coefficient +1
                if sgn < 0.0 {
                    r.iter_mut().for_each(|v| *v = -*v);
                }
                lo[art] = 0.0;
                hi[art] = f64::INFINITY;
                val[art] = resid[i].abs();
                val[n + i] = 0.0;
                basis[i] = art;
                row_of[art] = i;
                art += 1;
            } else {
                val[n + i] = if i < m_ineq { resid[i].max(0.0) } else { 0.0 };
                basis[i] = n + i;
                row_of[n + i] = i;
            }
        }
        let scale = p
            .objective
            .iter()
            .fold(1.0f64, |acc, c| acc.max(c.abs()));
        Tableau {
            n,
            m_ineq,
            m,
            cols,
            t,
            lo,
            hi,
            val,
            basis,
            row_of,
            cost: vec![0.0; cols],
            dj: vec![0.0; cols],
            artificial_start,
            pivots: 0,
            degenerate: 0,
            bland: false,
            opt_tol: OPT_TOL * scale,
        }
    }

    fn set_costs(&mut self, cost: Vec<f64>) {
        self.cost = cost;
        self.dj = self.cost.clone();
        for i in 0..self.m {
            let cb = self.cost[self.basis[i]];
            if cb != 0.0 {
                let r = &self.t[i * self.cols..(i + 1) * self.cols];
                for (d, v) in self.dj.iter_mut().zip(r) {
                    *d -= cb * v;
                }
            }
        }
        for &b in &self.basis {
            self.dj[b] = 0.0;
        }
        self.degenerate = 0;
        self.bland = false;
    }

    /// Entering column and direction (+1 increase, -1 decrease).
    fn price(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64, f64)> = None;
        for j in 0..self.cols {
            if self.row_of[j] != usize::MAX || self.lo[j] == self.hi[j] {
                continue;
            }
            let d = self.dj[j];
            let at_lo = self.val[j] <= self.lo[j];
            let at_hi = self.val[j] >= self.hi[j];
            let dir = if d < -self.opt_tol && !at_hi {
                1.0
            } else if d > self.opt_tol && !at_lo {
                -1.0
            } else {
                continue;
            };
            if self.bland {
                return Some((j, dir));
            }
            let score = d.abs();
            if best.is_none_or(|(_, _, s)| score > s) {
                best = Some((j, dir, score));
            }
        }
        best.map(|(j, dir, _)| (j, dir))
    }

    fn iterate(&mut self) -> Result<(), LpError> {
        let deg_limit = 10 * (self.n + self.m);
        while let Some((j, dir)) = self.price() {
            // the entering column's own range
            let mut theta = if dir > 0.0 {
                self.hi[j] - self.val[j]
            } else {
                self.val[j] - self.lo[j]
            };
            let mut leave: Option<(usize, f64, f64)> = None; // (row, bound hit, |pivot|)
            for i in 0..self.m {
                let alpha = self.t[i * self.cols + j];
                if alpha.abs() < PIVOT_TOL {
                    continue;
                }
                let b = self.basis[i];
                let rate = -dir * alpha;
                let (limit, bound) = if rate < 0.0 && self.lo[b].is_finite() {
                    (((self.val[b] - self.lo[b]) / -rate).max(0.0), self.lo[b])
                } else if rate < 0.0 {
                    continue;
                } else if self.hi[b].is_finite() {
                    (((self.hi[b] - self.val[b]) / rate).max(0.0), self.hi[b])
                } else {
                    continue;
                };
                let better = match leave {
                    None => limit <= theta,
                    Some((r, _, piv)) => {
                        if limit < theta - 1e-12 {
                            true
                        } else if limit <= theta + 1e-12 {
                            if self.bland {
                                b < self.basis[r]
                            } else {
                                alpha.abs() > piv
                            }
                        } else {
                            false
                        }
                    }
                };
                if better {
                    theta = theta.min(limit);
                    leave = Some((i, bound, alpha.abs()));
                }
            }
            if !theta.is_finite() {
                return Err(LpError::Unbounded(j));
            }
            self.pivots += 1;
            if theta <= 1e-12 {
                self.degenerate += 1;
                if self.degenerate > deg_limit {
                    self.bland = true;
                }
            }
            for i in 0..self.m {
                let alpha = self.t[i * self.cols + j];
                if alpha != 0.0 {
                    let b = self.basis[i];
                    self.val[b] -= dir * theta * alpha;
                }
            }
            match leave {
                None => {
                    self.val[j] = if dir > 0.0 { self.hi[j] } else { self.lo[j] };
                }
                Some((r, bound, _)) => {
                    self.val[j] += dir * theta;
                    let out = self.basis[r];
                    self.val[out] = bound;
                    self.pivot(r, j);
                }
            }
        }
        Ok(())
    }

    fn pivot(&mut self, r: usize, j: usize) {
        let cols = self.cols;
        let piv = self.t[r * cols + j];
        {
            let row = &mut self.t[r * cols..(r + 1) * cols];
            let inv = 1.0 / piv;
            row.iter_mut().for_each(|v| *v *= inv);
            row[j] = 1.0;
        }
        let nz: Vec<usize> = (0..cols)
            .filter(|&k| self.t[r * cols + k] != 0.0)
            .collect();
        let prow: Vec<f64> = nz.iter().map(|&k| self.t[r * cols + k]).collect();
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = self.t[i * cols + j];
            if f == 0.0 {
                continue;
            }
            let row = &mut self.t[i * cols..(i + 1) * cols];
            for (&k, &pv) in nz.iter().zip(&prow) {
                row[k] -= f * pv;
            }
            row[j] = 0.0;
        }
        let f = self.dj[j];
        if f != 0.0 {
            for (&k, &pv) in nz.iter().zip(&prow) {
                self.dj[k] -= f * pv;
            }
        }
        self.dj[j] = 0.0;
        let out = self.basis[r];
        self.row_of[out] = usize::MAX;
        self.basis[r] = j;
        self.row_of[j] = r;
    }

    fn run(mut self, p: &LpProblem) -> Result<(LpSolution, Tableau), LpError> {
        let n = self.n;
        if self.artificial_start < self.cols {
            let mut cost = vec![0.0; self.cols];
            for c in cost[self.artificial_start..].iter_mut() {
                *c = 1.0;
            }
            self.opt_tol = OPT_TOL;
            self.set_costs(cost);
            self.iterate()?;
            let infeas: f64 = self.val[self.artificial_start..].iter().sum();
            if infeas > FEAS_TOL * (1.0 + self.m as f64) {
                let sol = LpSolution {
                    status: LpStatus::Infeasible,
                    x: self.val[..n].to_vec(),
                    objective_value: f64::NAN,
                    pivot_count: self.pivots,
                    ineq_duals: vec![0.0; self.m_ineq],
                    eq_duals: vec![0.0; self.m - self.m_ineq],
                };
                return Ok((sol, self));
            }
            for k in self.artificial_start..self.cols {
                self.hi[k] = 0.0;
                if self.row_of[k] == usize::MAX {
                    self.val[k] = 0.0;
                }
            }
            // drive remaining artificials out where possible (degenerate pivots)
            for r in 0..self.m {
                if self.basis[r] < self.artificial_start {
                    continue;
                }
                let pick = (0..self.artificial_start)
                    .filter(|&k| self.row_of[k] == usize::MAX)
                    .max_by(|&a, &b| {
                        let (va, vb) = (self.t[r * self.cols + a].abs(), self.t[r * self.cols + b].abs());
                        va.partial_cmp(&vb).unwrap().then(b.cmp(&a))
                    });
                if let Some(k) = pick {
                    if self.t[r * self.cols + k].abs() > 1e-9 {
                        let out = self.basis[r];
                        self.val[out] = 0.0;
                        self.pivot(r, k);
                    }
                }
            }
        }
        let sol = self.optimize(&p.objective, &p.lower, &p.upper)?;
        Ok((sol, self))
    }

    /// Phase two from the current feasible basis.
    fn optimize(
        &mut self,
        objective: &[f64],
        lower: &[f64],
        upper: &[f64],
    ) -> Result<LpSolution, LpError> {
        let n = self.n;
        let scale = objective.iter().fold(1.0f64, |acc, c| acc.max(c.abs()));
        self.opt_tol = OPT_TOL * scale;
        let mut cost = vec![0.0; self.cols];
        cost[..n].copy_from_slice(objective);
        self.set_costs(cost);
        self.iterate()?;

        let x: Vec<f64> = (0..n)
            .map(|j| self.val[j].clamp(lower[j], upper[j]))
            .collect();
        let objective_value = objective.iter().zip(&x).map(|(c, v)| c * v).sum();
        let duals: Vec<f64> = (0..self.m).map(|i| -self.dj[n + i]).collect();
        Ok(LpSolution {
            status: LpStatus::Optimal,
            x,
            objective_value,
            pivot_count: self.pivots,
            ineq_duals: duals[..self.m_ineq].to_vec(),
            eq_duals: duals[self.m_ineq..].to_vec(),
        })
    }
}

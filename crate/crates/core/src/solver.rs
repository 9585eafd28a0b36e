//! Outer loops: relaxed/vanilla and heavy-ball abs-smooth Frank-Wolfe, the
//! subgradient Frank-Wolfe baseline, step schedule, duality-gap bounds and
//! the sampled curvature estimate.
//!
//! Trace alignment: row `t` holds `f(x_t)`, the inexact dual gap
//! `g_hat_t`, the lower bound `L_t` and `G_t = U_t - L_t` where `U_t` is
//! `f(x_{t+1})`. On a row where the run stops without stepping, `U_t` is
//! `f(x_t)`. A run cut by the iteration budget ends with a terminal row for
//! the last iterate that carries only `f`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::aasm::{enumerate_minimum, minimize_pl, AasmError, Polytope};
use crate::abstape::TapeError;
use crate::plmodel::{aggregate, AbsLinearForm, AggregateBlock, ModelError};
use crate::problems::Problem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Inner solves run to a certified local minimizer.
    Vanilla,
    /// Inner solves are cut after `max_inner` signature domains.
    Relaxed,
    HeavyBall,
    SubgradientFw,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Relaxed => "relaxed",
            Variant::HeavyBall => "heavyball",
            Variant::SubgradientFw => "subgradient_fw",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "vanilla" => Some(Variant::Vanilla),
            "relaxed" => Some(Variant::Relaxed),
            "heavyball" | "heavy_ball" | "hb" => Some(Variant::HeavyBall),
            "subgradient_fw" | "subgradient" => Some(Variant::SubgradientFw),
            _ => None,
        }
    }
}

/// Which lower bound `L_t` to maintain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CertificateMode {
    /// Convex objective: `G_t <= 4 C_f (1 + eps) / (t + 2)`.
    Convex,
    /// Only the models are assumed convex: `G_t <= C_f / 2 + O(1/t)`.
    PiecewiseLinear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveConfig {
    pub variant: Variant,
    pub max_outer: usize,
    pub max_inner: usize,
    pub dual_gap_tol: f64,
    /// Heavy ball: keep only the newest blocks (certificates are then not
    /// claimed).
    pub hb_window: Option<usize>,
    /// Heavy ball: refuse aggregates with more switching variables.
    pub hb_max_switches: usize,
    /// Heavy ball: run the single-block stop test every this many iterations.
    pub hb_stop_every: usize,
    pub seed: u64,
    pub curvature_samples: usize,
    /// Use this instead of sampling.
    pub curvature: Option<CurvatureEstimate>,
    /// `None` picks from the problem's convexity.
    pub certificate: Option<CertificateMode>,
    /// Enumerate signatures to measure inner suboptimality when `s` is at
    /// most this (0 disables).
    pub eps_enum_max_s: usize,
    /// Keep every iterate in the trace.
    pub record_iterates: bool,
    /// Subgradient used by the subgradient Frank-Wolfe baseline.
    pub subgradient_rule: SubgradientRule,
}

/// How the baseline picks a subgradient at kinks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubgradientRule {
    /// `sign(0) = 0`, a Clarke subgradient.
    Symmetric,
    /// `sign(0) = 1`, the derivative forward-mode AD reports.
    OneSided,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            variant: Variant::Relaxed,
            max_outer: 50_000,
            max_inner: 2,
            dual_gap_tol: 1e-6,
            hb_window: None,
            hb_max_switches: 4000,
            hb_stop_every: 50,
            seed: 0,
            curvature_samples: 200,
            curvature: None,
            certificate: None,
            eps_enum_max_s: 0,
            record_iterates: false,
            subgradient_rule: SubgradientRule::OneSided,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub t: usize,
    /// Empty unless iterates are recorded.
    pub x: Vec<f64>,
    pub f: f64,
    /// `f - f_ref` when the reference is known.
    pub h: Option<f64>,
    pub alpha: f64,
    /// Model decrease `delta(x_t; alpha_t (v_t - x_t))`.
    pub model_value: f64,
    pub g_hat: f64,
    pub lower: f64,
    /// `U_t`, see the module notes.
    pub upper: f64,
    pub gap: f64,
    pub e_t: f64,
    /// Realized inner suboptimality scaled to `eps`, when measured.
    pub eps_hat: Option<f64>,
    pub inner_iters: usize,
    pub pivot_cum: usize,
    pub elapsed_ms: f64,
    pub exact: bool,
}

impl IterRecord {
    fn terminal(t: usize, x: Vec<f64>, f: f64, h: Option<f64>, pivot_cum: usize, ms: f64) -> Self {
        IterRecord {
            t,
            x,
            f,
            h,
            alpha: f64::NAN,
            model_value: f64::NAN,
            g_hat: f64::NAN,
            lower: f64::NAN,
            upper: f64::NAN,
            gap: f64::NAN,
            e_t: f64::NAN,
            eps_hat: None,
            inner_iters: 0,
            pivot_cum,
            elapsed_ms: ms,
            exact: false,
        }
    }

    /// Whether this row carries a step (not the terminal row).
    pub fn is_step(&self) -> bool {
        !self.alpha.is_nan()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    DualGap,
    MaxOuter,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::DualGap => "dual_gap",
            StopReason::MaxOuter => "max_outer",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub problem: String,
    pub variant: Variant,
    pub records: Vec<IterRecord>,
    pub x_final: Vec<f64>,
    pub f_final: f64,
    /// Number of steps taken.
    pub iterations: usize,
    pub pivots: usize,
    pub stop: StopReason,
    pub curvature: CurvatureEstimate,
    pub certificate: Option<CertificateMode>,
    /// False when a window dropped heavy-ball history.
    pub windowed: bool,
}

impl Trace {
    pub fn steps(&self) -> impl Iterator<Item = &IterRecord> {
        self.records.iter().filter(|r| r.is_step())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvatureEstimate {
    pub c_f: f64,
    pub gamma: f64,
    pub samples: usize,
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("start point is not feasible")]
    InfeasibleStart,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(
        "heavy-ball aggregate would have {s_total} switching variables (cap {cap}); \
         set a history window"
    )]
    MemoryGuard { s_total: usize, cap: usize },
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Aasm(#[from] AasmError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `(a_t, A_t, alpha_t) = (2t + 2, (t + 1)(t + 2), 2 / (t + 2))`.
pub fn step_schedule(t: usize) -> (f64, f64, f64) {
    let t = t as f64;
    (2.0 * t + 2.0, (t + 1.0) * (t + 2.0), 2.0 / (t + 2.0))
}

/// `g_hat = -delta(x_t; alpha (v - x_t)) / alpha` for a form anchored at `x_t`.
pub fn dual_gap(form: &AbsLinearForm, alpha: f64, v: &[f64]) -> f64 {
    let dx: Vec<f64> = v
        .iter()
        .zip(form.anchor())
        .map(|(v, x)| alpha * (v - x))
        .collect();
    -form.delta(&dx) / alpha
}

const CURVATURE_STEPS: [f64; 5] = [1.0, 0.5, 0.25, 0.125, 0.0625];

/// Sampled curvature bound. Each sample draws `x` uniformly from the box and
/// `v` either uniformly (even samples) or as a random vertex (odd samples),
/// then evaluates the linearization error at `y = x + alpha (v - x)` for
/// `alpha` in `{1, 1/2, 1/4, 1/8, 1/16}`. Errors at rounding level are
/// treated as zero, so piecewise-linear objectives yield exactly 0.
pub fn estimate_curvature(
    problem: &Problem,
    samples: usize,
    seed: u64,
) -> Result<CurvatureEstimate, SolverError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poly = &problem.poly;
    let mut c_f: f64 = 0.0;
    let mut gamma: f64 = 0.0;
    let mut taken = 0;
    for k in 0..samples.max(1) {
        let Some(x) = sample_point(&mut rng, poly, false) else {
            continue;
        };
        let Some(v) = sample_point(&mut rng, poly, k % 2 == 1) else {
            continue;
        };
        let form = problem.tape.abs_linearize(&x)?;
        let fx = form.anchor_value();
        for alpha in CURVATURE_STEPS {
            let dx: Vec<f64> = v.iter().zip(&x).map(|(v, x)| alpha * (v - x)).collect();
            let norm2: f64 = dx.iter().map(|d| d * d).sum();
            if norm2 == 0.0 {
                continue;
            }
            let y: Vec<f64> = x.iter().zip(&dx).map(|(x, d)| x + d).collect();
            let fy = problem.tape.value(&y)?;
            let mut err = (fy - fx - form.delta(&dx)).abs();
            if err <= 1e-12 * (1.0 + fy.abs() + fx.abs()) {
                err = 0.0;
            }
            c_f = c_f.max(2.0 * err / (alpha * alpha));
            gamma = gamma.max(err / norm2);
        }
        taken += 1;
    }
    Ok(CurvatureEstimate { c_f, gamma, samples: taken })
}

/// Uniform point of the box (or a random vertex), rejected against rows.
fn sample_point(rng: &mut ChaCha8Rng, poly: &Polytope, vertex: bool) -> Option<Vec<f64>> {
    for _ in 0..100 {
        let p: Vec<f64> = (0..poly.n())
            .map(|j| {
                let (l, u) = (poly.lb()[j], poly.ub()[j]);
                if vertex {
                    if rng.random_bool(0.5) {
                        l
                    } else {
                        u
                    }
                } else if l == u {
                    l
                } else {
                    rng.random_range(l..=u)
                }
            })
            .collect();
        if poly.contains(&p, 0.0) {
            return Some(p);
        }
    }
    None
}

/// Running sums of the ADGT lower bound.
#[derive(Debug, Clone)]
pub struct AdgtState {
    mode: CertificateMode,
    c_f: f64,
    sum_af: f64,
    sum_model: f64,
    prev_ag: f64,
}

impl AdgtState {
    pub fn new(mode: CertificateMode, c_f: f64) -> Self {
        AdgtState {
            mode,
            c_f,
            sum_af: 0.0,
            sum_model: 0.0,
            prev_ag: 0.0,
        }
    }

    /// Adds iteration `t` with `model = delta(x_t; alpha_t (v_t - x_t))`
    /// and returns `L_t`.
    pub fn push(&mut self, t: usize, f_t: f64, model: f64, eps: f64) -> f64 {
        let (a, big_a, alpha) = step_schedule(t);
        self.sum_af += a * f_t;
        let slack = match self.mode {
            CertificateMode::Convex => 0.5 * alpha * self.c_f * (1.0 + eps),
            CertificateMode::PiecewiseLinear => 0.5 * self.c_f + 0.5 * alpha * eps * self.c_f,
        };
        self.sum_model += a * (model / alpha - slack);
        (self.sum_af + self.sum_model) / big_a
    }

    /// Heavy-ball bound with the aggregate value `phi = Phi_t(v_t)` and
    /// `eta_t = eps a_t alpha_t C_f`.
    pub fn push_heavy_ball(&mut self, t: usize, f_t: f64, phi: f64, eps: f64) -> f64 {
        let (a, big_a, alpha) = step_schedule(t);
        self.sum_af += a * f_t;
        self.sum_model += a * alpha * self.c_f / 2.0;
        let eta = eps * a * alpha * self.c_f;
        (self.sum_af + phi - self.sum_model - eta) / big_a
    }

    /// `G_t = upper - L_t` and `E_t = A_t G_t - A_{t-1} G_{t-1}`.
    pub fn close(&mut self, t: usize, upper: f64, lower: f64) -> (f64, f64) {
        let (_, big_a, _) = step_schedule(t);
        let gap = upper - lower;
        let e = big_a * gap - self.prev_ag;
        self.prev_ag = big_a * gap;
        (gap, e)
    }
}

/// Dispatches on `config.variant`.
pub fn solve(problem: &Problem, config: &SolveConfig) -> Result<Trace, SolverError> {
    match config.variant {
        Variant::Vanilla | Variant::Relaxed => run_asfw(problem, config),
        Variant::HeavyBall => run_hb_asfw(problem, config),
        Variant::SubgradientFw => run_subgradient_fw(problem, config),
    }
}

struct Common {
    start: Instant,
    curvature: CurvatureEstimate,
    mode: CertificateMode,
}

fn prepare(problem: &Problem, config: &SolveConfig) -> Result<Common, SolverError> {
    if config.max_outer == 0 {
        return Err(SolverError::Config("max_outer must be at least 1".into()));
    }
    if config.max_inner == 0 {
        return Err(SolverError::Config("max_inner must be at least 1".into()));
    }
    if !(config.dual_gap_tol >= 0.0) {
        return Err(SolverError::Config("dual_gap_tol must be non-negative".into()));
    }
    if !problem.poly.contains(&problem.start, 1e-12) {
        return Err(SolverError::InfeasibleStart);
    }
    let start = Instant::now();
    let curvature = match config.curvature {
        Some(c) => c,
        None if config.variant == Variant::SubgradientFw => CurvatureEstimate {
            c_f: f64::NAN,
            gamma: f64::NAN,
            samples: 0,
        },
        None => estimate_curvature(problem, config.curvature_samples, config.seed)?,
    };
    let mode = config.certificate.unwrap_or(if problem.convex {
        CertificateMode::Convex
    } else {
        CertificateMode::PiecewiseLinear
    });
    Ok(Common { start, curvature, mode })
}

fn step_point(poly: &Polytope, x: &[f64], v: &[f64], alpha: f64) -> Vec<f64> {
    let mut next: Vec<f64> = x
        .iter()
        .zip(v)
        .map(|(x, v)| (1.0 - alpha) * x + alpha * v)
        .collect();
    poly.clamp(&mut next);
    next
}

fn ms(start: &Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn eps_from(sub: f64, alpha: f64, c_f: f64) -> f64 {
    if sub <= 1e-10 {
        0.0
    } else if c_f > 0.0 {
        2.0 * sub / (alpha * alpha * c_f)
    } else {
        f64::INFINITY
    }
}

/// Vanilla or relaxed ASFW.
pub fn run_asfw(problem: &Problem, config: &SolveConfig) -> Result<Trace, SolverError> {
    let common = prepare(problem, config)?;
    let c_f = common.curvature.c_f;
    let max_inner = match config.variant {
        Variant::Vanilla => usize::MAX,
        _ => config.max_inner,
    };
    let mut adgt = AdgtState::new(common.mode, c_f);
    let mut x = problem.start.clone();
    let mut records = Vec::new();
    let mut pivots = 0;
    let mut form = problem.tape.abs_linearize(&x)?;
    let h = |f: f64| problem.f_ref.map(|r| f - r);
    let mut t = 0;
    let stop = loop {
        let f_t = form.anchor_value();
        let (_, _, alpha) = step_schedule(t);
        let res = minimize_pl(&form, &problem.poly, &x, alpha, max_inner)?;
        pivots += res.pivot_total;
        let model = res.model_value;
        let g_hat = -model / alpha;
        let eps_hat = if config.eps_enum_max_s > 0 && form.s() <= config.eps_enum_max_s {
            let (best, _) = enumerate_minimum(&form, &problem.poly, &x, alpha)?;
            Some(eps_from(model - best, alpha, c_f))
        } else if res.exact && problem.convex {
            Some(0.0)
        } else {
            None
        };
        let lower = adgt.push(t, f_t, model, eps_hat.unwrap_or(0.0));
        let mut rec = IterRecord {
            t,
            x: if config.record_iterates { x.clone() } else { Vec::new() },
            f: f_t,
            h: h(f_t),
            alpha,
            model_value: model,
            g_hat,
            lower,
            upper: f64::NAN,
            gap: f64::NAN,
            e_t: f64::NAN,
            eps_hat,
            inner_iters: res.inner_iters,
            pivot_cum: pivots,
            elapsed_ms: 0.0,
            exact: res.exact,
        };
        if res.exact && g_hat <= config.dual_gap_tol {
            let (gap, e) = adgt.close(t, f_t, lower);
            rec.upper = f_t;
            rec.gap = gap;
            rec.e_t = e;
            rec.elapsed_ms = ms(&common.start);
            records.push(rec);
            break StopReason::DualGap;
        }
        let next = step_point(&problem.poly, &x, &res.v, alpha);
        form = problem.tape.abs_linearize(&next)?;
        let f_next = form.anchor_value();
        let (gap, e) = adgt.close(t, f_next, lower);
        rec.upper = f_next;
        rec.gap = gap;
        rec.e_t = e;
        rec.elapsed_ms = ms(&common.start);
        records.push(rec);
        x = next;
        t += 1;
        if t >= config.max_outer {
            records.push(IterRecord::terminal(
                t,
                if config.record_iterates { x.clone() } else { Vec::new() },
                f_next,
                h(f_next),
                pivots,
                ms(&common.start),
            ));
            break StopReason::MaxOuter;
        }
    };
    let f_final = records.last().map(|r| r.f).unwrap_or(f64::NAN);
    Ok(Trace {
        problem: problem.name.clone(),
        variant: config.variant,
        iterations: t,
        records,
        x_final: x,
        f_final,
        pivots,
        stop,
        curvature: common.curvature,
        certificate: Some(common.mode),
        windowed: false,
    })
}

/// Heavy-ball ASFW: each step minimizes the weighted aggregate of all past
/// abs-linearizations.
pub fn run_hb_asfw(problem: &Problem, config: &SolveConfig) -> Result<Trace, SolverError> {
    let common = prepare(problem, config)?;
    let c_f = common.curvature.c_f;
    let mut adgt = AdgtState::new(common.mode, c_f);
    let mut x = problem.start.clone();
    let mut forms: Vec<AbsLinearForm> = Vec::new();
    let mut first_kept = 0;
    let mut windowed = false;
    let mut records = Vec::new();
    let mut pivots = 0;
    let h = |f: f64| problem.f_ref.map(|r| f - r);
    let mut t = 0;
    forms.push(problem.tape.abs_linearize(&x)?);
    let stop = loop {
        let form = forms.last().unwrap();
        let f_t = form.anchor_value();
        let (_, _, alpha) = step_schedule(t);

        if config.hb_stop_every > 0 && t % config.hb_stop_every == 0 && t > 0 {
            let probe = minimize_pl(form, &problem.poly, &x, alpha, config.max_inner)?;
            pivots += probe.pivot_total;
            let g = -probe.model_value / alpha;
            if probe.exact && g <= config.dual_gap_tol {
                let lower = adgt.push(t, f_t, probe.model_value, 0.0);
                let (gap, e) = adgt.close(t, f_t, lower);
                records.push(IterRecord {
                    t,
                    x: if config.record_iterates { x.clone() } else { Vec::new() },
                    f: f_t,
                    h: h(f_t),
                    alpha,
                    model_value: probe.model_value,
                    g_hat: g,
                    lower,
                    upper: f_t,
                    gap,
                    e_t: e,
                    eps_hat: None,
                    inner_iters: probe.inner_iters,
                    pivot_cum: pivots,
                    elapsed_ms: ms(&common.start),
                    exact: true,
                });
                break StopReason::DualGap;
            }
        }

        if let Some(w) = config.hb_window {
            if forms.len() - first_kept > w.max(1) {
                first_kept = forms.len() - w.max(1);
                windowed = true;
            }
        }
        let blocks: Vec<AggregateBlock<'_>> = (first_kept..forms.len())
            .map(|i| {
                let (a, _, al) = step_schedule(i);
                AggregateBlock { form: &forms[i], weight: a, step: al }
            })
            .collect();
        let s_total: usize = blocks.iter().map(|b| b.form.s()).sum();
        if s_total > config.hb_max_switches {
            return Err(SolverError::MemoryGuard {
                s_total,
                cap: config.hb_max_switches,
            });
        }
        let phi_form = aggregate(&blocks, &x)?;
        let res = minimize_pl(&phi_form, &problem.poly, &x, 1.0, config.max_inner)?;
        pivots += res.pivot_total;
        let phi = phi_form.eval_pl(&res.v);
        let form = forms.last().unwrap();
        let model = {
            let dx: Vec<f64> = res.v.iter().zip(&x).map(|(v, x)| alpha * (v - x)).collect();
            form.delta(&dx)
        };
        let g_hat = -model / alpha;
        let eps_hat = if res.exact && problem.convex { Some(0.0) } else { None };
        let lower = if windowed {
            f64::NAN
        } else {
            adgt.push_heavy_ball(t, f_t, phi, eps_hat.unwrap_or(0.0))
        };
        let next = step_point(&problem.poly, &x, &res.v, alpha);
        let next_form = problem.tape.abs_linearize(&next)?;
        let f_next = next_form.anchor_value();
        let (gap, e) = if windowed {
            (f64::NAN, f64::NAN)
        } else {
            adgt.close(t, f_next, lower)
        };
        records.push(IterRecord {
            t,
            x: if config.record_iterates { x.clone() } else { Vec::new() },
            f: f_t,
            h: h(f_t),
            alpha,
            model_value: model,
            g_hat,
            lower,
            upper: f_next,
            gap,
            e_t: e,
            eps_hat,
            inner_iters: res.inner_iters,
            pivot_cum: pivots,
            elapsed_ms: ms(&common.start),
            exact: res.exact,
        });
        forms.push(next_form);
        if let Some(w) = config.hb_window {
            // drop forms that can no longer enter the window
            let keep_from = forms.len().saturating_sub(w.max(1) + 1);
            for f in forms.iter_mut().take(keep_from) {
                if f.s() > 0 || f.n() > 0 {
                    *f = AbsLinearForm::with_couplings(
                        Vec::new(),
                        0.0,
                        Vec::new(),
                        Vec::new(),
                        Vec::new(),
                        ndarray::Array2::zeros((0, 0)),
                        Vec::new(),
                    )?;
                }
            }
        }
        x = next;
        t += 1;
        if t >= config.max_outer {
            records.push(IterRecord::terminal(
                t,
                if config.record_iterates { x.clone() } else { Vec::new() },
                f_next,
                h(f_next),
                pivots,
                ms(&common.start),
            ));
            break StopReason::MaxOuter;
        }
    };
    let f_final = records.last().map(|r| r.f).unwrap_or(f64::NAN);
    Ok(Trace {
        problem: problem.name.clone(),
        variant: Variant::HeavyBall,
        iterations: t,
        records,
        x_final: x,
        f_final,
        pivots,
        stop,
        curvature: common.curvature,
        certificate: if windowed { None } else { Some(common.mode) },
        windowed,
    })
}

/// Frank-Wolfe with a Clarke subgradient in place of the gradient; logs the
/// classical gap `<g_t, x_t - v_t>` as `g_hat`.
pub fn run_subgradient_fw(problem: &Problem, config: &SolveConfig) -> Result<Trace, SolverError> {
    let common = prepare(problem, config)?;
    let mut x = problem.start.clone();
    let mut records = Vec::new();
    let mut pivots = 0;
    let h = |f: f64| problem.f_ref.map(|r| f - r);
    let mut f_t = problem.value(&x)?;
    let mut t = 0;
    let stop = loop {
        let (_, _, alpha) = step_schedule(t);
        let g = match config.subgradient_rule {
            SubgradientRule::Symmetric => problem.tape.subgradient(&x)?,
            SubgradientRule::OneSided => problem.tape.subgradient_one_sided(&x)?,
        };
        let (v, piv) = problem.poly.linear_minimizer(&g)?;
        pivots += piv;
        let gap: f64 = g.iter().zip(x.iter().zip(&v)).map(|(g, (x, v))| g * (x - v)).sum();
        let mut rec = IterRecord {
            t,
            x: if config.record_iterates { x.clone() } else { Vec::new() },
            f: f_t,
            h: h(f_t),
            alpha,
            model_value: -alpha * gap,
            g_hat: gap,
            lower: f64::NAN,
            upper: f64::NAN,
            gap: f64::NAN,
            e_t: f64::NAN,
            eps_hat: None,
            inner_iters: 1,
            pivot_cum: pivots,
            elapsed_ms: 0.0,
            exact: true,
        };
        if gap <= config.dual_gap_tol {
            rec.elapsed_ms = ms(&common.start);
            records.push(rec);
            break StopReason::DualGap;
        }
        x = step_point(&problem.poly, &x, &v, alpha);
        f_t = problem.value(&x)?;
        rec.upper = f_t;
        rec.elapsed_ms = ms(&common.start);
        records.push(rec);
        t += 1;
        if t >= config.max_outer {
            records.push(IterRecord::terminal(
                t,
                if config.record_iterates { x.clone() } else { Vec::new() },
                f_t,
                h(f_t),
                pivots,
                ms(&common.start),
            ));
            break StopReason::MaxOuter;
        }
    };
    let f_final = records.last().map(|r| r.f).unwrap_or(f64::NAN);
    Ok(Trace {
        problem: problem.name.clone(),
        variant: Variant::SubgradientFw,
        iterations: t,
        records,
        x_final: x,
        f_final,
        pivots,
        stop,
        curvature: common.curvature,
        certificate: None,
        windowed: false,
    })
}

/// Least-squares slope of `ln y` against `ln t` over the points with
/// `t >= t_min` and `y > 0`. `None` with fewer than two such points.
pub fn loglog_slope(points: impl IntoIterator<Item = (f64, f64)>, t_min: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .into_iter()
        .filter(|&(t, y)| t >= t_min && t > 0.0 && y > 0.0 && y.is_finite())
        .map(|(t, y)| (t.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

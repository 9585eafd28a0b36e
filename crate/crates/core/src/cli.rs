//! Experiment runner behind the `absfw` binary: resolves run specs from
//! flags and key=value files, runs single experiments and batch suites, and
//! writes CSV traces and tables.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::Parser;
use thiserror::Error;

use crate::problems::{self, DataError, Dataset, Problem, ProblemError};
use crate::solver::{self, SolveConfig, SolverError, Trace, Variant};

/// Box half-width for LASSO problems.
pub const LASSO_BOUND: f64 = 1000.0;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{context}: {source}")]
    Solver {
        context: String,
        #[source]
        source: SolverError,
    },
    #[error("{context}: {source}")]
    Problem {
        context: String,
        #[source]
        source: ProblemError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

impl CliError {
    /// 1 usage, 2 solver, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Problem { .. } => 1,
            CliError::Solver { .. } => 2,
            CliError::Io { .. } | CliError::Data(_) | CliError::Csv { .. } => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> CliError + '_ {
    move |source| CliError::Csv {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Parser, Default)]
#[command(
    name = "absfw",
    version,
    about = "Projection-free abs-smooth Frank-Wolfe experiments"
)]
pub struct Args {
    /// maxq, wong2, cb3i, mifflin2 or lasso
    #[arg(long)]
    pub problem: Option<String>,
    /// Problem dimension (maxq, cb3i, mifflin2)
    #[arg(long)]
    pub n: Option<usize>,
    /// vanilla, relaxed, heavyball or subgradient_fw
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long = "max-inner")]
    pub max_inner: Option<usize>,
    #[arg(long = "max-outer")]
    pub max_outer: Option<usize>,
    /// Dual-gap stopping tolerance
    #[arg(long)]
    pub tol: Option<f64>,
    /// LASSO regularization weight
    #[arg(long)]
    pub rho: Option<f64>,
    /// Heavy ball: number of past models kept
    #[arg(long = "hb-window")]
    pub hb_window: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// tables, figures, lasso or all
    #[arg(long)]
    pub suite: Option<String>,
    /// File of key=value lines using the flag names
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub problem: String,
    pub n: Option<usize>,
    pub variant: Variant,
    pub max_inner: usize,
    pub max_outer: usize,
    pub tol: f64,
    pub rho: Option<f64>,
    pub hb_window: Option<usize>,
    pub seed: u64,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Tables,
    Figures,
    Lasso,
    All,
}

impl Suite {
    pub fn parse(s: &str) -> Option<Suite> {
        match s {
            "tables" => Some(Suite::Tables),
            "figures" => Some(Suite::Figures),
            "lasso" => Some(Suite::Lasso),
            "all" => Some(Suite::All),
            _ => None,
        }
    }
}

/// What the command line asks for.
#[derive(Debug, Clone, PartialEq)]
pub enum Invocation {
    Run(RunSpec),
    /// A suite; `max_outer` caps every run's budget when given.
    Suite {
        suite: Suite,
        out: PathBuf,
        max_outer: Option<usize>,
        seed: u64,
    },
}

const PROBLEMS: [&str; 5] = ["maxq", "wong2", "cb3i", "mifflin2", "lasso"];

/// Settings before resolution: flags and file entries land here.
#[derive(Debug, Clone, Default, PartialEq)]
struct Partial {
    values: BTreeMap<&'static str, String>,
}

const KEYS: [&str; 11] = [
    "problem",
    "n",
    "variant",
    "max-inner",
    "max-outer",
    "tol",
    "rho",
    "hb-window",
    "seed",
    "out",
    "suite",
];

impl Partial {
    fn set(&mut self, key: &str, value: String) -> Result<(), CliError> {
        let norm = key.trim().replace('_', "-");
        let key = KEYS
            .iter()
            .find(|k| **k == norm)
            .ok_or_else(|| CliError::Usage(format!("unknown key `{key}`")))?;
        self.values.insert(key, value);
        Ok(())
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| CliError::Usage(format!("invalid value `{v}` for {key}"))),
        }
    }
}

/// Parses a flat `key=value` file. Blank lines and lines starting with `#`
/// are skipped.
fn parse_config_text(text: &str, into: &mut Partial) -> Result<(), CliError> {
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("config line {}: expected key=value", i + 1))
        })?;
        into.set(k, v.trim().to_string())?;
    }
    Ok(())
}

/// Resolves flags (and the config file they name) into an invocation.
/// Flags override file entries. Without `--problem` or `--suite` this is a
/// usage error.
pub fn parse_config(args: &Args) -> Result<Invocation, CliError> {
    let mut p = Partial::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        parse_config_text(&text, &mut p)?;
    }
    let flags: [(&str, Option<String>); 11] = [
        ("problem", args.problem.clone()),
        ("n", args.n.map(|v| v.to_string())),
        ("variant", args.variant.clone()),
        ("max-inner", args.max_inner.map(|v| v.to_string())),
        ("max-outer", args.max_outer.map(|v| v.to_string())),
        ("tol", args.tol.map(|v| v.to_string())),
        ("rho", args.rho.map(|v| v.to_string())),
        ("hb-window", args.hb_window.map(|v| v.to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
        ("out", args.out.as_ref().map(|v| v.display().to_string())),
        ("suite", args.suite.clone()),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            p.set(k, v)?;
        }
    }
    resolve(&p)
}

fn resolve(p: &Partial) -> Result<Invocation, CliError> {
    let seed = p.get::<u64>("seed")?.unwrap_or(0);
    let out: PathBuf = p.get::<String>("out")?.unwrap_or_else(|| "out".into()).into();
    let max_outer = p.get::<usize>("max-outer")?;
    if max_outer == Some(0) {
        return Err(CliError::Usage("max-outer must be at least 1".into()));
    }
    if let Some(s) = p.get::<String>("suite")? {
        let suite = Suite::parse(&s).ok_or_else(|| {
            CliError::Usage(format!("unknown suite `{s}` (tables, figures, lasso, all)"))
        })?;
        return Ok(Invocation::Suite {
            suite,
            out,
            max_outer,
            seed,
        });
    }
    let problem = p
        .get::<String>("problem")?
        .ok_or_else(|| CliError::Usage("missing --problem (or --suite)".into()))?;
    if !PROBLEMS.contains(&problem.as_str()) {
        return Err(CliError::Usage(format!(
            "unknown problem `{problem}` ({})",
            PROBLEMS.join(", ")
        )));
    }
    let variant = match p.get::<String>("variant")? {
        None => Variant::Relaxed,
        Some(v) => Variant::parse(&v).ok_or_else(|| {
            CliError::Usage(format!(
                "unknown variant `{v}` (vanilla, relaxed, heavyball, subgradient_fw)"
            ))
        })?,
    };
    let max_inner = p.get::<usize>("max-inner")?.unwrap_or(2);
    if max_inner == 0 {
        return Err(CliError::Usage("max-inner must be at least 1".into()));
    }
    let tol = p.get::<f64>("tol")?.unwrap_or(1e-6);
    if !(tol >= 0.0) {
        return Err(CliError::Usage("tol must be non-negative".into()));
    }
    let rho = p.get::<f64>("rho")?;
    if problem == "lasso" && !rho.is_some_and(|r| r >= 0.0) {
        return Err(CliError::Usage("lasso needs a non-negative --rho".into()));
    }
    let n = p.get::<usize>("n")?;
    if n == Some(0) {
        return Err(CliError::Usage("n must be positive".into()));
    }
    Ok(Invocation::Run(RunSpec {
        problem,
        n,
        variant,
        max_inner,
        max_outer: max_outer.unwrap_or(50_000),
        tol,
        rho,
        hb_window: p.get::<usize>("hb-window")?,
        seed,
        out,
    }))
}

impl RunSpec {
    /// Defaults for `problem` writing into `out`.
    pub fn new(problem: &str, out: impl Into<PathBuf>) -> RunSpec {
        RunSpec {
            problem: problem.to_string(),
            n: None,
            variant: Variant::Relaxed,
            max_inner: 2,
            max_outer: 50_000,
            tol: 1e-6,
            rho: None,
            hb_window: None,
            seed: 0,
            out: out.into(),
        }
    }

    pub fn solve_config(&self) -> SolveConfig {
        SolveConfig {
            variant: self.variant,
            max_outer: self.max_outer,
            max_inner: self.max_inner,
            dual_gap_tol: self.tol,
            hb_window: self.hb_window,
            seed: self.seed,
            ..SolveConfig::default()
        }
    }

    /// Short label such as `maxq_n20_relaxed_mi2`.
    pub fn label(&self) -> String {
        let mut s = self.problem.clone();
        if let Some(n) = self.n {
            s.push_str(&format!("_n{n}"));
        }
        if let Some(r) = self.rho {
            s.push_str(&format!("_rho{r}"));
        }
        s.push('_');
        s.push_str(self.variant.name());
        if self.variant != Variant::SubgradientFw {
            s.push_str(&format!("_mi{}", self.max_inner));
        }
        s
    }
}

/// Loads the bundled diabetes data.
pub fn diabetes() -> Result<Dataset, CliError> {
    Ok(problems::load_csv_dataset(problems::diabetes_path())?)
}

pub fn build_problem(spec: &RunSpec) -> Result<Problem, CliError> {
    let context = || format!("building {}", spec.problem);
    if spec.problem == "lasso" {
        let data = diabetes()?;
        let rho = spec
            .rho
            .ok_or_else(|| CliError::Usage("lasso needs --rho".into()))?;
        return problems::make_lasso(&data, rho, LASSO_BOUND).map_err(|source| {
            CliError::Problem {
                context: context(),
                source,
            }
        });
    }
    problems::by_name(&spec.problem, spec.n).map_err(|source| CliError::Problem {
        context: context(),
        source,
    })
}

/// Outcome of one run as it appears in `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub label: String,
    pub problem: String,
    pub variant: Variant,
    pub max_inner: usize,
    pub f_ref: Option<f64>,
    pub f_final: f64,
    pub iterations: usize,
    pub pivots: usize,
    pub stop: solver::StopReason,
    pub intercept: Option<f64>,
    pub mse: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `trace.csv`: one row per iterate, wall time in `elapsed_ms`.
pub fn write_trace(path: &Path, trace: &Trace) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record([
        "t",
        "f",
        "h_t",
        "g_hat",
        "L_t",
        "G_t",
        "inner_iters",
        "pivot_cum",
        "elapsed_ms",
        "exact_flag",
    ])
    .map_err(csv_err(path))?;
    for r in &trace.records {
        w.write_record([
            r.t.to_string(),
            r.f.to_string(),
            fmt_opt(r.h),
            r.g_hat.to_string(),
            r.lower.to_string(),
            r.gap.to_string(),
            r.inner_iters.to_string(),
            r.pivot_cum.to_string(),
            format!("{:.3}", r.elapsed_ms),
            u8::from(r.exact).to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

const SUMMARY_HEADER: [&str; 10] = [
    "label",
    "problem",
    "variant",
    "max_inner",
    "iterations",
    "f_final",
    "pivots",
    "stop_reason",
    "intercept",
    "mse",
];

fn summary_record(s: &RunSummary) -> [String; 10] {
    [
        s.label.clone(),
        s.problem.clone(),
        s.variant.name().to_string(),
        s.max_inner.to_string(),
        s.iterations.to_string(),
        s.f_final.to_string(),
        s.pivots.to_string(),
        s.stop.name().to_string(),
        fmt_opt(s.intercept),
        fmt_opt(s.mse),
    ]
}

/// Solves one spec and writes `trace.csv` and `summary.csv` under
/// `spec.out`.
pub fn run_experiment(spec: &RunSpec) -> Result<RunSummary, CliError> {
    let problem = build_problem(spec)?;
    let trace = solver::solve(&problem, &spec.solve_config()).map_err(|source| {
        CliError::Solver {
            context: format!("solving {}", spec.label()),
            source,
        }
    })?;
    let (intercept, mse) = match problem.intercept {
        Some(b0) => (Some(b0), Some(diabetes()?.mse(&trace.x_final, b0))),
        None => (None, None),
    };
    let summary = RunSummary {
        label: spec.label(),
        problem: problem.name.clone(),
        variant: spec.variant,
        max_inner: spec.max_inner,
        f_ref: problem.f_ref,
        f_final: trace.f_final,
        iterations: trace.iterations,
        pivots: trace.pivots,
        stop: trace.stop,
        intercept,
        mse,
    };
    fs::create_dir_all(&spec.out).map_err(io_err(&spec.out))?;
    write_trace(&spec.out.join("trace.csv"), &trace)?;
    let path = spec.out.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(SUMMARY_HEADER).map_err(csv_err(&path))?;
    w.write_record(summary_record(&summary)).map_err(csv_err(&path))?;
    w.flush().map_err(io_err(&path))?;
    Ok(summary)
}

/// Runs specs on all available cores; results keep the input order.
pub fn run_many(specs: &[RunSpec]) -> Vec<Result<RunSummary, CliError>> {
    let threads = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(specs.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunSummary, CliError>>>> =
        Mutex::new((0..specs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= specs.len() {
                    break;
                }
                let r = run_experiment(&specs[i]);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every spec ran"))
        .collect()
}

/// Budgets used by the suites for problems that do not stop on the dual
/// gap within the default budget.
fn suite_budget(problem: &str, n: Option<usize>) -> usize {
    match (problem, n) {
        ("mifflin2", Some(1000)) => 300,
        ("mifflin2", _) => 5_000,
        _ => 50_000,
    }
}

fn spec(
    root: &Path,
    problem: &str,
    n: Option<usize>,
    variant: Variant,
    max_inner: usize,
    cap: Option<usize>,
    seed: u64,
) -> RunSpec {
    let mut s = RunSpec::new(problem, PathBuf::new());
    s.n = n;
    s.variant = variant;
    s.max_inner = max_inner;
    s.seed = seed;
    s.max_outer = suite_budget(problem, n);
    if variant == Variant::SubgradientFw {
        s.max_outer = if problem == "maxq" { 20_001 } else { 10_001 };
    }
    if let Some(c) = cap {
        s.max_outer = s.max_outer.min(c);
    }
    s.out = root.join(s.label());
    s
}

const TABLE_HEADER: [&str; 8] = [
    "problem",
    "f_ref",
    "max_inner",
    "iterations",
    "f_final",
    "pivots",
    "stop_reason",
    "label",
];

fn write_rows(path: &Path, rows: &[RunSummary]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(TABLE_HEADER).map_err(csv_err(path))?;
    for r in rows {
        w.write_record([
            r.problem.clone(),
            fmt_opt(r.f_ref),
            r.max_inner.to_string(),
            r.iterations.to_string(),
            r.f_final.to_string(),
            r.pivots.to_string(),
            r.stop.name().to_string(),
            r.label.clone(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn collect(results: Vec<Result<RunSummary, CliError>>) -> Result<Vec<RunSummary>, CliError> {
    results.into_iter().collect()
}

/// Runs a suite under `out` and writes its tables. Returns the paths written.
pub fn run_suite(
    suite: Suite,
    out: &Path,
    max_outer: Option<usize>,
    seed: u64,
) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut written = Vec::new();
    let relaxed = Variant::Relaxed;
    if matches!(suite, Suite::Tables | Suite::All) {
        let root = out.join("tables");
        let mut t1 = Vec::new();
        for (p, n) in [("maxq", Some(20)), ("wong2", None), ("cb3i", Some(500))] {
            for mi in [2, 10, 100] {
                t1.push(spec(&root, p, n, relaxed, mi, max_outer, seed));
            }
        }
        let t2: Vec<RunSpec> = [2, 10]
            .iter()
            .map(|&mi| spec(&root, "mifflin2", Some(200), relaxed, mi, max_outer, seed))
            .collect();
        let t4_cases = [
            ("maxq", Some(20)),
            ("wong2", None),
            ("cb3i", Some(300)),
            ("mifflin2", Some(1000)),
        ];
        let mut t4 = Vec::new();
        for (p, n) in t4_cases {
            t4.push(spec(&root, p, n, relaxed, 2, max_outer, seed));
            t4.push(spec(&root, p, n, Variant::SubgradientFw, 2, max_outer, seed));
        }
        let all: Vec<RunSpec> = t1.iter().chain(&t2).chain(&t4).cloned().collect();
        let res = collect(run_many(&all))?;
        let (r1, rest) = res.split_at(t1.len());
        let (r2, r4) = rest.split_at(t2.len());
        let p1 = out.join("inner_budgets.csv");
        write_rows(&p1, r1)?;
        let p2 = out.join("mifflin.csv");
        write_rows(&p2, r2)?;
        let p4 = out.join("subgradient_baseline.csv");
        write_baseline(&p4, r4)?;
        written.extend([p1, p2, p4]);
    }
    if matches!(suite, Suite::Lasso | Suite::All) {
        let root = out.join("lasso");
        let specs: Vec<RunSpec> = [0.1, 0.5, 1.0, 5.0, 10.0]
            .iter()
            .map(|&rho| {
                let mut s = spec(&root, "lasso", None, relaxed, 2, max_outer, seed);
                s.rho = Some(rho);
                s.out = root.join(s.label());
                s
            })
            .collect();
        let res = collect(run_many(&specs))?;
        let path = out.join("lasso.csv");
        let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
        w.write_record(["rho", "iterations", "intercept", "mse", "pivots", "f_final"])
            .map_err(csv_err(&path))?;
        for (s, r) in specs.iter().zip(&res) {
            w.write_record([
                s.rho.unwrap().to_string(),
                r.iterations.to_string(),
                fmt_opt(r.intercept),
                fmt_opt(r.mse),
                r.pivots.to_string(),
                r.f_final.to_string(),
            ])
            .map_err(csv_err(&path))?;
        }
        w.flush().map_err(io_err(&path))?;
        written.push(path);
    }
    if matches!(suite, Suite::Figures | Suite::All) {
        let root = out.join("figures");
        let specs: Vec<RunSpec> = [
            ("maxq", Some(20)),
            ("wong2", None),
            ("cb3i", Some(500)),
            ("mifflin2", Some(200)),
        ]
        .iter()
        .map(|&(p, n)| spec(&root, p, n, relaxed, 100, max_outer, seed))
        .collect();
        collect(run_many(&specs))?;
        written.extend(specs.iter().map(|s| s.out.join("trace.csv")));
    }
    Ok(written)
}

fn write_baseline(path: &Path, rows: &[RunSummary]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record([
        "problem",
        "f_ref",
        "asfw_iterations",
        "asfw_f",
        "subgradient_iterations",
        "subgradient_f",
        "subgradient_budget_hit",
    ])
    .map_err(csv_err(path))?;
    for pair in rows.chunks(2) {
        let (a, s) = (&pair[0], &pair[1]);
        w.write_record([
            a.problem.clone(),
            fmt_opt(a.f_ref),
            a.iterations.to_string(),
            a.f_final.to_string(),
            s.iterations.to_string(),
            s.f_final.to_string(),
            u8::from(s.stop == solver::StopReason::MaxOuter).to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = parse_config(&args).and_then(|inv| match inv {
        Invocation::Run(spec) => run_experiment(&spec).map(|s| {
            println!(
                "{}: f = {}, iterations = {}, pivots = {}, stop = {}",
                s.label,
                s.f_final,
                s.iterations,
                s.pivots,
                s.stop.name()
            );
        }),
        Invocation::Suite {
            suite,
            out,
            max_outer,
            seed,
        } => run_suite(suite, &out, max_outer, seed).map(|paths| {
            for p in paths {
                println!("wrote {}", p.display());
            }
        }),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

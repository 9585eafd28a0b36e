//! Benchmark problems and the LASSO objective on a CSV dataset.

use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::aasm::{AasmError, Polytope};
use crate::abstape::{Tape, TapeBuilder, TapeError, Var};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("{name}: dimension {n} is too small (need at least {min})")]
    Dimension { name: String, n: usize, min: usize },
    #[error("{0}: start point is outside the feasible set")]
    InfeasibleStart(String),
    #[error("{name}: reference value {f_ref} exceeds f(start) = {f_start}")]
    BadReference { name: String, f_ref: f64, f_start: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("unknown problem {0:?}")]
    Unknown(String),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Polytope(#[from] AasmError),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("column {0} is flagged as standardized but its mean is not 0")]
    NotStandardized(String),
    #[error("no data rows")]
    Empty,
}

#[derive(Debug, Clone)]
pub struct Problem {
    pub name: String,
    pub n: usize,
    pub tape: Tape,
    pub poly: Polytope,
    pub start: Vec<f64>,
    pub f_ref: Option<f64>,
    /// Whether the objective is convex; selects the certificate form.
    pub convex: bool,
    /// LASSO only: the fitted intercept (mean of the response).
    pub intercept: Option<f64>,
}

impl Problem {
    pub fn new(
        name: impl Into<String>,
        tape: Tape,
        poly: Polytope,
        start: Vec<f64>,
        f_ref: Option<f64>,
        convex: bool,
    ) -> Result<Self, ProblemError> {
        let name = name.into();
        let n = tape.input_dim();
        if poly.n() != n || start.len() != n || !poly.contains(&start, 0.0) {
            return Err(ProblemError::InfeasibleStart(name));
        }
        if let Some(f_ref) = f_ref {
            let f_start = tape.value(&start)?;
            if f_ref > f_start {
                return Err(ProblemError::BadReference { name, f_ref, f_start });
            }
        }
        Ok(Problem {
            name,
            n,
            tape,
            poly,
            start,
            f_ref,
            convex,
            intercept: None,
        })
    }

    pub fn value(&self, x: &[f64]) -> Result<f64, TapeError> {
        self.tape.value(x)
    }
}

fn need(name: &str, n: usize, min: usize) -> Result<(), ProblemError> {
    if n < min {
        return Err(ProblemError::Dimension { name: name.into(), n, min });
    }
    Ok(())
}

/// `coef (x - c)^2`
fn shifted_square(b: &mut TapeBuilder, x: Var, c: f64, coef: f64) -> Var {
    let u = b.affine(&[(x, 1.0)], -c);
    let sq = b.square(u);
    b.scale(coef, sq)
}

fn sum(b: &mut TapeBuilder, terms: &[Var], constant: f64) -> Var {
    let t: Vec<(Var, f64)> = terms.iter().map(|&v| (v, 1.0)).collect();
    b.affine(&t, constant)
}

/// `max_i x_i^2` on `[-20, 20]^n`, started at `(1, .., m, -(m+1), .., -n)`
/// with `m = ceil(n / 2)`.
pub fn make_maxq(n: usize) -> Result<Problem, ProblemError> {
    need("maxq", n, 1)?;
    let mut b = TapeBuilder::new(n);
    let x = b.inputs();
    let squares: Vec<Var> = x.iter().map(|&v| b.square(v)).collect();
    let y = b.max_all(&squares);
    let half = n.div_ceil(2);
    let start = (1..=n)
        .map(|i| if i <= half { i as f64 } else { -(i as f64) })
        .collect();
    Problem::new(
        format!("maxq{n}"),
        b.finish(y)?,
        Polytope::cube(n, -20.0, 20.0)?,
        start,
        Some(0.0),
        true,
    )
}

/// Wong 2 in dimension 10 on `[-10, 10]^10`.
pub fn make_wong2() -> Result<Problem, ProblemError> {
    let mut b = TapeBuilder::new(10);
    let x = b.inputs();
    let f1 = {
        let x12 = b.mul(x[0], x[1]);
        let parts = [
            b.square(x[0]),
            b.square(x[1]),
            x12,
            shifted_square(&mut b, x[2], 10.0, 1.0),
            shifted_square(&mut b, x[3], 5.0, 4.0),
            shifted_square(&mut b, x[4], 3.0, 1.0),
            shifted_square(&mut b, x[5], 1.0, 2.0),
            shifted_square(&mut b, x[6], 0.0, 5.0),
            shifted_square(&mut b, x[7], 11.0, 7.0),
            shifted_square(&mut b, x[8], 10.0, 2.0),
            shifted_square(&mut b, x[9], 7.0, 1.0),
        ];
        let lin = b.affine(&[(x[0], -14.0), (x[1], -16.0)], 45.0);
        let mut all = parts.to_vec();
        all.push(lin);
        sum(&mut b, &all, 0.0)
    };
    // each f_i = f_1 + 10 g_i
    let mut g = Vec::new();
    {
        let p = [
            shifted_square(&mut b, x[0], 2.0, 3.0),
            shifted_square(&mut b, x[1], 3.0, 4.0),
            shifted_square(&mut b, x[2], 0.0, 2.0),
        ];
        let l = b.affine(&[(x[3], -7.0)], -120.0);
        g.push(sum(&mut b, &[p[0], p[1], p[2], l], 0.0));
    }
    {
        let p = [
            shifted_square(&mut b, x[0], 0.0, 5.0),
            shifted_square(&mut b, x[2], 6.0, 1.0),
        ];
        let l = b.affine(&[(x[1], 8.0), (x[3], -2.0)], -40.0);
        g.push(sum(&mut b, &[p[0], p[1], l], 0.0));
    }
    {
        let p = [
            shifted_square(&mut b, x[0], 8.0, 0.5),
            shifted_square(&mut b, x[1], 4.0, 2.0),
            shifted_square(&mut b, x[4], 0.0, 3.0),
        ];
        let l = b.affine(&[(x[5], -1.0)], -30.0);
        g.push(sum(&mut b, &[p[0], p[1], p[2], l], 0.0));
    }
    {
        let x12 = b.mul(x[0], x[1]);
        let m12 = b.scale(-2.0, x12);
        let p = [
            shifted_square(&mut b, x[0], 0.0, 1.0),
            shifted_square(&mut b, x[1], 2.0, 2.0),
        ];
        let l = b.affine(&[(x[4], 14.0), (x[5], -6.0)], 0.0);
        g.push(sum(&mut b, &[p[0], p[1], m12, l], 0.0));
    }
    g.push(b.affine(
        &[(x[0], 4.0), (x[1], 5.0), (x[6], -3.0), (x[7], 9.0)],
        -105.0,
    ));
    g.push(b.affine(
        &[(x[0], 10.0), (x[1], -8.0), (x[6], -17.0), (x[7], 2.0)],
        0.0,
    ));
    {
        let p = shifted_square(&mut b, x[8], 8.0, 12.0);
        let l = b.affine(&[(x[0], -3.0), (x[1], 6.0), (x[9], -7.0)], 0.0);
        g.push(sum(&mut b, &[p, l], 0.0));
    }
    g.push(b.affine(
        &[(x[0], -8.0), (x[1], 2.0), (x[8], 5.0), (x[9], -2.0)],
        -12.0,
    ));
    let mut fs = vec![f1];
    for gi in g {
        fs.push(b.affine(&[(f1, 1.0), (gi, 10.0)], 0.0));
    }
    let y = b.max_all(&fs);
    Problem::new(
        "wong2",
        b.finish(y)?,
        Polytope::cube(10, -10.0, 10.0)?,
        vec![2.0, 3.0, 5.0, 5.0, 1.0, 2.0, 7.0, 3.0, 6.0, 10.0],
        Some(24.3062),
        true,
    )
}

/// Chained CB3 I on `[-5, 5]^n` from `(2, .., 2)`; minimum `2 (n - 1)` at
/// `(1, .., 1)`.
pub fn make_cb3i(n: usize) -> Result<Problem, ProblemError> {
    need("cb3i", n, 2)?;
    let mut b = TapeBuilder::new(n);
    let x = b.inputs();
    let mut terms = Vec::with_capacity(n - 1);
    for i in 0..n - 1 {
        let (u, w) = (x[i], x[i + 1]);
        let u2 = b.square(u);
        let u4 = b.square(u2);
        let w2 = b.square(w);
        let t1 = b.add(u4, w2);
        let a = shifted_square(&mut b, u, 2.0, 1.0);
        let c = shifted_square(&mut b, w, 2.0, 1.0);
        let t2 = b.add(a, c);
        let e = b.affine(&[(u, -1.0), (w, 1.0)], 0.0);
        let ee = b.exp(e);
        let t3 = b.scale(2.0, ee);
        let m = b.max(t1, t2);
        terms.push(b.max(m, t3));
    }
    let y = sum(&mut b, &terms, 0.0);
    Problem::new(
        format!("cb3i{n}"),
        b.finish(y)?,
        Polytope::cube(n, -5.0, 5.0)?,
        vec![2.0; n],
        Some(2.0 * (n as f64 - 1.0)),
        true,
    )
}

/// Chained Mifflin 2 on `[-3, 3]^n` from `(1, .., 1)`. Non-convex; reference
/// values are known for `n = 200` and `n = 1000` only.
pub fn make_mifflin2(n: usize) -> Result<Problem, ProblemError> {
    need("mifflin2", n, 2)?;
    let mut b = TapeBuilder::new(n);
    let x = b.inputs();
    let mut terms = Vec::with_capacity(n - 1);
    for i in 0..n - 1 {
        let u2 = b.square(x[i]);
        let w2 = b.square(x[i + 1]);
        let r = b.affine(&[(u2, 1.0), (w2, 1.0)], -1.0);
        let ar = b.abs(r);
        terms.push(b.affine(&[(x[i], -1.0), (r, 2.0), (ar, 1.75)], 0.0));
    }
    let y = sum(&mut b, &terms, 0.0);
    let f_ref = match n {
        200 => Some(-140.86),
        1000 => Some(-706.55),
        _ => None,
    };
    Problem::new(
        format!("mifflin{n}"),
        b.finish(y)?,
        Polytope::cube(n, -3.0, 3.0)?,
        vec![1.0; n],
        f_ref,
        false,
    )
}

/// Predictors `a` (rows are samples) and response `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub a: Array2<f64>,
    pub y: Vec<f64>,
    pub column_names: Vec<String>,
}

impl Dataset {
    pub fn rows(&self) -> usize {
        self.y.len()
    }

    pub fn features(&self) -> usize {
        self.a.ncols()
    }

    pub fn response_mean(&self) -> f64 {
        self.y.iter().sum::<f64>() / self.y.len() as f64
    }

    /// Mean squared error of `intercept + a x` against `y`.
    pub fn mse(&self, x: &[f64], intercept: f64) -> f64 {
        let mut total = 0.0;
        for (row, y) in self.a.rows().into_iter().zip(&self.y) {
            let pred = intercept + row.iter().zip(x).map(|(a, x)| a * x).sum::<f64>();
            total += (pred - y) * (pred - y);
        }
        total / self.y.len() as f64
    }

    /// Centers every predictor and scales it to unit Euclidean norm.
    pub fn standardize(&mut self) {
        let p = self.rows() as f64;
        for mut col in self.a.columns_mut() {
            let mean = col.sum() / p;
            col.mapv_inplace(|v| v - mean);
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                col.mapv_inplace(|v| v / norm);
            }
        }
    }
}

/// `0.5 ||A x - (y - mean(y))||^2 + rho ||x||_1` on `[-bound, bound]^n`,
/// started at 0. The intercept is `mean(y)`.
pub fn make_lasso(data: &Dataset, rho: f64, bound: f64) -> Result<Problem, ProblemError> {
    if data.rows() == 0 || data.features() == 0 {
        return Err(ProblemError::EmptyDataset);
    }
    let n = data.features();
    let ybar = data.response_mean();
    let mut b = TapeBuilder::new(n);
    let x = b.inputs();
    let mut squares = Vec::with_capacity(data.rows());
    for (row, y) in data.a.rows().into_iter().zip(&data.y) {
        let terms: Vec<(Var, f64)> = x.iter().zip(row.iter()).map(|(&v, &a)| (v, a)).collect();
        let r = b.affine(&terms, -(y - ybar));
        squares.push(b.square(r));
    }
    let mut obj: Vec<(Var, f64)> = squares.iter().map(|&q| (q, 0.5)).collect();
    for &v in &x {
        let av = b.abs(v);
        obj.push((av, rho));
    }
    let y = b.affine(&obj, 0.0);
    let mut p = Problem::new(
        format!("lasso_rho{rho}"),
        b.finish(y)?,
        Polytope::cube(n, -bound, bound)?,
        vec![0.0; n],
        None,
        true,
    )?;
    p.intercept = Some(ybar);
    Ok(p)
}

/// Reads a comma-separated file with a header row and the response in the
/// last column. Lines starting with `#` are directives; `# standardized`
/// declares the predictors already centered and scaled, which is then
/// verified. Without it the predictors are standardized here.
pub fn load_csv_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text)
}

pub fn parse_dataset(text: &str) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| DataError::Parse { line: 1, msg: e.to_string() })?
        .clone();
    let cols = header.len();
    if cols < 2 {
        return Err(DataError::Parse {
            line: 1,
            msg: "need at least one predictor and a response".into(),
        });
    }
    let mut standardized = false;
    let mut values = Vec::new();
    let mut y = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| DataError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let first = record.get(0).unwrap_or("");
        if first.starts_with('#') {
            if first.trim_start_matches('#').trim() == "standardized" {
                standardized = true;
            }
            continue;
        }
        if record.len() == 1 && first.is_empty() {
            continue;
        }
        if record.len() != cols {
            return Err(DataError::Parse {
                line,
                msg: format!("expected {cols} fields, found {}", record.len()),
            });
        }
        for (k, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| DataError::Parse {
                line,
                msg: format!("non-numeric cell {cell:?} in column {}", &header[k]),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    line,
                    msg: format!("non-finite cell in column {}", &header[k]),
                });
            }
            if k + 1 == cols {
                y.push(v);
            } else {
                values.push(v);
            }
        }
    }
    if y.is_empty() {
        return Err(DataError::Empty);
    }
    let a = Array2::from_shape_vec((y.len(), cols - 1), values)
        .expect("row lengths were checked");
    let column_names = header.iter().take(cols - 1).map(str::to_string).collect();
    let mut data = Dataset { a, y, column_names };
    if standardized {
        let p = data.rows() as f64;
        for (k, col) in data.a.columns().into_iter().enumerate() {
            if (col.sum() / p).abs() > 1e-6 {
                return Err(DataError::NotStandardized(data.column_names[k].clone()));
            }
        }
    } else {
        data.standardize();
    }
    Ok(data)
}

/// Shipped copy of the diabetes data (442 samples, 10 standardized
/// predictors).
pub fn diabetes_path() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/diabetes.csv")
}

/// Builds a registered benchmark by name.
pub fn by_name(name: &str, n: Option<usize>) -> Result<Problem, ProblemError> {
    match name {
        "maxq" => make_maxq(n.unwrap_or(20)),
        "wong2" => make_wong2(),
        "cb3i" => make_cb3i(n.unwrap_or(500)),
        "mifflin2" => make_mifflin2(n.unwrap_or(200)),
        other => Err(ProblemError::Unknown(other.to_string())),
    }
}

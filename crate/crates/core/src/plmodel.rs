//! Abs-linear forms: evaluation, signatures, restriction to a signature
//! domain, and the weighted aggregate used by the heavy-ball solver.
//!
//! A form localized at an anchor `x0` represents
//!
//! ```text
//! f_PL(x) = d + a'x + b'|z|,    z = c + Z x + M z + L |z|
//! ```
//!
//! with `M`, `L` strictly lower triangular. Evaluation is carried out in
//! increments from the anchor so that `delta(0) == 0` holds exactly.

use ndarray::{Array2, Axis};
use thiserror::Error;

/// Kink tolerance for a switching value: `|z| <= 1e-12 (1 + |z|)` counts as 0.
pub fn kink_tolerance(z: f64) -> f64 {
    1e-12 * (1.0 + z.abs())
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{0} must be strictly lower triangular")]
    NotStrictlyLower(&'static str),
    #[error("aggregate needs at least one block")]
    NoBlocks,
    #[error("invalid aggregate block {index}: {msg}")]
    InvalidBlock { index: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbsLinearForm {
    n: usize,
    s: usize,
    anchor: Vec<f64>,
    anchor_value: f64,
    z_anchor: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: f64,
    z_mat: Array2<f64>,
    /// Per row `j`: the nonzero `(k, M_jk, L_jk)` with `k < j`.
    lower: Vec<Vec<(usize, f64, f64)>>,
}

impl AbsLinearForm {
    /// Builds a form from its derivative data at `anchor`; `c` and `d` are
    /// chosen so that the model reproduces `anchor_value` and `z_anchor`
    /// there.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        anchor: Vec<f64>,
        anchor_value: f64,
        z_anchor: Vec<f64>,
        a: Vec<f64>,
        b: Vec<f64>,
        z_mat: Array2<f64>,
        m_mat: Array2<f64>,
        l_mat: Array2<f64>,
    ) -> Result<Self, ModelError> {
        let n = anchor.len();
        let s = z_anchor.len();
        let dims_ok = a.len() == n
            && b.len() == s
            && z_mat.dim() == (s, n)
            && m_mat.dim() == (s, s)
            && l_mat.dim() == (s, s);
        if !dims_ok {
            return Err(ModelError::DimensionMismatch(format!(
                "n = {n}, s = {s}, a: {}, b: {}, Z: {:?}, M: {:?}, L: {:?}",
                a.len(),
                b.len(),
                z_mat.dim(),
                m_mat.dim(),
                l_mat.dim()
            )));
        }
        let mut lower = Vec::with_capacity(s);
        for j in 0..s {
            for k in j..s {
                if m_mat[[j, k]] != 0.0 {
                    return Err(ModelError::NotStrictlyLower("M"));
                }
                if l_mat[[j, k]] != 0.0 {
                    return Err(ModelError::NotStrictlyLower("L"));
                }
            }
            lower.push(
                (0..j)
                    .filter(|&k| m_mat[[j, k]] != 0.0 || l_mat[[j, k]] != 0.0)
                    .map(|k| (k, m_mat[[j, k]], l_mat[[j, k]]))
                    .collect(),
            );
        }
        Self::with_couplings(anchor, anchor_value, z_anchor, a, b, z_mat, lower)
    }

    /// Like [`AbsLinearForm::new`] with `M` and `L` given sparsely: row `j`
    /// lists `(k, M_jk, L_jk)` for `k < j`.
    pub fn with_couplings(
        anchor: Vec<f64>,
        anchor_value: f64,
        z_anchor: Vec<f64>,
        a: Vec<f64>,
        b: Vec<f64>,
        z_mat: Array2<f64>,
        lower: Vec<Vec<(usize, f64, f64)>>,
    ) -> Result<Self, ModelError> {
        let n = anchor.len();
        let s = z_anchor.len();
        if a.len() != n || b.len() != s || z_mat.dim() != (s, n) || lower.len() != s {
            return Err(ModelError::DimensionMismatch(format!(
                "n = {n}, s = {s}, a: {}, b: {}, Z: {:?}, coupling rows: {}",
                a.len(),
                b.len(),
                z_mat.dim(),
                lower.len()
            )));
        }
        for (j, row) in lower.iter().enumerate() {
            if row.iter().any(|&(k, _, _)| k >= j) {
                return Err(ModelError::NotStrictlyLower("M, L"));
            }
        }
        let abs_anchor: Vec<f64> = z_anchor.iter().map(|z| z.abs()).collect();
        let c: Vec<f64> = (0..s)
            .map(|j| {
                let mut cj = z_anchor[j] - dot(z_mat.row(j).as_slice().unwrap(), &anchor);
                for &(k, mjk, ljk) in &lower[j] {
                    cj -= mjk * z_anchor[k] + ljk * abs_anchor[k];
                }
                cj
            })
            .collect();
        let d = anchor_value - dot(&a, &anchor) - dot(&b, &abs_anchor);
        Ok(AbsLinearForm {
            n,
            s,
            anchor,
            anchor_value,
            z_anchor,
            a,
            b,
            c,
            d,
            z_mat,
            lower,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn anchor(&self) -> &[f64] {
        &self.anchor
    }

    pub fn anchor_value(&self) -> f64 {
        self.anchor_value
    }

    /// Switching values at the anchor.
    pub fn z_anchor(&self) -> &[f64] {
        &self.z_anchor
    }

    pub fn a(&self) -> &[f64] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn d(&self) -> f64 {
        self.d
    }

    pub fn z_matrix(&self) -> &Array2<f64> {
        &self.z_mat
    }

    pub fn m_matrix(&self) -> Array2<f64> {
        self.dense_coupling(|&(_, m, _)| m)
    }

    pub fn l_matrix(&self) -> Array2<f64> {
        self.dense_coupling(|&(_, _, l)| l)
    }

    fn dense_coupling(&self, pick: impl Fn(&(usize, f64, f64)) -> f64) -> Array2<f64> {
        let mut out = Array2::zeros((self.s, self.s));
        for (j, row) in self.lower.iter().enumerate() {
            for e in row {
                out[[j, e.0]] = pick(e);
            }
        }
        out
    }

    pub(crate) fn lower_entries(&self, j: usize) -> &[(usize, f64, f64)] {
        &self.lower[j]
    }

    /// Switching increments for an input increment `dx`.
    fn delta_z(&self, dx: &[f64]) -> Vec<f64> {
        let mut dz = vec![0.0; self.s];
        let mut dabs = vec![0.0; self.s];
        for j in 0..self.s {
            let mut v = dot(self.z_mat.row(j).as_slice().unwrap(), dx);
            for &(k, mjk, ljk) in &self.lower[j] {
                v += mjk * dz[k] + ljk * dabs[k];
            }
            dz[j] = v;
            let z0 = self.z_anchor[j];
            dabs[j] = (z0 + v).abs() - z0.abs();
        }
        dz
    }

    fn check(&self, x: &[f64]) {
        assert_eq!(x.len(), self.n, "point dimension does not match the form");
    }

    /// Solves `z = c + Zx + Mz + L|z|` by forward substitution.
    pub fn solve_z(&self, x: &[f64]) -> Vec<f64> {
        self.check(x);
        let dx: Vec<f64> = x.iter().zip(&self.anchor).map(|(x, a)| x - a).collect();
        self.delta_z(&dx)
            .iter()
            .zip(&self.z_anchor)
            .map(|(d, z0)| z0 + d)
            .collect()
    }

    /// Model increment `f_PL(anchor + dx) - f(anchor)`.
    pub fn delta(&self, dx: &[f64]) -> f64 {
        self.check(dx);
        let dz = self.delta_z(dx);
        let mut v = dot(&self.a, dx);
        for j in 0..self.s {
            let z0 = self.z_anchor[j];
            let dabs = (z0 + dz[j]).abs() - z0.abs();
            v += self.b[j] * dabs;
        }
        v
    }

    /// `f_PL(x) = anchor_value + delta(x - anchor)`.
    pub fn eval_pl(&self, x: &[f64]) -> f64 {
        self.check(x);
        let dx: Vec<f64> = x.iter().zip(&self.anchor).map(|(x, a)| x - a).collect();
        self.anchor_value + self.delta(&dx)
    }

    pub fn signature(&self, x: &[f64]) -> SignatureVector {
        SignatureVector::of_values(&self.solve_z(x))
    }

    /// Signature at the anchor.
    pub fn anchor_signature(&self) -> SignatureVector {
        SignatureVector::of_values(&self.z_anchor)
    }

    /// The form of `dv -> delta(alpha * dv)`, same anchor.
    pub fn scaled_increment(&self, alpha: f64) -> AbsLinearForm {
        let mut scaled = self.clone();
        scaled.z_mat.mapv_inplace(|v| alpha * v);
        scaled.a.iter_mut().for_each(|v| *v *= alpha);
        scaled.recompute_constants();
        scaled
    }

    fn recompute_constants(&mut self) {
        let abs_anchor: Vec<f64> = self.z_anchor.iter().map(|z| z.abs()).collect();
        for j in 0..self.s {
            let mut cj = self.z_anchor[j] - dot(self.z_mat.row(j).as_slice().unwrap(), &self.anchor);
            for &(k, mjk, ljk) in &self.lower[j] {
                cj -= mjk * self.z_anchor[k] + ljk * abs_anchor[k];
            }
            self.c[j] = cj;
        }
        self.d = self.anchor_value - dot(&self.a, &self.anchor) - dot(&self.b, &abs_anchor);
    }

    /// Substitutes `|z_i| = sigma_i z_i` row by row, leaving an affine
    /// objective in `x` and one affine expression `z_i(x)` per kink.
    pub fn restrict_to_signature(&self, sigma: &SignatureVector) -> LinearPiece {
        assert_eq!(sigma.len(), self.s, "signature length must equal s");
        let n = self.n;
        let s = self.s;
        let mut row_grad = Array2::<f64>::zeros((s, n));
        let mut row_value = vec![0.0; s];
        for j in 0..s {
            let mut q = self.z_anchor[j];
            let mut g = self.z_mat.row(j).to_owned();
            for &(k, mjk, ljk) in &self.lower[j] {
                let sk = sigma.0[k] as f64;
                let coef = mjk + ljk * sk;
                let qk = row_value[k];
                let zk0 = self.z_anchor[k];
                q += mjk * (qk - zk0) + ljk * (sk * qk - zk0.abs());
                if coef != 0.0 {
                    let gk = row_grad.row(k);
                    g.scaled_add(coef, &gk);
                }
            }
            row_value[j] = q;
            row_grad.row_mut(j).assign(&g);
        }
        let mut grad = ndarray::Array1::from(self.a.clone());
        let mut value = self.anchor_value;
        for j in 0..s {
            let sj = sigma.0[j] as f64;
            if self.b[j] != 0.0 && sj != 0.0 {
                grad.scaled_add(self.b[j] * sj, &row_grad.row(j));
            }
            value += self.b[j] * (sj * row_value[j] - self.z_anchor[j].abs());
        }
        LinearPiece {
            sigma: sigma.clone(),
            anchor: self.anchor.clone(),
            grad: grad.to_vec(),
            value_at_anchor: value,
            row_grad,
            row_value,
        }
    }
}

/// One block of the heavy-ball aggregate: the form at `x_i` with weight
/// `a_i` and step `alpha_i`.
#[derive(Debug, Clone, Copy)]
pub struct AggregateBlock<'a> {
    pub form: &'a AbsLinearForm,
    pub weight: f64,
    pub step: f64,
}

/// Stacks `sum_i a_i delta_i(alpha_i (v - x_i)) / alpha_i` into one form in
/// `v`, anchored at `v_anchor`. The result evaluates to the aggregate itself:
/// `eval_pl(result, v) = Phi(v)` and its anchor value is `Phi(v_anchor)`.
pub fn aggregate(
    blocks: &[AggregateBlock<'_>],
    v_anchor: &[f64],
) -> Result<AbsLinearForm, ModelError> {
    let first = blocks.first().ok_or(ModelError::NoBlocks)?;
    let n = first.form.n;
    if v_anchor.len() != n {
        return Err(ModelError::DimensionMismatch(format!(
            "anchor has {} entries, forms have n = {n}",
            v_anchor.len()
        )));
    }
    for (index, blk) in blocks.iter().enumerate() {
        if blk.form.n != n {
            return Err(ModelError::InvalidBlock {
                index,
                msg: format!("n = {} differs from {n}", blk.form.n),
            });
        }
        if !(blk.weight > 0.0) || !(blk.step > 0.0 && blk.step <= 1.0) {
            return Err(ModelError::InvalidBlock {
                index,
                msg: format!("weight {} / step {} out of range", blk.weight, blk.step),
            });
        }
    }
    let s_total: usize = blocks.iter().map(|b| b.form.s).sum();
    let mut z_mat = Array2::<f64>::zeros((s_total, n));
    let mut lower = Vec::with_capacity(s_total);
    let mut a = vec![0.0; n];
    let mut b = Vec::with_capacity(s_total);
    let mut z_anchor = Vec::with_capacity(s_total);
    let mut value = 0.0;
    let mut off = 0;
    for blk in blocks {
        let f = blk.form;
        let ratio = blk.weight / blk.step;
        // block increment at the nominal anchor
        let u: Vec<f64> = v_anchor
            .iter()
            .zip(&f.anchor)
            .map(|(v, x)| blk.step * (v - x))
            .collect();
        let dz = f.delta_z(&u);
        value += ratio * f.delta(&u);
        for j in 0..f.s {
            z_anchor.push(f.z_anchor[j] + dz[j]);
            b.push(ratio * f.b[j]);
            for l in 0..n {
                z_mat[[off + j, l]] = blk.step * f.z_mat[[j, l]];
            }
            lower.push(
                f.lower[j]
                    .iter()
                    .map(|&(k, mjk, ljk)| (off + k, mjk, ljk))
                    .collect(),
            );
        }
        for (al, fl) in a.iter_mut().zip(&f.a) {
            *al += blk.weight * fl;
        }
        off += f.s;
    }
    AbsLinearForm::with_couplings(v_anchor.to_vec(), value, z_anchor, a, b, z_mat, lower)
}

/// Signature vector with entries in `{-1, 0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SignatureVector(Vec<i8>);

impl SignatureVector {
    pub fn new(entries: Vec<i8>) -> Option<Self> {
        entries
            .iter()
            .all(|e| (-1..=1).contains(e))
            .then_some(SignatureVector(entries))
    }

    pub fn zeros(s: usize) -> Self {
        SignatureVector(vec![0; s])
    }

    /// `sign(z_i)` with values inside the kink tolerance mapped to 0.
    pub fn of_values(z: &[f64]) -> Self {
        SignatureVector(
            z.iter()
                .map(|&v| {
                    if v.abs() <= kink_tolerance(v) {
                        0
                    } else if v > 0.0 {
                        1
                    } else {
                        -1
                    }
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn entries(&self) -> &[i8] {
        &self.0
    }

    pub fn get(&self, i: usize) -> i8 {
        self.0[i]
    }

    /// Copy with entry `i` replaced by `to`.
    pub fn flipped(&self, i: usize, to: i8) -> Self {
        assert!((-1..=1).contains(&to));
        let mut e = self.0.clone();
        e[i] = to;
        SignatureVector(e)
    }

    /// Every signature in `{-1,0,1}^s`, lexicographic in `(-1, 0, 1)`.
    pub fn enumerate(s: usize) -> impl Iterator<Item = SignatureVector> {
        let total = 3usize.pow(s as u32);
        (0..total).map(move |mut code| {
            let mut e = vec![0i8; s];
            for slot in e.iter_mut().rev() {
                *slot = (code % 3) as i8 - 1;
                code /= 3;
            }
            SignatureVector(e)
        })
    }
}

/// The model restricted to one signature domain. Expressions are affine in
/// `x` and stored around the anchor: `value(x) = value_at_anchor +
/// grad'(x - anchor)`, `z_j(x) = row_value[j] + row_grad[j]'(x - anchor)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPiece {
    pub sigma: SignatureVector,
    pub anchor: Vec<f64>,
    pub grad: Vec<f64>,
    pub value_at_anchor: f64,
    pub row_grad: Array2<f64>,
    pub row_value: Vec<f64>,
}

impl LinearPiece {
    pub fn objective(&self, x: &[f64]) -> f64 {
        let dx: Vec<f64> = x.iter().zip(&self.anchor).map(|(x, a)| x - a).collect();
        self.value_at_anchor + dot(&self.grad, &dx)
    }

    pub fn z(&self, x: &[f64]) -> Vec<f64> {
        let dx: Vec<f64> = x.iter().zip(&self.anchor).map(|(x, a)| x - a).collect();
        self.row_grad
            .axis_iter(Axis(0))
            .zip(&self.row_value)
            .map(|(g, q)| q + dot(g.as_slice().unwrap(), &dx))
            .collect()
    }

    /// Whether `sigma_i z_i(x) >= -tol` (and `|z_i| <= tol` where
    /// `sigma_i = 0`) for every kink.
    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.z(x)
            .iter()
            .zip(self.sigma.entries())
            .all(|(&z, &sg)| match sg {
                0 => z.abs() <= tol,
                _ => sg as f64 * z >= -tol,
            })
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abstape::TapeBuilder;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn example1_form(anchor: [f64; 2]) -> AbsLinearForm {
        let mut b = TapeBuilder::new(2);
        let x = b.inputs();
        let q1 = b.square(x[0]);
        let q2 = b.square(x[1]);
        let m = b.max(q1, q2);
        b.finish(m).unwrap().abs_linearize(&anchor).unwrap()
    }

    #[test]
    fn solve_z_and_eval_examples() {
        let form = example1_form([-2.0, 1.0]);
        assert_eq!(form.solve_z(&[-2.0, 1.0]), vec![3.0]);
        assert_eq!(form.eval_pl(&[-2.0, 1.0]), 4.0);
        assert_eq!(form.eval_pl(&[-1.0, 1.0]), 1.0);
        assert_eq!(form.eval_pl(&[0.0, 0.0]), -1.0);
        assert_eq!(form.delta(&[0.0, 0.0]), 0.0);
        assert_eq!(form.delta(&[1.0, 0.0]), -3.0);
    }

    #[test]
    fn signature_examples() {
        let form = example1_form([-2.0, 1.0]);
        assert_eq!(form.signature(&[-2.0, 1.0]).entries(), &[1]);
        // z(0, 2) = 3 + (-4)(2) - 2(1) = -7 < 0
        assert_eq!(form.solve_z(&[0.0, 2.0]), vec![-7.0]);
        assert_eq!(form.signature(&[0.0, 2.0]).entries(), &[-1]);
        // a point on the kink of the model: 3 - 4 dx1 - 2 dx2 = 0
        assert_eq!(form.signature(&[-2.0 + 0.75, 1.0]).entries(), &[0]);
        // and of the function at the anchor itself
        let on_kink = example1_form([1.0, 1.0]);
        assert_eq!(on_kink.anchor_signature().entries(), &[0]);
    }

    #[test]
    fn decoupled_form_is_affine_in_z() {
        let z = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let form = AbsLinearForm::new(
            vec![0.0, 0.0],
            1.0,
            vec![0.5, -0.25],
            vec![1.0, 1.0],
            vec![1.0, 2.0],
            z.clone(),
            Array2::zeros((2, 2)),
            Array2::zeros((2, 2)),
        )
        .unwrap();
        let x = [0.3, -0.7];
        let expect = [0.5 + 0.3 - 1.4, -0.25 - 0.3 - 0.35];
        for (got, want) in form.solve_z(&x).iter().zip(expect) {
            assert!((got - want).abs() < 1e-15);
        }
        assert_eq!(form.c(), &[0.5, -0.25]);
    }

    #[test]
    fn rejects_non_triangular_couplings() {
        let mut l = Array2::zeros((2, 2));
        l[[0, 1]] = 1.0;
        let err = AbsLinearForm::new(
            vec![0.0],
            0.0,
            vec![0.0, 0.0],
            vec![0.0],
            vec![0.0, 0.0],
            Array2::zeros((2, 1)),
            Array2::zeros((2, 2)),
            l,
        );
        assert_eq!(err, Err(ModelError::NotStrictlyLower("L")));
    }

    #[test]
    fn restriction_agrees_on_its_piece() {
        let form = example1_form([-2.0, 1.0]);
        let sigma = SignatureVector::new(vec![1]).unwrap();
        let piece = form.restrict_to_signature(&sigma);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut hits = 0;
        while hits < 100 {
            let x = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            if !piece.contains(&x, 0.0) {
                continue;
            }
            hits += 1;
            assert!((piece.objective(&x) - form.eval_pl(&x)).abs() < 1e-10);
        }
        // sigma = 0: kink surface
        let piece0 = form.restrict_to_signature(&SignatureVector::zeros(1));
        let on = [-1.25, 1.0];
        assert!(piece0.contains(&on, 1e-12));
        assert!((piece0.objective(&on) - form.eval_pl(&on)).abs() < 1e-12);
    }

    #[test]
    fn smooth_piece_has_no_rows() {
        let mut b = TapeBuilder::new(2);
        let x = b.inputs();
        let y = b.affine(&[(x[0], 2.0), (x[1], -1.0)], 0.5);
        let form = b.finish(y).unwrap().abs_linearize(&[1.0, 1.0]).unwrap();
        let piece = form.restrict_to_signature(&SignatureVector::zeros(0));
        assert_eq!(piece.row_grad.dim(), (0, 2));
        assert_eq!(piece.grad, vec![2.0, -1.0]);
        assert_eq!(piece.objective(&[0.0, 0.0]), 0.5);
    }

    #[test]
    fn single_block_aggregate() {
        let form = example1_form([-2.0, 1.0]);
        let agg = aggregate(
            &[AggregateBlock {
                form: &form,
                weight: 2.0,
                step: 0.5,
            }],
            &[-2.0, 1.0],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let v = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
            let direct = 2.0 / 0.5 * form.delta(&[0.5 * (v[0] + 2.0), 0.5 * (v[1] - 1.0)]);
            assert!((agg.eval_pl(&v) - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn enumeration_covers_all_signatures() {
        let all: Vec<_> = SignatureVector::enumerate(2).collect();
        assert_eq!(all.len(), 9);
        assert_eq!(all[0].entries(), &[-1, -1]);
        assert_eq!(all[8].entries(), &[1, 1]);
        assert!(SignatureVector::new(vec![2]).is_none());
    }
}

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use crate::linalg::{Matrix, Vector};

/// Affine expression `Σ c_j x_j + constant`, terms sorted by index with
/// duplicates merged.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinExpr {
    terms: Vec<(usize, f64)>,
    constant: f64,
}

impl LinExpr {
    pub fn var(idx: usize) -> Self {
        Self { terms: vec![(idx, 1.0)], constant: 0.0 }
    }

    pub fn constant_expr(c: f64) -> Self {
        Self { terms: Vec::new(), constant: c }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    pub fn terms(&self) -> &[(usize, f64)] {
        &self.terms
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn eval(&self, x: &Vector) -> f64 {
        self.terms.iter().map(|(i, c)| c * x[*i]).sum::<f64>() + self.constant
    }

    pub fn max_abs_coefficient(&self) -> f64 {
        self.terms.iter().fold(self.constant.abs(), |a, (_, c)| a.max(c.abs()))
    }

    /// `Σ w_k e_k`.
    pub fn combine<'a>(parts: impl IntoIterator<Item = (f64, &'a LinExpr)>) -> LinExpr {
        let mut terms = Vec::new();
        let mut constant = 0.0;
        for (w, e) in parts {
            if w == 0.0 {
                continue;
            }
            constant += w * e.constant;
            terms.extend(e.terms.iter().map(|(i, c)| (*i, w * c)));
        }
        Self::from_raw(terms, constant)
    }

    fn from_raw(mut terms: Vec<(usize, f64)>, constant: f64) -> Self {
        terms.sort_by_key(|t| t.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(terms.len());
        for (i, c) in terms {
            match merged.last_mut() {
                Some((j, acc)) if *j == i => *acc += c,
                _ => merged.push((i, c)),
            }
        }
        merged.retain(|(_, c)| *c != 0.0);
        Self { terms: merged, constant }
    }

    /// `Σ_k a_k e_k` for a constant vector `a`.
    pub fn dot(a: &[f64], es: &[LinExpr]) -> LinExpr {
        assert_eq!(a.len(), es.len(), "dot length mismatch");
        Self::combine(a.iter().copied().zip(es))
    }
}

impl From<f64> for LinExpr {
    fn from(c: f64) -> Self {
        Self::constant_expr(c)
    }
}

impl fmt::Display for LinExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in &self.terms {
            write!(f, "{c:+.6e}*x{i} ")?;
        }
        write!(f, "{:+.6e}", self.constant)
    }
}

impl Add<&LinExpr> for &LinExpr {
    type Output = LinExpr;
    fn add(self, rhs: &LinExpr) -> LinExpr {
        LinExpr::combine([(1.0, self), (1.0, rhs)])
    }
}

impl Sub<&LinExpr> for &LinExpr {
    type Output = LinExpr;
    fn sub(self, rhs: &LinExpr) -> LinExpr {
        LinExpr::combine([(1.0, self), (-1.0, rhs)])
    }
}

impl Mul<f64> for &LinExpr {
    type Output = LinExpr;
    fn mul(self, w: f64) -> LinExpr {
        if w == 0.0 {
            return LinExpr::zero();
        }
        LinExpr { terms: self.terms.iter().map(|(i, c)| (*i, c * w)).collect(), constant: self.constant * w }
    }
}

impl Neg for &LinExpr {
    type Output = LinExpr;
    fn neg(self) -> LinExpr {
        self * -1.0
    }
}

macro_rules! forward_owned {
    ($tr:ident, $m:ident) => {
        impl $tr<LinExpr> for LinExpr {
            type Output = LinExpr;
            fn $m(self, rhs: LinExpr) -> LinExpr {
                (&self).$m(&rhs)
            }
        }
        impl $tr<&LinExpr> for LinExpr {
            type Output = LinExpr;
            fn $m(self, rhs: &LinExpr) -> LinExpr {
                (&self).$m(rhs)
            }
        }
        impl $tr<LinExpr> for &LinExpr {
            type Output = LinExpr;
            fn $m(self, rhs: LinExpr) -> LinExpr {
                self.$m(&rhs)
            }
        }
        impl $tr<f64> for LinExpr {
            type Output = LinExpr;
            fn $m(self, rhs: f64) -> LinExpr {
                (&self).$m(&LinExpr::constant_expr(rhs))
            }
        }
    };
}
forward_owned!(Add, add);

impl Add<f64> for &LinExpr {
    type Output = LinExpr;
    fn add(self, rhs: f64) -> LinExpr {
        LinExpr { terms: self.terms.clone(), constant: self.constant + rhs }
    }
}

impl Sub<f64> for &LinExpr {
    type Output = LinExpr;
    fn sub(self, rhs: f64) -> LinExpr {
        LinExpr { terms: self.terms.clone(), constant: self.constant - rhs }
    }
}

forward_owned!(Sub, sub);

impl Mul<f64> for LinExpr {
    type Output = LinExpr;
    fn mul(self, w: f64) -> LinExpr {
        &self * w
    }
}

impl Neg for LinExpr {
    type Output = LinExpr;
    fn neg(self) -> LinExpr {
        -&self
    }
}

impl std::iter::Sum for LinExpr {
    fn sum<I: Iterator<Item = LinExpr>>(iter: I) -> LinExpr {
        let items: Vec<LinExpr> = iter.collect();
        LinExpr::combine(items.iter().map(|e| (1.0, e)))
    }
}

/// Matrix of affine expressions, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MatExpr {
    rows: usize,
    cols: usize,
    entries: Vec<LinExpr>,
}

impl MatExpr {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> LinExpr) -> Self {
        let mut entries = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                entries.push(f(i, j));
            }
        }
        Self { rows, cols, entries }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| LinExpr::zero())
    }

    pub fn constant(m: &Matrix) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| LinExpr::constant_expr(m[(i, j)]))
    }

    /// Column vector from expressions.
    pub fn column(es: &[LinExpr]) -> Self {
        Self { rows: es.len(), cols: 1, entries: es.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn entries(&self) -> &[LinExpr] {
        &self.entries
    }

    pub fn at(&self, i: usize, j: usize) -> &LinExpr {
        &self.entries[i * self.cols + j]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.at(j, i).clone())
    }

    pub fn scale(&self, w: f64) -> Self {
        Self { rows: self.rows, cols: self.cols, entries: self.entries.iter().map(|e| e * w).collect() }
    }

    /// `C · self`.
    pub fn left_mul(&self, c: &Matrix) -> Self {
        assert_eq!(c.ncols(), self.rows, "left_mul shape mismatch");
        Self::from_fn(c.nrows(), self.cols, |i, j| {
            LinExpr::combine((0..self.rows).map(|k| (c[(i, k)], self.at(k, j))))
        })
    }

    /// `self · C`.
    pub fn right_mul(&self, c: &Matrix) -> Self {
        assert_eq!(c.nrows(), self.cols, "right_mul shape mismatch");
        Self::from_fn(self.rows, c.ncols(), |i, j| {
            LinExpr::combine((0..self.cols).map(|k| (c[(k, j)], self.at(i, k))))
        })
    }

    /// `self · v` for a constant vector.
    pub fn mul_vec(&self, v: &Vector) -> Vec<LinExpr> {
        assert_eq!(v.len(), self.cols, "mul_vec shape mismatch");
        (0..self.rows).map(|i| LinExpr::combine((0..self.cols).map(|k| (v[k], self.at(i, k))))).collect()
    }

    /// `aᵀ · self · a`.
    pub fn quad_form(&self, a: &Vector) -> LinExpr {
        let mut parts = Vec::with_capacity(self.rows * self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                parts.push((a[i] * a[j], self.at(i, j)));
            }
        }
        LinExpr::combine(parts)
    }

    /// `Tr(Cᵀ · self) = Σ C_ij X_ij`.
    pub fn inner(&self, c: &Matrix) -> LinExpr {
        assert_eq!(c.shape(), self.shape(), "inner shape mismatch");
        let mut parts = Vec::with_capacity(self.entries.len());
        for i in 0..self.rows {
            for j in 0..self.cols {
                parts.push((c[(i, j)], self.at(i, j)));
            }
        }
        LinExpr::combine(parts)
    }

    pub fn trace(&self) -> LinExpr {
        LinExpr::combine((0..self.rows.min(self.cols)).map(|i| (1.0, self.at(i, i))))
    }

    /// `[[a, b], [c, d]]`.
    pub fn block_2x2(a: &MatExpr, b: &MatExpr, c: &MatExpr, d: &MatExpr) -> Self {
        assert!(a.rows == b.rows && c.rows == d.rows && a.cols == c.cols && b.cols == d.cols, "block shape mismatch");
        let (r0, c0) = a.shape();
        Self::from_fn(r0 + c.rows, c0 + b.cols, |i, j| match (i < r0, j < c0) {
            (true, true) => a.at(i, j).clone(),
            (true, false) => b.at(i, j - c0).clone(),
            (false, true) => c.at(i - r0, j).clone(),
            (false, false) => d.at(i - r0, j - c0).clone(),
        })
    }

    pub fn eval(&self, x: &Vector) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| self.at(i, j).eval(x))
    }

    fn zip(&self, other: &MatExpr, w: f64) -> MatExpr {
        assert_eq!(self.shape(), other.shape(), "matrix expression shape mismatch");
        Self {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.iter().zip(&other.entries).map(|(a, b)| LinExpr::combine([(1.0, a), (w, b)])).collect(),
        }
    }
}

impl Add<&MatExpr> for &MatExpr {
    type Output = MatExpr;
    fn add(self, rhs: &MatExpr) -> MatExpr {
        self.zip(rhs, 1.0)
    }
}

impl Sub<&MatExpr> for &MatExpr {
    type Output = MatExpr;
    fn sub(self, rhs: &MatExpr) -> MatExpr {
        self.zip(rhs, -1.0)
    }
}

impl Add<&Matrix> for &MatExpr {
    type Output = MatExpr;
    fn add(self, rhs: &Matrix) -> MatExpr {
        self.zip(&MatExpr::constant(rhs), 1.0)
    }
}

impl Sub<&Matrix> for &MatExpr {
    type Output = MatExpr;
    fn sub(self, rhs: &Matrix) -> MatExpr {
        self.zip(&MatExpr::constant(rhs), -1.0)
    }
}

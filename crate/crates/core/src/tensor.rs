//! Dense row-major matrix values.
//!
//! [`Tensor`] is a plain value: it owns its data and carries no graph state.
//! Differentiable computation happens on a [`Graph`](crate::graph::Graph),
//! which records tensors as nodes and hands out [`Var`](crate::graph::Var)
//! handles.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Tensor::new", (rows, cols), (data.len(), 1)));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn full(rows: usize, cols: usize, v: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, T::zero())
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, T::one())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn scalar(v: T) -> Self {
        Self::full(1, 1, v)
    }

    /// Builds a tensor from `f64` rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend(row.iter().map(|&v| T::of(v)));
        }
        Self { rows: r, cols: c, data }
    }

    pub fn from_f64(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        Self::new(rows, cols, values.iter().map(|&v| T::of(v)).collect())
    }

    /// Uniform samples in `[-scale, scale]`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| T::of(rng.random_range(-scale..=scale)))
            .collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape(), other.shape());
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Reverses the row order.
    pub fn flip_rows(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for r in (0..self.rows).rev() {
            data.extend_from_slice(self.row(r));
        }
        Self { rows: self.rows, cols: self.cols, data }
    }

    /// Row `i` of the result is row `perm[i]` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for &r in perm {
            data.extend_from_slice(self.row(r));
        }
        Self { rows: perm.len(), cols: self.cols, data }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        gemm_nn(self, other, &mut out);
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `out += a · b`
pub(crate) fn gemm_nn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, out: &mut Tensor<T>) {
    let n = b.cols;
    for i in 0..a.rows {
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for (p, &av) in a.row(i).iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out += a · bᵀ`
pub(crate) fn gemm_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, out: &mut Tensor<T>) {
    let n = b.rows;
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..n {
            let dot: T = a_row
                .iter()
                .zip(b.row(j))
                .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
            out.data[i * n + j] = out.data[i * n + j] + dot;
        }
    }
}

/// `out += aᵀ · b`
pub(crate) fn gemm_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, out: &mut Tensor<T>) {
    let n = b.cols;
    for p in 0..a.rows {
        let b_row = b.row(p);
        for (i, &av) in a.row(p).iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::<f64>::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn matmul_identity_and_mismatch() {
        let a = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(a.matmul(&Tensor::identity(2)).unwrap(), a);
        let err = a.matmul(&Tensor::zeros(3, 1)).unwrap_err();
        assert!(err.to_string().contains("(2, 2)"));
        assert!(err.to_string().contains("(3, 1)"));
    }

    #[test]
    fn gemm_variants_agree() {
        let a = Tensor::<f64>::from_rows(&[&[1.0, -2.0, 0.5], &[0.0, 3.0, 1.0]]);
        let b = Tensor::<f64>::from_rows(&[&[2.0, 1.0], &[0.5, -1.0], &[1.0, 4.0]]);
        let want = a.matmul(&b).unwrap();
        let mut nt = Tensor::zeros(2, 2);
        gemm_nt(&a, &b.transpose(), &mut nt);
        assert_eq!(nt, want);
        let mut tn = Tensor::zeros(2, 2);
        gemm_tn(&a.transpose(), &b, &mut tn);
        assert_eq!(tn, want);
    }

    #[test]
    fn permute_and_flip() {
        let a = Tensor::<f64>::from_rows(&[&[1.0], &[2.0], &[3.0]]);
        assert_eq!(a.flip_rows(), a.permute_rows(&[2, 1, 0]));
    }
}

//! Dense row-major 2-D tensors over a configurable float width.
//!
//! Training runs in `f32`; gradient verification instantiates the same code
//! at `f64` so finite differences are not drowned in rounding error.

use std::fmt;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{shape_error, Result};

/// Scalar element type for all numeric kernels.
pub trait Element:
    Copy
    + PartialOrd
    + PartialEq
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_element {
    ($t:ty) => {
        impl Element for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn maximum(self, other: Self) -> Self {
                if self >= other {
                    self
                } else {
                    other
                }
            }
            fn minimum(self, other: Self) -> Self {
                if self <= other {
                    self
                } else {
                    other
                }
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}

impl_element!(f32);
impl_element!(f64);

/// A 2-D matrix. Vectors are `1 x d` rows; scalars are `1 x 1`.
#[derive(Clone, PartialEq)]
pub struct Tensor<E> {
    rows: usize,
    cols: usize,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![E::ZERO; rows * cols],
        }
    }

    pub fn full(rows: usize, cols: usize, value: E) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<E>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_error(
                "from_vec",
                format!("{rows}x{cols} = {} values", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Builds a `1 x d` row vector.
    pub fn row_vector(data: Vec<E>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> E {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: E) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[E] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [E] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single element of a `1 x 1` tensor.
    pub fn value(&self) -> E {
        debug_assert_eq!(self.len(), 1, "value() called on a non-scalar tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: E) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign_scaled(&mut self, other: &Tensor<E>, scale: E) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b * scale;
        }
    }

    pub fn fill(&mut self, v: E) {
        self.data.fill(v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// `self (m,k) * other (k,n) -> (m,n)`.
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        if self.cols != other.rows {
            return Err(shape_error(
                "matmul",
                format!("inner dims to agree ({}x{} * {}x{})", self.rows, self.cols, self.cols, other.cols),
                format!("{} vs {}", self.shape_string(), other.shape_string()),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![E::ZERO; m * n];
        for i in 0..m {
            let a_row = self.row(i);
            let out_row = &mut out[i * n..(i + 1) * n];
            for (l, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[l * n..(l + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        debug_assert_eq!(k, other.rows);
        Ok(Tensor {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// `self (m,k) * other^T, other (n,k) -> (m,n)`.
    pub fn matmul_nt(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        if self.cols != other.cols {
            return Err(shape_error(
                "matmul_nt",
                "matching column counts".to_string(),
                format!("{} vs {}", self.shape_string(), other.shape_string()),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = vec![E::ZERO; m * n];
        for i in 0..m {
            let a_row = self.row(i);
            for j in 0..n {
                let b_row = other.row(j);
                let mut acc = E::ZERO;
                for l in 0..k {
                    acc += a_row[l] * b_row[l];
                }
                out[i * n + j] = acc;
            }
        }
        Ok(Tensor {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// `self^T, self (k,m), other (k,n) -> (m,n)`.
    pub fn matmul_tn(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        if self.rows != other.rows {
            return Err(shape_error(
                "matmul_tn",
                "matching row counts".to_string(),
                format!("{} vs {}", self.shape_string(), other.shape_string()),
            ));
        }
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![E::ZERO; m * n];
        for l in 0..k {
            let a_row = self.row(l);
            let b_row = other.row(l);
            for (i, &a) in a_row.iter().enumerate() {
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// Converts element type, rounding through `f64`.
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| F::from_f64(v.to_f64())).collect(),
        }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}x{}>[", self.rows, self.cols)?;
        let preview: Vec<String> = self.data.iter().take(8).map(|v| format!("{v:.4}")).collect();
        write!(f, "{}", preview.join(", "))?;
        if self.len() > 8 {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

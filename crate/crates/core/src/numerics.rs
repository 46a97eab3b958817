//! Dense row-major matrices and the state reductions shared by every
//! attention path.
//!
//! All accumulations run in a fixed index order so that two algorithms that
//! add the same terms in the same order produce identical bits. Matrix
//! products accumulate over the inner index in ascending order.

use std::cell::Cell;
use std::fmt::{self, Debug, Display};
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar type carried by [`Matrix`]. Verification runs use `f64`; `f32`
/// exists for benchmark sweeps.
pub trait Real:
    Float + FromPrimitive + AddAssign + Default + Debug + Display + Send + Sync + 'static
{
    /// Size of one element on the wire.
    const BYTES: usize;

    fn from_f64(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite f64 converts")
    }

    fn to_f64(self) -> f64;
}

impl Real for f64 {
    const BYTES: usize = 8;

    fn to_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    const BYTES: usize = 4;

    fn to_f64(self) -> f64 {
        self as f64
    }
}

/// Dense `rows × cols` matrix stored row-major.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from `f64` rows. Panics on ragged input; intended for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend(r.iter().map(|&x| <T as Real>::from_f64(x)));
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Bytes this matrix occupies as a message payload.
    pub fn payload_bytes(&self) -> u64 {
        (self.numel() * T::BYTES) as u64
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: T) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.rows, "row range out of bounds");
        Self {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Stacks matrices vertically in the given order.
    pub fn vstack(parts: &[Matrix<T>]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::shape(
                    "vstack",
                    format!("column count {} vs {}", p.cols, cols),
                ));
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Frobenius inner product, accumulated in storage order.
    pub fn dot(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other, "dot")?;
        let mut acc = T::zero();
        for (&a, &b) in self.data.iter().zip(&other.data) {
            acc += a * b;
        }
        Ok(acc)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    /// Largest entry-wise absolute difference. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Converts element precision.
    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .map(|&x| <U as Real>::from_f64(x.to_f64()))
                .collect(),
        }
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }
}

impl<T: Debug> Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            writeln!(f, "  {row:?}")?;
        }
        write!(f, "]")
    }
}

/// Standard product `a · b`.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{:?} · {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let a_row = a.row(i);
        for j in 0..n {
            let mut acc = T::zero();
            for p in 0..k {
                acc += a_row[p] * b.data[p * n + j];
            }
            out.data[i * n + j] = acc;
        }
    }
    Ok(out)
}

pub fn transpose<T: Real>(a: &Matrix<T>) -> Matrix<T> {
    Matrix::from_fn(a.cols, a.rows, |i, j| a.get(j, i))
}

/// Lower-triangular `{0, 1}` selector: entry `(i, j)` is one when `i >= j`.
///
/// Linear attention multiplies by this mask, so the masked entries are zero
/// rather than `-inf`; the `-inf` form only makes sense before a softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CausalMask {
    size: usize,
}

impl CausalMask {
    pub fn new(size: usize) -> Self {
        Self { size }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn entry<T: Real>(&self, i: usize, j: usize) -> T {
        if i >= j {
            T::one()
        } else {
            T::zero()
        }
    }

    pub fn to_matrix<T: Real>(&self) -> Matrix<T> {
        Matrix::from_fn(self.size, self.size, |i, j| self.entry(i, j))
    }
}

/// `S ⊙ Ψ`: keeps entries on or below the diagonal and zeroes the rest.
pub fn hadamard_mask<T: Real>(s: &Matrix<T>, mask: &CausalMask) -> Result<Matrix<T>> {
    if s.rows != s.cols || s.rows != mask.size {
        return Err(Error::shape(
            "hadamard_mask",
            format!("{:?} with mask of size {}", s.shape(), mask.size),
        ));
    }
    Ok(Matrix::from_fn(s.rows, s.cols, |i, j| {
        if i >= j {
            s.get(i, j)
        } else {
            T::zero()
        }
    }))
}

/// Counts of state reductions performed on the current thread.
///
/// Every rank of the simulated runtime runs on its own thread, so these
/// counters observe exactly one rank's work.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReductionCounts {
    pub prefix: u64,
    pub suffix: u64,
    pub full: u64,
}

thread_local! {
    static REDUCTIONS: Cell<ReductionCounts> = const { Cell::new(ReductionCounts { prefix: 0, suffix: 0, full: 0 }) };
}

pub fn reduction_counts() -> ReductionCounts {
    REDUCTIONS.with(|c| c.get())
}

fn bump(f: impl FnOnce(&mut ReductionCounts)) {
    REDUCTIONS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

fn check_states<T: Real>(states: &[Matrix<T>], op: &'static str) -> Result<(usize, usize)> {
    let shape = states
        .first()
        .map(|m| m.shape())
        .ok_or_else(|| Error::shape(op, "empty state list has no shape".to_string()))?;
    if let Some(bad) = states.iter().find(|m| m.shape() != shape) {
        return Err(Error::shape(
            op,
            format!("state {:?} vs {:?}", bad.shape(), shape),
        ));
    }
    Ok(shape)
}

/// Adds `states` in the order given. The first term is copied rather than
/// added to zero, so a one-element sum reproduces its input exactly.
fn accumulate<'a, T: Real>(
    mut terms: impl Iterator<Item = &'a Matrix<T>>,
    shape: (usize, usize),
) -> Matrix<T> {
    let Some(first) = terms.next() else {
        return Matrix::zeros(shape.0, shape.1);
    };
    let mut acc = first.clone();
    for m in terms {
        for (a, &b) in acc.data.iter_mut().zip(&m.data) {
            *a += b;
        }
    }
    acc
}

/// Sum of all states, ascending index order.
pub fn sum_states<T: Real>(states: &[Matrix<T>]) -> Result<Matrix<T>> {
    let shape = check_states(states, "sum_states")?;
    bump(|c| c.full += 1);
    Ok(accumulate(states.iter(), shape))
}

/// `Σ_{i=1..upto} states[i]` (1-based), accumulated in ascending order.
/// `upto = 0` gives the zero matrix.
pub fn prefix_sum_states<T: Real>(states: &[Matrix<T>], upto: usize) -> Result<Matrix<T>> {
    let shape = check_states(states, "prefix_sum_states")?;
    if upto > states.len() {
        return Err(Error::shape(
            "prefix_sum_states",
            format!("prefix length {upto} exceeds {} states", states.len()),
        ));
    }
    bump(|c| c.prefix += 1);
    Ok(accumulate(states[..upto].iter(), shape))
}

/// `Σ_{i=from..T} states[i]` (1-based). `from = T + 1` gives the zero matrix.
///
/// The sum is built from the far end inward, `S_t = S_{t+1} + states[t]`,
/// which is the order a reverse ring carrying a running suffix produces.
pub fn suffix_sum_states<T: Real>(states: &[Matrix<T>], from: usize) -> Result<Matrix<T>> {
    let shape = check_states(states, "suffix_sum_states")?;
    if from == 0 || from > states.len() + 1 {
        return Err(Error::shape(
            "suffix_sum_states",
            format!("suffix start {from} outside 1..={}", states.len() + 1),
        ));
    }
    bump(|c| c.suffix += 1);
    Ok(accumulate(states[from - 1..].iter().rev(), shape))
}

/// All prefix sums `M_{1:0}, M_{1:1}, …, M_{1:T}` via the incremental form
/// `M_{1:t} = M_{1:t−1} + M_t`.
pub fn running_prefix_sums<T: Real>(states: &[Matrix<T>]) -> Result<Vec<Matrix<T>>> {
    let shape = check_states(states, "running_prefix_sums")?;
    let mut out = Vec::with_capacity(states.len() + 1);
    out.push(Matrix::zeros(shape.0, shape.1));
    let mut acc: Option<Matrix<T>> = None;
    for s in states {
        let next = match acc.take() {
            None => s.clone(),
            Some(mut a) => {
                a.add_assign(s)?;
                a
            }
        };
        out.push(next.clone());
        acc = Some(next);
    }
    Ok(out)
}

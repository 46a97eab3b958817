//! Sequence-shaped data and how it is cut into chunks.
//!
//! A batch holds `B·H` independent slots, ordered batch-major
//! (`slot = b·H + h`). Each slot is a length-`N` sequence. Sequence
//! parallelism gives chunk `t` (rows `t·C .. (t+1)·C`, `C = N/T`) of every
//! slot to the rank at SP position `t`.

use crate::data::{gen_data, stream};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};

/// Row-indexed data that can be chunked along the sequence and reassembled.
pub trait SeqData: Clone + Send + Sync {
    fn seq_len(&self) -> usize;
    fn slice_rows(&self, start: usize, end: usize) -> Self;
    fn vstack(parts: &[Self]) -> Result<Self>;
}

impl<T: Real> SeqData for Matrix<T> {
    fn seq_len(&self) -> usize {
        self.rows()
    }

    fn slice_rows(&self, start: usize, end: usize) -> Self {
        Matrix::slice_rows(self, start, end)
    }

    fn vstack(parts: &[Self]) -> Result<Self> {
        Matrix::vstack(parts)
    }
}

/// Queries, keys and values of one slot (or one chunk of it), each `N×d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Qkv<T = f64> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
}

impl<T: Real> Qkv<T> {
    pub fn new(q: Matrix<T>, k: Matrix<T>, v: Matrix<T>) -> Result<Self> {
        if q.shape() != k.shape() || q.shape() != v.shape() {
            return Err(Error::shape(
                "qkv",
                format!("Q {:?}, K {:?}, V {:?}", q.shape(), k.shape(), v.shape()),
            ));
        }
        if q.rows() == 0 || q.cols() == 0 {
            return Err(Error::shape("qkv", "empty sequence or dimension".into()));
        }
        Ok(Self { q, k, v })
    }

    pub fn dim(&self) -> usize {
        self.q.cols()
    }
}

impl<T: Real> SeqData for Qkv<T> {
    fn seq_len(&self) -> usize {
        self.q.rows()
    }

    fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            q: self.q.slice_rows(start, end),
            k: self.k.slice_rows(start, end),
            v: self.v.slice_rows(start, end),
        }
    }

    fn vstack(parts: &[Self]) -> Result<Self> {
        let q: Vec<_> = parts.iter().map(|p| p.q.clone()).collect();
        let k: Vec<_> = parts.iter().map(|p| p.k.clone()).collect();
        let v: Vec<_> = parts.iter().map(|p| p.v.clone()).collect();
        Ok(Self {
            q: Matrix::vstack(&q)?,
            k: Matrix::vstack(&k)?,
            v: Matrix::vstack(&v)?,
        })
    }
}

/// Gradients with respect to Q, K and V.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle<T = f64> {
    pub dq: Matrix<T>,
    pub dk: Matrix<T>,
    pub dv: Matrix<T>,
}

impl<T: Real> GradientBundle<T> {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            dq: Matrix::zeros(n, d),
            dk: Matrix::zeros(n, d),
            dv: Matrix::zeros(n, d),
        }
    }

    /// Largest absolute difference over all three gradients.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        Ok(self
            .dq
            .max_abs_diff(&other.dq)?
            .max(self.dk.max_abs_diff(&other.dk)?)
            .max(self.dv.max_abs_diff(&other.dv)?))
    }

    pub fn max_abs(&self) -> T {
        self.dq
            .max_abs()
            .max(self.dk.max_abs())
            .max(self.dv.max_abs())
    }
}

impl<T: Real> SeqData for GradientBundle<T> {
    fn seq_len(&self) -> usize {
        self.dq.rows()
    }

    fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            dq: self.dq.slice_rows(start, end),
            dk: self.dk.slice_rows(start, end),
            dv: self.dv.slice_rows(start, end),
        }
    }

    fn vstack(parts: &[Self]) -> Result<Self> {
        let dq: Vec<_> = parts.iter().map(|p| p.dq.clone()).collect();
        let dk: Vec<_> = parts.iter().map(|p| p.dk.clone()).collect();
        let dv: Vec<_> = parts.iter().map(|p| p.dv.clone()).collect();
        Ok(Self {
            dq: Matrix::vstack(&dq)?,
            dk: Matrix::vstack(&dk)?,
            dv: Matrix::vstack(&dv)?,
        })
    }
}

/// `B·H` attention slots of equal shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch<T = f64> {
    pub batch: usize,
    pub heads: usize,
    pub slots: Vec<Qkv<T>>,
}

impl<T: Real> SequenceBatch<T> {
    pub fn new(batch: usize, heads: usize, slots: Vec<Qkv<T>>) -> Result<Self> {
        if batch == 0 || heads == 0 || slots.len() != batch * heads {
            return Err(Error::shape(
                "sequence_batch",
                format!("{} slots for B={batch}, H={heads}", slots.len()),
            ));
        }
        let shape = slots[0].q.shape();
        if slots.iter().any(|s| s.q.shape() != shape) {
            return Err(Error::shape(
                "sequence_batch",
                "slots differ in shape".into(),
            ));
        }
        Ok(Self {
            batch,
            heads,
            slots,
        })
    }

    pub fn single(slot: Qkv<T>) -> Self {
        Self {
            batch: 1,
            heads: 1,
            slots: vec![slot],
        }
    }

    /// Q, K, V drawn from the counter-based generator; slot `s` uses stream
    /// index `s` under the query/key/value roles.
    pub fn random(seed: u64, batch: usize, heads: usize, seq_len: usize, dim: usize) -> Self {
        let slots = (0..batch * heads)
            .map(|s| {
                let s = s as u64;
                Qkv {
                    q: gen_data(seed, stream::id(stream::QUERY, s), seq_len, dim),
                    k: gen_data(seed, stream::id(stream::KEY, s), seq_len, dim),
                    v: gen_data(seed, stream::id(stream::VALUE, s), seq_len, dim),
                }
            })
            .collect();
        Self {
            batch,
            heads,
            slots,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.slots[0].seq_len()
    }

    pub fn dim(&self) -> usize {
        self.slots[0].dim()
    }

    /// Upstream gradients from the generator's `GRAD_OUT` role.
    pub fn random_grad_out(&self, seed: u64) -> Vec<Matrix<T>> {
        (0..self.slots.len())
            .map(|s| {
                gen_data(
                    seed,
                    stream::id(stream::GRAD_OUT, s as u64),
                    self.seq_len(),
                    self.dim(),
                )
            })
            .collect()
    }
}

/// Splits a length-`n` sequence into `chunks` equal pieces.
pub fn chunk_len(n: usize, chunks: usize) -> Result<usize> {
    if chunks == 0 || !n.is_multiple_of(chunks) {
        return Err(Error::Config(format!(
            "chunk count {chunks} does not divide sequence length {n}"
        )));
    }
    Ok(n / chunks)
}

/// The per-chunk pieces of `data`, chunk `t` at index `t`.
pub fn split<D: SeqData>(data: &D, chunks: usize) -> Result<Vec<D>> {
    let c = chunk_len(data.seq_len(), chunks)?;
    Ok((0..chunks)
        .map(|t| data.slice_rows(t * c, (t + 1) * c))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_then_stack_reconstructs() {
        let batch = SequenceBatch::<f64>::random(3, 1, 1, 12, 2);
        let parts = split(&batch.slots[0], 4).unwrap();
        assert_eq!(parts.len(), 4);
        assert_eq!(parts[1].seq_len(), 3);
        assert_eq!(Qkv::vstack(&parts).unwrap(), batch.slots[0]);
    }

    #[test]
    fn indivisible_lengths_are_rejected() {
        assert!(chunk_len(10, 4).is_err());
        assert!(chunk_len(10, 0).is_err());
        assert_eq!(chunk_len(12, 4).unwrap(), 3);
    }

    #[test]
    fn qkv_shape_checks() {
        let a = Matrix::<f64>::zeros(4, 2);
        assert!(Qkv::new(a.clone(), a.clone(), Matrix::zeros(4, 3)).is_err());
        assert!(Qkv::new(
            Matrix::<f64>::zeros(0, 2),
            Matrix::zeros(0, 2),
            Matrix::zeros(0, 2)
        )
        .is_err());
        assert!(Qkv::new(a.clone(), a.clone(), a).is_ok());
    }

    #[test]
    fn batch_slot_count_checked() {
        let one = SequenceBatch::<f64>::random(0, 1, 1, 4, 2).slots;
        assert!(SequenceBatch::new(2, 1, one).is_err());
    }
}

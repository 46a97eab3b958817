//! Single-rank reference implementations.
//!
//! Causal linear attention here is computed token by token with the running
//! state `M_s = M_{s−1} + k_sᵀ v_s`, and its gradients with the mirrored
//! suffix recurrence. Nothing in this module is shared with the distributed
//! code paths it is used to check.

use crate::error::{Error, Result};
use crate::numerics::{matmul, transpose, Matrix, Real};
use crate::sequence::Qkv;

pub use crate::sequence::GradientBundle;

/// One attention problem: `Q, K, V ∈ R^{N×d}`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInstance<T = f64> {
    pub qkv: Qkv<T>,
    pub causal: bool,
}

impl<T: Real> AttentionInstance<T> {
    pub fn new(q: Matrix<T>, k: Matrix<T>, v: Matrix<T>, causal: bool) -> Result<Self> {
        Ok(Self {
            qkv: Qkv::new(q, k, v)?,
            causal,
        })
    }

    pub fn from_qkv(qkv: Qkv<T>, causal: bool) -> Self {
        Self { qkv, causal }
    }

    pub fn seq_len(&self) -> usize {
        self.qkv.q.rows()
    }

    pub fn dim(&self) -> usize {
        self.qkv.q.cols()
    }

    fn check_grad_out(&self, d_out: &Matrix<T>) -> Result<()> {
        if d_out.shape() != self.qkv.q.shape() {
            return Err(Error::shape(
                "oracle_backward",
                format!("dO {:?} vs Q {:?}", d_out.shape(), self.qkv.q.shape()),
            ));
        }
        Ok(())
    }
}

/// `M += kᵀ v` for row vectors `k`, `v`.
fn add_outer<T: Real>(state: &mut Matrix<T>, k: &[T], v: &[T]) {
    let d = v.len();
    let data = state.as_mut_slice();
    for (a, &ka) in k.iter().enumerate() {
        for (j, &vj) in v.iter().enumerate() {
            data[a * d + j] += ka * vj;
        }
    }
}

/// Unnormalized linear attention.
///
/// Causal: `o_s = q_s M_s` via the per-token recurrence. Bidirectional:
/// `O = Q (Kᵀ V)` with the full-sequence state.
pub fn linear_attn_serial<T: Real>(inst: &AttentionInstance<T>) -> Result<Matrix<T>> {
    let Qkv { q, k, v } = &inst.qkv;
    if !inst.causal {
        let state = matmul(&transpose(k), v)?;
        return matmul(q, &state);
    }
    let (n, d) = q.shape();
    let mut state = Matrix::zeros(d, d);
    let mut out = Matrix::zeros(n, d);
    for s in 0..n {
        add_outer(&mut state, k.row(s), v.row(s));
        let q_s = q.row(s);
        for j in 0..d {
            let mut acc = T::zero();
            for (a, &qa) in q_s.iter().enumerate() {
                acc += qa * state.get(a, j);
            }
            out.set(s, j, acc);
        }
    }
    Ok(out)
}

/// Analytic gradients of `⟨dO, O⟩` for [`linear_attn_serial`].
pub fn linear_attn_serial_backward<T: Real>(
    inst: &AttentionInstance<T>,
    d_out: &Matrix<T>,
) -> Result<GradientBundle<T>> {
    inst.check_grad_out(d_out)?;
    let Qkv { q, k, v } = &inst.qkv;
    if !inst.causal {
        let state = matmul(&transpose(k), v)?;
        let d_state = matmul(&transpose(q), d_out)?;
        return Ok(GradientBundle {
            dq: matmul(d_out, &transpose(&state))?,
            dk: matmul(v, &transpose(&d_state))?,
            dv: matmul(k, &d_state)?,
        });
    }

    let (n, d) = q.shape();
    let mut grads = GradientBundle::zeros(n, d);

    // dQ_s = dO_s M_sᵀ with the forward prefix state.
    let mut state = Matrix::zeros(d, d);
    for s in 0..n {
        add_outer(&mut state, k.row(s), v.row(s));
        for a in 0..d {
            let mut acc = T::zero();
            for j in 0..d {
                acc += d_out.get(s, j) * state.get(a, j);
            }
            grads.dq.set(s, a, acc);
        }
    }

    // D_s = Σ_{j≥s} q_jᵀ dO_j, built from the last token backwards.
    let mut suffix = Matrix::zeros(d, d);
    for s in (0..n).rev() {
        add_outer(&mut suffix, q.row(s), d_out.row(s));
        for a in 0..d {
            let mut acc = T::zero();
            for j in 0..d {
                acc += v.get(s, j) * suffix.get(a, j);
            }
            grads.dk.set(s, a, acc);
        }
        for j in 0..d {
            let mut acc = T::zero();
            for a in 0..d {
                acc += k.get(s, a) * suffix.get(a, j);
            }
            grads.dv.set(s, j, acc);
        }
    }
    Ok(grads)
}

/// Linear attention in which each of `chunks` equal chunks sees only the
/// tokens of strictly earlier chunks: `o_s = q_s Σ_{r < start(s)} k_rᵀ v_r`.
/// Returns the output and, given `d_out`, the gradients of `⟨dO, O⟩`.
pub fn linear_attn_exclusive_chunks<T: Real>(
    qkv: &Qkv<T>,
    chunks: usize,
    d_out: Option<&Matrix<T>>,
) -> Result<(Matrix<T>, Option<GradientBundle<T>>)> {
    let Qkv { q, k, v } = qkv;
    let (n, d) = q.shape();
    if chunks == 0 || n % chunks != 0 {
        return Err(Error::shape(
            "exclusive_chunks",
            format!("{chunks} chunks do not divide length {n}"),
        ));
    }
    let c = n / chunks;

    let mut out = Matrix::zeros(n, d);
    let mut seen = Matrix::zeros(d, d); // tokens of earlier chunks
    let mut pending = Matrix::zeros(d, d); // tokens of the current chunk
    let mut snapshots = Vec::with_capacity(chunks);
    for s in 0..n {
        if s % c == 0 {
            if s > 0 {
                seen.add_assign(&pending)?;
                pending = Matrix::zeros(d, d);
            }
            snapshots.push(seen.clone());
        }
        let state = &snapshots[s / c];
        for j in 0..d {
            let mut acc = T::zero();
            for a in 0..d {
                acc += q.get(s, a) * state.get(a, j);
            }
            out.set(s, j, acc);
        }
        add_outer(&mut pending, k.row(s), v.row(s));
    }

    let Some(d_out) = d_out else {
        return Ok((out, None));
    };
    if d_out.shape() != (n, d) {
        return Err(Error::shape(
            "exclusive_chunks",
            "dO shape differs from Q".into(),
        ));
    }
    let mut grads = GradientBundle::zeros(n, d);
    for s in 0..n {
        let state = &snapshots[s / c];
        for a in 0..d {
            let mut acc = T::zero();
            for j in 0..d {
                acc += d_out.get(s, j) * state.get(a, j);
            }
            grads.dq.set(s, a, acc);
        }
    }
    // Gradient state of strictly later chunks, built from the end.
    let mut later = Matrix::zeros(d, d);
    let mut current = Matrix::zeros(d, d);
    for s in (0..n).rev() {
        if (s + 1) % c == 0 && s + 1 < n {
            later.add_assign(&current)?;
            current = Matrix::zeros(d, d);
        }
        for a in 0..d {
            let mut acc = T::zero();
            for j in 0..d {
                acc += v.get(s, j) * later.get(a, j);
            }
            grads.dk.set(s, a, acc);
        }
        for j in 0..d {
            let mut acc = T::zero();
            for a in 0..d {
                acc += k.get(s, a) * later.get(a, j);
            }
            grads.dv.set(s, j, acc);
        }
        add_outer(&mut current, q.row(s), d_out.row(s));
    }
    Ok((out, Some(grads)))
}

fn softmax_scale<T: Real>(d: usize) -> T {
    T::one() / <T as Real>::from_f64(d as f64).sqrt()
}

/// Row-wise softmax attention probabilities `P` for `Softmax(QKᵀ/√d)`,
/// with future positions masked out when causal.
fn softmax_probs<T: Real>(inst: &AttentionInstance<T>) -> Result<Matrix<T>> {
    let Qkv { q, k, .. } = &inst.qkv;
    let scale = softmax_scale::<T>(inst.dim());
    let logits = matmul(q, &transpose(k))?.scale(scale);
    let n = inst.seq_len();
    let mut probs = Matrix::zeros(n, n);
    for i in 0..n {
        let visible = if inst.causal { i + 1 } else { n };
        let row = &logits.row(i)[..visible];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for &x in row {
            denom += (x - max).exp();
        }
        for (j, &x) in row.iter().enumerate() {
            probs.set(i, j, (x - max).exp() / denom);
        }
    }
    Ok(probs)
}

/// `O = Softmax(QKᵀ/√d) V`, causal rows restricted to `j ≤ i`.
pub fn softmax_attn_reference<T: Real>(inst: &AttentionInstance<T>) -> Result<Matrix<T>> {
    matmul(&softmax_probs(inst)?, &inst.qkv.v)
}

/// Analytic gradients of `⟨dO, O⟩` for [`softmax_attn_reference`].
pub fn softmax_attn_serial_backward<T: Real>(
    inst: &AttentionInstance<T>,
    d_out: &Matrix<T>,
) -> Result<GradientBundle<T>> {
    inst.check_grad_out(d_out)?;
    let Qkv { q, k, v } = &inst.qkv;
    let probs = softmax_probs(inst)?;
    let d_probs = matmul(d_out, &transpose(v))?;
    let n = inst.seq_len();
    let mut d_logits = Matrix::zeros(n, n);
    for i in 0..n {
        let mut inner = T::zero();
        for j in 0..n {
            inner += probs.get(i, j) * d_probs.get(i, j);
        }
        for j in 0..n {
            d_logits.set(i, j, probs.get(i, j) * (d_probs.get(i, j) - inner));
        }
    }
    let scale = softmax_scale::<T>(inst.dim());
    Ok(GradientBundle {
        dq: matmul(&d_logits, k)?.scale(scale),
        dk: matmul(&transpose(&d_logits), q)?.scale(scale),
        dv: matmul(&transpose(&probs), d_out)?,
    })
}

/// Token-by-token softmax attention over a growing key/value cache.
#[derive(Debug, Clone, Default)]
pub struct SoftmaxDecoder<T = f64> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
}

impl<T: Real> SoftmaxDecoder<T> {
    pub fn new() -> Self {
        Self {
            keys: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn push(&mut self, k: &[T], v: &[T]) {
        self.keys.push(k.to_vec());
        self.values.push(v.to_vec());
    }

    /// `o = Σ_i exp(q k_iᵀ/√d) v_i / Σ_i exp(q k_iᵀ/√d)` over the cache.
    pub fn attend(&self, q: &[T]) -> Result<Matrix<T>> {
        if self.is_empty() {
            return Err(Error::shape(
                "softmax_decode",
                "empty key/value cache".into(),
            ));
        }
        let d = q.len();
        let scale = softmax_scale::<T>(d);
        let mut weights = Vec::with_capacity(self.keys.len());
        let mut denom = T::zero();
        for k in &self.keys {
            let mut logit = T::zero();
            for (&qa, &ka) in q.iter().zip(k) {
                logit += qa * ka;
            }
            let w = (logit * scale).exp();
            denom += w;
            weights.push(w);
        }
        let dv = self.values[0].len();
        let mut out = Matrix::zeros(1, dv);
        for j in 0..dv {
            let mut acc = T::zero();
            for (w, v) in weights.iter().zip(&self.values) {
                acc += *w * v[j];
            }
            out.set(0, j, acc / denom);
        }
        Ok(out)
    }

    /// Appends `(k, v)` and attends with `q`.
    pub fn step(&mut self, q: &[T], k: &[T], v: &[T]) -> Result<Matrix<T>> {
        self.push(k, v);
        self.attend(q)
    }
}

/// `(loss(X + h e_ij) − loss(X − h e_ij)) / 2h` for one entry.
fn central_difference<F>(
    loss: &mut F,
    probe: &mut Matrix<f64>,
    i: usize,
    j: usize,
    h: f64,
) -> Result<f64>
where
    F: FnMut(&Matrix<f64>) -> Result<f64>,
{
    let base = probe.get(i, j);
    probe.set(i, j, base + h);
    let plus = loss(probe)?;
    probe.set(i, j, base - h);
    let minus = loss(probe)?;
    probe.set(i, j, base);
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::NonFinite { row: i, col: j });
    }
    Ok((plus - minus) / (2.0 * h))
}

/// Central finite differences of a scalar loss, entry by entry:
/// `(loss(X + h e_ij) − loss(X − h e_ij)) / 2h`.
pub fn finite_diff_grad<F>(mut loss: F, x: &Matrix<f64>, h: f64) -> Result<Matrix<f64>>
where
    F: FnMut(&Matrix<f64>) -> Result<f64>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            grad.set(i, j, central_difference(&mut loss, &mut probe, i, j, h)?);
        }
    }
    Ok(grad)
}

/// Central finite differences at the listed `(row, col)` entries only.
pub fn finite_diff_entries<F>(
    mut loss: F,
    x: &Matrix<f64>,
    h: f64,
    entries: &[(usize, usize)],
) -> Result<Vec<f64>>
where
    F: FnMut(&Matrix<f64>) -> Result<f64>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    entries
        .iter()
        .map(|&(i, j)| {
            if i >= x.rows() || j >= x.cols() {
                return Err(Error::shape(
                    "finite_diff_entries",
                    format!("entry ({i}, {j}) outside {:?}", x.shape()),
                ));
            }
            central_difference(&mut loss, &mut probe, i, j, h)
        })
        .collect()
}

/// `max |a − f| / max(1, |f|)` over all entries.
pub fn max_relative_error(analytic: &Matrix<f64>, reference: &Matrix<f64>) -> Result<f64> {
    analytic.max_abs_diff(reference)?; // shape check
    Ok(analytic
        .as_slice()
        .iter()
        .zip(reference.as_slice())
        .map(|(a, f)| (a - f).abs() / f.abs().max(1.0))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_data, stream};

    fn random_instance(seed: u64, n: usize, d: usize, causal: bool) -> AttentionInstance {
        AttentionInstance::new(
            gen_data(seed, stream::QUERY, n, d),
            gen_data(seed, stream::KEY, n, d),
            gen_data(seed, stream::VALUE, n, d),
            causal,
        )
        .unwrap()
    }

    fn col(values: &[f64]) -> Matrix {
        Matrix::from_fn(values.len(), 1, |i, _| values[i])
    }

    #[test]
    fn hand_recurrence_d1() {
        let inst =
            AttentionInstance::new(col(&[1.0, 1.0]), col(&[1.0, 2.0]), col(&[1.0, 1.0]), true)
                .unwrap();
        assert_eq!(linear_attn_serial(&inst).unwrap(), col(&[1.0, 3.0]));
    }

    #[test]
    fn zero_values_give_zero_output() {
        let mut inst = random_instance(1, 5, 3, true);
        inst.qkv.v = Matrix::zeros(5, 3);
        assert_eq!(linear_attn_serial(&inst).unwrap(), Matrix::zeros(5, 3));
    }

    #[test]
    fn single_token_causal_equals_bidirectional() {
        let causal = random_instance(2, 1, 4, true);
        let bidir = AttentionInstance {
            causal: false,
            ..causal.clone()
        };
        let a = linear_attn_serial(&causal).unwrap();
        let b = linear_attn_serial(&bidir).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-15);
    }

    #[test]
    fn last_causal_row_uses_full_state() {
        let inst = random_instance(3, 7, 3, true);
        let out = linear_attn_serial(&inst).unwrap();
        let full = matmul(&transpose(&inst.qkv.k), &inst.qkv.v).unwrap();
        let last = matmul(&inst.qkv.q.slice_rows(6, 7), &full).unwrap();
        assert!(out.slice_rows(6, 7).max_abs_diff(&last).unwrap() < 1e-14);
    }

    #[test]
    fn left_and_right_products_agree() {
        let inst = random_instance(4, 64, 8, false);
        let Qkv { q, k, v } = &inst.qkv;
        let left = matmul(&matmul(q, &transpose(k)).unwrap(), v).unwrap();
        let right = linear_attn_serial(&inst).unwrap();
        assert!(left.max_abs_diff(&right).unwrap() <= 1e-10);
    }

    #[test]
    fn backward_with_zero_upstream_is_zero() {
        for causal in [true, false] {
            let inst = random_instance(5, 4, 2, causal);
            let g = linear_attn_serial_backward(&inst, &Matrix::zeros(4, 2)).unwrap();
            assert_eq!(g, GradientBundle::zeros(4, 2));
        }
    }

    #[test]
    fn single_token_dv_closed_form() {
        let inst = random_instance(6, 1, 3, true);
        let d_out: Matrix = gen_data(6, stream::GRAD_OUT, 1, 3);
        let g = linear_attn_serial_backward(&inst, &d_out).unwrap();
        let qk = inst.qkv.q.dot(&inst.qkv.k).unwrap();
        assert!(g.dv.max_abs_diff(&d_out.scale(qk)).unwrap() < 1e-15);
    }

    fn linear_loss(qkv: &Qkv, causal: bool, d_out: &Matrix) -> Result<f64> {
        let out = linear_attn_serial(&AttentionInstance::from_qkv(qkv.clone(), causal))?;
        d_out.dot(&out)
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        for causal in [true, false] {
            let inst = random_instance(7, 6, 3, causal);
            let d_out: Matrix = gen_data(7, stream::GRAD_OUT, 6, 3);
            let g = linear_attn_serial_backward(&inst, &d_out).unwrap();
            let fd_q = finite_diff_grad(
                |x| {
                    linear_loss(
                        &Qkv {
                            q: x.clone(),
                            ..inst.qkv.clone()
                        },
                        causal,
                        &d_out,
                    )
                },
                &inst.qkv.q,
                1e-6,
            )
            .unwrap();
            let fd_k = finite_diff_grad(
                |x| {
                    linear_loss(
                        &Qkv {
                            k: x.clone(),
                            ..inst.qkv.clone()
                        },
                        causal,
                        &d_out,
                    )
                },
                &inst.qkv.k,
                1e-6,
            )
            .unwrap();
            let fd_v = finite_diff_grad(
                |x| {
                    linear_loss(
                        &Qkv {
                            v: x.clone(),
                            ..inst.qkv.clone()
                        },
                        causal,
                        &d_out,
                    )
                },
                &inst.qkv.v,
                1e-6,
            )
            .unwrap();
            assert!(max_relative_error(&g.dq, &fd_q).unwrap() < 1e-6);
            assert!(max_relative_error(&g.dk, &fd_k).unwrap() < 1e-6);
            assert!(max_relative_error(&g.dv, &fd_v).unwrap() < 1e-6);
        }
    }

    #[test]
    fn softmax_single_token_returns_value() {
        let inst = random_instance(8, 1, 4, true);
        let out = softmax_attn_reference(&inst).unwrap();
        assert!(out.max_abs_diff(&inst.qkv.v).unwrap() < 1e-15);
    }

    #[test]
    fn softmax_zero_keys_average_prefix() {
        let mut inst = random_instance(9, 5, 3, true);
        inst.qkv.k = Matrix::zeros(5, 3);
        let out = softmax_attn_reference(&inst).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mean = (0..=i).map(|r| inst.qkv.v.get(r, j)).sum::<f64>() / (i + 1) as f64;
                assert!((out.get(i, j) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn decode_matches_batch_causal_softmax() {
        let inst = random_instance(10, 5, 4, true);
        let batch = softmax_attn_reference(&inst).unwrap();
        let mut dec = SoftmaxDecoder::new();
        for s in 0..5 {
            let o = dec
                .step(inst.qkv.q.row(s), inst.qkv.k.row(s), inst.qkv.v.row(s))
                .unwrap();
            assert!(o.max_abs_diff(&batch.slice_rows(s, s + 1)).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn decode_first_step_and_equal_logits() {
        let mut dec = SoftmaxDecoder::<f64>::new();
        assert!(dec.attend(&[1.0, 0.0]).is_err());
        let o = dec.step(&[0.3, 0.1], &[0.5, 0.5], &[2.0, -1.0]).unwrap();
        assert!(o.max_abs_diff(&Matrix::from_rows(&[&[2.0, -1.0]])).unwrap() < 1e-15);
        // zero query: every logit is equal
        dec.push(&[1.0, 2.0], &[4.0, 1.0]);
        let o = dec.attend(&[0.0, 0.0]).unwrap();
        assert!(o.max_abs_diff(&Matrix::from_rows(&[&[3.0, 0.0]])).unwrap() < 1e-15);
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        for causal in [true, false] {
            let inst = random_instance(11, 5, 3, causal);
            let d_out: Matrix = gen_data(11, stream::GRAD_OUT, 5, 3);
            let g = softmax_attn_serial_backward(&inst, &d_out).unwrap();
            let loss = |qkv: Qkv| -> Result<f64> {
                d_out.dot(&softmax_attn_reference(&AttentionInstance::from_qkv(
                    qkv, causal,
                ))?)
            };
            let fd_q = finite_diff_grad(
                |x| {
                    loss(Qkv {
                        q: x.clone(),
                        ..inst.qkv.clone()
                    })
                },
                &inst.qkv.q,
                1e-6,
            )
            .unwrap();
            let fd_k = finite_diff_grad(
                |x| {
                    loss(Qkv {
                        k: x.clone(),
                        ..inst.qkv.clone()
                    })
                },
                &inst.qkv.k,
                1e-6,
            )
            .unwrap();
            let fd_v = finite_diff_grad(
                |x| {
                    loss(Qkv {
                        v: x.clone(),
                        ..inst.qkv.clone()
                    })
                },
                &inst.qkv.v,
                1e-6,
            )
            .unwrap();
            assert!(max_relative_error(&g.dq, &fd_q).unwrap() < 1e-6);
            assert!(max_relative_error(&g.dk, &fd_k).unwrap() < 1e-6);
            assert!(max_relative_error(&g.dv, &fd_v).unwrap() < 1e-6);
        }
    }

    #[test]
    fn finite_diff_of_linear_and_quadratic_functions() {
        let x: Matrix = gen_data(12, stream::MATRIX, 3, 4);
        let c: Matrix = gen_data(13, stream::MATRIX, 3, 4);
        // Central differences are exact for polynomials of degree ≤ 2, so
        // only rounding remains; a wider step keeps it below 1e-12.
        let g = finite_diff_grad(|m| c.dot(m), &x, 1e-3).unwrap();
        assert!(g.max_abs_diff(&c).unwrap() <= 1e-12);
        let g = finite_diff_grad(|m| Ok(0.5 * m.dot(m)?), &x, 1e-3).unwrap();
        assert!(g.max_abs_diff(&x).unwrap() <= 1e-12);
    }

    #[test]
    fn finite_diff_rejects_non_finite_loss() {
        let x = Matrix::<f64>::zeros(1, 1);
        let err = finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-6).unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 0, col: 0 }));
    }

    #[test]
    fn mismatched_grad_out_is_rejected() {
        let inst = random_instance(14, 4, 2, true);
        assert!(linear_attn_serial_backward(&inst, &Matrix::zeros(3, 2)).is_err());
        assert!(softmax_attn_serial_backward(&inst, &Matrix::zeros(4, 3)).is_err());
    }

    #[test]
    fn finite_diff_entries_match_full_grid() {
        let x: Matrix = gen_data(4, stream::MATRIX, 3, 3);
        let loss = |m: &Matrix| Ok(m.as_slice().iter().map(|v| v * v * v).sum::<f64>());
        let full = finite_diff_grad(loss, &x, 1e-6).unwrap();
        let some = finite_diff_entries(loss, &x, 1e-6, &[(0, 0), (2, 1)]).unwrap();
        assert_eq!(some, vec![full.get(0, 0), full.get(2, 1)]);
        assert!(finite_diff_entries(loss, &x, 1e-6, &[(3, 0)]).is_err());
    }

    #[test]
    fn exclusive_chunks_with_one_chunk_is_zero() {
        let inst = random_instance(6, 6, 2, true);
        let g: Matrix = gen_data(6, stream::GRAD_OUT, 6, 2);
        let (o, grads) = linear_attn_exclusive_chunks(&inst.qkv, 1, Some(&g)).unwrap();
        assert_eq!(o.max_abs(), 0.0);
        assert_eq!(grads.unwrap().max_abs(), 0.0);
    }

    #[test]
    fn exclusive_chunks_with_one_token_per_chunk_is_strictly_causal() {
        // o_s = q_s Σ_{r<s} k_rᵀ v_r = causal output minus the diagonal term.
        let inst = random_instance(7, 5, 3, true);
        let (o, _) = linear_attn_exclusive_chunks(&inst.qkv, 5, None).unwrap();
        let causal = linear_attn_serial(&inst).unwrap();
        let Qkv { q, k, v } = &inst.qkv;
        for s in 0..5 {
            let qk: f64 = (0..3).map(|a| q.get(s, a) * k.get(s, a)).sum();
            for j in 0..3 {
                let expected = causal.get(s, j) - qk * v.get(s, j);
                assert!((o.get(s, j) - expected).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn exclusive_chunks_backward_matches_finite_differences() {
        let inst = random_instance(8, 8, 3, true);
        let g: Matrix = gen_data(8, stream::GRAD_OUT, 8, 3);
        let (_, grads) = linear_attn_exclusive_chunks(&inst.qkv, 4, Some(&g)).unwrap();
        let grads = grads.unwrap();
        let loss = |which: usize| {
            let inst = inst.clone();
            let g = g.clone();
            move |x: &Matrix| {
                let mut qkv = inst.qkv.clone();
                match which {
                    0 => qkv.q = x.clone(),
                    1 => qkv.k = x.clone(),
                    _ => qkv.v = x.clone(),
                }
                linear_attn_exclusive_chunks(&qkv, 4, None)?.0.dot(&g)
            }
        };
        for (which, x, analytic) in [
            (0, &inst.qkv.q, &grads.dq),
            (1, &inst.qkv.k, &grads.dk),
            (2, &inst.qkv.v, &grads.dv),
        ] {
            let fd = finite_diff_grad(loss(which), x, 1e-6).unwrap();
            assert!(max_relative_error(analytic, &fd).unwrap() < 1e-6);
        }
    }
}

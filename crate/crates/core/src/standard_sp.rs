//! Sequence parallelism for softmax attention by gathering keys and values.
//!
//! Rank `t` all-gathers every chunk's `K` and `V` (two launches), then runs
//! ordinary softmax attention for its own query rows against the whole
//! sequence, offsetting the causal mask by `t·C`. The backward pass computes
//! each rank's contribution to every row of `dK` and `dV`, exchanges the
//! contributions in one all-gather, and keeps the sum for its own rows.
//!
//! Traffic grows with sequence length: each launch carries `C·d` values per
//! slot per rank.

use crate::comm::{RankCtx, WorldConfig};
use crate::driver::{run_sp, RankOutput, RankShard, SpRun};
use crate::error::{Error, Result};
use crate::lasp2::check_chunk;
use crate::numerics::{matmul, sum_states, transpose, Matrix, Real};
use crate::sequence::{GradientBundle, Qkv, SequenceBatch};

pub const KEYS_TAG: &str = "cp.forward.keys";
pub const VALUES_TAG: &str = "cp.forward.values";
pub const GRADS_TAG: &str = "cp.backward.kv_grads";

fn scale<T: Real>(d: usize) -> T {
    T::one() / <T as Real>::from_f64(d as f64).sqrt()
}

/// Probabilities of query rows `offset .. offset + C` against all `N` keys.
fn probs<T: Real>(
    q: &Matrix<T>,
    keys: &Matrix<T>,
    offset: usize,
    causal: bool,
) -> Result<Matrix<T>> {
    let logits = matmul(q, &transpose(keys))?.scale(scale::<T>(q.cols()));
    let (c, n) = logits.shape();
    let mut p = Matrix::zeros(c, n);
    for i in 0..c {
        let visible = if causal { offset + i + 1 } else { n };
        let row = &logits.row(i)[..visible];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for &x in row {
            denom += (x - max).exp();
        }
        for (j, &x) in row.iter().enumerate() {
            p.set(i, j, (x - max).exp() / denom);
        }
    }
    Ok(p)
}

/// Full-sequence keys and values gathered in the forward pass, one pair
/// per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct GatheredKv<T = f64> {
    pub keys: Vec<Matrix<T>>,
    pub values: Vec<Matrix<T>>,
    causal: bool,
}

fn stack_column<T: Real>(gathered: &[Vec<Matrix<T>>], slot: usize) -> Result<Matrix<T>> {
    let parts: Vec<Matrix<T>> = gathered.iter().map(|c| c[slot].clone()).collect();
    Matrix::vstack(&parts)
}

pub fn forward<T: Real>(
    ctx: &mut RankCtx<'_, T>,
    chunk: &[Qkv<T>],
    causal: bool,
) -> Result<(Vec<Matrix<T>>, GatheredKv<T>)> {
    check_chunk(chunk, None)?;
    let k_all = ctx.all_gather(KEYS_TAG, chunk.iter().map(|s| s.k.clone()).collect())?;
    let v_all = ctx.all_gather(VALUES_TAG, chunk.iter().map(|s| s.v.clone()).collect())?;
    let offset = ctx.sp_position() * chunk[0].q.rows();

    let mut kv = GatheredKv {
        keys: Vec::with_capacity(chunk.len()),
        values: Vec::with_capacity(chunk.len()),
        causal,
    };
    let mut outputs = Vec::with_capacity(chunk.len());
    for (slot, s) in chunk.iter().enumerate() {
        let keys = stack_column(&k_all, slot)?;
        let values = stack_column(&v_all, slot)?;
        let p = probs(&s.q, &keys, offset, causal)?;
        outputs.push(matmul(&p, &values)?);
        kv.keys.push(keys);
        kv.values.push(values);
    }
    Ok((outputs, kv))
}

pub fn backward<T: Real>(
    ctx: &mut RankCtx<'_, T>,
    chunk: &[Qkv<T>],
    d_out: &[Matrix<T>],
    kv: &GatheredKv<T>,
) -> Result<Vec<GradientBundle<T>>> {
    check_chunk(chunk, Some(d_out))?;
    if kv.keys.len() != chunk.len() {
        return Err(Error::MissingCache(
            "gathered keys and values do not match the chunk",
        ));
    }
    let c = chunk[0].q.rows();
    let pos = ctx.sp_position();
    let offset = pos * c;
    let sc = scale::<T>(chunk[0].dim());

    let mut d_queries = Vec::with_capacity(chunk.len());
    let mut dk_parts = Vec::with_capacity(chunk.len());
    let mut dv_parts = Vec::with_capacity(chunk.len());
    for (slot, (s, g)) in chunk.iter().zip(d_out).enumerate() {
        let (keys, values) = (&kv.keys[slot], &kv.values[slot]);
        let p = probs(&s.q, keys, offset, kv.causal)?;
        let d_p = matmul(g, &transpose(values))?;
        let n = keys.rows();
        let mut d_logits = Matrix::zeros(c, n);
        for i in 0..c {
            let mut inner = T::zero();
            for j in 0..n {
                inner += p.get(i, j) * d_p.get(i, j);
            }
            for j in 0..n {
                d_logits.set(i, j, p.get(i, j) * (d_p.get(i, j) - inner));
            }
        }
        d_queries.push(matmul(&d_logits, keys)?.scale(sc));
        dk_parts.push(matmul(&transpose(&d_logits), &s.q)?.scale(sc));
        dv_parts.push(matmul(&transpose(&p), g)?);
    }

    let slots = chunk.len();
    let mut payload = dk_parts;
    payload.extend(dv_parts);
    let gathered = ctx.all_gather(GRADS_TAG, payload)?;

    let own = |idx: usize| -> Result<Matrix<T>> {
        let parts: Vec<Matrix<T>> = gathered.iter().map(|c| c[idx].clone()).collect();
        Ok(sum_states(&parts)?.slice_rows(offset, offset + c))
    };
    d_queries
        .into_iter()
        .enumerate()
        .map(|(slot, dq)| {
            Ok(GradientBundle {
                dq,
                dk: own(slot)?,
                dv: own(slots + slot)?,
            })
        })
        .collect()
}

/// One iteration of gathered-KV softmax attention over a world.
pub fn run<T: Real>(
    cfg: &WorldConfig,
    batch: &SequenceBatch<T>,
    d_out: Option<&[Matrix<T>]>,
    causal: bool,
) -> Result<SpRun<T, GradientBundle<T>, ()>> {
    run_sp(
        cfg,
        batch.batch,
        &batch.slots,
        d_out,
        |ctx, shard: RankShard<Qkv<T>, T>| {
            let (outputs, kv) = forward(ctx, &shard.inputs, causal)?;
            let grads = match &shard.d_out {
                Some(g) => Some(backward(ctx, &shard.inputs, g, &kv)?),
                None => None,
            };
            Ok(RankOutput {
                outputs,
                grads,
                extra: (),
            })
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{softmax_attn_reference, softmax_attn_serial_backward, AttentionInstance};

    #[test]
    fn matches_reference_for_every_split() {
        let batch = SequenceBatch::<f64>::random(1, 1, 2, 8, 4);
        let d_out = batch.random_grad_out(1);
        for causal in [true, false] {
            for t in [1, 2, 4] {
                let r = run(
                    &WorldConfig::pure_sp(t).unwrap(),
                    &batch,
                    Some(&d_out),
                    causal,
                )
                .unwrap();
                let grads = r.grads.unwrap();
                for (slot, qkv) in batch.slots.iter().enumerate() {
                    let inst = AttentionInstance::from_qkv(qkv.clone(), causal);
                    let o = softmax_attn_reference(&inst).unwrap();
                    assert!(r.outputs[slot].max_abs_diff(&o).unwrap() < 1e-12);
                    let g = softmax_attn_serial_backward(&inst, &d_out[slot]).unwrap();
                    assert!(grads[slot].max_abs_diff(&g).unwrap() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn three_launches_per_iteration() {
        let batch = SequenceBatch::<f64>::random(2, 2, 1, 8, 2);
        let d_out = batch.random_grad_out(2);
        let r = run(
            &WorldConfig::pure_sp(4).unwrap(),
            &batch,
            Some(&d_out),
            true,
        )
        .unwrap();
        assert_eq!(r.comm.totals.allgather_launches, 3);
        let r = run(&WorldConfig::pure_sp(4).unwrap(), &batch, None, true).unwrap();
        assert_eq!(r.comm.totals.allgather_launches, 2);
    }

    #[test]
    fn first_rows_see_only_the_first_key_when_causal() {
        let batch = SequenceBatch::<f64>::random(3, 1, 1, 4, 2);
        let r = run(&WorldConfig::pure_sp(2).unwrap(), &batch, None, true).unwrap();
        let v = &batch.slots[0].v;
        assert!((r.outputs[0].get(0, 0) - v.get(0, 0)).abs() < 1e-15);
    }
}

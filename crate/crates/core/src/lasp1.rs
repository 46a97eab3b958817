//! LASP-1 baseline: the memory state travels around a ring.
//!
//! Forward, rank `t` waits for the running prefix `M_{1:t−1}` from rank
//! `t−1`, uses it, and forwards `M_{1:t}` to rank `t+1`. Backward runs the
//! ring the other way with the running suffix of state gradients. Each
//! direction costs `T−1` point-to-point steps and the work is serialized
//! along the ring.
//!
//! With the mask, the output matches LASP-2 bit for bit. Without the mask,
//! the ring delivers only the exclusive prefix, so `O_t = Q_t M_{1:t−1}`;
//! that is what this baseline computes, and it differs from bidirectional
//! attention.

use crate::comm::{RankCtx, TraceKind, WorldConfig};
use crate::driver::{run_sp, RankOutput, RankShard, SpRun};
use crate::error::{Error, Result};
use crate::lasp2::{add_inter_grads, check_chunk, chunk_state, intra_grads, intra_output};
use crate::numerics::{matmul, transpose, Matrix, Real};
use crate::sequence::{GradientBundle, Qkv, SequenceBatch};

pub const FORWARD_TAG: &str = "lasp1.forward";
pub const BACKWARD_TAG: &str = "lasp1.backward";

/// Trace label of the computation that consumes the received state.
pub const INTER_LABEL: &str = "inter";

/// Prefix states received during the forward ring, one per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct RingCache<T = f64> {
    masked: bool,
    prefix: Vec<Matrix<T>>,
}

impl<T: Real> RingCache<T> {
    pub fn is_masked(&self) -> bool {
        self.masked
    }

    pub fn prefix(&self, slot: usize) -> &Matrix<T> {
        &self.prefix[slot]
    }
}

/// `prev + local`, or a copy of `local` on the first rank, for each slot.
fn extend<T: Real>(prev: Option<&[Matrix<T>]>, local: &[Matrix<T>]) -> Result<Vec<Matrix<T>>> {
    match prev {
        None => Ok(local.to_vec()),
        Some(prev) => prev.iter().zip(local).map(|(p, l)| p.add(l)).collect(),
    }
}

fn zeros_like<T: Real>(chunk: &[Qkv<T>]) -> Vec<Matrix<T>> {
    let d = chunk[0].dim();
    vec![Matrix::zeros(d, d); chunk.len()]
}

fn check_payload<T: Real>(payload: &[Matrix<T>], slots: usize, d: usize) -> Result<()> {
    if payload.len() != slots || payload.iter().any(|m| m.shape() != (d, d)) {
        return Err(Error::shape(
            "lasp1",
            format!(
                "ring payload of {} states does not fit {slots} slots",
                payload.len()
            ),
        ));
    }
    Ok(())
}

pub fn forward<T: Real>(
    ctx: &mut RankCtx<'_, T>,
    chunk: &[Qkv<T>],
    masked: bool,
) -> Result<(Vec<Matrix<T>>, RingCache<T>)> {
    check_chunk(chunk, None)?;
    let pos = ctx.sp_position();
    let last = ctx.sp_size() - 1;
    let local = chunk
        .iter()
        .map(|s| chunk_state(&s.k, &s.v))
        .collect::<Result<Vec<_>>>()?;

    let received = if pos > 0 {
        let p = ctx.recv(ctx.sp_peer(pos - 1), FORWARD_TAG)?;
        check_payload(&p, chunk.len(), chunk[0].dim())?;
        Some(p)
    } else {
        None
    };

    let tracer = ctx.tracer();
    tracer.record(TraceKind::ComputeStart, INTER_LABEL);
    let prefix = received.clone().unwrap_or_else(|| zeros_like(chunk));
    let mut outputs = Vec::with_capacity(chunk.len());
    for (s, m) in chunk.iter().zip(&prefix) {
        let inter = matmul(&s.q, m)?;
        outputs.push(if masked {
            intra_output(s)?.add(&inter)?
        } else {
            inter
        });
    }
    tracer.record(TraceKind::ComputeEnd, INTER_LABEL);

    if pos < last {
        let next = extend(received.as_deref(), &local)?;
        ctx.send(ctx.sp_peer(pos + 1), FORWARD_TAG, next)?;
    }
    Ok((outputs, RingCache { masked, prefix }))
}

pub fn backward<T: Real>(
    ctx: &mut RankCtx<'_, T>,
    chunk: &[Qkv<T>],
    d_out: &[Matrix<T>],
    cache: &RingCache<T>,
) -> Result<Vec<GradientBundle<T>>> {
    check_chunk(chunk, Some(d_out))?;
    if cache.prefix.len() != chunk.len() {
        return Err(Error::MissingCache(
            "ring cache slot count differs from the chunk",
        ));
    }
    let pos = ctx.sp_position();
    let last = ctx.sp_size() - 1;
    let local = chunk
        .iter()
        .zip(d_out)
        .map(|(s, g)| matmul(&transpose(&s.q), g))
        .collect::<Result<Vec<_>>>()?;

    let received = if pos < last {
        let p = ctx.recv(ctx.sp_peer(pos + 1), BACKWARD_TAG)?;
        check_payload(&p, chunk.len(), chunk[0].dim())?;
        Some(p)
    } else {
        None
    };
    if pos > 0 {
        let next = extend(received.as_deref(), &local)?;
        ctx.send(ctx.sp_peer(pos - 1), BACKWARD_TAG, next)?;
    }

    let suffix = received.unwrap_or_else(|| zeros_like(chunk));
    let d = chunk[0].dim();
    let n = chunk[0].q.rows();
    chunk
        .iter()
        .zip(d_out)
        .enumerate()
        .map(|(slot, (s, g))| {
            let mut grads = if cache.masked {
                intra_grads(s, g)?
            } else {
                GradientBundle::zeros(n, d)
            };
            add_inter_grads(&mut grads, s, g, &cache.prefix[slot], &suffix[slot])?;
            Ok(grads)
        })
        .collect()
}

/// One LASP-1 iteration over a world: forward, plus backward when `d_out`
/// is given.
pub fn run<T: Real>(
    cfg: &WorldConfig,
    batch: &SequenceBatch<T>,
    d_out: Option<&[Matrix<T>]>,
    masked: bool,
) -> Result<SpRun<T, GradientBundle<T>, ()>> {
    run_sp(
        cfg,
        batch.batch,
        &batch.slots,
        d_out,
        |ctx, shard: RankShard<Qkv<T>, T>| {
            let (outputs, cache) = forward(ctx, &shard.inputs, masked)?;
            let grads = match &shard.d_out {
                Some(g) => Some(backward(ctx, &shard.inputs, g, &cache)?),
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

//! Runs a per-rank program over a DP×SP world and stitches results back
//! into full-sequence, full-batch form.
//!
//! SP group `g` handles batch elements `[g·B/D, (g+1)·B/D)`; within a group
//! the rank at position `t` owns chunk `t` of each of those slots.

use crate::comm::{spawn, CommReport, RankCtx, WorldConfig};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};
use crate::sequence::{split, SeqData};

/// What one rank receives.
#[derive(Debug, Clone)]
pub struct RankShard<I, T> {
    pub inputs: Vec<I>,
    pub d_out: Option<Vec<Matrix<T>>>,
}

/// What one rank returns: per-slot chunk outputs, optional per-slot chunk
/// gradients, and anything else the caller wants back.
#[derive(Debug, Clone)]
pub struct RankOutput<T, G, X> {
    pub outputs: Vec<Matrix<T>>,
    pub grads: Option<Vec<G>>,
    pub extra: X,
}

#[derive(Debug)]
pub struct SpRun<T, G, X> {
    /// Full-length outputs, one per slot.
    pub outputs: Vec<Matrix<T>>,
    /// Full-length gradients, one per slot, when a backward pass ran.
    pub grads: Option<Vec<G>>,
    /// Per-rank extras in rank order.
    pub extras: Vec<X>,
    pub comm: CommReport,
}

pub fn run_sp<T, I, G, X, F>(
    cfg: &WorldConfig,
    batch: usize,
    inputs: &[I],
    d_out: Option<&[Matrix<T>]>,
    program: F,
) -> Result<SpRun<T, G, X>>
where
    T: Real,
    I: SeqData,
    G: SeqData,
    X: Send,
    F: Fn(&mut RankCtx<'_, T>, RankShard<I, T>) -> Result<RankOutput<T, G, X>> + Sync,
{
    let dp = cfg.dp_size();
    let sp = cfg.sp_size();
    if batch == 0 || !batch.is_multiple_of(dp) || !inputs.len().is_multiple_of(batch) {
        return Err(Error::Config(format!(
            "batch {batch} with {} slots cannot be split over {dp} data-parallel groups",
            inputs.len()
        )));
    }
    if let Some(g) = d_out {
        if g.len() != inputs.len() {
            return Err(Error::shape(
                "run_sp",
                format!("{} upstream gradients for {} slots", g.len(), inputs.len()),
            ));
        }
    }
    let per_group = inputs.len() / dp;

    // shards[rank] built up front so rank threads only borrow immutable data.
    let mut shards: Vec<RankShard<I, T>> = (0..cfg.world_size())
        .map(|_| RankShard {
            inputs: Vec::with_capacity(per_group),
            d_out: d_out.map(|_| Vec::with_capacity(per_group)),
        })
        .collect();
    for (slot, input) in inputs.iter().enumerate() {
        let group = slot / per_group;
        for (pos, piece) in split(input, sp)?.into_iter().enumerate() {
            shards[group * sp + pos].inputs.push(piece);
        }
        if let Some(g) = d_out {
            for (pos, piece) in split(&g[slot], sp)?.into_iter().enumerate() {
                if let Some(d) = shards[group * sp + pos].d_out.as_mut() {
                    d.push(piece);
                }
            }
        }
    }

    let run = spawn(cfg, |ctx| program(ctx, shards[ctx.rank()].clone()))?;

    let mut outputs = Vec::with_capacity(inputs.len());
    let mut grads: Option<Vec<G>> = run.results[0].grads.as_ref().map(|_| Vec::new());
    for group in 0..dp {
        let members = &run.results[group * sp..(group + 1) * sp];
        for local in 0..per_group {
            let parts: Vec<Matrix<T>> = members.iter().map(|m| m.outputs[local].clone()).collect();
            outputs.push(Matrix::vstack(&parts)?);
            if let Some(all) = grads.as_mut() {
                let parts = members
                    .iter()
                    .map(|m| {
                        m.grads
                            .as_ref()
                            .map(|g| g[local].clone())
                            .ok_or(Error::MissingCache("rank returned no gradients"))
                    })
                    .collect::<Result<Vec<G>>>()?;
                all.push(G::vstack(&parts)?);
            }
        }
    }
    Ok(SpRun {
        outputs,
        grads,
        extras: run.results.into_iter().map(|r| r.extra).collect(),
        comm: run.comm,
    })
}

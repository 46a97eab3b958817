//! LASP-2: sequence parallelism for linear attention with a single
//! all-gather of `d×d` memory states per pass.
//!
//! Every rank owns one chunk `t` of the sequence and computes its local state
//! `M_t = K_tᵀ V_t`. One all-gather hands every rank all `T` states, after
//! which each rank finishes independently:
//!
//! * unmasked: `O_t = Q_t M_{1:T}` with `M_{1:T} = Σ_t M_t`;
//! * masked: `O_t = [(Q_t K_tᵀ) ⊙ Ψ] V_t + Q_t M_{1:t−1}`, the intra-chunk
//!   left product plus the inter-chunk contribution of all earlier chunks.
//!
//! The backward pass is symmetric: one all-gather of `dM_t = Q_tᵀ dO_t`, then
//! a full sum (unmasked) or a suffix sum `dM_{t+1:T}` (masked). The states
//! the forward reduced are cached so the backward never reduces them again.
//!
//! All `B·H` slots of a rank travel in the same launch, so a launch carries
//! `B·H·d²` elements per rank regardless of sequence length.

use crate::comm::{CommReport, RankCtx, TraceKind, WorldConfig};
use crate::driver::{run_sp, RankOutput, RankShard, SpRun};
use crate::error::{Error, Result};
use crate::numerics::{
    hadamard_mask, matmul, prefix_sum_states, reduction_counts, suffix_sum_states, sum_states,
    transpose, CausalMask, Matrix, Real, ReductionCounts,
};
use crate::sequence::{GradientBundle, Qkv, SequenceBatch};

pub const FORWARD_TAG: &str = "lasp2.forward.states";
pub const BACKWARD_TAG: &str = "lasp2.backward.state_grads";

/// Trace label of the intra-chunk computation.
pub const INTRA_LABEL: &str = "intra";

/// How the all-gather and the intra-chunk work of the masked path are
/// scheduled on a rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Schedule {
    /// All-gather, then intra-chunk compute.
    #[default]
    Sequential,
    /// Post the all-gather, run the intra-chunk compute on a helper thread
    /// while the collective completes, and join both before the inter-chunk
    /// step.
    Overlapped,
}

/// `M_t = K_tᵀ V_t`.
pub(crate) fn chunk_state<T: Real>(k: &Matrix<T>, v: &Matrix<T>) -> Result<Matrix<T>> {
    matmul(&transpose(k), v)
}

/// `[(Q Kᵀ) ⊙ Ψ] V`.
pub(crate) fn intra_output<T: Real>(qkv: &Qkv<T>) -> Result<Matrix<T>> {
    let mask = CausalMask::new(qkv.q.rows());
    let scores = hadamard_mask(&matmul(&qkv.q, &transpose(&qkv.k))?, &mask)?;
    matmul(&scores, &qkv.v)
}

/// Intra-chunk gradients of the masked left product.
pub(crate) fn intra_grads<T: Real>(qkv: &Qkv<T>, d_out: &Matrix<T>) -> Result<GradientBundle<T>> {
    let mask = CausalMask::new(qkv.q.rows());
    let d_scores = hadamard_mask(&matmul(d_out, &transpose(&qkv.v))?, &mask)?;
    let scores = hadamard_mask(&matmul(&qkv.q, &transpose(&qkv.k))?, &mask)?;
    Ok(GradientBundle {
        dq: matmul(&d_scores, &qkv.k)?,
        dk: matmul(&transpose(&d_scores), &qkv.q)?,
        dv: matmul(&transpose(&scores), d_out)?,
    })
}

/// Gradient contributions that flow through the inter-chunk states:
/// `dQ += dO M_prefixᵀ`, `dK += V dM_suffixᵀ`, `dV += K dM_suffix`.
pub(crate) fn add_inter_grads<T: Real>(
    grads: &mut GradientBundle<T>,
    qkv: &Qkv<T>,
    d_out: &Matrix<T>,
    prefix: &Matrix<T>,
    d_suffix: &Matrix<T>,
) -> Result<()> {
    grads.dq.add_assign(&matmul(d_out, &transpose(prefix))?)?;
    grads
        .dk
        .add_assign(&matmul(&qkv.v, &transpose(d_suffix))?)?;
    grads.dv.add_assign(&matmul(&qkv.k, d_suffix)?)?;
    Ok(())
}

pub(crate) fn check_chunk<T: Real>(chunk: &[Qkv<T>], d_out: Option<&[Matrix<T>]>) -> Result<()> {
    let Some(first) = chunk.first() else {
        return Err(Error::shape("lasp", "rank holds no slots".into()));
    };
    let shape = first.q.shape();
    for s in chunk {
        if s.q.shape() != shape || s.k.shape() != shape || s.v.shape() != shape {
            return Err(Error::shape(
                "lasp",
                format!("slot shapes differ from {shape:?}"),
            ));
        }
    }
    if let Some(d) = d_out {
        if d.len() != chunk.len() || d.iter().any(|m| m.shape() != shape) {
            return Err(Error::shape(
                "lasp",
                "upstream gradients do not match the chunk".into(),
            ));
        }
    }
    Ok(())
}

/// Column `slot` of a gathered payload: that slot's state from every SP
/// position, in position order.
fn states_of<T: Real>(gathered: &[Vec<Matrix<T>>], slot: usize) -> Vec<Matrix<T>> {
    gathered.iter().map(|c| c[slot].clone()).collect()
}

/// Runs the all-gather of `states` and the closure `intra` under `schedule`.
fn gather_alongside<T, R, F>(
    ctx: &mut RankCtx<'_, T>,
    tag: &'static str,
    states: Vec<Matrix<T>>,
    schedule: Schedule,
    intra: F,
) -> Result<(Vec<Vec<Matrix<T>>>, R)>
where
    T: Real,
    R: Send,
    F: FnOnce() -> Result<R> + Send,
{
    let tracer = ctx.tracer();
    match schedule {
        Schedule::Sequential => {
            let gathered = ctx.all_gather(tag, states)?;
            let r = tracer.compute(INTRA_LABEL, intra)?;
            Ok((gathered, r))
        }
        Schedule::Overlapped => {
            let pending = ctx.all_gather_start(tag, states)?;
            std::thread::scope(|scope| {
                let worker = scope.spawn(move || tracer.compute(INTRA_LABEL, intra));
                let gathered = ctx.all_gather_wait(pending);
                let r = worker
                    .join()
                    .unwrap_or_else(|p| std::panic::resume_unwind(p));
                Ok((gathered?, r?))
            })
        }
    }
}

/// Reduced states kept from the forward pass, one per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCache<T = f64> {
    kind: CacheKind<T>,
}

#[derive(Debug, Clone, PartialEq)]
enum CacheKind<T> {
    /// `M_{1:T}` (unmasked).
    Full(Vec<Matrix<T>>),
    /// `M_{1:t−1}` for this rank's chunk `t` (masked).
    Prefix(Vec<Matrix<T>>),
}

impl<T: Real> ActivationCache<T> {
    pub fn is_masked(&self) -> bool {
        matches!(self.kind, CacheKind::Prefix(_))
    }

    pub fn slots(&self) -> usize {
        match &self.kind {
            CacheKind::Full(v) | CacheKind::Prefix(v) => v.len(),
        }
    }

    /// The cached reduction for `slot`: `M_{1:T}` or `M_{1:t−1}`.
    pub fn state(&self, slot: usize) -> &Matrix<T> {
        match &self.kind {
            CacheKind::Full(v) | CacheKind::Prefix(v) => &v[slot],
        }
    }
}

/// Masked forward output split into its two terms.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedParts<T = f64> {
    pub intra: Vec<Matrix<T>>,
    pub inter: Vec<Matrix<T>>,
}

/// Unmasked forward on one rank.
pub fn forward_nomask<T: Real>(
    ctx: &mut RankCtx<'_, T>,
    chunk: &[Qkv<T>],
) -> Result<(Vec<Matrix<T>>, ActivationCache<T>)> {
    check_chunk(chunk, None)?;
    let states = chunk
        .iter()
        .map(|s| chunk_state(&s.k, &s.v))
        .collect::<Result<Vec<_>>>()?;
    let gathered = ctx.all_gather(FORWARD_TAG, states)?;
    let mut outputs = Vec::with_capacity(chunk.len());
    let mut full = Vec::with_capacity(chunk.len());
    for (slot, s) in chunk.iter().enumerate() {
        let total = sum_states(&states_of(&gathered, slot))?;
        outputs.push(matmul(&s.q, &total)?);
        full.push(total);
    }
    Ok((
        outputs,
        ActivationCache {
            kind: CacheKind::Full(full),
        },
    ))
}

/// Masked forward on one rank, returning the intra and inter terms
/// separately.
pub fn forward_masked_parts<T: Real>(
    ctx: &mut RankCtx<'_, T>,
    chunk: &[Qkv<T>],
    schedule: Schedule,
) -> Result<(MaskedParts<T>, ActivationCache<T>)> {
    check_chunk(chunk, None)?;
    let states = chunk
        .iter()
        .map(|s| chunk_state(&s.k, &s.v))
        .collect::<Result<Vec<_>>>()?;
    let (gathered, intra) = gather_alongside(ctx, FORWARD_TAG, states, schedule, || {
        chunk.iter().map(intra_output).collect::<Result<Vec<_>>>()
    })?;

    let position = ctx.sp_position();
    let mut inter = Vec::with_capacity(chunk.len());
    let mut prefixes = Vec::with_capacity(chunk.len());
    for (slot, s) in chunk.iter().enumerate() {
        let prefix = prefix_sum_states(&states_of(&gathered, slot), position)?;
        inter.push(matmul(&s.q, &prefix)?);
        prefixes.push(prefix);
    }
    Ok((
        MaskedParts { intra, inter },
        ActivationCache {
            kind: CacheKind::Prefix(prefixes),
        },
    ))
}

/// Masked forward on one rank: `O_t = O_{t,intra} + O_{t,inter}`.
pub fn forward_masked<T: Real>(
    ctx: &mut RankCtx<'_, T>,
    chunk: &[Qkv<T>],
    schedule: Schedule,
) -> Result<(Vec<Matrix<T>>, ActivationCache<T>)> {
    let (parts, cache) = forward_masked_parts(ctx, chunk, schedule)?;
    let outputs = parts
        .intra
        .iter()
        .zip(&parts.inter)
        .map(|(a, b)| a.add(b))
        .collect::<Result<Vec<_>>>()?;
    Ok((outputs, cache))
}

pub fn forward<T: Real>(
    ctx: &mut RankCtx<'_, T>,
    chunk: &[Qkv<T>],
    masked: bool,
    schedule: Schedule,
) -> Result<(Vec<Matrix<T>>, ActivationCache<T>)> {
    if masked {
        forward_masked(ctx, chunk, schedule)
    } else {
        forward_nomask(ctx, chunk)
    }
}

fn check_cache<T: Real>(cache: &ActivationCache<T>, chunk: &[Qkv<T>], masked: bool) -> Result<()> {
    if cache.is_masked() != masked {
        return Err(Error::MissingCache(if masked {
            "masked backward needs the prefix states of a masked forward"
        } else {
            "unmasked backward needs the full-sum state of an unmasked forward"
        }));
    }
    if cache.slots() != chunk.len() {
        return Err(Error::MissingCache(
            "cache slot count differs from the chunk",
        ));
    }
    Ok(())
}

/// Unmasked backward on one rank.
pub fn backward_nomask<T: Real>(
    ctx: &mut RankCtx<'_, T>,
    chunk: &[Qkv<T>],
    d_out: &[Matrix<T>],
    cache: &ActivationCache<T>,
) -> Result<Vec<GradientBundle<T>>> {
    check_chunk(chunk, Some(d_out))?;
    check_cache(cache, chunk, false)?;
    let d_states = chunk
        .iter()
        .zip(d_out)
        .map(|(s, g)| matmul(&transpose(&s.q), g))
        .collect::<Result<Vec<_>>>()?;
    let gathered = ctx.all_gather(BACKWARD_TAG, d_states)?;
    chunk
        .iter()
        .zip(d_out)
        .enumerate()
        .map(|(slot, (s, g))| {
            // Every chunk's output depends on every chunk's keys and values,
            // so the state gradient is the sum over all T chunks.
            let d_total = sum_states(&states_of(&gathered, slot))?;
            let total = cache.state(slot);
            Ok(GradientBundle {
                dq: matmul(g, &transpose(total))?,
                dk: matmul(&s.v, &transpose(&d_total))?,
                dv: matmul(&s.k, &d_total)?,
            })
        })
        .collect()
}

/// Masked backward on one rank.
pub fn backward_masked<T: Real>(
    ctx: &mut RankCtx<'_, T>,
    chunk: &[Qkv<T>],
    d_out: &[Matrix<T>],
    cache: &ActivationCache<T>,
    schedule: Schedule,
) -> Result<Vec<GradientBundle<T>>> {
    check_chunk(chunk, Some(d_out))?;
    check_cache(cache, chunk, true)?;
    let d_states = chunk
        .iter()
        .zip(d_out)
        .map(|(s, g)| matmul(&transpose(&s.q), g))
        .collect::<Result<Vec<_>>>()?;
    let (gathered, mut grads) = gather_alongside(ctx, BACKWARD_TAG, d_states, schedule, || {
        chunk
            .iter()
            .zip(d_out)
            .map(|(s, g)| intra_grads(s, g))
            .collect::<Result<Vec<_>>>()
    })?;

    // Chunk t (1-based) = position + 1; later chunks start at t + 1.
    let later = ctx.sp_position() + 2;
    for (slot, (s, g)) in chunk.iter().zip(d_out).enumerate() {
        let d_suffix = suffix_sum_states(&states_of(&gathered, slot), later)?;
        add_inter_grads(&mut grads[slot], s, g, cache.state(slot), &d_suffix)?;
    }
    Ok(grads)
}

pub fn backward<T: Real>(
    ctx: &mut RankCtx<'_, T>,
    chunk: &[Qkv<T>],
    d_out: &[Matrix<T>],
    cache: &ActivationCache<T>,
    schedule: Schedule,
) -> Result<Vec<GradientBundle<T>>> {
    if cache.is_masked() {
        backward_masked(ctx, chunk, d_out, cache, schedule)
    } else {
        backward_nomask(ctx, chunk, d_out, cache)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Lasp2Options {
    pub masked: bool,
    pub schedule: Schedule,
}

impl Lasp2Options {
    pub fn masked() -> Self {
        Self {
            masked: true,
            schedule: Schedule::Sequential,
        }
    }

    pub fn unmasked() -> Self {
        Self::default()
    }

    pub fn overlapped(mut self) -> Self {
        self.schedule = Schedule::Overlapped;
        self
    }
}

/// State reductions a rank performed in each pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RankWork {
    pub forward: ReductionCounts,
    pub backward: ReductionCounts,
}

fn counts_since(before: ReductionCounts) -> ReductionCounts {
    let now = reduction_counts();
    ReductionCounts {
        prefix: now.prefix - before.prefix,
        suffix: now.suffix - before.suffix,
        full: now.full - before.full,
    }
}

/// One LASP-2 iteration over a world: forward, plus backward when `d_out`
/// is given.
pub fn run<T: Real>(
    cfg: &WorldConfig,
    batch: &SequenceBatch<T>,
    d_out: Option<&[Matrix<T>]>,
    opts: Lasp2Options,
) -> Result<SpRun<T, GradientBundle<T>, RankWork>> {
    run_sp(
        cfg,
        batch.batch,
        &batch.slots,
        d_out,
        |ctx, shard: RankShard<Qkv<T>, T>| {
            let start = reduction_counts();
            let (outputs, cache) = forward(ctx, &shard.inputs, opts.masked, opts.schedule)?;
            let mut work = RankWork {
                forward: counts_since(start),
                ..RankWork::default()
            };
            let grads = match &shard.d_out {
                Some(g) => {
                    let start = reduction_counts();
                    let grads = backward(ctx, &shard.inputs, g, &cache, opts.schedule)?;
                    work.backward = counts_since(start);
                    Some(grads)
                }
                None => None,
            };
            Ok(RankOutput {
                outputs,
                grads,
                extra: work,
            })
        },
    )
}

/// Ranks on which the all-gather was posted before the intra-chunk compute
/// finished.
pub fn overlapped_ranks(report: &CommReport, world_size: usize, tag: &str) -> Vec<usize> {
    (0..world_size)
        .filter(|&r| {
            let issued = report.trace.first(r, TraceKind::GatherIssued, tag);
            let intra_done = report.trace.first(r, TraceKind::ComputeEnd, INTRA_LABEL);
            matches!((issued, intra_done), (Some(i), Some(e)) if i < e)
        })
        .collect()
}

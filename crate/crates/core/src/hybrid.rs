//! LASP-2H: a stack of attention layers, each either linear (`L`, run with
//! LASP-2) or standard softmax (`N`, run with gathered keys and values),
//! under one sequence-parallel world.
//!
//! A layer is projections plus attention only: `Q, K, V = X W_Q, X W_K,
//! X W_V`, and its output is the next layer's input. Every `(batch, head)`
//! slot carries its own input sequence; the projection weights are shared
//! by all slots of a layer.

use std::fmt;

use crate::comm::{CommReport, RankCtx, WorldConfig};
use crate::data::{gen_data, gen_scaled, stream};
use crate::driver::{run_sp, RankOutput, RankShard};
use crate::error::{Error, Result};
use crate::lasp2::{self, ActivationCache, Schedule};
use crate::numerics::{matmul, transpose, Matrix, Real};
use crate::oracle::{
    linear_attn_serial, linear_attn_serial_backward, softmax_attn_reference,
    softmax_attn_serial_backward, AttentionInstance,
};
use crate::sequence::{GradientBundle, Qkv};
use crate::standard_sp::{self, GatheredKv};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    Standard,
}

impl LayerKind {
    pub fn symbol(self) -> char {
        match self {
            LayerKind::Linear => 'L',
            LayerKind::Standard => 'N',
        }
    }
}

/// Parses a pattern such as `"LLLN LLLN"`. Whitespace is ignored.
pub fn parse_pattern(pattern: &str) -> Result<Vec<LayerKind>> {
    let layers = pattern
        .chars()
        .filter(|c| !c.is_whitespace())
        .map(|c| match c {
            'L' => Ok(LayerKind::Linear),
            'N' => Ok(LayerKind::Standard),
            other => Err(Error::InvalidPattern(other)),
        })
        .collect::<Result<Vec<_>>>()?;
    if layers.is_empty() {
        return Err(Error::Config("layer pattern is empty".into()));
    }
    Ok(layers)
}

/// Renders layers in groups of four, e.g. `"LLLN LLLN"`.
pub fn format_pattern(layers: &[LayerKind]) -> String {
    layers
        .chunks(4)
        .map(|g| g.iter().map(|l| l.symbol()).collect::<String>())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Pattern with `num/den` of the layers standard: every `den/num`-th layer
/// is `N`, the rest `L`. A ratio of zero gives an all-linear stack.
pub fn pattern_for_ratio(num: usize, den: usize, layers: usize) -> Result<String> {
    if den == 0 || layers == 0 || (num > 0 && !den.is_multiple_of(num)) || num > den {
        return Err(Error::Config(format!(
            "cannot place a {num}/{den} hybrid ratio over {layers} layers"
        )));
    }
    let kinds: Vec<LayerKind> = (1..=layers)
        .map(|i| {
            if num > 0 && i % (den / num) == 0 {
                LayerKind::Standard
            } else {
                LayerKind::Linear
            }
        })
        .collect();
    Ok(format_pattern(&kinds))
}

/// Projection weights of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T = f64> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
}

impl<T: Real> LayerWeights<T> {
    pub fn zeros(d: usize) -> Self {
        Self {
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
        }
    }

    fn cast<U: Real>(&self) -> LayerWeights<U> {
        LayerWeights {
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
        }
    }

    fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.wq.add_assign(&other.wq)?;
        self.wk.add_assign(&other.wk)?;
        self.wv.add_assign(&other.wv)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        Ok(self
            .wq
            .max_abs_diff(&other.wq)?
            .max(self.wk.max_abs_diff(&other.wk)?)
            .max(self.wv.max_abs_diff(&other.wv)?))
    }

    pub fn max_abs(&self) -> T {
        self.wq
            .max_abs()
            .max(self.wk.max_abs())
            .max(self.wv.max_abs())
    }
}

/// A layer stack and its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub layers: Vec<LayerKind>,
    pub dim: usize,
    pub heads: usize,
    pub batch: usize,
    pub seed: u64,
    pub weights: Vec<LayerWeights>,
}

impl ModelSpec {
    /// Weights are uniform in `[−1/√d, 1/√d]`, drawn from the generator
    /// under the weight roles with the layer index as stream index.
    pub fn new(pattern: &str, dim: usize, heads: usize, batch: usize, seed: u64) -> Result<Self> {
        let layers = parse_pattern(pattern)?;
        if dim == 0 || heads == 0 || batch == 0 {
            return Err(Error::Config(format!(
                "d={dim}, H={heads}, B={batch} must all be positive"
            )));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let weights = (0..layers.len() as u64)
            .map(|l| LayerWeights {
                wq: gen_scaled(seed, stream::id(stream::WEIGHT_Q, l), dim, dim, bound),
                wk: gen_scaled(seed, stream::id(stream::WEIGHT_K, l), dim, dim, bound),
                wv: gen_scaled(seed, stream::id(stream::WEIGHT_V, l), dim, dim, bound),
            })
            .collect();
        Ok(Self {
            layers,
            dim,
            heads,
            batch,
            seed,
            weights,
        })
    }

    pub fn pattern(&self) -> String {
        format_pattern(&self.layers)
    }

    pub fn slots(&self) -> usize {
        self.batch * self.heads
    }

    pub fn count(&self, kind: LayerKind) -> usize {
        self.layers.iter().filter(|&&l| l == kind).count()
    }

    /// Collective launches of one forward+backward iteration.
    pub fn launches_per_iteration(&self) -> u64 {
        (2 * self.count(LayerKind::Linear) + 3 * self.count(LayerKind::Standard)) as u64
    }

    /// One length-`seq_len` input per slot from the generator's input role.
    pub fn random_inputs<T: Real>(&self, seq_len: usize) -> Vec<Matrix<T>> {
        (0..self.slots() as u64)
            .map(|s| gen_data(self.seed, stream::id(stream::INPUT, s), seq_len, self.dim))
            .collect()
    }

    pub fn random_grad_out<T: Real>(&self, seq_len: usize) -> Vec<Matrix<T>> {
        (0..self.slots() as u64)
            .map(|s| {
                gen_data(
                    self.seed,
                    stream::id(stream::GRAD_OUT, s),
                    seq_len,
                    self.dim,
                )
            })
            .collect()
    }

    fn check_inputs<T: Real>(
        &self,
        inputs: &[Matrix<T>],
        d_out: Option<&[Matrix<T>]>,
    ) -> Result<()> {
        if inputs.len() != self.slots() {
            return Err(Error::shape(
                "hybrid",
                format!("{} inputs for {} slots", inputs.len(), self.slots()),
            ));
        }
        let n = inputs[0].rows();
        if n == 0 || inputs.iter().any(|x| x.shape() != (n, self.dim)) {
            return Err(Error::shape(
                "hybrid",
                format!("inputs must all be {n}×{}", self.dim),
            ));
        }
        if let Some(g) = d_out {
            if g.len() != inputs.len() || g.iter().any(|m| m.shape() != (n, self.dim)) {
                return Err(Error::shape(
                    "hybrid",
                    "upstream gradients do not match inputs".into(),
                ));
            }
        }
        Ok(())
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (d={}, H={}, B={}, seed={})",
            self.pattern(),
            self.dim,
            self.heads,
            self.batch,
            self.seed
        )
    }
}

fn project<T: Real>(x: &Matrix<T>, w: &LayerWeights<T>) -> Result<Qkv<T>> {
    Ok(Qkv {
        q: matmul(x, &w.wq)?,
        k: matmul(x, &w.wk)?,
        v: matmul(x, &w.wv)?,
    })
}

/// Weight gradients summed over slots in slot order, and input gradients
/// per slot.
fn project_backward<T: Real>(
    inputs: &[Matrix<T>],
    grads: &[GradientBundle<T>],
    w: &LayerWeights<T>,
) -> Result<(LayerWeights<T>, Vec<Matrix<T>>)> {
    let mut dw: Option<LayerWeights<T>> = None;
    let mut dx = Vec::with_capacity(inputs.len());
    for (x, g) in inputs.iter().zip(grads) {
        let xt = transpose(x);
        let part = LayerWeights {
            wq: matmul(&xt, &g.dq)?,
            wk: matmul(&xt, &g.dk)?,
            wv: matmul(&xt, &g.dv)?,
        };
        match dw.as_mut() {
            None => dw = Some(part),
            Some(acc) => acc.add_assign(&part)?,
        }
        let mut d = matmul(&g.dq, &transpose(&w.wq))?;
        d.add_assign(&matmul(&g.dk, &transpose(&w.wk))?)?;
        d.add_assign(&matmul(&g.dv, &transpose(&w.wv))?)?;
        dx.push(d);
    }
    Ok((dw.expect("at least one slot"), dx))
}

/// What a layer keeps for its backward pass.
#[derive(Debug, Clone)]
pub enum LayerCache<T = f64> {
    Linear(ActivationCache<T>),
    Standard(GatheredKv<T>),
}

/// Per-layer activations of one rank's chunk.
#[derive(Debug, Clone)]
pub struct LayerActivation<T = f64> {
    pub inputs: Vec<Matrix<T>>,
    pub qkv: Vec<Qkv<T>>,
    pub cache: LayerCache<T>,
}

/// Forward through the stack on one rank. Returns the final chunk outputs
/// and one activation record per layer.
pub fn forward<T: Real>(
    ctx: &mut RankCtx<'_, T>,
    layers: &[LayerKind],
    weights: &[LayerWeights<T>],
    inputs: Vec<Matrix<T>>,
    causal: bool,
) -> Result<(Vec<Matrix<T>>, Vec<LayerActivation<T>>)> {
    let mut x = inputs;
    let mut acts = Vec::with_capacity(layers.len());
    for (kind, w) in layers.iter().zip(weights) {
        let qkv = x
            .iter()
            .map(|xi| project(xi, w))
            .collect::<Result<Vec<_>>>()?;
        let (out, cache) = match kind {
            LayerKind::Linear => {
                let (o, c) = lasp2::forward(ctx, &qkv, causal, Schedule::Sequential)?;
                (o, LayerCache::Linear(c))
            }
            LayerKind::Standard => {
                let (o, c) = standard_sp::forward(ctx, &qkv, causal)?;
                (o, LayerCache::Standard(c))
            }
        };
        acts.push(LayerActivation {
            inputs: x,
            qkv,
            cache,
        });
        x = out;
    }
    Ok((x, acts))
}

/// Backward through the stack on one rank, last layer first. Returns the
/// input gradients and this rank's share of every layer's weight gradients.
pub fn backward<T: Real>(
    ctx: &mut RankCtx<'_, T>,
    weights: &[LayerWeights<T>],
    d_out: Vec<Matrix<T>>,
    acts: &[LayerActivation<T>],
) -> Result<(Vec<Matrix<T>>, Vec<LayerWeights<T>>)> {
    if acts.len() != weights.len() {
        return Err(Error::MissingCache(
            "one activation record per layer is required",
        ));
    }
    let mut grad = d_out;
    let mut dws = Vec::with_capacity(acts.len());
    for (act, w) in acts.iter().zip(weights).rev() {
        let attn = match &act.cache {
            LayerCache::Linear(c) => {
                lasp2::backward(ctx, &act.qkv, &grad, c, Schedule::Sequential)?
            }
            LayerCache::Standard(c) => standard_sp::backward(ctx, &act.qkv, &grad, c)?,
        };
        let (dw, dx) = project_backward(&act.inputs, &attn, w)?;
        dws.push(dw);
        grad = dx;
    }
    dws.reverse();
    Ok((grad, dws))
}

/// Result of a stack pass, either parallel or serial.
#[derive(Debug, Clone)]
pub struct StackRun<T = f64> {
    /// Final outputs per slot.
    pub outputs: Vec<Matrix<T>>,
    /// Gradients with respect to each slot's input.
    pub d_inputs: Option<Vec<Matrix<T>>>,
    /// Weight gradients per layer.
    pub weight_grads: Option<Vec<LayerWeights<T>>>,
    pub comm: CommReport,
}

/// One parallel iteration of the stack: forward, plus backward when `d_out`
/// is given. Weight gradients are reduced over ranks in ascending rank
/// order once every rank has finished.
pub fn run<T: Real>(
    cfg: &WorldConfig,
    spec: &ModelSpec,
    inputs: &[Matrix<T>],
    d_out: Option<&[Matrix<T>]>,
    causal: bool,
) -> Result<StackRun<T>> {
    spec.check_inputs(inputs, d_out)?;
    let weights: Vec<LayerWeights<T>> = spec.weights.iter().map(LayerWeights::cast).collect();
    let sp = run_sp(
        cfg,
        spec.batch,
        inputs,
        d_out,
        |ctx, shard: RankShard<Matrix<T>, T>| {
            let (outputs, acts) = forward(ctx, &spec.layers, &weights, shard.inputs, causal)?;
            let (grads, extra) = match shard.d_out {
                Some(g) => {
                    let (dx, dw) = backward(ctx, &weights, g, &acts)?;
                    (Some(dx), Some(dw))
                }
                None => (None, None),
            };
            Ok(RankOutput {
                outputs,
                grads,
                extra,
            })
        },
    )?;

    let weight_grads = match sp.extras.first() {
        Some(Some(_)) => {
            let mut total: Option<Vec<LayerWeights<T>>> = None;
            for part in sp.extras.into_iter().flatten() {
                match total.as_mut() {
                    None => total = Some(part),
                    Some(acc) => {
                        for (a, p) in acc.iter_mut().zip(&part) {
                            a.add_assign(p)?;
                        }
                    }
                }
            }
            total
        }
        _ => None,
    };
    Ok(StackRun {
        outputs: sp.outputs,
        d_inputs: sp.grads,
        weight_grads,
        comm: sp.comm,
    })
}

/// The same stack on one rank with the reference attention kernels.
pub fn serial_stack_oracle<T: Real>(
    spec: &ModelSpec,
    inputs: &[Matrix<T>],
    d_out: Option<&[Matrix<T>]>,
    causal: bool,
) -> Result<StackRun<T>> {
    spec.check_inputs(inputs, d_out)?;
    let weights: Vec<LayerWeights<T>> = spec.weights.iter().map(LayerWeights::cast).collect();

    let mut x: Vec<Matrix<T>> = inputs.to_vec();
    let mut saved: Vec<(Vec<Matrix<T>>, Vec<AttentionInstance<T>>)> = Vec::new();
    for (kind, w) in spec.layers.iter().zip(&weights) {
        let insts = x
            .iter()
            .map(|xi| Ok(AttentionInstance::from_qkv(project(xi, w)?, causal)))
            .collect::<Result<Vec<_>>>()?;
        let out = insts
            .iter()
            .map(|inst| match kind {
                LayerKind::Linear => linear_attn_serial(inst),
                LayerKind::Standard => softmax_attn_reference(inst),
            })
            .collect::<Result<Vec<_>>>()?;
        saved.push((x, insts));
        x = out;
    }
    let outputs = x;

    let Some(d_out) = d_out else {
        return Ok(StackRun {
            outputs,
            d_inputs: None,
            weight_grads: None,
            comm: CommReport::default(),
        });
    };
    let mut grad: Vec<Matrix<T>> = d_out.to_vec();
    let mut dws = Vec::with_capacity(spec.layers.len());
    for ((kind, w), (xs, insts)) in spec.layers.iter().zip(&weights).zip(&saved).rev() {
        let attn = insts
            .iter()
            .zip(&grad)
            .map(|(inst, g)| match kind {
                LayerKind::Linear => linear_attn_serial_backward(inst, g),
                LayerKind::Standard => softmax_attn_serial_backward(inst, g),
            })
            .collect::<Result<Vec<_>>>()?;
        let (dw, dx) = project_backward(xs, &attn, w)?;
        dws.push(dw);
        grad = dx;
    }
    dws.reverse();
    Ok(StackRun {
        outputs,
        d_inputs: Some(grad),
        weight_grads: Some(dws),
        comm: CommReport::default(),
    })
}

/// Largest absolute difference between two stack runs over outputs, input
/// gradients and weight gradients.
pub fn max_stack_diff<T: Real>(a: &StackRun<T>, b: &StackRun<T>) -> Result<T> {
    let mut worst = T::zero();
    for (x, y) in a.outputs.iter().zip(&b.outputs) {
        worst = worst.max(x.max_abs_diff(y)?);
    }
    if let (Some(x), Some(y)) = (&a.d_inputs, &b.d_inputs) {
        for (p, q) in x.iter().zip(y) {
            worst = worst.max(p.max_abs_diff(q)?);
        }
    }
    if let (Some(x), Some(y)) = (&a.weight_grads, &b.weight_grads) {
        for (p, q) in x.iter().zip(y) {
            worst = worst.max(p.max_abs_diff(q)?);
        }
    }
    Ok(worst)
}

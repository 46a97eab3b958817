//! Executes one configured run and its serial reference, with every result
//! flattened into f64 matrices so the checks do not care about precision.

use lasp_core::comm::CommReport;
use lasp_core::hybrid::{self, ModelSpec};
use lasp_core::lasp2::{self, Lasp2Options};
use lasp_core::oracle::{self, AttentionInstance};
use lasp_core::{lasp1, standard_sp, GradientBundle, Matrix, Qkv, Real, Result, SequenceBatch};

use crate::config::{MethodKind, RunConfig};

/// Generated data for a run, always held in f64.
#[derive(Debug, Clone)]
pub enum Inputs {
    Attention {
        batch: SequenceBatch<f64>,
        d_out: Vec<Matrix<f64>>,
    },
    Stack {
        spec: ModelSpec,
        inputs: Vec<Matrix<f64>>,
        d_out: Vec<Matrix<f64>>,
    },
}

/// A tensor that finite differences can perturb.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Query,
    Key,
    Value,
    Input,
    FirstLayerWq,
}

impl Inputs {
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        Ok(match cfg.method {
            MethodKind::Lasp2h => {
                let pattern = cfg
                    .pattern
                    .as_deref()
                    .unwrap_or(crate::config::DEFAULT_PATTERN);
                let spec = ModelSpec::new(pattern, cfg.dim, cfg.heads, cfg.batch, cfg.seed)?;
                let inputs = spec.random_inputs(cfg.seq_len);
                let d_out = spec.random_grad_out(cfg.seq_len);
                Inputs::Stack {
                    spec,
                    inputs,
                    d_out,
                }
            }
            _ => {
                let batch =
                    SequenceBatch::random(cfg.seed, cfg.batch, cfg.heads, cfg.seq_len, cfg.dim);
                let d_out = batch.random_grad_out(cfg.seed);
                Inputs::Attention { batch, d_out }
            }
        })
    }

    pub fn d_out(&self) -> &[Matrix<f64>] {
        match self {
            Inputs::Attention { d_out, .. } | Inputs::Stack { d_out, .. } => d_out,
        }
    }

    /// Perturbable tensors (all in slot 0) with the index of their gradient
    /// in [`Sample::grads`].
    pub fn targets(&self) -> Vec<(Target, usize)> {
        match self {
            Inputs::Attention { .. } => {
                vec![(Target::Query, 0), (Target::Key, 1), (Target::Value, 2)]
            }
            Inputs::Stack { spec, .. } => {
                vec![(Target::Input, 0), (Target::FirstLayerWq, spec.slots())]
            }
        }
    }

    pub fn get(&self, target: Target) -> &Matrix<f64> {
        match (self, target) {
            (Inputs::Attention { batch, .. }, Target::Query) => &batch.slots[0].q,
            (Inputs::Attention { batch, .. }, Target::Key) => &batch.slots[0].k,
            (Inputs::Attention { batch, .. }, Target::Value) => &batch.slots[0].v,
            (Inputs::Stack { inputs, .. }, Target::Input) => &inputs[0],
            (Inputs::Stack { spec, .. }, Target::FirstLayerWq) => &spec.weights[0].wq,
            _ => unreachable!("target {target:?} does not belong to these inputs"),
        }
    }

    pub fn with(&self, target: Target, value: Matrix<f64>) -> Self {
        let mut out = self.clone();
        match (&mut out, target) {
            (Inputs::Attention { batch, .. }, Target::Query) => batch.slots[0].q = value,
            (Inputs::Attention { batch, .. }, Target::Key) => batch.slots[0].k = value,
            (Inputs::Attention { batch, .. }, Target::Value) => batch.slots[0].v = value,
            (Inputs::Stack { inputs, .. }, Target::Input) => inputs[0] = value,
            (Inputs::Stack { spec, .. }, Target::FirstLayerWq) => spec.weights[0].wq = value,
            _ => unreachable!("target {target:?} does not belong to these inputs"),
        }
        out
    }
}

/// Outputs per slot and a flat list of gradients: `dq, dk, dv` per slot for
/// attention methods; input gradients per slot followed by `wq, wk, wv` per
/// layer for stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub outputs: Vec<Matrix<f64>>,
    pub grads: Vec<Matrix<f64>>,
}

impl Sample {
    /// `Σ ⟨dO, O⟩` over all slots.
    pub fn loss(&self, d_out: &[Matrix<f64>]) -> Result<f64> {
        let mut total = 0.0;
        for (o, g) in self.outputs.iter().zip(d_out) {
            total += o.dot(g)?;
        }
        Ok(total)
    }
}

/// One executed run.
#[derive(Debug)]
pub struct Execution {
    pub sample: Sample,
    pub comm: CommReport,
}

fn cast_all<T: Real>(ms: &[Matrix<T>]) -> Vec<Matrix<f64>> {
    ms.iter().map(Matrix::cast).collect()
}

fn flatten<T: Real>(grads: Option<Vec<GradientBundle<T>>>) -> Vec<Matrix<f64>> {
    grads
        .into_iter()
        .flatten()
        .flat_map(|g| [g.dq.cast(), g.dk.cast(), g.dv.cast()])
        .collect()
}

fn cast_batch<T: Real>(b: &SequenceBatch<f64>) -> SequenceBatch<T> {
    SequenceBatch {
        batch: b.batch,
        heads: b.heads,
        slots: b
            .slots
            .iter()
            .map(|s| Qkv {
                q: s.q.cast(),
                k: s.k.cast(),
                v: s.v.cast(),
            })
            .collect(),
    }
}

fn serial_slots<T: Real>(
    batch: &SequenceBatch<T>,
    d_out: Option<&[Matrix<T>]>,
    masked: bool,
    softmax: bool,
) -> Result<(Vec<Matrix<T>>, Option<Vec<GradientBundle<T>>>)> {
    let mut outputs = Vec::new();
    let mut grads = d_out.map(|_| Vec::new());
    for (slot, qkv) in batch.slots.iter().enumerate() {
        let inst = AttentionInstance::from_qkv(qkv.clone(), masked);
        outputs.push(if softmax {
            oracle::softmax_attn_reference(&inst)?
        } else {
            oracle::linear_attn_serial(&inst)?
        });
        if let (Some(g), Some(all)) = (d_out, grads.as_mut()) {
            all.push(if softmax {
                oracle::softmax_attn_serial_backward(&inst, &g[slot])?
            } else {
                oracle::linear_attn_serial_backward(&inst, &g[slot])?
            });
        }
    }
    Ok((outputs, grads))
}

/// Runs the configured method at precision `T`; with `with_grad` the
/// backward pass runs too. `overlap` selects the overlapped LASP-2 schedule.
pub fn execute<T: Real>(
    cfg: &RunConfig,
    inputs: &Inputs,
    with_grad: bool,
    overlap: bool,
) -> Result<Execution> {
    let world = cfg.world_config();
    match inputs {
        Inputs::Stack {
            spec,
            inputs,
            d_out,
        } => {
            let x: Vec<Matrix<T>> = inputs.iter().map(Matrix::cast).collect();
            let g: Vec<Matrix<T>> = d_out.iter().map(Matrix::cast).collect();
            let run = hybrid::run(&world, spec, &x, with_grad.then_some(&g[..]), cfg.masked)?;
            let mut grads = cast_all(&run.d_inputs.unwrap_or_default());
            for w in run.weight_grads.unwrap_or_default() {
                grads.extend([w.wq.cast(), w.wk.cast(), w.wv.cast()]);
            }
            Ok(Execution {
                sample: Sample {
                    outputs: cast_all(&run.outputs),
                    grads,
                },
                comm: run.comm,
            })
        }
        Inputs::Attention { batch, d_out } => {
            let batch = cast_batch::<T>(batch);
            let g: Vec<Matrix<T>> = d_out.iter().map(Matrix::cast).collect();
            let g = with_grad.then_some(&g[..]);
            let (outputs, grads, comm) = match cfg.method {
                MethodKind::Lasp2 => {
                    let mut opts = if cfg.masked {
                        Lasp2Options::masked()
                    } else {
                        Lasp2Options::unmasked()
                    };
                    if overlap {
                        opts = opts.overlapped();
                    }
                    let r = lasp2::run(&world, &batch, g, opts)?;
                    (r.outputs, r.grads, r.comm)
                }
                MethodKind::Lasp1 => {
                    let r = lasp1::run(&world, &batch, g, cfg.masked)?;
                    (r.outputs, r.grads, r.comm)
                }
                MethodKind::Cp => {
                    let r = standard_sp::run(&world, &batch, g, cfg.masked)?;
                    (r.outputs, r.grads, r.comm)
                }
                MethodKind::Oracle => {
                    let (o, gr) = serial_slots(&batch, g, cfg.masked, false)?;
                    (o, gr, CommReport::default())
                }
                MethodKind::Lasp2h => unreachable!("stack inputs for lasp2h"),
            };
            Ok(Execution {
                sample: Sample {
                    outputs: cast_all(&outputs),
                    grads: flatten(grads),
                },
                comm,
            })
        }
    }
}

/// The serial f64 reference the method is checked against. LASP-1 without
/// a mask is compared with the chunk-exclusive form it computes.
pub fn reference(cfg: &RunConfig, inputs: &Inputs) -> Result<Sample> {
    match inputs {
        Inputs::Stack {
            spec,
            inputs,
            d_out,
        } => {
            let run = hybrid::serial_stack_oracle(spec, inputs, Some(d_out), cfg.masked)?;
            let mut grads = run.d_inputs.unwrap_or_default();
            for w in run.weight_grads.unwrap_or_default() {
                grads.extend([w.wq, w.wk, w.wv]);
            }
            Ok(Sample {
                outputs: run.outputs,
                grads,
            })
        }
        Inputs::Attention { batch, d_out } => {
            if cfg.method == MethodKind::Lasp1 && !cfg.masked {
                let mut outputs = Vec::new();
                let mut grads = Vec::new();
                for (qkv, g) in batch.slots.iter().zip(d_out) {
                    let (o, gr) = oracle::linear_attn_exclusive_chunks(qkv, cfg.chunks, Some(g))?;
                    outputs.push(o);
                    grads.extend(flatten(gr.map(|g| vec![g])));
                }
                return Ok(Sample { outputs, grads });
            }
            let softmax = cfg.method == MethodKind::Cp;
            let (outputs, grads) = serial_slots(batch, Some(d_out), cfg.masked, softmax)?;
            Ok(Sample {
                outputs,
                grads: flatten(grads),
            })
        }
    }
}

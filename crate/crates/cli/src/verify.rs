//! The invariant suite behind `lasp verify`.

use std::time::Instant;

use serde::Serialize;

use lasp_core::comm::{CommReport, CommStats};
use lasp_core::costmodel::{self, CostParams, Method};
use lasp_core::numerics::{hadamard_mask, matmul, transpose, CausalMask};
use lasp_core::oracle::{finite_diff_entries, max_relative_error};
use lasp_core::{lasp2, Matrix, Real, Result};

use crate::config::{MethodKind, Precision, RunConfig};
use crate::runner::{execute, reference, Execution, Inputs, Sample};

pub const REPORT_VERSION: u32 = 1;

const FD_STEP: f64 = 1e-6;
const FD_TOL: f64 = 1e-6;
const LINEAR_TOL: f64 = 1e-10;
const SOFTMAX_TOL: f64 = 1e-12;
const STACK_TOL: f64 = 1e-9;
const F32_TOL: f64 = 1e-4;
/// Added to the first gradient entry by the hidden `--corrupt-gradient` flag.
const CORRUPTION: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Measured deviation; the check passes when it is at most `tolerance`.
    pub value: f64,
    pub tolerance: f64,
}

impl Check {
    fn new(name: &str, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            passed: value.is_finite() && value <= tolerance,
            value,
            tolerance,
        }
    }

    fn exact(name: &str, recorded: u64, expected: u64) -> Self {
        Self::new(name, recorded.abs_diff(expected) as f64, 0.0)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    pub passed: bool,
    pub max_abs_error: f64,
    pub grad_max_rel_error: f64,
    pub checks: Vec<Check>,
    pub comm: CommStats,
    pub simulated_time: f64,
    pub wall_time_ns: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    pub fn failed_checks(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub version: u32,
    pub runs: Vec<RunRecord>,
}

fn max_abs_diff(a: &[Matrix<f64>], b: &[Matrix<f64>]) -> Result<f64> {
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        worst = worst.max(x.max_abs_diff(y)?);
    }
    Ok(worst)
}

/// Largest absolute difference divided by `max(1, max |b|)`.
fn scaled_diff(a: &[Matrix<f64>], b: &[Matrix<f64>]) -> Result<f64> {
    let scale = b.iter().map(Matrix::max_abs).fold(1.0, f64::max);
    Ok(max_abs_diff(a, b)? / scale)
}

/// Entry-wise `|a − f| / max(1, |f|)`.
fn rel_error(a: &[Matrix<f64>], b: &[Matrix<f64>]) -> Result<f64> {
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        worst = worst.max(max_relative_error(x, y)?);
    }
    Ok(worst)
}

fn bit_diff(a: &[Matrix<f64>], b: &[Matrix<f64>]) -> Result<f64> {
    if a == b {
        Ok(0.0)
    } else {
        // Report the size of the mismatch; any nonzero value fails.
        Ok(max_abs_diff(a, b)?.max(f64::MIN_POSITIVE))
    }
}

fn same_length(name: &str, a: &[Matrix<f64>], b: &[Matrix<f64>]) -> Option<Check> {
    (a.len() != b.len()).then(|| Check::new(name, f64::INFINITY, 0.0))
}

/// Three entries spread over a matrix: first, middle and last.
fn probe_entries(m: &Matrix<f64>) -> Vec<(usize, usize)> {
    let (r, c) = m.shape();
    let mut e = vec![(0, 0), (r / 2, c / 2), (r - 1, c - 1)];
    e.dedup();
    e
}

/// Central differences of the forward loss at probe entries of each
/// target, compared with the analytic gradient of the same run.
fn finite_difference(cfg: &RunConfig, inputs: &Inputs, analytic: &Sample) -> Result<f64> {
    let mut worst = 0.0f64;
    for (target, grad_index) in inputs.targets() {
        let x = inputs.get(target);
        let entries = probe_entries(x);
        let numeric = finite_diff_entries(
            |probe| {
                let perturbed = inputs.with(target, probe.clone());
                let run = execute::<f64>(cfg, &perturbed, false, false)?;
                run.sample.loss(inputs.d_out())
            },
            x,
            FD_STEP,
            &entries,
        )?;
        let grad = &analytic.grads[grad_index];
        for (&(i, j), f) in entries.iter().zip(numeric) {
            worst = worst.max((grad.get(i, j) - f).abs() / f.abs().max(1.0));
        }
    }
    Ok(worst)
}

fn element_bytes(p: Precision) -> u64 {
    match p {
        Precision::F32 => <f32 as Real>::BYTES as u64,
        Precision::F64 => <f64 as Real>::BYTES as u64,
    }
}

fn ledger_checks(
    cfg: &RunConfig,
    method: Method,
    comm: &CommReport,
    checks: &mut Vec<Check>,
) -> Result<()> {
    let p = CostParams {
        world: cfg.world as u64,
        sp: cfg.chunks as u64,
        batch: (cfg.batch / cfg.dp()) as u64,
        heads: cfg.heads as u64,
        dim: cfg.dim as u64,
        iterations: 1,
        element_bytes: element_bytes(cfg.precision),
    };
    let l = costmodel::check_ledger(method, &p, comm)?;
    checks.push(Check::exact(
        "comm_steps",
        l.recorded_steps,
        l.expected_steps,
    ));
    let worst = l
        .recorded_bytes_per_step
        .iter()
        .map(|b| b.abs_diff(l.expected_bytes_per_step))
        .max()
        .unwrap_or(0);
    checks.push(Check::exact("traffic_per_step", worst, 0));
    Ok(())
}

/// Checks specific to the serial oracle: the right product equals the
/// masked left product, and the last causal row sees the whole sequence.
fn oracle_checks(inputs: &Inputs, sample: &Sample, masked: bool, tol: f64) -> Result<Vec<Check>> {
    let Inputs::Attention { batch, .. } = inputs else {
        return Ok(Vec::new());
    };
    let mut left = Vec::new();
    let mut last_rows = Vec::new();
    let mut last_ref = Vec::new();
    for (slot, qkv) in batch.slots.iter().enumerate() {
        let n = qkv.q.rows();
        let mut scores = matmul(&qkv.q, &transpose(&qkv.k))?;
        if masked {
            scores = hadamard_mask(&scores, &CausalMask::new(n))?;
        }
        left.push(matmul(&scores, &qkv.v)?);
        let full = matmul(&transpose(&qkv.k), &qkv.v)?;
        last_ref.push(matmul(&qkv.q.slice_rows(n - 1, n), &full)?);
        last_rows.push(sample.outputs[slot].slice_rows(n - 1, n));
    }
    Ok(vec![
        Check::new("right_product", scaled_diff(&sample.outputs, &left)?, tol),
        Check::new(
            "last_row_full_state",
            scaled_diff(&last_rows, &last_ref)?,
            tol,
        ),
    ])
}

struct Outcome {
    checks: Vec<Check>,
    forward_error: f64,
    grad_error: f64,
    main: Execution,
    wall_time_ns: u64,
}

fn run_checks<T: Real>(cfg: &RunConfig, inputs: &Inputs, corrupt: bool) -> Result<Outcome> {
    let f64_mode = cfg.precision == Precision::F64;
    let start = Instant::now();
    let mut main = execute::<T>(cfg, inputs, true, false)?;
    let wall_time_ns = start.elapsed().as_nanos() as u64;
    if corrupt {
        if let Some(g) = main.sample.grads.first_mut() {
            g.set(0, 0, g.get(0, 0) + CORRUPTION);
        }
    }
    let sample = &main.sample;
    let refs = reference(cfg, inputs)?;
    let mut checks = Vec::new();
    if let Some(c) = same_length("output_count", &sample.outputs, &refs.outputs)
        .or_else(|| same_length("gradient_count", &sample.grads, &refs.grads))
    {
        checks.push(c);
        return Ok(Outcome {
            checks,
            forward_error: f64::INFINITY,
            grad_error: f64::INFINITY,
            main,
            wall_time_ns,
        });
    }

    let forward_error = max_abs_diff(&sample.outputs, &refs.outputs)?;
    let (fwd_metric, fwd_tol, grad_metric, grad_tol) = if !f64_mode {
        (
            scaled_diff(&sample.outputs, &refs.outputs)?,
            F32_TOL,
            scaled_diff(&sample.grads, &refs.grads)?,
            F32_TOL,
        )
    } else if cfg.method == MethodKind::Lasp2h {
        (
            scaled_diff(&sample.outputs, &refs.outputs)?,
            STACK_TOL,
            scaled_diff(&sample.grads, &refs.grads)?,
            STACK_TOL,
        )
    } else {
        let tol = if cfg.method == MethodKind::Cp {
            SOFTMAX_TOL
        } else {
            LINEAR_TOL
        };
        (
            forward_error,
            tol,
            rel_error(&sample.grads, &refs.grads)?,
            tol,
        )
    };
    let grad_error = rel_error(&sample.grads, &refs.grads)?;
    checks.push(Check::new("forward_vs_reference", fwd_metric, fwd_tol));
    checks.push(Check::new("backward_vs_reference", grad_metric, grad_tol));

    if f64_mode {
        checks.push(Check::new(
            "finite_difference",
            finite_difference(cfg, inputs, sample)?,
            FD_TOL,
        ));
    }

    let totals = main.comm.totals;
    let dp = cfg.dp() as u64;
    match cfg.method {
        MethodKind::Lasp2 => {
            if f64_mode && cfg.chunks == 1 && !cfg.masked {
                checks.push(Check::new(
                    "t1_bit_identical",
                    bit_diff(&sample.outputs, &refs.outputs)?,
                    0.0,
                ));
            }
            ledger_checks(cfg, Method::Lasp2, &main.comm, &mut checks)?;
            checks.push(Check::exact(
                "no_p2p",
                totals.p2p_sends + totals.p2p_recvs,
                0,
            ));
            if cfg.masked {
                let overlapped = execute::<T>(cfg, inputs, true, true)?;
                let mut plain = sample.clone();
                if corrupt {
                    plain = execute::<T>(cfg, inputs, true, false)?.sample;
                }
                let diff = bit_diff(&overlapped.sample.outputs, &plain.outputs)?
                    .max(bit_diff(&overlapped.sample.grads, &plain.grads)?);
                checks.push(Check::new("overlap_equivalence", diff, 0.0));
                if cfg.chunks >= 2 {
                    let early =
                        lasp2::overlapped_ranks(&overlapped.comm, cfg.world, lasp2::FORWARD_TAG);
                    checks.push(Check::new(
                        "gather_before_intra",
                        if early.is_empty() { 1.0 } else { 0.0 },
                        0.0,
                    ));
                }
            }
        }
        MethodKind::Lasp1 => {
            if cfg.masked {
                let mut other = cfg.clone();
                other.method = MethodKind::Lasp2;
                let l2 = execute::<T>(&other, inputs, true, false)?.sample;
                let mut own = sample.clone();
                if corrupt {
                    own = execute::<T>(cfg, inputs, true, false)?.sample;
                }
                let diff =
                    bit_diff(&own.outputs, &l2.outputs)?.max(bit_diff(&own.grads, &l2.grads)?);
                checks.push(Check::new("matches_lasp2", diff, 0.0));
            }
            ledger_checks(cfg, Method::Lasp1, &main.comm, &mut checks)?;
            checks.push(Check::exact("no_collectives", totals.allgather_launches, 0));
        }
        MethodKind::Cp => {
            checks.push(Check::exact(
                "collective_launches",
                totals.allgather_launches,
                3 * dp,
            ));
            checks.push(Check::exact(
                "no_p2p",
                totals.p2p_sends + totals.p2p_recvs,
                0,
            ));
        }
        MethodKind::Lasp2h => {
            let Inputs::Stack { spec, .. } = inputs else {
                unreachable!("lasp2h runs on stack inputs")
            };
            checks.push(Check::exact(
                "collective_launches",
                totals.allgather_launches,
                spec.launches_per_iteration() * dp,
            ));
            checks.push(Check::exact(
                "no_p2p",
                totals.p2p_sends + totals.p2p_recvs,
                0,
            ));
        }
        MethodKind::Oracle => {
            let tol = if f64_mode { LINEAR_TOL } else { F32_TOL };
            checks.extend(oracle_checks(inputs, sample, cfg.masked, tol)?);
            checks.push(Check::new(
                "no_communication",
                if totals.is_zero() { 0.0 } else { 1.0 },
                0.0,
            ));
        }
    }
    if !main
        .sample
        .outputs
        .iter()
        .chain(&main.sample.grads)
        .all(Matrix::is_finite)
    {
        checks.push(Check::new("finite_values", f64::INFINITY, 0.0));
    }
    Ok(Outcome {
        checks,
        forward_error,
        grad_error,
        main,
        wall_time_ns,
    })
}

/// Runs every check for one configuration. Execution errors become a
/// failed `execution` check rather than aborting the suite.
pub fn verify_run(cfg: &RunConfig, corrupt: bool) -> RunRecord {
    let outcome = Inputs::generate(cfg).and_then(|inputs| match cfg.precision {
        Precision::F64 => run_checks::<f64>(cfg, &inputs, corrupt),
        Precision::F32 => run_checks::<f32>(cfg, &inputs, corrupt),
    });
    let mut record = RunRecord {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        passed: false,
        max_abs_error: f64::NAN,
        grad_max_rel_error: f64::NAN,
        checks: Vec::new(),
        comm: CommStats::default(),
        simulated_time: 0.0,
        wall_time_ns: 0,
        error: None,
    };
    match outcome {
        Ok(o) => {
            record.passed = o.checks.iter().all(|c| c.passed);
            record.max_abs_error = o.forward_error;
            record.grad_max_rel_error = o.grad_error;
            record.checks = o.checks;
            record.comm = o.main.comm.totals;
            record.simulated_time = o.main.comm.simulated_time;
            record.wall_time_ns = o.wall_time_ns;
        }
        Err(e) => {
            record
                .checks
                .push(Check::new("execution", f64::INFINITY, 0.0));
            record.error = Some(e.to_string());
        }
    }
    record
}

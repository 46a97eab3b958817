//! `lasp`: verification suites, benchmark sweeps, cost-model tables and
//! deterministic data generation for the sequence-parallel attention
//! methods in `lasp-core`.
//!
//! Exit status: 0 when everything passes, 1 when an invariant fails, 2 for
//! usage or configuration errors (including an unwritable output path).

mod bench;
mod config;
mod runner;
mod table;
mod verify;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lasp_core::data::{gen_data, stream};
use lasp_core::Matrix;

use config::{flag_layer, read_layer, usage, Layer, Precision, UsageError, RUN_KEYS};

#[derive(Parser, Debug)]
#[command(
    name = "lasp",
    version,
    about = "Sequence-parallel linear attention harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the invariant suite and write a JSON report.
    Verify(RunArgs),
    /// Record communication counters per run as CSV.
    Bench(RunArgs),
    /// Tabulate closed-form communication steps and traffic as CSV.
    Costmodel(CostArgs),
    /// Print a generated matrix as CSV.
    GenData(GenArgs),
}

/// Flags accept a single value or a comma-separated list; lists expand
/// into a grid.
#[derive(Args, Debug)]
struct RunArgs {
    /// Key/value file of settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Key/value file of grid values, applied over --config.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Output path (verify default: lasp-verify.json; bench default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// lasp1, lasp2, lasp2h, cp or oracle.
    #[arg(long)]
    method: Option<String>,
    /// Sequence length N.
    #[arg(long)]
    seq_len: Option<String>,
    /// SP size T: number of chunks.
    #[arg(long)]
    chunks: Option<String>,
    /// World size W (default: T).
    #[arg(long)]
    world: Option<String>,
    /// Head dimension d.
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    heads: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    /// Causal (true) or bidirectional (false).
    #[arg(long)]
    masked: Option<String>,
    /// Layer pattern of L/N symbols (lasp2h only).
    #[arg(long)]
    pattern: Option<String>,
    /// f32 or f64.
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Simulated cost of launching one communication primitive.
    #[arg(long)]
    latency_per_launch: Option<String>,
    /// Simulated cost per byte moved.
    #[arg(long)]
    latency_per_byte: Option<String>,
    /// Perturb the first gradient entry so that verification must fail.
    #[arg(long, hide = true)]
    corrupt_gradient: bool,
}

impl RunArgs {
    fn sources(&self) -> Result<Vec<Layer>, UsageError> {
        let mut layers = Vec::new();
        if let Some(p) = &self.config {
            layers.push(read_layer(p, RUN_KEYS)?);
        }
        if let Some(p) = &self.grid {
            layers.push(read_layer(p, RUN_KEYS)?);
        }
        layers.push(flag_layer(&[
            ("method", self.method.as_ref()),
            ("seq-len", self.seq_len.as_ref()),
            ("chunks", self.chunks.as_ref()),
            ("world", self.world.as_ref()),
            ("dim", self.dim.as_ref()),
            ("heads", self.heads.as_ref()),
            ("batch", self.batch.as_ref()),
            ("masked", self.masked.as_ref()),
            ("pattern", self.pattern.as_ref()),
            ("precision", self.precision.as_ref()),
            ("seed", self.seed.as_ref()),
            ("latency-per-launch", self.latency_per_launch.as_ref()),
            ("latency-per-byte", self.latency_per_byte.as_ref()),
        ]));
        Ok(layers)
    }
}

#[derive(Args, Debug)]
struct CostArgs {
    /// Key/value file of grid values.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Output path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// lasp1 or lasp2.
    #[arg(long)]
    method: Option<String>,
    /// World size W.
    #[arg(long)]
    world: Option<String>,
    /// SP size (default: W).
    #[arg(long)]
    sp: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    heads: Option<String>,
    /// Head dimension d.
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    iterations: Option<String>,
    /// Bytes per element (2 for half precision).
    #[arg(long)]
    element_bytes: Option<String>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    rows: usize,
    #[arg(long, default_value_t = 4)]
    cols: usize,
    /// Role: query, key, value, grad-out, input, weight-q, weight-k,
    /// weight-v, matrix, or a raw stream number.
    #[arg(long, default_value = "matrix")]
    stream: String,
    /// Index within the role.
    #[arg(long, default_value_t = 0)]
    index: u64,
    /// f32 or f64.
    #[arg(long, default_value = "f64")]
    precision: String,
    /// Output path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Invariant(String),
}

impl From<UsageError> for Failure {
    fn from(e: UsageError) -> Self {
        Failure::Usage(e.0)
    }
}

/// Opens the output before any computation so a bad path fails early.
fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>, UsageError> {
    match path {
        Some(p) => {
            let f =
                File::create(p).map_err(|e| usage(format!("cannot write {}: {e}", p.display())))?;
            Ok(Box::new(BufWriter::new(f)))
        }
        None => Ok(Box::new(BufWriter::new(io::stdout()))),
    }
}

fn write_err(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(format!("cannot write output: {e}"))
}

fn cmd_verify(args: &RunArgs) -> Result<(), Failure> {
    let runs = config::build_runs(config::verify_defaults(), &args.sources()?)?;
    let path = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("lasp-verify.json"));
    let mut out = open_output(Some(&path))?;

    let mut records = Vec::with_capacity(runs.len());
    let mut failures = Vec::new();
    for cfg in &runs {
        let r = verify::verify_run(cfg, args.corrupt_gradient);
        if r.passed {
            println!("PASS {}", cfg.label());
        } else {
            let names: Vec<&str> = r.failed_checks().map(|c| c.name.as_str()).collect();
            let detail = r
                .error
                .as_deref()
                .map(|e| format!(" ({e})"))
                .unwrap_or_default();
            println!(
                "FAIL {}: invariant {}{detail}",
                cfg.label(),
                names.join(", ")
            );
            failures.push(format!("{}: {}", cfg.label(), names.join(", ")));
        }
        records.push(r);
    }
    let report = verify::Report {
        version: verify::REPORT_VERSION,
        runs: records,
    };
    serde_json::to_writer_pretty(&mut out, &report).map_err(write_err)?;
    writeln!(out).and_then(|_| out.flush()).map_err(write_err)?;
    println!(
        "verify: {} of {} runs passed; report at {}",
        runs.len() - failures.len(),
        runs.len(),
        path.display()
    );
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Invariant(format!(
            "{} run(s) failed:\n  {}",
            failures.len(),
            failures.join("\n  ")
        )))
    }
}

fn cmd_bench(args: &RunArgs) -> Result<(), Failure> {
    let runs = config::build_runs(config::bench_defaults(), &args.sources()?)?;
    let out = open_output(args.out.as_deref())?;
    let rows = runs
        .iter()
        .map(|cfg| {
            bench::bench_run(cfg).map_err(|e| Failure::Invariant(format!("{}: {e}", cfg.label())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    bench::write_rows(out, &rows).map_err(write_err)
}

fn cmd_costmodel(args: &CostArgs) -> Result<(), Failure> {
    let mut sources = Vec::new();
    if let Some(p) = &args.grid {
        sources.push(read_layer(p, table::COST_KEYS)?);
    }
    sources.push(flag_layer(&[
        ("method", args.method.as_ref()),
        ("world", args.world.as_ref()),
        ("sp", args.sp.as_ref()),
        ("batch", args.batch.as_ref()),
        ("heads", args.heads.as_ref()),
        ("dim", args.dim.as_ref()),
        ("iterations", args.iterations.as_ref()),
        ("element-bytes", args.element_bytes.as_ref()),
    ]));
    let rows = table::build_rows(&sources)?;
    let out = open_output(args.out.as_deref())?;
    let mut w = csv::Writer::from_writer(out);
    for r in &rows {
        w.serialize(r).map_err(write_err)?;
    }
    w.flush().map_err(write_err)
}

fn stream_role(name: &str) -> Result<u64, UsageError> {
    Ok(match name.to_ascii_lowercase().replace('_', "-").as_str() {
        "query" => stream::QUERY,
        "key" => stream::KEY,
        "value" => stream::VALUE,
        "grad-out" => stream::GRAD_OUT,
        "input" => stream::INPUT,
        "weight-q" => stream::WEIGHT_Q,
        "weight-k" => stream::WEIGHT_K,
        "weight-v" => stream::WEIGHT_V,
        "matrix" => stream::MATRIX,
        other => other
            .parse()
            .map_err(|_| usage(format!("unknown stream '{name}'")))?,
    })
}

fn write_matrix<T: lasp_core::Real + std::fmt::Display>(
    out: Box<dyn Write>,
    m: &Matrix<T>,
) -> Result<(), Failure> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|x| x.to_string()))
            .map_err(write_err)?;
    }
    w.flush().map_err(write_err)
}

fn cmd_gen_data(args: &GenArgs) -> Result<(), Failure> {
    let id = stream::id(stream_role(&args.stream)?, args.index);
    let precision: Precision = args.precision.parse()?;
    let out = open_output(args.out.as_deref())?;
    match precision {
        Precision::F64 => write_matrix(out, &gen_data::<f64>(args.seed, id, args.rows, args.cols)),
        Precision::F32 => write_matrix(out, &gen_data::<f32>(args.seed, id, args.rows, args.cols)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Costmodel(a) => cmd_costmodel(a),
        Command::GenData(a) => cmd_gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invariant(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

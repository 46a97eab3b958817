//! `lasp bench`: one CSV row of communication counters per run.

use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use lasp_core::{Real, Result};

use crate::config::{Precision, RunConfig};
use crate::runner::{execute, Inputs};

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct BenchRow {
    pub method: String,
    #[serde(rename = "N")]
    pub seq_len: usize,
    #[serde(rename = "T")]
    pub chunks: usize,
    #[serde(rename = "W")]
    pub world: usize,
    pub d: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    #[serde(rename = "B")]
    pub batch: usize,
    pub masked: bool,
    pub steps: u64,
    pub launches: u64,
    pub bytes: u64,
    pub simulated_time: f64,
    pub wall_time_ns: u64,
}

fn timed<T: Real>(cfg: &RunConfig, inputs: &Inputs) -> Result<(lasp_core::comm::CommReport, u64)> {
    let start = Instant::now();
    let run = execute::<T>(cfg, inputs, true, false)?;
    Ok((run.comm, start.elapsed().as_nanos() as u64))
}

/// Runs one forward+backward iteration and records the world totals.
pub fn bench_run(cfg: &RunConfig) -> Result<BenchRow> {
    let inputs = Inputs::generate(cfg)?;
    let (comm, wall_time_ns) = match cfg.precision {
        Precision::F64 => timed::<f64>(cfg, &inputs)?,
        Precision::F32 => timed::<f32>(cfg, &inputs)?,
    };
    Ok(BenchRow {
        method: cfg.method.to_string(),
        seq_len: cfg.seq_len,
        chunks: cfg.chunks,
        world: cfg.world,
        d: cfg.dim,
        heads: cfg.heads,
        batch: cfg.batch,
        masked: cfg.masked,
        steps: comm.totals.communication_steps,
        launches: comm.totals.allgather_launches,
        bytes: comm.totals.bytes_sent,
        simulated_time: comm.simulated_time,
        wall_time_ns,
    })
}

pub fn write_rows<W: Write>(out: W, rows: &[BenchRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

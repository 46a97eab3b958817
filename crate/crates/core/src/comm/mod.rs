//! Simulated multi-rank runtime.
//!
//! Each rank runs on its own OS thread and talks to the others only through
//! [`RankCtx`]: matched point-to-point `send`/`recv`, an all-gather over the
//! rank's sequence-parallel group, and a world barrier. Every primitive is
//! recorded in a per-rank [`RankLedger`] and in world-wide [`CommStats`].
//!
//! Step accounting: one collective launch is one step for its group, one
//! matched send/recv pair is one step. Barriers move no data and cost no
//! steps.

mod runtime;

use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::error::{Error, Result};

pub use runtime::{spawn, PendingGather, RankCtx, Tracer, WorldRun};

/// World layout: `world_size = dp_size × sp_size`, contiguous SP groups.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    world_size: usize,
    sp_size: usize,
    pub latency: LatencyModel,
    /// Upper bound on any single blocking wait.
    pub timeout: Duration,
}

impl WorldConfig {
    pub fn new(world_size: usize, sp_size: usize) -> Result<Self> {
        if world_size == 0 || sp_size == 0 {
            return Err(Error::Config(format!(
                "world size ({world_size}) and SP size ({sp_size}) must be positive"
            )));
        }
        if !world_size.is_multiple_of(sp_size) {
            return Err(Error::Config(format!(
                "SP size {sp_size} does not divide world size {world_size}"
            )));
        }
        Ok(Self {
            world_size,
            sp_size,
            latency: LatencyModel::default(),
            timeout: Duration::from_secs(60),
        })
    }

    /// Pure sequence parallelism: one SP group spanning the world.
    pub fn pure_sp(world_size: usize) -> Result<Self> {
        Self::new(world_size, world_size)
    }

    pub fn with_latency(mut self, latency: LatencyModel) -> Self {
        self.latency = latency;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn sp_size(&self) -> usize {
        self.sp_size
    }

    pub fn dp_size(&self) -> usize {
        self.world_size / self.sp_size
    }
}

/// Synthetic cost of moving data, in abstract time units.
///
/// A point-to-point message costs `per_launch + per_byte · payload`. An
/// all-gather costs `per_launch + per_byte · received`, where the received
/// volume is everything the other group members contributed. The default
/// charges one unit per KiB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyModel {
    pub per_launch: f64,
    pub per_byte: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            per_launch: 10.0,
            per_byte: 1.0 / 1024.0,
        }
    }
}

impl LatencyModel {
    pub fn cost(&self, bytes: u64) -> f64 {
        self.per_launch + self.per_byte * bytes as f64
    }
}

/// Where a rank sits in the DP×SP layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RankPlacement {
    pub rank: usize,
    /// SP group index; also the batch shard the group processes.
    pub sp_group: usize,
    /// Position inside the SP group, i.e. the chunk index this rank owns.
    pub sp_position: usize,
    /// Ranks that share an SP position form a DP group.
    pub dp_group: usize,
}

impl RankPlacement {
    /// Global rank of the member at `position` in this rank's SP group.
    pub fn peer_at(&self, position: usize, sp_size: usize) -> usize {
        self.sp_group * sp_size + position
    }
}

/// Ranks `[g·T, (g+1)·T)` form SP group `g`.
pub fn process_groups(cfg: &WorldConfig) -> Vec<RankPlacement> {
    (0..cfg.world_size)
        .map(|rank| RankPlacement {
            rank,
            sp_group: rank / cfg.sp_size,
            sp_position: rank % cfg.sp_size,
            dp_group: rank % cfg.sp_size,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CommStats {
    pub p2p_sends: u64,
    pub p2p_recvs: u64,
    pub allgather_launches: u64,
    pub bytes_sent: u64,
    pub communication_steps: u64,
}

impl CommStats {
    pub fn is_zero(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Primitive {
    AllGather,
    Send,
    Recv,
}

/// One communication call as seen by the rank that made it. `bytes` is what
/// this rank put on the wire (zero for a receive).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommEvent {
    pub primitive: Primitive,
    pub tag: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RankLedger {
    pub rank: usize,
    pub stats: CommStats,
    pub events: Vec<CommEvent>,
    /// Simulated clock after the rank's last primitive.
    pub clock: f64,
}

impl RankLedger {
    /// Bytes contributed by this rank to each all-gather it joined, in order.
    pub fn gather_contributions(&self) -> Vec<u64> {
        self.events
            .iter()
            .filter(|e| e.primitive == Primitive::AllGather)
            .map(|e| e.bytes)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TraceKind {
    GatherIssued,
    GatherCompleted,
    SendIssued,
    RecvCompleted,
    ComputeStart,
    ComputeEnd,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEvent {
    /// Global order in which events were recorded.
    pub seq: u64,
    pub rank: usize,
    pub kind: TraceKind,
    pub label: &'static str,
}

/// Execution trace of a world run, sorted by `seq`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    /// Sequence numbers of matching events on `rank`, in order.
    pub fn seqs(&self, rank: usize, kind: TraceKind, label: &str) -> Vec<u64> {
        self.events
            .iter()
            .filter(|e| e.rank == rank && e.kind == kind && e.label == label)
            .map(|e| e.seq)
            .collect()
    }

    pub fn first(&self, rank: usize, kind: TraceKind, label: &str) -> Option<u64> {
        self.seqs(rank, kind, label).into_iter().next()
    }
}

/// Everything the runtime observed during one world run.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CommReport {
    pub ledgers: Vec<RankLedger>,
    pub totals: CommStats,
    /// Largest simulated clock over all ranks.
    pub simulated_time: f64,
    #[serde(skip)]
    pub trace: Trace,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CommError {
    #[error("deadlock: every live rank is blocked ({})", describe_blocked(.blocked))]
    Deadlock { blocked: Vec<(usize, String)> },

    #[error("rank {rank} timed out in {primitive}")]
    Timeout { rank: usize, primitive: String },

    #[error("all_gather in SP group {group}: {detail}")]
    CollectiveMismatch { group: usize, detail: String },

    #[error("rank {rank}: run aborted after a failure on another rank")]
    Aborted { rank: usize },

    #[error("rank {rank}: invalid peer {peer}")]
    InvalidPeer { rank: usize, peer: usize },

    #[error("rank {rank} panicked: {message}")]
    RankPanicked { rank: usize, message: String },
}

fn describe_blocked(blocked: &[(usize, String)]) -> String {
    blocked
        .iter()
        .map(|(r, p)| format!("rank {r} in {p}"))
        .collect::<Vec<_>>()
        .join(", ")
}

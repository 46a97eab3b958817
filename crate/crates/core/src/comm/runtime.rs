use std::collections::{HashMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::Instant;

use super::{
    process_groups, CommError, CommEvent, CommReport, CommStats, Primitive, RankLedger,
    RankPlacement, Trace, TraceEvent, TraceKind, WorldConfig,
};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};

type MailKey = (usize, usize, String);
type GatherKey = (usize, u64);

struct Envelope<T> {
    payload: Vec<Matrix<T>>,
    bytes: u64,
    stamp: f64,
}

struct GatherSlot<T> {
    contributions: Vec<Option<Vec<Matrix<T>>>>,
    bytes: Vec<u64>,
    entry_clock: Vec<f64>,
    unread: usize,
    mismatch: Option<String>,
}

impl<T: Real> GatherSlot<T> {
    fn new(size: usize) -> Self {
        Self {
            contributions: (0..size).map(|_| None).collect(),
            bytes: vec![0; size],
            entry_clock: vec![0.0; size],
            unread: size,
            mismatch: None,
        }
    }

    fn complete(&self) -> bool {
        self.mismatch.is_some() || self.contributions.iter().all(Option::is_some)
    }
}

struct BarrierSlot {
    arrived: usize,
    unread: usize,
    clock: f64,
}

#[derive(Clone)]
enum Wait {
    Recv(MailKey),
    Gather(GatherKey),
    Barrier(u64),
}

enum Status {
    Running,
    Blocked { wait: Wait, primitive: String },
    Finished,
}

struct State<T> {
    mailboxes: HashMap<MailKey, VecDeque<Envelope<T>>>,
    gathers: HashMap<GatherKey, GatherSlot<T>>,
    barriers: HashMap<u64, BarrierSlot>,
    status: Vec<Status>,
    aborted: bool,
    totals: CommStats,
}

impl<T: Real> State<T> {
    fn is_ready(&self, wait: &Wait, world_size: usize) -> bool {
        match wait {
            Wait::Recv(key) => self.mailboxes.get(key).is_some_and(|q| !q.is_empty()),
            Wait::Gather(key) => self.gathers.get(key).is_some_and(GatherSlot::complete),
            Wait::Barrier(seq) => self
                .barriers
                .get(seq)
                .is_some_and(|b| b.arrived == world_size),
        }
    }

    /// Returns the blocked ranks when no live rank can make progress.
    fn deadlocked(&self, world_size: usize) -> Option<Vec<(usize, String)>> {
        let mut blocked = Vec::new();
        for (rank, status) in self.status.iter().enumerate() {
            match status {
                Status::Running => return None,
                Status::Finished => {}
                Status::Blocked { wait, primitive } => {
                    if self.is_ready(wait, world_size) {
                        return None;
                    }
                    blocked.push((rank, primitive.clone()));
                }
            }
        }
        (!blocked.is_empty()).then_some(blocked)
    }
}

/// Append-only event sink shared by all ranks.
struct TraceSink {
    seq: AtomicU64,
    events: Mutex<Vec<TraceEvent>>,
}

impl TraceSink {
    fn record(&self, rank: usize, kind: TraceKind, label: &'static str) {
        let mut events = lock(&self.events);
        let seq = self.seq.fetch_add(1, Ordering::SeqCst);
        events.push(TraceEvent {
            seq,
            rank,
            kind,
            label,
        });
    }
}

struct Shared<T> {
    cfg: WorldConfig,
    placements: Vec<RankPlacement>,
    state: Mutex<State<T>>,
    cv: Condvar,
    trace: TraceSink,
}

fn lock<X>(m: &Mutex<X>) -> MutexGuard<'_, X> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Records trace events for one rank. Cheap to copy into helper threads.
#[derive(Clone, Copy)]
pub struct Tracer<'w> {
    sink: &'w TraceSink,
    rank: usize,
}

impl Tracer<'_> {
    pub fn record(&self, kind: TraceKind, label: &'static str) {
        self.sink.record(self.rank, kind, label);
    }

    /// Runs `f` between a `ComputeStart`/`ComputeEnd` pair.
    pub fn compute<R>(&self, label: &'static str, f: impl FnOnce() -> R) -> R {
        self.record(TraceKind::ComputeStart, label);
        let out = f();
        self.record(TraceKind::ComputeEnd, label);
        out
    }
}

/// Handle for an all-gather whose contribution has been posted but whose
/// result has not been collected yet.
#[must_use = "a pending gather must be waited on"]
pub struct PendingGather {
    key: GatherKey,
    tag: &'static str,
}

/// A rank's view of the world.
pub struct RankCtx<'w, T> {
    shared: &'w Shared<T>,
    placement: RankPlacement,
    ledger: RankLedger,
    gather_seq: u64,
    barrier_seq: u64,
}

impl<'w, T: Real> RankCtx<'w, T> {
    pub fn rank(&self) -> usize {
        self.placement.rank
    }

    pub fn world_size(&self) -> usize {
        self.shared.cfg.world_size()
    }

    pub fn sp_size(&self) -> usize {
        self.shared.cfg.sp_size()
    }

    pub fn placement(&self) -> RankPlacement {
        self.placement
    }

    /// Position in the SP group, equal to the index of the chunk this rank owns.
    pub fn sp_position(&self) -> usize {
        self.placement.sp_position
    }

    pub fn element_bytes(&self) -> usize {
        T::BYTES
    }

    pub fn stats(&self) -> CommStats {
        self.ledger.stats
    }

    pub fn clock(&self) -> f64 {
        self.ledger.clock
    }

    pub fn tracer(&self) -> Tracer<'w> {
        Tracer {
            sink: &self.shared.trace,
            rank: self.rank(),
        }
    }

    pub fn trace(&self, kind: TraceKind, label: &'static str) {
        self.tracer().record(kind, label);
    }

    /// Global rank of the SP-group member at `position`.
    pub fn sp_peer(&self, position: usize) -> usize {
        self.placement.peer_at(position, self.sp_size())
    }

    fn lock_state(&self) -> MutexGuard<'w, State<T>> {
        lock(&self.shared.state)
    }

    /// Blocks until `wait` is satisfied, a deadlock is detected, another rank
    /// aborts the run, or the configured timeout expires.
    fn wait_for(&self, wait: Wait, primitive: String) -> Result<MutexGuard<'w, State<T>>> {
        let rank = self.rank();
        let world = self.world_size();
        let deadline = Instant::now() + self.shared.cfg.timeout;
        let mut st = self.lock_state();
        loop {
            if st.aborted {
                st.status[rank] = Status::Running;
                return Err(CommError::Aborted { rank }.into());
            }
            if st.is_ready(&wait, world) {
                st.status[rank] = Status::Running;
                return Ok(st);
            }
            st.status[rank] = Status::Blocked {
                wait: wait.clone(),
                primitive: primitive.clone(),
            };
            if let Some(blocked) = st.deadlocked(world) {
                st.aborted = true;
                st.status[rank] = Status::Running;
                self.shared.cv.notify_all();
                return Err(CommError::Deadlock { blocked }.into());
            }
            let now = Instant::now();
            if now >= deadline {
                st.aborted = true;
                st.status[rank] = Status::Running;
                self.shared.cv.notify_all();
                return Err(CommError::Timeout { rank, primitive }.into());
            }
            st = self
                .shared
                .cv
                .wait_timeout(st, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    fn check_peer(&self, peer: usize) -> Result<()> {
        if peer == self.rank() || peer >= self.world_size() {
            return Err(CommError::InvalidPeer {
                rank: self.rank(),
                peer,
            }
            .into());
        }
        Ok(())
    }

    /// Posts `payload` to `dst`. Sends are buffered and never block.
    pub fn send(&mut self, dst: usize, tag: &'static str, payload: Vec<Matrix<T>>) -> Result<()> {
        self.check_peer(dst)?;
        let bytes: u64 = payload.iter().map(Matrix::payload_bytes).sum();
        let mut st = self.lock_state();
        if st.aborted {
            return Err(CommError::Aborted { rank: self.rank() }.into());
        }
        st.totals.p2p_sends += 1;
        st.totals.bytes_sent += bytes;
        // Recorded under the state lock so the receiver's events sort after it.
        self.shared
            .trace
            .record(self.rank(), TraceKind::SendIssued, tag);
        st.mailboxes
            .entry((self.rank(), dst, tag.to_string()))
            .or_default()
            .push_back(Envelope {
                payload,
                bytes,
                stamp: self.ledger.clock,
            });
        drop(st);
        self.shared.cv.notify_all();

        self.ledger.stats.p2p_sends += 1;
        self.ledger.stats.bytes_sent += bytes;
        self.ledger.events.push(CommEvent {
            primitive: Primitive::Send,
            tag: tag.to_string(),
            bytes,
        });
        Ok(())
    }

    /// Blocks until a message from `src` with `tag` arrives.
    pub fn recv(&mut self, src: usize, tag: &'static str) -> Result<Vec<Matrix<T>>> {
        self.check_peer(src)?;
        let key = (src, self.rank(), tag.to_string());
        let mut st = self.wait_for(
            Wait::Recv(key.clone()),
            format!("recv(src={src}, tag={tag})"),
        )?;
        let env = st
            .mailboxes
            .get_mut(&key)
            .and_then(VecDeque::pop_front)
            .expect("ready mailbox holds a message");
        st.totals.p2p_recvs += 1;
        st.totals.communication_steps += 1;
        drop(st);

        let arrival = self.ledger.clock.max(env.stamp) + self.shared.cfg.latency.cost(env.bytes);
        self.ledger.clock = arrival;
        self.ledger.stats.p2p_recvs += 1;
        self.ledger.stats.communication_steps += 1;
        self.ledger.events.push(CommEvent {
            primitive: Primitive::Recv,
            tag: tag.to_string(),
            bytes: 0,
        });
        self.trace(TraceKind::RecvCompleted, tag);
        Ok(env.payload)
    }

    /// Posts this rank's contribution to the next all-gather of its SP group
    /// and returns without waiting for the other members.
    pub fn all_gather_start(
        &mut self,
        tag: &'static str,
        local: Vec<Matrix<T>>,
    ) -> Result<PendingGather> {
        let group = self.placement.sp_group;
        let pos = self.sp_position();
        let key = (group, self.gather_seq);
        self.gather_seq += 1;
        let bytes: u64 = local.iter().map(Matrix::payload_bytes).sum();
        let sp_size = self.sp_size();

        let mut st = self.lock_state();
        if st.aborted {
            return Err(CommError::Aborted { rank: self.rank() }.into());
        }
        if !st.gathers.contains_key(&key) {
            st.totals.allgather_launches += 1;
            st.totals.communication_steps += 1;
        }
        st.totals.bytes_sent += bytes;
        let slot = st
            .gathers
            .entry(key)
            .or_insert_with(|| GatherSlot::new(sp_size));
        let shapes: Vec<_> = local.iter().map(Matrix::shape).collect();
        if let Some(other) = slot.contributions.iter().flatten().next() {
            let theirs: Vec<_> = other.iter().map(Matrix::shape).collect();
            if theirs != shapes && slot.mismatch.is_none() {
                slot.mismatch = Some(format!(
                    "rank {} contributed shapes {:?}, others {:?}",
                    self.rank(),
                    shapes,
                    theirs
                ));
            }
        }
        slot.contributions[pos] = Some(local);
        slot.bytes[pos] = bytes;
        slot.entry_clock[pos] = self.ledger.clock;
        self.shared
            .trace
            .record(self.rank(), TraceKind::GatherIssued, tag);
        drop(st);
        self.shared.cv.notify_all();

        self.ledger.stats.allgather_launches += 1;
        self.ledger.stats.communication_steps += 1;
        self.ledger.stats.bytes_sent += bytes;
        self.ledger.events.push(CommEvent {
            primitive: Primitive::AllGather,
            tag: tag.to_string(),
            bytes,
        });
        Ok(PendingGather { key, tag })
    }

    /// Completes a posted all-gather. The result is indexed by SP position.
    pub fn all_gather_wait(&mut self, pending: PendingGather) -> Result<Vec<Vec<Matrix<T>>>> {
        let PendingGather { key, tag } = pending;
        let mut st = self.wait_for(
            Wait::Gather(key),
            format!("all_gather(tag={tag}, group={}, call={})", key.0, key.1),
        )?;
        let slot = st.gathers.get_mut(&key).expect("ready gather exists");
        if let Some(detail) = slot.mismatch.clone() {
            return Err(CommError::CollectiveMismatch {
                group: key.0,
                detail,
            }
            .into());
        }
        let gathered: Vec<Vec<Matrix<T>>> = slot
            .contributions
            .iter()
            .map(|c| c.clone().expect("complete gather"))
            .collect();
        let pos = self.sp_position();
        let received: u64 = slot
            .bytes
            .iter()
            .enumerate()
            .filter(|&(p, _)| p != pos)
            .map(|(_, &b)| b)
            .sum();
        let start = slot.entry_clock.iter().copied().fold(0.0, f64::max);
        slot.unread -= 1;
        if slot.unread == 0 {
            st.gathers.remove(&key);
        }
        drop(st);

        let done = start + self.shared.cfg.latency.cost(received);
        self.ledger.clock = self.ledger.clock.max(done);
        self.trace(TraceKind::GatherCompleted, tag);
        Ok(gathered)
    }

    /// All-gather over the SP group: every member receives every member's
    /// contribution, ordered by SP position. Counted as one launch.
    pub fn all_gather(
        &mut self,
        tag: &'static str,
        local: Vec<Matrix<T>>,
    ) -> Result<Vec<Vec<Matrix<T>>>> {
        let pending = self.all_gather_start(tag, local)?;
        self.all_gather_wait(pending)
    }

    /// World-wide barrier.
    pub fn barrier(&mut self) -> Result<()> {
        let seq = self.barrier_seq;
        self.barrier_seq += 1;
        let world = self.world_size();
        {
            let mut st = self.lock_state();
            let b = st.barriers.entry(seq).or_insert(BarrierSlot {
                arrived: 0,
                unread: world,
                clock: 0.0,
            });
            b.arrived += 1;
            b.clock = b.clock.max(self.ledger.clock);
        }
        self.shared.cv.notify_all();
        let mut st = self.wait_for(Wait::Barrier(seq), format!("barrier(call={seq})"))?;
        let b = st.barriers.get_mut(&seq).expect("ready barrier");
        let clock = b.clock;
        b.unread -= 1;
        if b.unread == 0 {
            st.barriers.remove(&seq);
        }
        drop(st);
        self.ledger.clock = self.ledger.clock.max(clock);
        Ok(())
    }
}

/// Results of a world run, in rank order.
#[derive(Debug)]
pub struct WorldRun<R> {
    pub results: Vec<R>,
    pub comm: CommReport,
}

fn panic_message(p: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = p.downcast_ref::<String>() {
        s.clone()
    } else {
        "non-string panic payload".to_string()
    }
}

/// Runs `program` once per rank, each on its own thread, and joins them.
///
/// If any rank fails the whole run fails. The reported error is the root
/// cause: errors that merely report an abort triggered elsewhere are only
/// returned when nothing better is available.
pub fn spawn<T, R, F>(cfg: &WorldConfig, program: F) -> Result<WorldRun<R>>
where
    T: Real,
    R: Send,
    F: Fn(&mut RankCtx<'_, T>) -> Result<R> + Sync,
{
    let world = cfg.world_size();
    let shared = Shared {
        cfg: cfg.clone(),
        placements: process_groups(cfg),
        state: Mutex::new(State {
            mailboxes: HashMap::new(),
            gathers: HashMap::new(),
            barriers: HashMap::new(),
            status: (0..world).map(|_| Status::Running).collect(),
            aborted: false,
            totals: CommStats::default(),
        }),
        cv: Condvar::new(),
        trace: TraceSink {
            seq: AtomicU64::new(0),
            events: Mutex::new(Vec::new()),
        },
    };

    let outcomes: Vec<(Result<R>, RankLedger)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..world)
            .map(|rank| {
                let shared = &shared;
                let program = &program;
                scope.spawn(move || {
                    let mut ctx = RankCtx {
                        shared,
                        placement: shared.placements[rank],
                        ledger: RankLedger {
                            rank,
                            ..RankLedger::default()
                        },
                        gather_seq: 0,
                        barrier_seq: 0,
                    };
                    let outcome = catch_unwind(AssertUnwindSafe(|| program(&mut ctx)));
                    let result = match outcome {
                        Ok(r) => r,
                        Err(p) => Err(CommError::RankPanicked {
                            rank,
                            message: panic_message(p.as_ref()),
                        }
                        .into()),
                    };
                    {
                        let mut st = lock(&shared.state);
                        st.status[rank] = Status::Finished;
                        if result.is_err() {
                            st.aborted = true;
                        }
                    }
                    shared.cv.notify_all();
                    (result, ctx.ledger)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("rank thread catches its own panics"))
            .collect()
    });

    let mut results = Vec::with_capacity(world);
    let mut ledgers = Vec::with_capacity(world);
    let mut root: Option<Error> = None;
    let mut secondary: Option<Error> = None;
    for (result, ledger) in outcomes {
        ledgers.push(ledger);
        match result {
            Ok(r) => results.push(r),
            Err(Error::Comm(CommError::Aborted { rank })) => {
                secondary.get_or_insert(CommError::Aborted { rank }.into());
            }
            Err(e) => {
                root.get_or_insert(e);
            }
        }
    }
    if let Some(e) = root.or(secondary) {
        return Err(e);
    }

    let state = shared.state.into_inner().unwrap_or_else(|e| e.into_inner());
    let mut events = shared
        .trace
        .events
        .into_inner()
        .unwrap_or_else(|e| e.into_inner());
    events.sort_by_key(|e| e.seq);
    let simulated_time = ledgers.iter().map(|l| l.clock).fold(0.0, f64::max);
    Ok(WorldRun {
        results,
        comm: CommReport {
            ledgers,
            totals: state.totals,
            simulated_time,
            trace: Trace { events },
        },
    })
}

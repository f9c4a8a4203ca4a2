//! Simulated message passing between logical ranks.
//!
//! Rank programs are ordinary `async` blocks that call [`Endpoint::send`] and
//! [`Endpoint::recv`]. A cycle runs either on a single thread that polls every
//! rank in rank order until all finish ([`ExecMode::RoundRobin`], the
//! deterministic default) or on one thread per rank ([`ExecMode::Threads`]).
//! Both executors share the same matching rules, so results and traffic
//! counts agree.
//!
//! In rendezvous mode a send completes once the receiver has taken the
//! message. In buffered mode it completes immediately as long as the sender's
//! unreceived bytes stay within the budget; a budget of zero means rendezvous.
//!
//! When no rank can make progress the executor reports a deadlock together
//! with the wait-for cycle, or the ranks left waiting on a finished peer.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::future::{poll_fn, Future};
use std::io;
use std::pin::Pin;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::task::{Context, Poll, Waker};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{GridUid, Rank};
use crate::spacetree::{GridCoord, GridHull};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    QueryVector,
    NeighbourVector,
    MigrationGrids,
    NewUids,
    UpdateQueries,
    /// Traffic to and from a central domain manager.
    Manager,
}

impl Channel {
    pub const ALL: [Channel; 6] = [
        Channel::QueryVector,
        Channel::NeighbourVector,
        Channel::MigrationGrids,
        Channel::NewUids,
        Channel::UpdateQueries,
        Channel::Manager,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Wait {
    Send { to: Rank, channel: Channel },
    Recv { from: Rank, channel: Channel },
}

impl Wait {
    pub fn peer(self) -> Rank {
        match self {
            Wait::Send { to, .. } => to,
            Wait::Recv { from, .. } => from,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransportError {
    #[error("deadlock: wait-for cycle {cycle:?}")]
    Deadlock { cycle: Vec<Rank>, waits: Vec<(Rank, Wait)> },
    #[error("stalled: ranks blocked on finished peers {waits:?}")]
    Orphaned { waits: Vec<(Rank, Wait)> },
    #[error("rank {rank} overflowed its {budget}-byte send buffer ({requested} bytes pending)")]
    BufferOverflow {
        rank: Rank,
        budget: usize,
        requested: usize,
    },
    #[error("simulation shut down")]
    Shutdown,
    #[error("rank {0} tried to message itself")]
    SelfSend(Rank),
    #[error("rank {0} is outside the simulation")]
    UnknownRank(Rank),
    #[error("{channel:?} payload of {len} bytes is not a whole number of words")]
    Payload { channel: Channel, len: usize },
    #[error("{0} messages were sent but never received")]
    Undelivered(usize),
    #[error("malformed hull record: {0}")]
    HullFormat(String),
}

impl TransportError {
    /// True for both flavours of "no rank can progress".
    pub fn is_deadlock(&self) -> bool {
        matches!(self, TransportError::Deadlock { .. } | TransportError::Orphaned { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub src: Rank,
    pub dst: Rank,
    pub channel: Channel,
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn words(&self) -> Result<Vec<u64>, TransportError> {
        bytes_to_words(&self.payload).ok_or(TransportError::Payload {
            channel: self.channel,
            len: self.payload.len(),
        })
    }
}

pub fn words_to_bytes(words: &[u64]) -> Vec<u8> {
    words.iter().flat_map(|w| w.to_le_bytes()).collect()
}

pub fn bytes_to_words(bytes: &[u8]) -> Option<Vec<u64>> {
    bytes.len().is_multiple_of(8).then(|| {
        bytes
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransportMode {
    Rendezvous,
    Buffered { budget: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ExecMode {
    #[default]
    RoundRobin,
    Threads,
}

/// Synthetic per-message cost `alpha + beta * bytes`, in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            alpha: 1.0e-6,
            beta: 1.0e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RankTraffic {
    pub msgs_sent: u64,
    pub msgs_recv: u64,
    pub bytes_sent: u64,
    pub bytes_recv: u64,
}

impl RankTraffic {
    pub fn msgs(&self) -> u64 {
        self.msgs_sent + self.msgs_recv
    }

    pub fn modeled_time(&self, cost: CostModel) -> f64 {
        cost.alpha * self.msgs_sent as f64 + cost.beta * self.bytes_sent as f64
    }

    fn add(&mut self, other: &RankTraffic) {
        self.msgs_sent += other.msgs_sent;
        self.msgs_recv += other.msgs_recv;
        self.bytes_sent += other.bytes_sent;
        self.bytes_recv += other.bytes_recv;
    }
}

/// Message and byte counts of one communication cycle.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrafficStats {
    pub cycle: u64,
    pub per_rank: Vec<RankTraffic>,
    pub per_channel: BTreeMap<Channel, RankTraffic>,
    pub per_rank_channel: BTreeMap<(Rank, Channel), RankTraffic>,
}

#[derive(Debug, Serialize)]
struct CsvRow {
    cycle: u64,
    rank: Rank,
    msgs_sent: u64,
    msgs_recv: u64,
    bytes_sent: u64,
    bytes_recv: u64,
    modeled_time: f64,
}

impl TrafficStats {
    pub fn new(cycle: u64, ranks: usize) -> Self {
        TrafficStats {
            cycle,
            per_rank: vec![RankTraffic::default(); ranks],
            per_channel: BTreeMap::new(),
            per_rank_channel: BTreeMap::new(),
        }
    }

    pub fn total(&self) -> RankTraffic {
        let mut t = RankTraffic::default();
        for r in &self.per_rank {
            t.add(r);
        }
        t
    }

    /// Rank with the most messages (sent plus received) and that count;
    /// ties resolve to the lowest rank.
    pub fn max_rank_msgs(&self) -> (Rank, u64) {
        self.per_rank
            .iter()
            .enumerate()
            .map(|(r, t)| (r as Rank, t.msgs()))
            .fold((0, 0), |best, cur| if cur.1 > best.1 { cur } else { best })
    }

    pub fn is_conserved(&self) -> bool {
        let t = self.total();
        t.msgs_sent == t.msgs_recv
            && t.bytes_sent == t.bytes_recv
            && self
                .per_channel
                .values()
                .all(|c| c.msgs_sent == c.msgs_recv && c.bytes_sent == c.bytes_recv)
    }

    /// Accumulates another cycle's counts into this one.
    pub fn merge(&mut self, other: &TrafficStats) {
        if self.per_rank.len() < other.per_rank.len() {
            self.per_rank.resize(other.per_rank.len(), RankTraffic::default());
        }
        for (a, b) in self.per_rank.iter_mut().zip(&other.per_rank) {
            a.add(b);
        }
        for (c, t) in &other.per_channel {
            self.per_channel.entry(*c).or_default().add(t);
        }
        for (k, t) in &other.per_rank_channel {
            self.per_rank_channel.entry(*k).or_default().add(t);
        }
    }

    pub fn write_csv<W: io::Write>(&self, writer: &mut csv::Writer<W>, cost: CostModel) -> Result<(), csv::Error> {
        for (rank, t) in self.per_rank.iter().enumerate() {
            writer.serialize(CsvRow {
                cycle: self.cycle,
                rank: rank as Rank,
                msgs_sent: t.msgs_sent,
                msgs_recv: t.msgs_recv,
                bytes_sent: t.bytes_sent,
                bytes_recv: t.bytes_recv,
                modeled_time: t.modeled_time(cost),
            })?;
        }
        Ok(())
    }
}

pub type RankTask<'a, E> = Pin<Box<dyn Future<Output = Result<(), E>> + Send + 'a>>;

struct Posted {
    id: u64,
    payload: Vec<u8>,
    buffered: bool,
}

struct State {
    ranks: usize,
    queues: HashMap<(Rank, Rank, Channel), VecDeque<Posted>>,
    next_id: u64,
    delivered: HashSet<u64>,
    outstanding: Vec<usize>,
    epoch: u64,
    stats: TrafficStats,
    waits: BTreeMap<Rank, Wait>,
    finished: Vec<bool>,
    idle_since: Vec<Option<u64>>,
    failure: Option<TransportError>,
}

impl State {
    fn new(ranks: usize) -> Self {
        State {
            ranks,
            queues: HashMap::new(),
            next_id: 0,
            delivered: HashSet::new(),
            outstanding: vec![0; ranks],
            epoch: 0,
            stats: TrafficStats::new(0, ranks),
            waits: BTreeMap::new(),
            finished: vec![false; ranks],
            idle_since: vec![None; ranks],
            failure: None,
        }
    }

    fn bump(&mut self) {
        self.epoch += 1;
    }

    fn record(&mut self, rank: Rank, channel: Channel, bytes: usize, sent: bool) {
        let b = bytes as u64;
        for t in [
            &mut self.stats.per_rank[rank as usize],
            self.stats.per_channel.entry(channel).or_default(),
            self.stats.per_rank_channel.entry((rank, channel)).or_default(),
        ] {
            if sent {
                t.msgs_sent += 1;
                t.bytes_sent += b;
            } else {
                t.msgs_recv += 1;
                t.bytes_recv += b;
            }
        }
    }

    /// Wait-for analysis once nobody can progress.
    fn stall_error(&self) -> TransportError {
        let waits: Vec<(Rank, Wait)> = self
            .waits
            .iter()
            .filter(|(r, _)| !self.finished[**r as usize])
            .map(|(r, w)| (*r, *w))
            .collect();
        let edge: BTreeMap<Rank, Rank> = waits.iter().map(|(r, w)| (*r, w.peer())).collect();
        for &(start, _) in &waits {
            let mut path = vec![start];
            let mut cur = start;
            while let Some(&next) = edge.get(&cur) {
                if let Some(pos) = path.iter().position(|&p| p == next) {
                    let mut cycle = path[pos..].to_vec();
                    let min = cycle.iter().enumerate().min_by_key(|(_, r)| **r).unwrap().0;
                    cycle.rotate_left(min);
                    return TransportError::Deadlock { cycle, waits };
                }
                path.push(next);
                cur = next;
            }
        }
        TransportError::Orphaned { waits }
    }
}

/// Shared message board for one simulation.
pub struct Transport {
    mode: TransportMode,
    state: Mutex<State>,
    cond: Condvar,
}

impl fmt::Debug for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Transport").field("mode", &self.mode).finish()
    }
}

impl Transport {
    pub fn new(ranks: usize, mode: TransportMode) -> Self {
        Transport {
            mode,
            state: Mutex::new(State::new(ranks)),
            cond: Condvar::new(),
        }
    }

    pub fn mode(&self) -> TransportMode {
        self.mode
    }

    /// Requires exclusive access, so never while a cycle is running.
    pub fn set_mode(&mut self, mode: TransportMode) {
        self.mode = mode;
    }

    pub fn ranks(&self) -> usize {
        self.lock().ranks
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn buffer_budget(&self) -> Option<usize> {
        match self.mode {
            TransportMode::Buffered { budget } if budget > 0 => Some(budget),
            _ => None,
        }
    }

    pub fn endpoint(&self, rank: Rank) -> Endpoint<'_> {
        Endpoint { transport: self, rank }
    }

    fn poll_send(
        &self,
        src: Rank,
        dst: Rank,
        channel: Channel,
        payload: &mut Option<Vec<u8>>,
        posted: &mut Option<u64>,
    ) -> Poll<Result<(), TransportError>> {
        let mut st = self.lock();
        if let Some(f) = &st.failure {
            return Poll::Ready(Err(abort_error(f)));
        }
        if let Some(id) = *posted {
            if st.delivered.remove(&id) {
                st.waits.remove(&src);
                st.bump();
                return Poll::Ready(Ok(()));
            }
            st.waits.insert(src, Wait::Send { to: dst, channel });
            return Poll::Pending;
        }
        if src == dst {
            return Poll::Ready(Err(TransportError::SelfSend(src)));
        }
        if dst as usize >= st.ranks {
            return Poll::Ready(Err(TransportError::UnknownRank(dst)));
        }
        let payload = payload.take().expect("payload posted once");
        let len = payload.len();
        let id = st.next_id;
        st.next_id += 1;
        let buffered = match self.buffer_budget() {
            Some(budget) => {
                let requested = st.outstanding[src as usize] + len;
                if requested > budget {
                    return Poll::Ready(Err(TransportError::BufferOverflow {
                        rank: src,
                        budget,
                        requested,
                    }));
                }
                st.outstanding[src as usize] = requested;
                true
            }
            None => false,
        };
        st.queues
            .entry((src, dst, channel))
            .or_default()
            .push_back(Posted { id, payload, buffered });
        st.record(src, channel, len, true);
        st.bump();
        if buffered {
            return Poll::Ready(Ok(()));
        }
        *posted = Some(id);
        st.waits.insert(src, Wait::Send { to: dst, channel });
        Poll::Pending
    }

    fn poll_recv(&self, dst: Rank, src: Rank, channel: Channel) -> Poll<Result<Envelope, TransportError>> {
        let mut st = self.lock();
        if let Some(f) = &st.failure {
            return Poll::Ready(Err(abort_error(f)));
        }
        if src == dst {
            return Poll::Ready(Err(TransportError::SelfSend(dst)));
        }
        let msg = st.queues.get_mut(&(src, dst, channel)).and_then(VecDeque::pop_front);
        match msg {
            Some(m) => {
                if m.buffered {
                    st.outstanding[src as usize] -= m.payload.len();
                } else {
                    st.delivered.insert(m.id);
                }
                st.record(dst, channel, m.payload.len(), false);
                st.waits.remove(&dst);
                st.bump();
                Poll::Ready(Ok(Envelope {
                    src,
                    dst,
                    channel,
                    payload: m.payload,
                }))
            }
            None => {
                st.waits.insert(dst, Wait::Recv { from: src, channel });
                Poll::Pending
            }
        }
    }

    /// Runs one communication cycle: every task to completion.
    ///
    /// Tasks are `(rank, program)` pairs; every rank of the simulation that
    /// takes part must appear once. Returns the cycle's traffic.
    pub fn run_cycle<'a, E>(
        &self,
        cycle: u64,
        tasks: Vec<(Rank, RankTask<'a, E>)>,
        exec: ExecMode,
    ) -> Result<TrafficStats, E>
    where
        E: From<TransportError> + Send,
    {
        {
            let mut st = self.lock();
            let ranks = st.ranks;
            *st = State::new(ranks);
            st.stats.cycle = cycle;
            let present: HashSet<Rank> = tasks.iter().map(|(r, _)| *r).collect();
            for r in 0..ranks as Rank {
                if !present.contains(&r) {
                    st.finished[r as usize] = true;
                }
            }
        }
        match exec {
            ExecMode::RoundRobin => self.run_round_robin(tasks)?,
            ExecMode::Threads => self.run_threads(tasks)?,
        }
        let st = self.lock();
        let pending: usize = st.queues.values().map(VecDeque::len).sum();
        if pending > 0 {
            return Err(TransportError::Undelivered(pending).into());
        }
        Ok(st.stats.clone())
    }

    fn fail(&self, err: TransportError) {
        let mut st = self.lock();
        if st.failure.is_none() {
            st.failure = Some(err);
        }
        st.bump();
        drop(st);
        self.cond.notify_all();
    }

    fn run_round_robin<'a, E>(&self, mut tasks: Vec<(Rank, RankTask<'a, E>)>) -> Result<(), E>
    where
        E: From<TransportError>,
    {
        tasks.sort_by_key(|(r, _)| *r);
        let mut live: Vec<Option<(Rank, RankTask<'a, E>)>> = tasks.into_iter().map(Some).collect();
        let mut cx = Context::from_waker(Waker::noop());
        loop {
            let start = self.lock().epoch;
            let mut completed = false;
            let mut remaining = 0;
            for slot in live.iter_mut() {
                let Some((rank, task)) = slot else { continue };
                let rank = *rank;
                match task.as_mut().poll(&mut cx) {
                    Poll::Ready(Ok(())) => {
                        let mut st = self.lock();
                        st.finished[rank as usize] = true;
                        st.waits.remove(&rank);
                        *slot = None;
                        completed = true;
                    }
                    Poll::Ready(Err(e)) => {
                        self.fail(TransportError::Shutdown);
                        return Err(e);
                    }
                    Poll::Pending => remaining += 1,
                }
            }
            if remaining == 0 {
                return Ok(());
            }
            let st = self.lock();
            if !completed && st.epoch == start {
                let err = st.stall_error();
                drop(st);
                self.fail(err.clone());
                return Err(err.into());
            }
        }
    }

    fn run_threads<'a, E>(&self, tasks: Vec<(Rank, RankTask<'a, E>)>) -> Result<(), E>
    where
        E: From<TransportError> + Send,
    {
        let results: Vec<(Rank, Result<(), E>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = tasks
                .into_iter()
                .map(|(rank, task)| {
                    let handle = std::thread::Builder::new()
                        .name(format!("rank-{rank}"))
                        .spawn_scoped(scope, move || self.drive(rank, task))
                        .expect("spawn rank thread");
                    (rank, handle)
                })
                .collect();
            handles
                .into_iter()
                .map(|(rank, h)| (rank, h.join().expect("rank thread panicked")))
                .collect()
        });
        let failure = self.lock().failure.clone();
        let mut first_err = None;
        for (_, r) in results {
            if let Err(e) = r {
                first_err.get_or_insert(e);
            }
        }
        match (failure, first_err) {
            (_, None) => Ok(()),
            (Some(f), Some(_)) if f.is_deadlock() => Err(f.into()),
            (_, Some(e)) => Err(e),
        }
    }

    fn drive<E>(&self, rank: Rank, mut task: RankTask<'_, E>) -> Result<(), E>
    where
        E: From<TransportError>,
    {
        let mut cx = Context::from_waker(Waker::noop());
        loop {
            let seen = self.lock().epoch;
            match task.as_mut().poll(&mut cx) {
                Poll::Ready(res) => {
                    let mut st = self.lock();
                    st.finished[rank as usize] = true;
                    st.waits.remove(&rank);
                    st.bump();
                    if res.is_err() && st.failure.is_none() {
                        st.failure = Some(TransportError::Shutdown);
                    }
                    drop(st);
                    self.cond.notify_all();
                    return res;
                }
                Poll::Pending => self.wait_for_change(rank, seen)?,
            }
        }
    }

    fn wait_for_change(&self, rank: Rank, seen: u64) -> Result<(), TransportError> {
        let mut st = self.lock();
        loop {
            if let Some(f) = &st.failure {
                return Err(abort_error(f));
            }
            if st.epoch != seen {
                // the change may be ours; let sleeping ranks re-check
                st.idle_since[rank as usize] = None;
                drop(st);
                self.cond.notify_all();
                return Ok(());
            }
            st.idle_since[rank as usize] = Some(seen);
            let epoch = st.epoch;
            let stuck = (0..st.ranks)
                .filter(|&r| !st.finished[r])
                .all(|r| st.idle_since[r] == Some(epoch));
            if stuck {
                let err = st.stall_error();
                st.failure = Some(err.clone());
                drop(st);
                self.cond.notify_all();
                return Err(err);
            }
            st = self.cond.wait(st).unwrap_or_else(|e| e.into_inner());
        }
    }
}

fn abort_error(failure: &TransportError) -> TransportError {
    if failure.is_deadlock() {
        failure.clone()
    } else {
        TransportError::Shutdown
    }
}

/// One rank's handle on the transport.
#[derive(Clone, Copy)]
pub struct Endpoint<'t> {
    transport: &'t Transport,
    rank: Rank,
}

impl<'t> Endpoint<'t> {
    pub fn rank(&self) -> Rank {
        self.rank
    }

    pub async fn send(&self, dst: Rank, channel: Channel, payload: Vec<u8>) -> Result<(), TransportError> {
        let mut payload = Some(payload);
        let mut posted = None;
        let (t, src) = (self.transport, self.rank);
        let result = poll_fn(|_| t.poll_send(src, dst, channel, &mut payload, &mut posted)).await;
        if result.is_ok() {
            t.cond.notify_all();
        }
        result
    }

    pub async fn recv(&self, src: Rank, channel: Channel) -> Result<Envelope, TransportError> {
        let (t, dst) = (self.transport, self.rank);
        let result = poll_fn(|_| t.poll_recv(dst, src, channel)).await;
        if result.is_ok() {
            t.cond.notify_all();
        }
        result
    }

    pub async fn send_words(&self, dst: Rank, channel: Channel, words: &[u64]) -> Result<(), TransportError> {
        self.send(dst, channel, words_to_bytes(words)).await
    }

    pub async fn recv_words(&self, src: Rank, channel: Channel) -> Result<Vec<u64>, TransportError> {
        self.recv(src, channel).await?.words()
    }
}

const LINK_PARENT: u64 = 1;

/// Fixed-width little-endian hull records prefixed by a record count.
///
/// Per hull: uid, depth, three index words, a link mask (bit 0 parent, bits
/// 1..=6 neighbours) followed by the present links, the child slot count,
/// `ceil(n / 64)` presence mask words and the present child UIDs, then the
/// payload length and the payload zero-padded to whole words.
pub fn encode_hulls(hulls: &[GridHull]) -> Vec<u8> {
    let mut w: Vec<u64> = vec![hulls.len() as u64];
    for h in hulls {
        w.push(h.uid.bits());
        w.push(h.coord.depth as u64);
        w.extend(h.coord.index);
        let mut mask = 0u64;
        if h.parent.is_some() {
            mask |= LINK_PARENT;
        }
        for (f, n) in h.neighbors.iter().enumerate() {
            if n.is_some() {
                mask |= 1 << (f + 1);
            }
        }
        w.push(mask);
        w.extend(h.parent.map(GridUid::bits));
        w.extend(h.neighbors.iter().flatten().map(|u| u.bits()));
        w.push(h.children.len() as u64);
        for chunk in h.children.chunks(64) {
            let mut m = 0u64;
            for (i, c) in chunk.iter().enumerate() {
                if c.is_some() {
                    m |= 1 << i;
                }
            }
            w.push(m);
        }
        w.extend(h.children.iter().flatten().map(|u| u.bits()));
        w.push(h.payload.len() as u64);
        for chunk in h.payload.chunks(8) {
            let mut b = [0u8; 8];
            b[..chunk.len()].copy_from_slice(chunk);
            w.push(u64::from_le_bytes(b));
        }
    }
    words_to_bytes(&w)
}

pub fn decode_hulls(bytes: &[u8]) -> Result<Vec<GridHull>, TransportError> {
    let words = bytes_to_words(bytes).ok_or(TransportError::Payload {
        channel: Channel::MigrationGrids,
        len: bytes.len(),
    })?;
    let mut it = words.into_iter();
    let mut next = |what: &str| {
        it.next()
            .ok_or_else(|| TransportError::HullFormat(format!("truncated at {what}")))
    };
    let count = next("count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let uid = GridUid::from_bits(next("uid")?);
        let depth = u8::try_from(next("depth")?).map_err(|_| TransportError::HullFormat("depth".into()))?;
        let index = [next("index")?, next("index")?, next("index")?];
        let mask = next("link mask")?;
        if mask >> 7 != 0 {
            return Err(TransportError::HullFormat(format!("link mask {mask:#x}")));
        }
        let mut hull = GridHull::new(uid, GridCoord { depth, index }, None);
        if mask & LINK_PARENT != 0 {
            hull.parent = Some(GridUid::from_bits(next("parent")?));
        }
        for f in 0..6 {
            if mask & (1 << (f + 1)) != 0 {
                hull.neighbors[f] = Some(GridUid::from_bits(next("neighbor")?));
            }
        }
        let n = next("child count")? as usize;
        if n > 512 {
            return Err(TransportError::HullFormat(format!("{n} child slots")));
        }
        let masks = (0..n.div_ceil(64))
            .map(|_| next("child mask"))
            .collect::<Result<Vec<_>, _>>()?;
        hull.children = vec![None; n];
        for (i, slot) in hull.children.iter_mut().enumerate() {
            if masks[i / 64] & (1 << (i % 64)) != 0 {
                *slot = Some(GridUid::from_bits(next("child")?));
            }
        }
        let len = next("payload length")? as usize;
        let mut payload = Vec::with_capacity(len);
        for _ in 0..len.div_ceil(8) {
            payload.extend(next("payload")?.to_le_bytes());
        }
        payload.truncate(len);
        hull.payload = payload;
        out.push(hull);
    }
    if it.next().is_some() {
        return Err(TransportError::HullFormat("trailing words".into()));
    }
    Ok(out)
}

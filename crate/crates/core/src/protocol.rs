//! Decentralized topology maintenance over the simulated transport.
//!
//! A round runs four communication cycles, each following the ordered
//! pairwise pattern from [`crate::schedule`]:
//!
//! 1. refine/delete: query vectors out, neighbour vectors back, converse
//!    neighbour vectors out;
//! 2. forwarding: link updates for subgrids that live on a third rank;
//! 3. migration A: hulls to their targets, fresh UIDs back;
//! 4. migration B: update queries plus new UIDs to every affected rank.
//!
//! Every rank acts only on its own [`RankTopology`] and the envelopes it
//! receives.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use thiserror::Error;

use crate::codec::{CodecError, Direction, GridUid, PositionHash, Query, Rank, Task};
use crate::schedule::{build_pattern, CommSchedule, CommStep, ScheduleError};
use crate::spacetree::{subdivide, DomainSpec, DumpRecord, GridHull, TreeError};
use crate::topology::{RankTopology, TopologyError};
use crate::transport::{
    decode_hulls, encode_hulls, Channel, Endpoint, ExecMode, RankTask, TrafficStats, Transport, TransportError,
    TransportMode,
};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("rank {0} does not exist")]
    NoSuchRank(Rank),
    #[error("rank {rank}: grid {gid} is not a leaf")]
    NotLeaf { rank: Rank, gid: u32 },
    #[error("rank {rank}: grid {gid} is the root and cannot be deleted")]
    DeleteRoot { rank: Rank, gid: u32 },
    #[error("rank {rank}: grid {gid} already has an intent this round")]
    DuplicateIntent { rank: Rank, gid: u32 },
    #[error("rank {rank}: query {query:?} from rank {peer} names an unknown grid")]
    UnknownTarget { rank: Rank, peer: Rank, query: Query },
    #[error("rank {rank}: malformed {channel:?} message from rank {peer}: {reason}")]
    Malformed {
        rank: Rank,
        peer: Rank,
        channel: Channel,
        reason: String,
    },
    #[error("migration plan of rank {origin}: {reason}")]
    Plan { origin: Rank, reason: String },
    #[error("rank {rank} holds {count} messages for rank {peer}, which is not in its rotation")]
    Unscheduled { rank: Rank, peer: Rank, count: usize },
    #[error("rank {rank} still has {count} queued queries after the cycle")]
    Leftover { rank: Rank, count: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Refine,
    Delete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Intent {
    pub rank: Rank,
    pub gid: u32,
    pub op: Op,
}

/// Refinements and deletions issued in one round, in issue order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoundBatch {
    pub intents: Vec<Intent>,
}

impl RoundBatch {
    pub fn refine(&mut self, rank: Rank, gid: u32) -> &mut Self {
        self.intents.push(Intent {
            rank,
            gid,
            op: Op::Refine,
        });
        self
    }

    pub fn delete(&mut self, rank: Rank, gid: u32) -> &mut Self {
        self.intents.push(Intent {
            rank,
            gid,
            op: Op::Delete,
        });
        self
    }

    pub fn is_empty(&self) -> bool {
        self.intents.is_empty()
    }
}

/// Grids one rank hands to peers: `(gid, target)` in send order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MigrationPlan {
    pub moves: Vec<(u32, Rank)>,
}

pub type Plans = BTreeMap<Rank, MigrationPlan>;

/// What a balancer sees on one rank. Loads of all ranks are provided
/// directly instead of through messages.
#[derive(Debug, Clone, Copy)]
pub struct LoadView<'a> {
    pub topology: &'a RankTopology,
    pub loads: &'a [usize],
}

impl LoadView<'_> {
    pub fn local_load(&self) -> usize {
        self.loads[self.topology.rank() as usize]
    }

    pub fn peer_loads(&self) -> Vec<(Rank, usize)> {
        self.topology
            .remote_ranks()
            .iter()
            .map(|&p| (p, self.loads[p as usize]))
            .collect()
    }
}

pub trait Balancer {
    fn plan(&mut self, view: &LoadView<'_>) -> MigrationPlan;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NullBalancer;

impl Balancer for NullBalancer {
    fn plan(&mut self, _view: &LoadView<'_>) -> MigrationPlan {
        MigrationPlan::default()
    }
}

/// Sends half the surplus over the least-loaded peer to that peer.
///
/// Only grids whose off-rank links all point to higher ranks move, so two
/// origins never move linked grids in the same round. A rank keeps at least
/// one grid.
#[derive(Debug, Clone, Copy, Default)]
pub struct GreedyCountBalancer;

impl Balancer for GreedyCountBalancer {
    fn plan(&mut self, view: &LoadView<'_>) -> MigrationPlan {
        let me = view.topology.rank();
        let local = view.local_load();
        let Some((target, load)) = view.peer_loads().into_iter().min_by_key(|&(r, l)| (l, r)) else {
            return MigrationPlan::default();
        };
        if local <= load + 1 {
            return MigrationPlan::default();
        }
        let k = ((local - load) / 2).min(local - 1);
        let moves = view
            .topology
            .grids()
            .filter(|h| h.links().all(|u| u.rank() == me || u.rank() > me))
            .take(k)
            .map(|h| (h.uid.gid(), target))
            .collect();
        MigrationPlan { moves }
    }
}

/// Replays fixed plans, one set per round.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBalancer {
    pub rounds: VecDeque<Plans>,
    current: Option<Plans>,
}

impl ScriptedBalancer {
    pub fn new(rounds: impl IntoIterator<Item = Plans>) -> Self {
        ScriptedBalancer {
            rounds: rounds.into_iter().collect(),
            current: None,
        }
    }
}

impl Balancer for ScriptedBalancer {
    fn plan(&mut self, view: &LoadView<'_>) -> MigrationPlan {
        let me = view.topology.rank();
        if me == 0 || self.current.is_none() {
            self.current = Some(self.rounds.pop_front().unwrap_or_default());
        }
        self.current.as_mut().and_then(|p| p.remove(&me)).unwrap_or_default()
    }
}

/// Query fan-out and link-write instrumentation, accumulated over rounds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FanoutStats {
    pub refinements: u64,
    pub max_refine_queries: usize,
    pub deletions: u64,
    pub max_delete_queries: usize,
    pub migrations: u64,
    pub max_migrate_queries: usize,
    /// Most writes to a single link slot within one cycle.
    pub max_link_writes: u32,
    pub link_writes: u64,
}

impl FanoutStats {
    pub fn within_bounds(&self, children: usize) -> bool {
        self.max_refine_queries <= 6 && self.max_delete_queries <= 7 && self.max_migrate_queries <= 6 + 1 + children
    }

    pub fn merge(&mut self, o: &FanoutStats) {
        self.refinements += o.refinements;
        self.deletions += o.deletions;
        self.migrations += o.migrations;
        self.link_writes += o.link_writes;
        self.max_refine_queries = self.max_refine_queries.max(o.max_refine_queries);
        self.max_delete_queries = self.max_delete_queries.max(o.max_delete_queries);
        self.max_migrate_queries = self.max_migrate_queries.max(o.max_migrate_queries);
        self.max_link_writes = self.max_link_writes.max(o.max_link_writes);
    }
}

#[derive(Debug, Clone, Default)]
pub struct RoundReport {
    pub traffic: Vec<TrafficStats>,
    pub plans: Plans,
    pub fanout: FanoutStats,
}

/// A link the remote side could not write itself because the subgrid lives
/// on a third rank.
#[derive(Debug, Clone, Copy)]
struct Forward {
    parent: u32,
    child: GridUid,
    child_dir: Direction,
    partner: GridUid,
    origin: Rank,
}

#[derive(Debug, Clone, Copy)]
struct Positive {
    gid: u32,
    dir: Direction,
}

type Outbox = BTreeMap<Rank, (Vec<u64>, Vec<u64>)>;

#[derive(Debug, Clone, Default)]
struct RoundState {
    intended: BTreeSet<u32>,
    deleting: BTreeSet<u32>,
    forwards: Vec<Forward>,
    outbox: Outbox,
    outgoing: BTreeMap<Rank, Vec<GridHull>>,
    migrated: Vec<GridHull>,
    writes: HashMap<(u32, u16), u32>,
}

/// Key of a link slot for write counting: face and parent slots use their
/// direction code, child slots start after all direction codes.
fn slot_code(dir: Direction, hash: PositionHash) -> u16 {
    match dir {
        Direction::Subgrid => 8 + hash.bits(),
        d => d.code() as u16,
    }
}

/// One rank: its topology plus per-round protocol bookkeeping.
#[derive(Debug, Clone)]
pub struct RankNode {
    pub(crate) topo: RankTopology,
    round: RoundState,
}

impl RankNode {
    pub fn new(topo: RankTopology) -> Self {
        RankNode {
            topo,
            round: RoundState::default(),
        }
    }

    pub fn topology(&self) -> &RankTopology {
        &self.topo
    }

    fn rank(&self) -> Rank {
        self.topo.rank()
    }

    fn note_write(&mut self, gid: u32, code: u16) {
        *self.round.writes.entry((gid, code)).or_default() += 1;
    }

    fn set_neighbor(&mut self, gid: u32, dir: Direction, uid: Option<GridUid>) -> Result<(), ProtocolError> {
        self.topo.grid_mut(gid)?.set_neighbor(dir, uid);
        self.note_write(gid, dir.code() as u16);
        Ok(())
    }

    fn malformed(&self, peer: Rank, channel: Channel, reason: impl Into<String>) -> ProtocolError {
        ProtocolError::Malformed {
            rank: self.rank(),
            peer,
            channel,
            reason: reason.into(),
        }
    }

    fn target(&self, peer: Rank, q: Query) -> Result<&GridHull, ProtocolError> {
        self.topo.grid(q.gid).map_err(|_| ProtocolError::UnknownTarget {
            rank: self.rank(),
            peer,
            query: q,
        })
    }

    pub(crate) fn check_intent(&self, spec: &DomainSpec, gid: u32, op: Op) -> Result<(), ProtocolError> {
        let rank = self.rank();
        let g = self.topo.grid(gid)?;
        if self.round.intended.contains(&gid) {
            return Err(ProtocolError::DuplicateIntent { rank, gid });
        }
        match op {
            Op::Refine => {
                if g.is_refined() {
                    return Err(TreeError::AlreadyRefined.into());
                }
                if g.depth() >= spec.max_depth {
                    return Err(TreeError::DepthLimit {
                        depth: g.depth() + 1,
                        max_depth: spec.max_depth,
                    }
                    .into());
                }
            }
            Op::Delete => {
                if g.parent.is_none() {
                    return Err(ProtocolError::DeleteRoot { rank, gid });
                }
                if !g.is_leaf() {
                    return Err(ProtocolError::NotLeaf { rank, gid });
                }
            }
        }
        Ok(())
    }

    /// Subdivides locally; children carry their geometry blob.
    pub(crate) fn refine_local(&mut self, spec: &DomainSpec, gid: u32) -> Result<Vec<GridUid>, ProtocolError> {
        self.check_intent(spec, gid, Op::Refine)?;
        let factor = self.topo.factor();
        let mut parent = self.topo.grid(gid)?.clone();
        let topo = &mut self.topo;
        let children = subdivide(&mut parent, factor, |h| topo.allocate_uid(h))?;
        *self.topo.grid_mut(gid)? = parent;
        let uids = children.iter().map(|c| c.uid).collect();
        for mut child in children {
            child.payload = spec.geometry_blob(&child.coord);
            self.topo.insert_assigned(child)?;
        }
        self.round.intended.insert(gid);
        Ok(uids)
    }

    pub(crate) fn delete_local(&mut self, spec: &DomainSpec, gid: u32) -> Result<(), ProtocolError> {
        self.check_intent(spec, gid, Op::Delete)?;
        self.round.intended.insert(gid);
        self.round.deleting.insert(gid);
        Ok(())
    }

    /// Refines `gid` and queues one query per neighbour; returns the
    /// children and the number of queries.
    pub fn issue_refine(&mut self, spec: &DomainSpec, gid: u32) -> Result<(Vec<GridUid>, usize), ProtocolError> {
        let kids = self.refine_local(spec, gid)?;
        let neighbors = self.topo.grid(gid)?.neighbors;
        let mut queued = 0;
        for dir in Direction::FACES {
            if let Some(n) = neighbors[dir as usize] {
                let q = Query::refine(dir.opposite(), n.gid())?;
                self.topo.enqueue_query(n.rank(), q, gid)?;
                queued += 1;
            }
        }
        Ok((kids, queued))
    }

    /// Marks a leaf for deletion and queues queries to its neighbours and
    /// parent; returns the number of queries.
    pub fn issue_delete(&mut self, spec: &DomainSpec, gid: u32) -> Result<usize, ProtocolError> {
        self.delete_local(spec, gid)?;
        let g = self.topo.grid(gid)?;
        let (neighbors, parent, hash) = (g.neighbors, g.parent, g.uid.hash());
        let mut queued = 0;
        for dir in Direction::FACES {
            if let Some(n) = neighbors[dir as usize] {
                let q = Query::new(Task::Delete, dir.opposite(), n.gid(), PositionHash::ROOT)?;
                self.topo.enqueue_query(n.rank(), q, gid)?;
                queued += 1;
            }
        }
        if let Some(p) = parent {
            let q = Query::new(Task::Delete, Direction::Subgrid, p.gid(), hash)?;
            self.topo.enqueue_query(p.rank(), q, gid)?;
            queued += 1;
        }
        Ok(queued)
    }

    /// Subgrids of `n` touching its face `dir`, minus local ones being deleted.
    fn face_children(&self, n: &GridHull, dir: Direction) -> Vec<GridUid> {
        let factor = self.topo.factor();
        let me = self.rank();
        factor
            .face_positions(dir)
            .into_iter()
            .filter_map(|p| n.child(factor, p))
            .filter(|x| !(x.rank() == me && self.round.deleting.contains(&x.gid())))
            .collect()
    }

    fn apply_delete(&mut self, peer: Rank, q: Query) -> Result<(), ProtocolError> {
        let factor = self.topo.factor();
        self.target(peer, q)?;
        match q.direction {
            Direction::Subgrid => {
                let slot = factor
                    .slot(q.hash)
                    .ok_or_else(|| self.malformed(peer, Channel::QueryVector, "subgrid hash outside factor"))?;
                let g = self.topo.grid_mut(q.gid)?;
                if let Some(c) = g.children.get_mut(slot) {
                    *c = None;
                }
                g.normalize_children();
                self.note_write(q.gid, slot_code(q.direction, q.hash));
            }
            d if d.is_face() => self.set_neighbor(q.gid, d, None)?,
            _ => return Err(self.malformed(peer, Channel::QueryVector, "delete towards supergrid")),
        }
        Ok(())
    }

    /// Remote side: answers `peer`'s query vector. Returns the neighbour
    /// vector `[index, count, uids..]*` and the positive queries.
    fn answer_queries(
        &mut self,
        peer: Rank,
        words: &[u64],
    ) -> Result<(Vec<u64>, HashMap<usize, Positive>), ProtocolError> {
        let mut nv = Vec::new();
        let mut positives = HashMap::new();
        for (i, &w) in words.iter().enumerate() {
            let q = Query::decode(w)?;
            match q.task {
                Task::Refine => {
                    let n = self.target(peer, q)?;
                    if !n.is_refined() {
                        continue;
                    }
                    let kids = self.face_children(n, q.direction);
                    let partner = n.neighbor(q.direction);
                    if !kids.is_empty() {
                        nv.push(i as u64);
                        nv.push(kids.len() as u64);
                        nv.extend(kids.iter().map(|k| k.bits()));
                        positives.insert(
                            i,
                            Positive {
                                gid: q.gid,
                                dir: q.direction,
                            },
                        );
                    }
                    if let Some(g) = partner.filter(|g| g.rank() == peer) {
                        let dup = Query::refine(q.direction.opposite(), g.gid())?;
                        self.topo.erase_query(peer, dup.encode());
                    }
                }
                Task::Delete => self.apply_delete(peer, q)?,
                Task::Migrate => {
                    return Err(self.malformed(peer, Channel::QueryVector, "migration query in refine/delete cycle"))
                }
            }
        }
        Ok((nv, positives))
    }

    /// Links the new children of `g` to subgrids `xs` of its neighbour in
    /// direction `delta`.
    fn link_children(
        &mut self,
        g: u32,
        delta: Direction,
        xs: &[GridUid],
        origin: Rank,
        parent: Option<u32>,
    ) -> Result<(), ProtocolError> {
        let factor = self.topo.factor();
        let me = self.rank();
        let axis = delta.axis().expect("face direction");
        let hull = self.topo.grid(g)?.clone();
        for &x in xs {
            if x.rank() == me && self.round.deleting.contains(&x.gid()) {
                continue;
            }
            let c = hull
                .child(factor, factor.mirror(x.hash(), axis))
                .ok_or_else(|| self.malformed(origin, Channel::NeighbourVector, format!("no subgrid facing {x}")))?;
            self.set_neighbor(c.gid(), delta, Some(x))?;
            if x.rank() == me {
                self.set_neighbor(x.gid(), delta.opposite(), Some(c))?;
            } else if let Some(parent) = parent {
                self.round.forwards.push(Forward {
                    parent,
                    child: x,
                    child_dir: delta.opposite(),
                    partner: c,
                    origin: me,
                });
            }
        }
        Ok(())
    }

    /// Origin side: applies the neighbour vector and builds the converse one.
    fn apply_neighbours(
        &mut self,
        peer: Rank,
        words: &[u64],
        issuers: &[u32],
        nv: &[u64],
    ) -> Result<Vec<u64>, ProtocolError> {
        let factor = self.topo.factor();
        let mut converse = Vec::new();
        let mut rest = nv;
        while !rest.is_empty() {
            let (i, k) = match rest {
                [i, k, ..] => (*i as usize, *k as usize),
                _ => return Err(self.malformed(peer, Channel::NeighbourVector, "truncated entry")),
            };
            if i >= words.len() || rest.len() < 2 + k {
                return Err(self.malformed(peer, Channel::NeighbourVector, "entry out of range"));
            }
            let xs: Vec<GridUid> = rest[2..2 + k].iter().map(|&b| GridUid::from_bits(b)).collect();
            rest = &rest[2 + k..];
            let q = Query::decode(words[i])?;
            let g = issuers[i];
            let delta = q.direction.opposite();
            self.link_children(g, delta, &xs, peer, None)?;
            let hull = self.topo.grid(g)?;
            let mine: Vec<u64> = factor
                .face_positions(delta)
                .into_iter()
                .filter_map(|p| hull.child(factor, p))
                .map(GridUid::bits)
                .collect();
            converse.push(i as u64);
            converse.push(mine.len() as u64);
            converse.extend(mine);
        }
        Ok(converse)
    }

    /// Remote side: links its subgrids to the origin's new children.
    fn apply_converse(
        &mut self,
        peer: Rank,
        positives: &HashMap<usize, Positive>,
        converse: &[u64],
    ) -> Result<(), ProtocolError> {
        let factor = self.topo.factor();
        let me = self.rank();
        let mut rest = converse;
        while !rest.is_empty() {
            let (i, k) = match rest {
                [i, k, ..] => (*i as usize, *k as usize),
                _ => return Err(self.malformed(peer, Channel::NeighbourVector, "truncated converse entry")),
            };
            let pos = *positives
                .get(&i)
                .ok_or_else(|| self.malformed(peer, Channel::NeighbourVector, "converse for a negative query"))?;
            if rest.len() < 2 + k {
                return Err(self.malformed(peer, Channel::NeighbourVector, "converse entry out of range"));
            }
            let cs: Vec<GridUid> = rest[2..2 + k].iter().map(|&b| GridUid::from_bits(b)).collect();
            rest = &rest[2 + k..];
            let axis = pos.dir.axis().expect("face direction");
            let n = self.topo.grid(pos.gid)?.clone();
            for c in cs {
                let Some(x) = n.child(factor, factor.mirror(c.hash(), axis)) else {
                    continue;
                };
                if x.rank() == peer {
                    continue;
                }
                if x.rank() == me {
                    if !self.round.deleting.contains(&x.gid()) {
                        self.set_neighbor(x.gid(), pos.dir, Some(c))?;
                    }
                } else {
                    self.round.forwards.push(Forward {
                        parent: pos.gid,
                        child: x,
                        child_dir: pos.dir,
                        partner: c,
                        origin: peer,
                    });
                }
            }
        }
        Ok(())
    }

    /// Self-addressed queries, handled between the two exchange loops.
    fn local_update(&mut self) -> Result<(), ProtocolError> {
        let me = self.rank();
        let (words, issuers) = self.topo.take_queries(me);
        let mut queue: VecDeque<(u64, u32)> = words.into_iter().zip(issuers).collect();
        while let Some((w, g)) = queue.pop_front() {
            let q = Query::decode(w)?;
            match q.task {
                Task::Refine => {
                    let n = self.target(me, q)?;
                    if !n.is_refined() {
                        continue;
                    }
                    let kids = self.face_children(n, q.direction);
                    let partner = n.neighbor(q.direction);
                    self.link_children(g, q.direction.opposite(), &kids, me, Some(q.gid))?;
                    if let Some(p) = partner.filter(|p| p.rank() == me) {
                        let dup = Query::refine(q.direction.opposite(), p.gid())?.encode();
                        if let Some(at) = queue.iter().position(|&(w, _)| w == dup) {
                            queue.remove(at);
                        }
                    }
                }
                Task::Delete => self.apply_delete(me, q)?,
                Task::Migrate => {
                    return Err(self.malformed(me, Channel::QueryVector, "migration query in refine/delete cycle"))
                }
            }
        }
        Ok(())
    }

    /// Drops deleted grids and turns pending forwards into update messages.
    fn finish_refine_delete(&mut self) -> Result<(), ProtocolError> {
        let me = self.rank();
        let pending = self.topo.pending_queries();
        if pending > 0 {
            return Err(ProtocolError::Leftover {
                rank: me,
                count: pending,
            });
        }
        for gid in std::mem::take(&mut self.round.deleting) {
            self.topo.remove(gid)?;
        }
        let factor = self.topo.factor();
        for f in std::mem::take(&mut self.round.forwards) {
            let alive = self.topo.grid(f.parent)?.child(factor, f.child.hash()) == Some(f.child);
            let (dest, q, uid) = if alive {
                (
                    f.child.rank(),
                    Query::new(Task::Migrate, f.child_dir, f.child.gid(), PositionHash::ROOT)?,
                    f.partner,
                )
            } else {
                (
                    f.origin,
                    Query::new(
                        Task::Delete,
                        f.child_dir.opposite(),
                        f.partner.gid(),
                        PositionHash::ROOT,
                    )?,
                    f.child,
                )
            };
            if dest == me {
                self.apply_update(me, q, uid)?;
            } else {
                let e = self.round.outbox.entry(dest).or_default();
                e.0.push(q.encode());
                e.1.push(uid.bits());
            }
        }
        Ok(())
    }

    /// Applies one update: `Migrate` writes `uid` into the addressed link
    /// slot, `Delete` clears the slot if it still holds `uid`.
    fn apply_update(&mut self, peer: Rank, q: Query, uid: GridUid) -> Result<(), ProtocolError> {
        let factor = self.topo.factor();
        self.target(peer, q)?;
        let gid = q.gid;
        let code = slot_code(q.direction, q.hash);
        match (q.task, q.direction) {
            (Task::Migrate, Direction::Supergrid) => self.topo.grid_mut(gid)?.parent = Some(uid),
            (Task::Migrate, Direction::Subgrid) => {
                let slot = factor.slot(q.hash);
                let g = self.topo.grid_mut(gid)?;
                match slot.and_then(|s| g.children.get_mut(s)) {
                    Some(c) => *c = Some(uid),
                    None => return Err(self.malformed(peer, Channel::UpdateQueries, "no such child slot")),
                }
            }
            (Task::Migrate, d) => self.topo.grid_mut(gid)?.set_neighbor(d, Some(uid)),
            (Task::Delete, Direction::Subgrid) => {
                let slot = factor.slot(q.hash);
                let g = self.topo.grid_mut(gid)?;
                if let Some(c) = slot.and_then(|s| g.children.get_mut(s)).filter(|c| **c == Some(uid)) {
                    *c = None;
                }
                g.normalize_children();
            }
            (Task::Delete, d) if d.is_face() => {
                let g = self.topo.grid_mut(gid)?;
                if g.neighbor(d) == Some(uid) {
                    g.set_neighbor(d, None);
                }
            }
            _ => return Err(self.malformed(peer, Channel::UpdateQueries, "unsupported update")),
        }
        self.note_write(gid, code);
        Ok(())
    }

    /// Takes the planned grids out of the registry, grouped by target.
    fn prepare_migration(&mut self, plan: &MigrationPlan) -> Result<(), ProtocolError> {
        for &(gid, target) in &plan.moves {
            let hull = self.topo.remove(gid)?;
            self.round.migrated.push(hull.clone());
            self.round.outgoing.entry(target).or_default().push(hull);
        }
        Ok(())
    }

    /// Registers arriving hulls under fresh gids and rewrites links within
    /// the batch.
    fn adopt(&mut self, hulls: Vec<GridHull>) -> Result<Vec<GridUid>, ProtocolError> {
        let mut renamed = HashMap::new();
        let mut uids = Vec::with_capacity(hulls.len());
        for h in hulls {
            let old = h.uid;
            let new = self.topo.register_grid(h)?;
            renamed.insert(old, new);
            uids.push(new);
        }
        for &uid in &uids {
            let g = self.topo.grid_mut(uid.gid())?;
            let mut codes = Vec::new();
            for (f, n) in g.neighbors.iter_mut().enumerate() {
                if let Some(new) = n.and_then(|u| renamed.get(&u)) {
                    *n = Some(*new);
                    codes.push(f as u16);
                }
            }
            if let Some(new) = g.parent.and_then(|u| renamed.get(&u)) {
                g.parent = Some(*new);
                codes.push(Direction::Supergrid.code() as u16);
            }
            for c in g.children.iter_mut() {
                if let Some(new) = c.and_then(|u| renamed.get(&u)) {
                    codes.push(slot_code(Direction::Subgrid, new.hash()));
                    *c = Some(*new);
                }
            }
            for code in codes {
                self.note_write(uid.gid(), code);
            }
        }
        Ok(uids)
    }

    /// Builds the update list of every migrated grid; returns the number of
    /// entries per grid.
    fn build_updates(&mut self) -> Result<Vec<usize>, ProtocolError> {
        let me = self.rank();
        let mut counts = Vec::new();
        for x in std::mem::take(&mut self.round.migrated) {
            let xn = self
                .topo
                .tombstone(x.uid.gid())
                .ok_or_else(|| self.malformed(me, Channel::NewUids, format!("no new UID for {}", x.uid)))?;
            let mut entries: Vec<(GridUid, Direction, PositionHash)> = Vec::new();
            for dir in Direction::FACES {
                if let Some(y) = x.neighbor(dir) {
                    entries.push((y, dir.opposite(), PositionHash::ROOT));
                }
            }
            if let Some(p) = x.parent {
                entries.push((p, Direction::Subgrid, x.uid.hash()));
            }
            for c in x.children.iter().flatten() {
                entries.push((*c, Direction::Supergrid, PositionHash::ROOT));
            }
            counts.push(entries.len());
            for (affected, dir, hash) in entries {
                let dest = match self.topo.tombstone(affected.gid()).filter(|_| affected.rank() == me) {
                    Some(moved) if moved.rank() == xn.rank() => continue,
                    Some(moved) => moved,
                    None => affected,
                };
                let q = Query::new(Task::Migrate, dir, dest.gid(), hash)?;
                if dest.rank() == me {
                    self.apply_update(me, q, xn)?;
                } else {
                    let e = self.round.outbox.entry(dest.rank()).or_default();
                    e.0.push(q.encode());
                    e.1.push(xn.bits());
                }
            }
        }
        Ok(counts)
    }

    fn check_outbox(&self) -> Result<(), ProtocolError> {
        for (&peer, (q, _)) in &self.round.outbox {
            if self.topo.remote_ranks().binary_search(&peer).is_err() {
                return Err(ProtocolError::Unscheduled {
                    rank: self.rank(),
                    peer,
                    count: q.len(),
                });
            }
        }
        Ok(())
    }

    fn take_max_writes(&mut self) -> (u32, u64) {
        let w = std::mem::take(&mut self.round.writes);
        (
            w.values().copied().max().unwrap_or(0),
            w.values().map(|&v| v as u64).sum(),
        )
    }

    pub(crate) fn finish_central(&mut self) -> Result<(), ProtocolError> {
        for gid in std::mem::take(&mut self.round.deleting) {
            self.topo.remove(gid)?;
        }
        self.end_round();
        Ok(())
    }

    fn end_round(&mut self) {
        self.round = RoundState::default();
        self.topo.rebuild_remote_ranks();
    }
}

type Program = for<'a> fn(&'a mut RankNode, Endpoint<'a>, CommSchedule) -> RankTask<'a, ProtocolError>;

fn refine_delete_program<'a>(
    node: &'a mut RankNode,
    ep: Endpoint<'a>,
    sched: CommSchedule,
) -> RankTask<'a, ProtocolError> {
    Box::pin(async move {
        for step in sched.steps {
            match step {
                CommStep::Send(p) => {
                    let (words, issuers) = node.topo.take_queries(p);
                    ep.send_words(p, Channel::QueryVector, &words).await?;
                    let nv = ep.recv_words(p, Channel::NeighbourVector).await?;
                    let converse = node.apply_neighbours(p, &words, &issuers, &nv)?;
                    ep.send_words(p, Channel::NeighbourVector, &converse).await?;
                }
                CommStep::Recv(p) => {
                    let words = ep.recv_words(p, Channel::QueryVector).await?;
                    let (nv, positives) = node.answer_queries(p, &words)?;
                    ep.send_words(p, Channel::NeighbourVector, &nv).await?;
                    let converse = ep.recv_words(p, Channel::NeighbourVector).await?;
                    node.apply_converse(p, &positives, &converse)?;
                }
                CommStep::LocalUpdate => node.local_update()?,
            }
        }
        Ok(())
    })
}

fn update_program<'a>(node: &'a mut RankNode, ep: Endpoint<'a>, sched: CommSchedule) -> RankTask<'a, ProtocolError> {
    Box::pin(async move {
        for step in sched.steps {
            match step {
                CommStep::Send(p) => {
                    let (queries, uids) = node.round.outbox.remove(&p).unwrap_or_default();
                    ep.send_words(p, Channel::UpdateQueries, &queries).await?;
                    ep.send_words(p, Channel::NewUids, &uids).await?;
                }
                CommStep::Recv(p) => {
                    let queries = ep.recv_words(p, Channel::UpdateQueries).await?;
                    let uids = ep.recv_words(p, Channel::NewUids).await?;
                    if queries.len() != uids.len() {
                        return Err(node.malformed(p, Channel::NewUids, "update queries and UIDs differ in length"));
                    }
                    for (q, u) in queries.into_iter().zip(uids) {
                        node.apply_update(p, Query::decode(q)?, GridUid::from_bits(u))?;
                    }
                }
                CommStep::LocalUpdate => {}
            }
        }
        Ok(())
    })
}

fn migration_program<'a>(node: &'a mut RankNode, ep: Endpoint<'a>, sched: CommSchedule) -> RankTask<'a, ProtocolError> {
    Box::pin(async move {
        for step in sched.steps {
            match step {
                CommStep::Send(p) => {
                    let hulls = node.round.outgoing.remove(&p).unwrap_or_default();
                    ep.send(p, Channel::MigrationGrids, encode_hulls(&hulls)).await?;
                    let uids = ep.recv_words(p, Channel::NewUids).await?;
                    if uids.len() != hulls.len() {
                        return Err(node.malformed(p, Channel::NewUids, "UID count differs from grids sent"));
                    }
                    for (h, u) in hulls.iter().zip(uids) {
                        node.topo.add_tombstone(h.uid.gid(), GridUid::from_bits(u));
                    }
                }
                CommStep::Recv(p) => {
                    let env = ep.recv(p, Channel::MigrationGrids).await?;
                    let uids = node.adopt(decode_hulls(&env.payload)?)?;
                    let bits: Vec<u64> = uids.iter().map(|u| u.bits()).collect();
                    ep.send_words(p, Channel::NewUids, &bits).await?;
                }
                CommStep::LocalUpdate => {}
            }
        }
        Ok(())
    })
}

/// All ranks of one simulation plus the transport they share.
#[derive(Debug)]
pub struct Cluster {
    pub(crate) spec: DomainSpec,
    pub(crate) nodes: Vec<RankNode>,
    pub(crate) transport: Transport,
    pub(crate) exec: ExecMode,
    pub(crate) cycle: u64,
    pub(crate) fanout: FanoutStats,
}

impl Cluster {
    pub fn new(spec: DomainSpec, topologies: Vec<RankTopology>, mode: TransportMode) -> Self {
        let n = topologies.len();
        Cluster {
            spec,
            nodes: topologies.into_iter().map(RankNode::new).collect(),
            transport: Transport::new(n, mode),
            exec: ExecMode::RoundRobin,
            cycle: 0,
            fanout: FanoutStats::default(),
        }
    }

    pub fn with_exec(mut self, exec: ExecMode) -> Self {
        self.exec = exec;
        self
    }

    pub fn set_mode(&mut self, mode: TransportMode) {
        self.transport.set_mode(mode);
    }

    pub fn spec(&self) -> &DomainSpec {
        &self.spec
    }

    pub fn ranks(&self) -> usize {
        self.nodes.len()
    }

    pub fn cycles_run(&self) -> u64 {
        self.cycle
    }

    pub fn topology(&self, rank: Rank) -> &RankTopology {
        &self.nodes[rank as usize].topo
    }

    pub fn topologies(&self) -> impl Iterator<Item = &RankTopology> {
        self.nodes.iter().map(|n| &n.topo)
    }

    pub fn grid_count(&self) -> usize {
        self.nodes.iter().map(|n| n.topo.len()).sum()
    }

    pub fn fanout(&self) -> &FanoutStats {
        &self.fanout
    }

    pub fn dumps(&self) -> Vec<Vec<DumpRecord>> {
        self.nodes.iter().map(|n| n.topo.dump()).collect()
    }

    pub fn dumps_jsonl(&self) -> Vec<String> {
        self.nodes.iter().map(|n| n.topo.dump_jsonl()).collect()
    }

    pub(crate) fn node_mut(&mut self, rank: Rank) -> Result<&mut RankNode, ProtocolError> {
        self.nodes.get_mut(rank as usize).ok_or(ProtocolError::NoSuchRank(rank))
    }

    pub fn issue_refine(&mut self, rank: Rank, gid: u32) -> Result<Vec<GridUid>, ProtocolError> {
        let spec = self.spec;
        let (kids, queued) = self.node_mut(rank)?.issue_refine(&spec, gid)?;
        self.fanout.refinements += 1;
        self.fanout.max_refine_queries = self.fanout.max_refine_queries.max(queued);
        Ok(kids)
    }

    pub fn issue_delete(&mut self, rank: Rank, gid: u32) -> Result<(), ProtocolError> {
        let spec = self.spec;
        let queued = self.node_mut(rank)?.issue_delete(&spec, gid)?;
        self.fanout.deletions += 1;
        self.fanout.max_delete_queries = self.fanout.max_delete_queries.max(queued);
        Ok(())
    }

    /// Checks a whole batch against the current state without changing it.
    pub fn validate_batch(&self, batch: &RoundBatch) -> Result<(), ProtocolError> {
        let mut seen = HashSet::new();
        for it in &batch.intents {
            let node = self
                .nodes
                .get(it.rank as usize)
                .ok_or(ProtocolError::NoSuchRank(it.rank))?;
            node.check_intent(&self.spec, it.gid, it.op)?;
            if !seen.insert((it.rank, it.gid)) {
                return Err(ProtocolError::DuplicateIntent {
                    rank: it.rank,
                    gid: it.gid,
                });
            }
        }
        Ok(())
    }

    pub fn issue_batch(&mut self, batch: &RoundBatch) -> Result<(), ProtocolError> {
        self.validate_batch(batch)?;
        for it in &batch.intents {
            match it.op {
                Op::Refine => {
                    self.issue_refine(it.rank, it.gid)?;
                }
                Op::Delete => self.issue_delete(it.rank, it.gid)?,
            }
        }
        Ok(())
    }

    fn run_program(&mut self, program: Program) -> Result<TrafficStats, ProtocolError> {
        let schedules = self
            .nodes
            .iter()
            .map(|n| build_pattern(n.rank(), n.topo.remote_ranks()))
            .collect::<Result<Vec<_>, _>>()?;
        let transport = &self.transport;
        let tasks = self
            .nodes
            .iter_mut()
            .zip(schedules)
            .map(|(node, sched)| {
                let r = node.rank();
                (r, program(node, transport.endpoint(r), sched))
            })
            .collect();
        let stats = transport.run_cycle(self.cycle, tasks, self.exec)?;
        self.cycle += 1;
        for node in &mut self.nodes {
            let (max, total) = node.take_max_writes();
            self.fanout.max_link_writes = self.fanout.max_link_writes.max(max);
            self.fanout.link_writes += total;
        }
        Ok(stats)
    }

    /// Runs the refine/delete cycle for the queries issued so far, then the
    /// forwarding cycle, and rebuilds every rank's peer list.
    pub fn run_refine_delete_cycle(&mut self) -> Result<Vec<TrafficStats>, ProtocolError> {
        let first = self.run_program(refine_delete_program)?;
        for node in &mut self.nodes {
            node.finish_refine_delete()?;
            node.check_outbox()?;
        }
        let second = self.run_program(update_program)?;
        for node in &mut self.nodes {
            node.end_round();
        }
        Ok(vec![first, second])
    }

    pub(crate) fn validate_plans(&self, plans: &Plans) -> Result<(), ProtocolError> {
        let mut moving: HashMap<GridUid, Rank> = HashMap::new();
        for (&origin, plan) in plans {
            let node = self
                .nodes
                .get(origin as usize)
                .ok_or(ProtocolError::NoSuchRank(origin))?;
            for &(gid, target) in &plan.moves {
                let err = |reason: String| ProtocolError::Plan { origin, reason };
                if target == origin || node.topo.remote_ranks().binary_search(&target).is_err() {
                    return Err(err(format!("target {target} of grid {gid} is not a current peer")));
                }
                let uid = node.topo.grid(gid).map_err(|_| err(format!("no grid {gid}")))?.uid;
                if moving.insert(uid, origin).is_some() {
                    return Err(err(format!("grid {gid} planned twice")));
                }
            }
        }
        for (&origin, plan) in plans {
            let topo = &self.nodes[origin as usize].topo;
            for &(gid, _) in &plan.moves {
                for link in topo.grid(gid)?.links() {
                    if let Some(&other) = moving.get(&link).filter(|&&o| o != origin) {
                        return Err(ProtocolError::Plan {
                            origin,
                            reason: format!("grid {gid} is linked to {link}, which rank {other} also moves"),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Moves grids per `plans` in two cycles and rebuilds peer lists.
    pub fn run_migration_round(&mut self, plans: &Plans) -> Result<Vec<TrafficStats>, ProtocolError> {
        self.validate_plans(plans)?;
        for (&origin, plan) in plans {
            self.nodes[origin as usize].prepare_migration(plan)?;
            self.fanout.migrations += plan.moves.len() as u64;
        }
        let first = self.run_program(migration_program)?;
        for node in &mut self.nodes {
            let counts = node.build_updates()?;
            node.check_outbox()?;
            if let Some(&m) = counts.iter().max() {
                self.fanout.max_migrate_queries = self.fanout.max_migrate_queries.max(m);
            }
        }
        let second = self.run_program(update_program)?;
        for node in &mut self.nodes {
            node.end_round();
        }
        Ok(vec![first, second])
    }

    pub fn loads(&self) -> Vec<usize> {
        self.nodes.iter().map(|n| n.topo.len()).collect()
    }

    pub fn plan_migrations(&self, balancer: &mut dyn Balancer) -> Plans {
        let loads = self.loads();
        let mut plans = Plans::new();
        for node in &self.nodes {
            let plan = balancer.plan(&LoadView {
                topology: &node.topo,
                loads: &loads,
            });
            if !plan.moves.is_empty() {
                plans.insert(node.rank(), plan);
            }
        }
        plans
    }

    /// Refine/delete and forwarding cycles, balancing, then both migration
    /// cycles.
    pub fn run_full_round(
        &mut self,
        batch: &RoundBatch,
        balancer: &mut dyn Balancer,
    ) -> Result<RoundReport, ProtocolError> {
        let before = self.fanout;
        self.fanout = FanoutStats::default();
        let result = self.full_round_inner(batch, balancer);
        let this = self.fanout;
        self.fanout = before;
        self.fanout.merge(&this);
        let (traffic, plans) = result?;
        Ok(RoundReport {
            traffic,
            plans,
            fanout: this,
        })
    }

    fn full_round_inner(
        &mut self,
        batch: &RoundBatch,
        balancer: &mut dyn Balancer,
    ) -> Result<(Vec<TrafficStats>, Plans), ProtocolError> {
        self.issue_batch(batch)?;
        let mut traffic = self.run_refine_delete_cycle()?;
        let plans = self.plan_migrations(balancer);
        traffic.extend(self.run_migration_round(&plans)?);
        Ok((traffic, plans))
    }
}

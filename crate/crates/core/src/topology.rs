//! One rank's local view of the domain.
//!
//! A rank only knows the grids it owns plus the UIDs those grids link to. The
//! set of ranks owning any linked grid is the remote-rank list, and it is the
//! only set of peers the rank ever exchanges messages with.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::codec::{GridUid, PositionHash, Query, Rank, MAX_GID};
use crate::spacetree::{DumpRecord, GridHull, GridRecord, RankRecord, RefinementFactor, TreeError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("rank {rank} exhausted its grid identifiers")]
    Capacity { rank: Rank },
    #[error("rank {rank} has no link to peer {peer}")]
    UnknownPeer { rank: Rank, peer: Rank },
    #[error("rank {rank} owns no grid with gid {gid}")]
    UnknownGrid { rank: Rank, gid: u32 },
    #[error("grid {uid} does not belong to rank {rank}")]
    ForeignUid { rank: Rank, uid: GridUid },
    #[error("gid {gid} is already registered on rank {rank}")]
    DuplicateGid { rank: Rank, gid: u32 },
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// Local domain view of one rank.
#[derive(Debug, Clone)]
pub struct RankTopology {
    rank: Rank,
    factor: RefinementFactor,
    registry: BTreeMap<u32, GridHull>,
    next_gid: u32,
    remote_ranks: Vec<Rank>,
    query_vectors: BTreeMap<Rank, Vec<u64>>,
    /// Local gid that issued each query, aligned with `query_vectors`.
    query_issuers: BTreeMap<Rank, Vec<u32>>,
    pending_neighbour_vectors: BTreeMap<Rank, Vec<GridUid>>,
    /// Forwarding entries for grids migrated away during the current round.
    tombstones: BTreeMap<u32, GridUid>,
}

impl RankTopology {
    pub fn new(rank: Rank, factor: RefinementFactor) -> Self {
        RankTopology {
            rank,
            factor,
            registry: BTreeMap::new(),
            next_gid: 0,
            remote_ranks: Vec::new(),
            query_vectors: BTreeMap::new(),
            query_issuers: BTreeMap::new(),
            pending_neighbour_vectors: BTreeMap::new(),
            tombstones: BTreeMap::new(),
        }
    }

    pub fn rank(&self) -> Rank {
        self.rank
    }

    pub fn factor(&self) -> RefinementFactor {
        self.factor
    }

    pub fn next_gid(&self) -> u32 {
        self.next_gid
    }

    pub fn len(&self) -> usize {
        self.registry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.registry.is_empty()
    }

    pub fn remote_ranks(&self) -> &[Rank] {
        &self.remote_ranks
    }

    pub fn grids(&self) -> impl Iterator<Item = &GridHull> {
        self.registry.values()
    }

    pub fn gids(&self) -> impl Iterator<Item = u32> + '_ {
        self.registry.keys().copied()
    }

    pub fn grid(&self, gid: u32) -> Result<&GridHull, TopologyError> {
        self.registry
            .get(&gid)
            .ok_or(TopologyError::UnknownGrid { rank: self.rank, gid })
    }

    pub fn grid_mut(&mut self, gid: u32) -> Result<&mut GridHull, TopologyError> {
        let rank = self.rank;
        self.registry
            .get_mut(&gid)
            .ok_or(TopologyError::UnknownGrid { rank, gid })
    }

    pub fn contains(&self, gid: u32) -> bool {
        self.registry.contains_key(&gid)
    }

    /// Resolves a UID that must be owned by this rank.
    pub fn local(&self, uid: GridUid) -> Result<&GridHull, TopologyError> {
        if uid.rank() != self.rank {
            return Err(TopologyError::ForeignUid { rank: self.rank, uid });
        }
        self.grid(uid.gid())
    }

    /// Reserves the next gid and builds the UID for a grid at `hash`.
    pub fn allocate_uid(&mut self, hash: PositionHash) -> Result<GridUid, TopologyError> {
        if self.next_gid > MAX_GID {
            return Err(TopologyError::Capacity { rank: self.rank });
        }
        let uid = GridUid::new(self.rank, self.next_gid, hash).map_err(TreeError::from)?;
        self.next_gid += 1;
        Ok(uid)
    }

    /// Stores `hull` under a fresh gid and returns its new UID.
    pub fn register_grid(&mut self, mut hull: GridHull) -> Result<GridUid, TopologyError> {
        let uid = self.allocate_uid(hull.coord.position(self.factor))?;
        hull.uid = uid;
        self.registry.insert(uid.gid(), hull);
        Ok(uid)
    }

    /// Stores a hull whose UID was assigned elsewhere (initial distribution,
    /// local subdivision). Advances the gid counter past it.
    pub fn insert_assigned(&mut self, hull: GridHull) -> Result<(), TopologyError> {
        let uid = hull.uid;
        if uid.rank() != self.rank {
            return Err(TopologyError::ForeignUid { rank: self.rank, uid });
        }
        if self.registry.contains_key(&uid.gid()) {
            return Err(TopologyError::DuplicateGid {
                rank: self.rank,
                gid: uid.gid(),
            });
        }
        self.next_gid = self.next_gid.max(uid.gid() + 1);
        self.registry.insert(uid.gid(), hull);
        Ok(())
    }

    pub fn remove(&mut self, gid: u32) -> Result<GridHull, TopologyError> {
        let rank = self.rank;
        self.registry
            .remove(&gid)
            .ok_or(TopologyError::UnknownGrid { rank, gid })
    }

    /// Appends a query for `peer`, which may be this rank itself.
    pub fn enqueue_query(&mut self, peer: Rank, query: Query, issuer: u32) -> Result<(), TopologyError> {
        if peer != self.rank && self.remote_ranks.binary_search(&peer).is_err() {
            return Err(TopologyError::UnknownPeer { rank: self.rank, peer });
        }
        self.query_vectors.entry(peer).or_default().push(query.encode());
        self.query_issuers.entry(peer).or_default().push(issuer);
        Ok(())
    }

    pub fn query_vector(&self, peer: Rank) -> &[u64] {
        self.query_vectors.get(&peer).map_or(&[], Vec::as_slice)
    }

    pub fn query_issuers(&self, peer: Rank) -> &[u32] {
        self.query_issuers.get(&peer).map_or(&[], Vec::as_slice)
    }

    /// Removes the first query to `peer` equal to `word`; true if one was found.
    pub fn erase_query(&mut self, peer: Rank, word: u64) -> bool {
        let Some(v) = self.query_vectors.get_mut(&peer) else {
            return false;
        };
        match v.iter().position(|&w| w == word) {
            Some(i) => {
                v.remove(i);
                self.query_issuers.get_mut(&peer).unwrap().remove(i);
                true
            }
            None => false,
        }
    }

    /// Takes the queued queries and their issuers for `peer`.
    pub fn take_queries(&mut self, peer: Rank) -> (Vec<u64>, Vec<u32>) {
        (
            self.query_vectors.remove(&peer).unwrap_or_default(),
            self.query_issuers.remove(&peer).unwrap_or_default(),
        )
    }

    pub fn pending_queries(&self) -> usize {
        self.query_vectors.values().map(Vec::len).sum()
    }

    pub fn neighbour_vector_mut(&mut self, peer: Rank) -> &mut Vec<GridUid> {
        self.pending_neighbour_vectors.entry(peer).or_default()
    }

    pub fn take_neighbour_vector(&mut self, peer: Rank) -> Vec<GridUid> {
        self.pending_neighbour_vectors.remove(&peer).unwrap_or_default()
    }

    pub fn add_tombstone(&mut self, old_gid: u32, new_uid: GridUid) {
        self.tombstones.insert(old_gid, new_uid);
    }

    pub fn tombstone(&self, old_gid: u32) -> Option<GridUid> {
        self.tombstones.get(&old_gid).copied()
    }

    /// Ranks other than this one referenced by any local link, ascending.
    pub fn linked_ranks(&self) -> Vec<Rank> {
        let set: BTreeSet<Rank> = self
            .registry
            .values()
            .flat_map(GridHull::links)
            .map(GridUid::rank)
            .filter(|&r| r != self.rank)
            .collect();
        set.into_iter().collect()
    }

    /// Recomputes the remote-rank list from scratch and drops forwarding state.
    pub fn rebuild_remote_ranks(&mut self) -> &[Rank] {
        self.remote_ranks = self.linked_ranks();
        self.tombstones.clear();
        &self.remote_ranks
    }

    pub fn dump(&self) -> Vec<DumpRecord> {
        let mut out = Vec::with_capacity(self.registry.len() + 1);
        out.push(DumpRecord::Rank(RankRecord {
            rank: self.rank,
            factor: self.factor,
            next_gid: self.next_gid,
            remote_ranks: self.remote_ranks.clone(),
        }));
        out.extend(self.registry.values().map(|h| DumpRecord::Grid(GridRecord::from(h))));
        out
    }

    /// Dump as JSON lines, one record per line.
    pub fn dump_jsonl(&self) -> String {
        let mut s = String::new();
        for rec in self.dump() {
            s.push_str(&serde_json::to_string(&rec).expect("dump records serialize"));
            s.push('\n');
        }
        s
    }

    #[cfg(test)]
    pub(crate) fn set_next_gid(&mut self, gid: u32) {
        self.next_gid = gid;
    }
}

//! Ordered pairwise communication patterns.
//!
//! Each rank walks its sorted remote-rank list: for every lower peer it
//! receives first and then sends, it handles its own local queries, and for
//! every higher peer it sends first and then receives. Under blocking
//! rendezvous semantics this cannot deadlock: the lowest rank still waiting
//! always finds its partner ready.
//!
//! The stage view runs all ranks' sequences in lockstep, one pairwise exchange
//! per rank per stage. [`join_stages`] then packs later stages into earlier
//! ones where every rank involved is idle.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::codec::Rank;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScheduleError {
    #[error("remote ranks of rank {rank} are not strictly ascending: {peers:?}")]
    Unsorted { rank: Rank, peers: Vec<Rank> },
    #[error("rank {0} lists itself as a peer")]
    SelfPeer(Rank),
    #[error("schedules do not pair up: ranks {0:?} wait on each other")]
    Unmatched(Vec<Rank>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CommStep {
    /// Act as the receiving side of an exchange with the peer.
    Recv(Rank),
    /// Act as the sending side of an exchange with the peer.
    Send(Rank),
    LocalUpdate,
}

impl CommStep {
    pub fn peer(self) -> Option<Rank> {
        match self {
            CommStep::Recv(p) | CommStep::Send(p) => Some(p),
            CommStep::LocalUpdate => None,
        }
    }
}

/// One rank's ordered steps for a communication cycle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommSchedule {
    pub rank: Rank,
    pub steps: Vec<CommStep>,
}

impl CommSchedule {
    /// Peers in the order their exchanges happen.
    pub fn exchange_order(&self) -> Vec<Rank> {
        let mut order: Vec<Rank> = Vec::new();
        for p in self.steps.iter().filter_map(|s| s.peer()) {
            if order.last() != Some(&p) {
                order.push(p);
            }
        }
        order
    }
}

pub fn build_pattern(rank: Rank, remote_ranks: &[Rank]) -> Result<CommSchedule, ScheduleError> {
    if remote_ranks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ScheduleError::Unsorted {
            rank,
            peers: remote_ranks.to_vec(),
        });
    }
    if remote_ranks.contains(&rank) {
        return Err(ScheduleError::SelfPeer(rank));
    }
    let mut steps = Vec::with_capacity(2 * remote_ranks.len() + 1);
    let split = remote_ranks.partition_point(|&p| p < rank);
    for &p in &remote_ranks[..split] {
        steps.push(CommStep::Recv(p));
        steps.push(CommStep::Send(p));
    }
    steps.push(CommStep::LocalUpdate);
    for &p in &remote_ranks[split..] {
        steps.push(CommStep::Send(p));
        steps.push(CommStep::Recv(p));
    }
    Ok(CommSchedule { rank, steps })
}

/// Per-rank sorted peer lists from a set of unordered pairs.
pub fn peers_from_pairs(pairs: &BTreeSet<(Rank, Rank)>) -> BTreeMap<Rank, Vec<Rank>> {
    let mut peers: BTreeMap<Rank, BTreeSet<Rank>> = BTreeMap::new();
    for &(a, b) in pairs {
        if a == b {
            continue;
        }
        peers.entry(a).or_default().insert(b);
        peers.entry(b).or_default().insert(a);
    }
    peers.into_iter().map(|(r, s)| (r, s.into_iter().collect())).collect()
}

/// Normalizes pairs to `(low, high)` and drops self pairs.
pub fn normalize_pairs(pairs: impl IntoIterator<Item = (Rank, Rank)>) -> BTreeSet<(Rank, Rank)> {
    pairs
        .into_iter()
        .filter(|(a, b)| a != b)
        .map(|(a, b)| (a.min(b), a.max(b)))
        .collect()
}

/// One row of a stage table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stage {
    /// 1-based lockstep stage numbers folded into this row.
    pub merged: Vec<usize>,
    /// `(low, high)` pairs exchanging in this stage.
    pub pairs: Vec<(Rank, Rank)>,
}

impl Stage {
    pub fn busy(&self) -> BTreeSet<Rank> {
        self.pairs.iter().flat_map(|&(a, b)| [a, b]).collect()
    }

    pub fn partner(&self, rank: Rank) -> Option<Rank> {
        self.pairs.iter().find_map(|&(a, b)| {
            if a == rank {
                Some(b)
            } else if b == rank {
                Some(a)
            } else {
                None
            }
        })
    }

    pub fn label(&self) -> String {
        self.merged
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(" & ")
    }
}

/// Ranks as columns, stages as rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageTable {
    pub ranks: Vec<Rank>,
    pub stages: Vec<Stage>,
}

impl StageTable {
    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// Cell view: `cells()[stage][column]` is the partner of that rank.
    pub fn cells(&self) -> Vec<Vec<Option<Rank>>> {
        self.stages
            .iter()
            .map(|s| self.ranks.iter().map(|&r| s.partner(r)).collect())
            .collect()
    }

    /// Steps of one rank when following this table stage by stage.
    pub fn rank_schedule(&self, rank: Rank) -> CommSchedule {
        let mut steps = Vec::new();
        for s in &self.stages {
            if let Some(p) = s.partner(rank) {
                if p > rank {
                    steps.extend([CommStep::Send(p), CommStep::Recv(p)]);
                } else {
                    steps.extend([CommStep::Recv(p), CommStep::Send(p)]);
                }
            }
        }
        steps.push(CommStep::LocalUpdate);
        CommSchedule { rank, steps }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage");
        for r in &self.ranks {
            let _ = write!(out, ",{r}");
        }
        out.push('\n');
        for (row, s) in self.cells().iter().zip(&self.stages) {
            out.push_str(&s.label());
            for cell in row {
                match cell {
                    Some(p) => {
                        let _ = write!(out, ",{p}");
                    }
                    None => out.push_str(",-"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Lockstep execution: in each stage every rank whose next partner also
/// points back at it performs that exchange.
pub fn stage_table(schedules: &[CommSchedule]) -> Result<StageTable, ScheduleError> {
    let mut ranks: Vec<Rank> = schedules.iter().map(|s| s.rank).collect();
    ranks.sort_unstable();
    let mut queues: BTreeMap<Rank, std::collections::VecDeque<Rank>> =
        schedules.iter().map(|s| (s.rank, s.exchange_order().into())).collect();
    let mut stages = Vec::new();
    loop {
        let waiting: Vec<Rank> = queues.iter().filter(|(_, q)| !q.is_empty()).map(|(&r, _)| r).collect();
        if waiting.is_empty() {
            break;
        }
        let mut pairs = Vec::new();
        for &r in &waiting {
            let p = queues[&r][0];
            if p > r && queues.get(&p).and_then(|q| q.front()) == Some(&r) {
                pairs.push((r, p));
            }
        }
        if pairs.is_empty() {
            return Err(ScheduleError::Unmatched(waiting));
        }
        for &(a, b) in &pairs {
            queues.get_mut(&a).unwrap().pop_front();
            queues.get_mut(&b).unwrap().pop_front();
        }
        stages.push(Stage {
            merged: vec![stages.len() + 1],
            pairs,
        });
    }
    Ok(StageTable { ranks, stages })
}

/// Stage table of the plain ordered pattern for a pair set.
pub fn regular_stages(pairs: &BTreeSet<(Rank, Rank)>) -> Result<StageTable, ScheduleError> {
    let schedules = peers_from_pairs(pairs)
        .iter()
        .map(|(&r, peers)| build_pattern(r, peers))
        .collect::<Result<Vec<_>, _>>()?;
    stage_table(&schedules)
}

/// Greedy stage joining: walk the lockstep stages in order and fold each one
/// into the earliest kept stage in which all of its ranks are idle.
pub fn join_stages(pairs: &BTreeSet<(Rank, Rank)>) -> Result<StageTable, ScheduleError> {
    let regular = regular_stages(pairs)?;
    let mut joined: Vec<Stage> = Vec::with_capacity(regular.stages.len());
    for stage in regular.stages {
        let busy = stage.busy();
        match joined.iter_mut().find(|s| s.busy().is_disjoint(&busy)) {
            Some(target) => {
                target.merged.extend(stage.merged);
                target.pairs.extend(stage.pairs);
            }
            None => joined.push(stage),
        }
    }
    Ok(StageTable {
        ranks: regular.ranks,
        stages: joined,
    })
}

/// Largest number of pairs any single rank takes part in.
pub fn max_degree(pairs: &BTreeSet<(Rank, Rank)>) -> usize {
    peers_from_pairs(pairs).values().map(Vec::len).max().unwrap_or(0)
}

//! Scenario driver: initial distribution, global consistency checking,
//! refinement benchmarks, randomized rounds and replayable scenario files.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::central_baseline::CentralCluster;
use crate::codec::{Direction, GridUid, Rank};
use crate::protocol::{
    Balancer, Cluster, FanoutStats, LoadView, MigrationPlan, Op, Plans, ProtocolError, RoundBatch, RoundReport,
    ScriptedBalancer,
};
use crate::spacetree::{
    indexed_neighbors, neighbor_oracle, partition, uniform_grid_count, DomainSpec, DumpRecord, GridCoord, GridHull,
    GridRecord, RefinementFactor, Scheme, SpaceTree, TreeError,
};
use crate::topology::{RankTopology, TopologyError};
use crate::transport::{
    decode_hulls, encode_hulls, CostModel, ExecMode, RankTask, TrafficStats, Transport, TransportError, TransportMode,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("dump format: {0}")]
    Format(String),
    #[error("scenario line {line}: {reason}")]
    Scenario { line: usize, reason: String },
    #[error("at least one round is required")]
    NoRounds,
    #[error("expected {expected} grids, found {found}")]
    GridCount { expected: u64, found: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Decentral,
    Central,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Decentral => "decentral",
            Mode::Central => "central",
        })
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "decentral" => Ok(Mode::Decentral),
            "central" => Ok(Mode::Central),
            _ => Err(format!("unknown mode {s:?}")),
        }
    }
}

fn scheme_name(s: Scheme) -> &'static str {
    match s {
        Scheme::Morton => "morton",
        Scheme::DepthFirst => "depth-first",
    }
}

pub fn parse_scheme(s: &str) -> Result<Scheme, String> {
    match s {
        "morton" => Ok(Scheme::Morton),
        "depth-first" => Ok(Scheme::DepthFirst),
        _ => Err(format!("unknown scheme {s:?}")),
    }
}

pub fn parse_transport(s: &str) -> Result<TransportMode, String> {
    match s.split_once(':') {
        None if s == "rendezvous" => Ok(TransportMode::Rendezvous),
        Some(("buffered", b)) => b
            .parse()
            .map(|budget| TransportMode::Buffered { budget })
            .map_err(|e| format!("bad buffer budget {b:?}: {e}")),
        _ => Err(format!("unknown transport {s:?}")),
    }
}

pub fn transport_name(m: TransportMode) -> String {
    match m {
        TransportMode::Rendezvous => "rendezvous".into(),
        TransportMode::Buffered { budget } => format!("buffered:{budget}"),
    }
}

#[derive(Debug, Clone)]
pub struct Distribution {
    pub topologies: Vec<RankTopology>,
    /// Traffic of shipping the hulls from rank 0.
    pub traffic: TrafficStats,
}

/// Builds the uniform tree on rank 0, orders it along `scheme`, cuts it into
/// `ranks` contiguous slices and ships each slice with links already
/// rewritten to the final UIDs. Every rank then attaches grid geometry.
pub fn initial_distribute(
    spec: &DomainSpec,
    depth: u8,
    ranks: usize,
    scheme: Scheme,
) -> Result<Distribution, HarnessError> {
    if ranks == 0 {
        return Err(TreeError::NoRanks.into());
    }
    let tree = SpaceTree::build_uniform(*spec, depth)?;
    let order = tree.linearize(scheme);
    let slices = partition(order.len(), ranks)?;
    let mut uid = vec![GridUid::from_bits(0); tree.len()];
    for (r, range) in slices.iter().enumerate() {
        for (g, &id) in order[range.clone()].iter().enumerate() {
            uid[id] = GridUid::new(r as Rank, g as u32, tree.node(id).hash).map_err(TreeError::from)?;
        }
    }
    let index = tree.coord_index();
    let factor = spec.factor;
    let batches: Vec<Vec<GridHull>> = slices
        .iter()
        .map(|range| {
            order[range.clone()]
                .iter()
                .map(|&id| {
                    let n = tree.node(id);
                    let mut h = GridHull::new(uid[id], n.coord, n.parent.map(|p| uid[p]));
                    h.children = n.children.iter().map(|&c| Some(uid[c])).collect();
                    h.neighbors = indexed_neighbors(&n.coord, factor, &index).map(|o| o.map(|i| uid[i]));
                    h
                })
                .collect()
        })
        .collect();

    let transport = Transport::new(ranks, TransportMode::Rendezvous);
    let mut received: Vec<Vec<GridHull>> = vec![Vec::new(); ranks];
    let mut batches = batches.into_iter();
    received[0] = batches.next().unwrap();
    let outgoing: Vec<Vec<GridHull>> = batches.collect();
    {
        let (_, rest) = received.split_first_mut().unwrap();
        let ep0 = transport.endpoint(0);
        let mut tasks: Vec<(Rank, RankTask<'_, TransportError>)> = vec![(
            0,
            Box::pin(async move {
                for (i, b) in outgoing.iter().enumerate() {
                    ep0.send(
                        i as Rank + 1,
                        crate::transport::Channel::MigrationGrids,
                        encode_hulls(b),
                    )
                    .await?;
                }
                Ok(())
            }),
        )];
        for (i, slot) in rest.iter_mut().enumerate() {
            let r = i as Rank + 1;
            let ep = transport.endpoint(r);
            tasks.push((
                r,
                Box::pin(async move {
                    let env = ep.recv(0, crate::transport::Channel::MigrationGrids).await?;
                    *slot = decode_hulls(&env.payload)?;
                    Ok(())
                }),
            ));
        }
        let traffic = transport.run_cycle(0, tasks, ExecMode::RoundRobin)?;
        let mut topologies = Vec::with_capacity(ranks);
        for (r, hulls) in received.into_iter().enumerate() {
            let mut t = RankTopology::new(r as Rank, factor);
            for mut h in hulls {
                h.payload = spec.geometry_blob(&h.coord);
                t.insert_assigned(h)?;
            }
            t.rebuild_remote_ranks();
            topologies.push(t);
        }
        Ok(Distribution { topologies, traffic })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    MissingRoot,
    DuplicateUid,
    DuplicateCoord {
        other: GridUid,
    },
    Ownership {
        holder: Rank,
    },
    StaleGid {
        next_gid: u32,
    },
    MissingParent,
    Neighbor {
        dir: Direction,
        expected: Option<GridUid>,
        found: Option<GridUid>,
    },
    AsymmetricNeighbor {
        dir: Direction,
        partner: GridUid,
    },
    Parent {
        expected: Option<GridUid>,
        found: Option<GridUid>,
    },
    ChildCount {
        expected: usize,
        found: usize,
    },
    Child {
        slot: usize,
        expected: Option<GridUid>,
        found: Option<GridUid>,
    },
    RemoteRanks {
        expected: Vec<Rank>,
        found: Vec<Rank>,
    },
    FactorMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Rank whose dump holds the offending record.
    pub rank: Rank,
    pub uid: Option<GridUid>,
    pub coord: Option<GridCoord>,
    pub kind: ViolationKind,
}

fn opt(u: &Option<GridUid>) -> String {
    u.map_or("none".into(), |u| u.to_string())
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rank {}", self.rank)?;
        if let Some(u) = self.uid {
            write!(f, " grid {u}")?;
        }
        if let Some(c) = self.coord {
            write!(f, " at depth {} index {:?}", c.depth, c.index)?;
        }
        f.write_str(": ")?;
        match &self.kind {
            ViolationKind::MissingRoot => write!(f, "no root grid"),
            ViolationKind::DuplicateUid => write!(f, "UID appears more than once"),
            ViolationKind::DuplicateCoord { other } => write!(f, "same cell as {other}"),
            ViolationKind::Ownership { holder } => write!(f, "held by rank {holder}, UID names another rank"),
            ViolationKind::StaleGid { next_gid } => write!(f, "gid not below next_gid {next_gid}"),
            ViolationKind::MissingParent => write!(f, "parent cell is missing"),
            ViolationKind::Neighbor { dir, expected, found } => {
                write!(f, "{dir} neighbour is {} but should be {}", opt(found), opt(expected))
            }
            ViolationKind::AsymmetricNeighbor { dir, partner } => {
                write!(f, "{dir} neighbour {partner} does not link back")
            }
            ViolationKind::Parent { expected, found } => {
                write!(f, "parent is {} but should be {}", opt(found), opt(expected))
            }
            ViolationKind::ChildCount { expected, found } => {
                write!(f, "{found} child slots, expected {expected}")
            }
            ViolationKind::Child { slot, expected, found } => {
                write!(f, "child slot {slot} is {} but should be {}", opt(found), opt(expected))
            }
            ViolationKind::RemoteRanks { expected, found } => {
                write!(f, "remote ranks {found:?}, links name {expected:?}")
            }
            ViolationKind::FactorMismatch => write!(f, "refinement factor differs from rank 0"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConsistencyReport {
    pub grids: usize,
    pub violations: Vec<Violation>,
}

impl ConsistencyReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ConsistencyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} grids, {} violations", self.grids, self.violations.len())?;
        for v in &self.violations {
            writeln!(f, "  {v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Oracle {
    /// Coordinate hash lookup per grid.
    #[default]
    Indexed,
    /// All same-depth pairs compared.
    BruteForce,
}

pub fn parse_dump(text: &str) -> Result<Vec<DumpRecord>, HarnessError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| HarnessError::Format(format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn check_consistency(dumps: &[Vec<DumpRecord>]) -> Result<ConsistencyReport, HarnessError> {
    check_consistency_with(dumps, Oracle::Indexed)
}

/// Rebuilds the global grid set from per-rank dumps and compares every link
/// and peer list with geometric adjacency.
pub fn check_consistency_with(dumps: &[Vec<DumpRecord>], oracle: Oracle) -> Result<ConsistencyReport, HarnessError> {
    let mut violations = Vec::new();
    let mut headers = Vec::new();
    let mut grids: Vec<(Rank, &GridRecord)> = Vec::new();
    for (i, dump) in dumps.iter().enumerate() {
        let mut recs = dump.iter();
        let Some(DumpRecord::Rank(h)) = recs.next() else {
            return Err(HarnessError::Format(format!(
                "dump {i} does not start with a rank record"
            )));
        };
        headers.push(h);
        for r in recs {
            match r {
                DumpRecord::Grid(g) => grids.push((h.rank, g)),
                DumpRecord::Rank(_) => return Err(HarnessError::Format(format!("dump {i} has a second rank record"))),
            }
        }
    }
    let Some(first) = headers.first() else {
        return Ok(ConsistencyReport::default());
    };
    let factor: RefinementFactor = first.factor;
    for h in &headers {
        if h.factor != factor {
            violations.push(Violation {
                rank: h.rank,
                uid: None,
                coord: None,
                kind: ViolationKind::FactorMismatch,
            });
        }
    }
    let next_gid: HashMap<Rank, u32> = headers.iter().map(|h| (h.rank, h.next_gid)).collect();

    let mut by_uid: HashMap<GridUid, &GridRecord> = HashMap::with_capacity(grids.len());
    let mut index: HashMap<GridCoord, GridUid> = HashMap::with_capacity(grids.len());
    for &(holder, g) in &grids {
        let v = |kind| Violation {
            rank: holder,
            uid: Some(g.uid()),
            coord: Some(g.coord()),
            kind,
        };
        if by_uid.insert(g.uid(), g).is_some() {
            violations.push(v(ViolationKind::DuplicateUid));
        }
        if let Some(other) = index.insert(g.coord(), g.uid()) {
            violations.push(v(ViolationKind::DuplicateCoord { other }));
        }
        if g.uid().rank() != holder {
            violations.push(v(ViolationKind::Ownership { holder }));
        }
        if next_gid.get(&holder).is_some_and(|&n| g.uid().gid() >= n) {
            violations.push(v(ViolationKind::StaleGid {
                next_gid: next_gid[&holder],
            }));
        }
    }
    if !index.contains_key(&GridCoord::ROOT) {
        violations.push(Violation {
            rank: 0,
            uid: None,
            coord: Some(GridCoord::ROOT),
            kind: ViolationKind::MissingRoot,
        });
    }

    let brute: Option<HashMap<GridUid, [Option<GridUid>; 6]>> = (oracle == Oracle::BruteForce).then(|| {
        let keyed: Vec<(GridUid, GridCoord)> = grids.iter().map(|(_, g)| (g.uid(), g.coord())).collect();
        neighbor_oracle(&keyed)
    });

    let mut linked: BTreeMap<Rank, BTreeSet<Rank>> = BTreeMap::new();
    for &(holder, g) in &grids {
        let uid = g.uid();
        let coord = g.coord();
        let v = |kind| Violation {
            rank: holder,
            uid: Some(uid),
            coord: Some(coord),
            kind,
        };
        let peers = linked.entry(holder).or_default();
        let links = g
            .neighbors
            .iter()
            .flatten()
            .chain(g.parent.iter())
            .chain(g.children.iter().flatten());
        peers.extend(links.map(|&b| GridUid::from_bits(b).rank()).filter(|&r| r != holder));

        let expected_parent = coord.parent(factor).map(|p| index.get(&p).copied());
        if expected_parent == Some(None) {
            violations.push(v(ViolationKind::MissingParent));
        }
        let expected_parent = expected_parent.flatten();
        let found_parent = g.parent.map(GridUid::from_bits);
        if found_parent != expected_parent {
            violations.push(v(ViolationKind::Parent {
                expected: expected_parent,
                found: found_parent,
            }));
        }

        let expected_nb = match &brute {
            Some(map) => map[&uid],
            None => indexed_neighbors(&coord, factor, &index),
        };
        for dir in Direction::FACES {
            let f = dir as usize;
            let found = g.neighbors[f].map(GridUid::from_bits);
            if found != expected_nb[f] {
                violations.push(v(ViolationKind::Neighbor {
                    dir,
                    expected: expected_nb[f],
                    found,
                }));
            } else if let Some(partner) = found {
                let back = by_uid.get(&partner).and_then(|p| p.neighbors[dir.opposite() as usize]);
                if back != Some(uid.bits()) {
                    violations.push(v(ViolationKind::AsymmetricNeighbor { dir, partner }));
                }
            }
        }

        let mut expected_children: Vec<Option<GridUid>> = factor
            .positions()
            .map(|p| index.get(&coord.child(factor, p)).copied())
            .collect();
        if expected_children.iter().all(Option::is_none) {
            expected_children.clear();
        }
        if expected_children.len() != g.children.len() {
            violations.push(v(ViolationKind::ChildCount {
                expected: expected_children.len(),
                found: g.children.len(),
            }));
        } else {
            for (slot, (e, f)) in expected_children.iter().zip(&g.children).enumerate() {
                let f = f.map(GridUid::from_bits);
                if *e != f {
                    violations.push(v(ViolationKind::Child {
                        slot,
                        expected: *e,
                        found: f,
                    }));
                }
            }
        }
    }

    for h in &headers {
        let expected: Vec<Rank> = linked
            .get(&h.rank)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default();
        if expected != h.remote_ranks {
            violations.push(Violation {
                rank: h.rank,
                uid: None,
                coord: None,
                kind: ViolationKind::RemoteRanks {
                    expected,
                    found: h.remote_ranks.clone(),
                },
            });
        }
    }
    Ok(ConsistencyReport {
        grids: grids.len(),
        violations,
    })
}

/// Either protocol implementation behind one interface.
#[derive(Debug)]
pub enum Sim {
    Decentral(Cluster),
    Central(CentralCluster),
}

impl Sim {
    pub fn new(
        mode: Mode,
        spec: DomainSpec,
        topologies: Vec<RankTopology>,
        transport: TransportMode,
        exec: ExecMode,
    ) -> Self {
        match mode {
            Mode::Decentral => Sim::Decentral(Cluster::new(spec, topologies, transport).with_exec(exec)),
            Mode::Central => Sim::Central(CentralCluster::new(spec, topologies, transport).with_exec(exec)),
        }
    }

    pub fn cluster(&self) -> &Cluster {
        match self {
            Sim::Decentral(c) => c,
            Sim::Central(c) => c.cluster(),
        }
    }

    pub fn round(&mut self, batch: &RoundBatch, balancer: &mut dyn Balancer) -> Result<RoundReport, ProtocolError> {
        match self {
            Sim::Decentral(c) => c.run_full_round(batch, balancer),
            Sim::Central(c) => c.central_round(batch, balancer),
        }
    }

    /// Refine/delete only, without balancing or migration.
    pub fn refine_delete(&mut self, batch: &RoundBatch) -> Result<Vec<TrafficStats>, ProtocolError> {
        match self {
            Sim::Decentral(c) => {
                c.issue_batch(batch)?;
                c.run_refine_delete_cycle()
            }
            Sim::Central(c) => Ok(vec![c.run_refine_delete_exchange(batch)?]),
        }
    }

    pub fn dumps(&self) -> Vec<Vec<DumpRecord>> {
        self.cluster().dumps()
    }

    pub fn dumps_jsonl(&self) -> Vec<String> {
        self.cluster().dumps_jsonl()
    }

    pub fn check(&self) -> Result<ConsistencyReport, HarnessError> {
        check_consistency(&self.dumps())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub from: u8,
    pub to: u8,
    pub ranks: usize,
    pub mode: Mode,
    pub scheme: Scheme,
    pub transport: TransportMode,
    pub exec: ExecMode,
    pub factor: RefinementFactor,
}

impl BenchConfig {
    pub fn new(from: u8, ranks: usize, mode: Mode) -> Self {
        BenchConfig {
            from,
            to: from + 1,
            ranks,
            mode,
            scheme: Scheme::Morton,
            transport: TransportMode::Rendezvous,
            exec: ExecMode::RoundRobin,
            factor: RefinementFactor::BISECTION,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub config: BenchConfig,
    pub initial_grids: u64,
    pub final_grids: u64,
    pub cycles: Vec<TrafficStats>,
    pub total: TrafficStats,
    pub violations: usize,
}

impl BenchResult {
    /// Highest per-rank message count (sent plus received) over the round.
    pub fn max_rank_msgs(&self) -> (Rank, u64) {
        self.total.max_rank_msgs()
    }

    /// Messages sent plus received by rank 0.
    pub fn rank0_msgs(&self) -> u64 {
        self.total.per_rank.first().map_or(0, |t| t.msgs())
    }

    pub fn write_csv<W: io::Write>(&self, out: W, cost: CostModel) -> Result<(), HarnessError> {
        write_traffic_csv(out, &self.cycles, cost)
    }
}

/// Traffic rows preceded by a comment naming the synthetic cost model.
pub fn write_traffic_csv<W: io::Write>(
    mut out: W,
    cycles: &[TrafficStats],
    cost: CostModel,
) -> Result<(), HarnessError> {
    writeln!(
        out,
        "# modeled_time is synthetic: alpha + beta * bytes per sent message, alpha={:e} s, beta={:e} s/byte",
        cost.alpha, cost.beta
    )?;
    let mut w = csv::Writer::from_writer(out);
    for c in cycles {
        c.write_csv(&mut w, cost)?;
    }
    w.flush()?;
    Ok(())
}

/// Distributes a uniform tree of depth `from`, refines every grid of that
/// depth once and reports the traffic of the refinement.
pub fn bench_refine(cfg: &BenchConfig) -> Result<BenchResult, HarnessError> {
    if cfg.to != cfg.from + 1 {
        return Err(HarnessError::Format(format!(
            "can only refine one level, got {} -> {}",
            cfg.from, cfg.to
        )));
    }
    let spec = DomainSpec::unit_cube(cfg.factor, cfg.to);
    let dist = initial_distribute(&spec, cfg.from, cfg.ranks, cfg.scheme)?;
    let initial: u64 = dist.topologies.iter().map(|t| t.len() as u64).sum();
    let expected = uniform_grid_count(cfg.factor, cfg.from);
    if initial != expected {
        return Err(HarnessError::GridCount {
            expected,
            found: initial,
        });
    }
    let mut batch = RoundBatch::default();
    for t in &dist.topologies {
        for g in t.grids().filter(|g| g.depth() == cfg.from) {
            batch.refine(t.rank(), g.uid.gid());
        }
    }
    let mut sim = Sim::new(cfg.mode, spec, dist.topologies, cfg.transport, cfg.exec);
    let cycles = sim.refine_delete(&batch)?;
    let final_grids = sim.cluster().grid_count() as u64;
    let expected = uniform_grid_count(cfg.factor, cfg.to);
    if final_grids != expected {
        return Err(HarnessError::GridCount {
            expected,
            found: final_grids,
        });
    }
    let mut total = TrafficStats::new(0, cfg.ranks);
    for c in &cycles {
        total.merge(c);
    }
    let violations = sim.check()?.violations.len();
    Ok(BenchResult {
        config: *cfg,
        initial_grids: initial,
        final_grids,
        cycles,
        total,
        violations,
    })
}

/// One round of a scenario: intents, then the migrations applied after the
/// refine/delete cycle (gids as they stand at that point).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScenarioRound {
    pub batch: RoundBatch,
    pub plans: Plans,
}

/// Replayable run description with a plain-text `key=value` header and an
/// ops section of one operation per line, rounds separated by `---`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub seed: u64,
    pub ranks: usize,
    pub depth: u8,
    pub max_depth: u8,
    pub scheme: Scheme,
    pub mode: Mode,
    pub transport: TransportMode,
    pub rounds: Vec<ScenarioRound>,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed={}", self.seed)?;
        writeln!(f, "ranks={}", self.ranks)?;
        writeln!(f, "depth={}", self.depth)?;
        writeln!(f, "max_depth={}", self.max_depth)?;
        writeln!(f, "scheme={}", scheme_name(self.scheme))?;
        writeln!(f, "mode={}", self.mode)?;
        writeln!(f, "transport={}", transport_name(self.transport))?;
        writeln!(f, "[ops]")?;
        for r in &self.rounds {
            for it in &r.batch.intents {
                let op = match it.op {
                    Op::Refine => "refine",
                    Op::Delete => "delete",
                };
                writeln!(f, "{op} {}:{}", it.rank, it.gid)?;
            }
            for (origin, plan) in &r.plans {
                for (gid, target) in &plan.moves {
                    writeln!(f, "migrate {origin}:{gid} -> {target}")?;
                }
            }
            writeln!(f, "---")?;
        }
        Ok(())
    }
}

fn parse_grid_ref(s: &str) -> Result<(Rank, u32), String> {
    let (r, g) = s
        .split_once(':')
        .ok_or_else(|| format!("expected rank:gid, got {s:?}"))?;
    Ok((
        r.trim().parse().map_err(|e| format!("rank {r:?}: {e}"))?,
        g.trim().parse().map_err(|e| format!("gid {g:?}: {e}"))?,
    ))
}

impl FromStr for Scenario {
    type Err = HarnessError;

    fn from_str(text: &str) -> Result<Self, HarnessError> {
        let mut kv: HashMap<String, String> = HashMap::new();
        let mut rounds = Vec::new();
        let mut current = ScenarioRound::default();
        let mut in_ops = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let err = |reason: String| HarnessError::Scenario { line: i + 1, reason };
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !in_ops {
                if line == "[ops]" {
                    in_ops = true;
                } else {
                    let (k, v) = line.split_once('=').ok_or_else(|| err("expected key=value".into()))?;
                    kv.insert(k.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            if line == "---" {
                rounds.push(std::mem::take(&mut current));
                continue;
            }
            let (op, rest) = line
                .split_once(' ')
                .ok_or_else(|| err("expected an operation".into()))?;
            match op {
                "refine" | "delete" => {
                    let (r, g) = parse_grid_ref(rest).map_err(err)?;
                    if op == "refine" {
                        current.batch.refine(r, g);
                    } else {
                        current.batch.delete(r, g);
                    }
                }
                "migrate" => {
                    let (src, dst) = rest.split_once("->").ok_or_else(|| err("expected `->`".into()))?;
                    let (r, g) = parse_grid_ref(src).map_err(err)?;
                    let t: Rank = dst.trim().parse().map_err(|e| err(format!("target: {e}")))?;
                    current.plans.entry(r).or_default().moves.push((g, t));
                }
                other => return Err(err(format!("unknown operation {other:?}"))),
            }
        }
        if current != ScenarioRound::default() {
            rounds.push(current);
        }
        let get = |k: &str| {
            kv.get(k).ok_or_else(|| HarnessError::Scenario {
                line: 0,
                reason: format!("missing {k}"),
            })
        };
        let num = |k: &str| -> Result<u64, HarnessError> {
            get(k)?.parse().map_err(|e| HarnessError::Scenario {
                line: 0,
                reason: format!("{k}: {e}"),
            })
        };
        let bad = |reason: String| HarnessError::Scenario { line: 0, reason };
        Ok(Scenario {
            seed: num("seed")?,
            ranks: num("ranks")? as usize,
            depth: num("depth")? as u8,
            max_depth: num("max_depth")? as u8,
            scheme: parse_scheme(get("scheme")?).map_err(bad)?,
            mode: get("mode")?.parse().map_err(bad)?,
            transport: parse_transport(get("transport")?).map_err(bad)?,
            rounds,
        })
    }
}

#[derive(Debug)]
pub struct ReplayOutcome {
    pub sim: Sim,
    pub reports: Vec<RoundReport>,
    /// First round whose end state failed the check, with its report.
    pub failure: Option<(usize, ConsistencyReport)>,
}

/// Runs a scenario round by round, checking consistency after each one.
pub fn replay(s: &Scenario, exec: ExecMode) -> Result<ReplayOutcome, HarnessError> {
    let spec = DomainSpec::unit_cube(RefinementFactor::BISECTION, s.max_depth);
    let dist = initial_distribute(&spec, s.depth, s.ranks, s.scheme)?;
    let mut sim = Sim::new(s.mode, spec, dist.topologies, s.transport, exec);
    let mut balancer = ScriptedBalancer::new(s.rounds.iter().map(|r| r.plans.clone()));
    let mut reports = Vec::new();
    for (i, round) in s.rounds.iter().enumerate() {
        reports.push(sim.round(&round.batch, &mut balancer)?);
        let report = sim.check()?;
        if !report.is_clean() {
            return Ok(ReplayOutcome {
                sim,
                reports,
                failure: Some((i, report)),
            });
        }
    }
    Ok(ReplayOutcome {
        sim,
        reports,
        failure: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FuzzConfig {
    pub seed: u64,
    pub rounds: usize,
    pub ranks: usize,
    /// Deepest level a grid may reach; the run starts uniform at
    /// `min(depth, 2)`.
    pub depth: u8,
    pub mode: Mode,
    pub scheme: Scheme,
    pub transport: TransportMode,
    pub exec: ExecMode,
    /// Refinements stop once the domain holds this many grids.
    pub grid_cap: usize,
}

impl FuzzConfig {
    pub fn new(seed: u64, rounds: usize, ranks: usize, depth: u8) -> Self {
        FuzzConfig {
            seed,
            rounds,
            ranks,
            depth,
            mode: Mode::Decentral,
            scheme: Scheme::Morton,
            transport: TransportMode::Rendezvous,
            exec: ExecMode::RoundRobin,
            grid_cap: 2000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FuzzFailure {
    pub round: usize,
    pub reason: String,
    /// Scenario up to and including the failing round.
    pub scenario: Scenario,
    pub dumps: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct FuzzOutcome {
    pub scenario: Scenario,
    pub rounds_run: usize,
    pub traffic: TrafficStats,
    pub fanout: FanoutStats,
    pub dumps: Vec<String>,
    pub failure: Option<FuzzFailure>,
    /// Rounds in which both members of some cross-rank pair refined.
    pub bilateral_rounds: usize,
    /// Rounds that moved linked grids from one origin together.
    pub grouped_migration_rounds: usize,
}

impl FuzzOutcome {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

/// Random migrations chosen per rank, conflict-free across origins.
struct FuzzBalancer<'r> {
    rng: &'r mut ChaCha8Rng,
    moving: HashMap<GridUid, Rank>,
    grouped: bool,
    log: Plans,
}

impl Balancer for FuzzBalancer<'_> {
    fn plan(&mut self, view: &LoadView<'_>) -> MigrationPlan {
        let topo = view.topology;
        let me = topo.rank();
        let mut plan = MigrationPlan::default();
        if topo.remote_ranks().is_empty() || topo.len() < 2 || !self.rng.random_bool(0.4) {
            return plan;
        }
        let target = *topo.remote_ranks().choose(self.rng).unwrap();
        let gids: Vec<u32> = topo.gids().collect();
        let seed = *gids.choose(self.rng).unwrap();
        let mut group = vec![seed];
        let seed_hull = topo.grid(seed).unwrap();
        for l in seed_hull.links() {
            if l.rank() == me && group.len() < 4 && self.rng.random_bool(0.5) {
                group.push(l.gid());
            }
        }
        group.truncate(topo.len() - 1);
        for gid in group {
            let h = topo.grid(gid).unwrap();
            let clash = h
                .links()
                .chain(std::iter::once(h.uid))
                .any(|l| self.moving.get(&l).is_some_and(|&o| o != me));
            if clash {
                continue;
            }
            self.moving.insert(h.uid, me);
            plan.moves.push((gid, target));
        }
        if plan.moves.len() > 1 {
            let set: BTreeSet<u32> = plan.moves.iter().map(|m| m.0).collect();
            self.grouped |= plan.moves.iter().any(|&(g, _)| {
                topo.grid(g)
                    .unwrap()
                    .links()
                    .any(|l| l.rank() == me && set.contains(&l.gid()))
            });
        }
        if !plan.moves.is_empty() {
            self.log.insert(me, plan.clone());
        }
        plan
    }
}

fn random_batch(rng: &mut ChaCha8Rng, cluster: &Cluster, cfg: &FuzzConfig) -> (RoundBatch, bool) {
    let spec = cluster.spec();
    let all: Vec<&GridHull> = cluster.topologies().flat_map(|t| t.grids()).collect();
    let mut batch = RoundBatch::default();
    let mut used: BTreeSet<GridUid> = BTreeSet::new();
    let room = cluster.grid_count() < cfg.grid_cap;
    let refinable = |g: &GridHull| g.is_leaf() && g.depth() < spec.max_depth;
    let mut bilateral = false;
    if room && rng.random_bool(0.6) {
        let pairs: Vec<(GridUid, GridUid)> = all
            .iter()
            .filter(|g| refinable(g))
            .flat_map(|g| g.neighbors.iter().flatten().map(move |n| (g.uid, *n)))
            .filter(|(a, b)| a.rank() != b.rank())
            .filter(|(_, b)| {
                let t = cluster.topology(b.rank());
                t.grid(b.gid()).is_ok_and(&refinable)
            })
            .collect();
        if let Some(&(a, b)) = pairs.choose(rng) {
            batch.refine(a.rank(), a.gid());
            batch.refine(b.rank(), b.gid());
            used.extend([a, b]);
            bilateral = true;
        }
    }
    let ops = rng.random_range(1..=cfg.ranks.max(2) + 2);
    for _ in 0..ops {
        let g = *all.choose(rng).unwrap();
        if used.contains(&g.uid) {
            continue;
        }
        if refinable(g) && room && rng.random_bool(0.55) {
            batch.refine(g.uid.rank(), g.uid.gid());
            used.insert(g.uid);
        } else if g.is_leaf() && g.parent.is_some() {
            batch.delete(g.uid.rank(), g.uid.gid());
            used.insert(g.uid);
        }
    }
    (batch, bilateral)
}

/// Deterministic random rounds, each followed by a full consistency check.
pub fn fuzz(cfg: &FuzzConfig) -> Result<FuzzOutcome, HarnessError> {
    if cfg.rounds == 0 {
        return Err(HarnessError::NoRounds);
    }
    let start_depth = cfg.depth.min(2);
    let spec = DomainSpec::unit_cube(RefinementFactor::BISECTION, cfg.depth);
    let dist = initial_distribute(&spec, start_depth, cfg.ranks, cfg.scheme)?;
    let mut sim = Sim::new(cfg.mode, spec, dist.topologies, cfg.transport, cfg.exec);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut scenario = Scenario {
        seed: cfg.seed,
        ranks: cfg.ranks,
        depth: start_depth,
        max_depth: cfg.depth,
        scheme: cfg.scheme,
        mode: cfg.mode,
        transport: cfg.transport,
        rounds: Vec::new(),
    };
    let mut traffic = TrafficStats::new(0, cfg.ranks);
    let mut fanout = FanoutStats::default();
    let (mut bilateral_rounds, mut grouped_migration_rounds) = (0, 0);
    for round in 0..cfg.rounds {
        let (batch, bilateral) = random_batch(&mut rng, sim.cluster(), cfg);
        let mut balancer = FuzzBalancer {
            rng: &mut rng,
            moving: HashMap::new(),
            grouped: false,
            log: Plans::new(),
        };
        let result = sim.round(&batch, &mut balancer);
        let grouped = balancer.grouped;
        let plans = balancer.log;
        scenario.rounds.push(ScenarioRound { batch, plans });
        let failure = match result {
            Err(e) => Some(e.to_string()),
            Ok(report) => {
                for c in &report.traffic {
                    traffic.merge(c);
                }
                fanout.merge(&report.fanout);
                let check = sim.check()?;
                (!check.is_clean()).then(|| check.to_string())
            }
        };
        if let Some(reason) = failure {
            return Ok(FuzzOutcome {
                rounds_run: round + 1,
                traffic,
                fanout,
                dumps: sim.dumps_jsonl(),
                failure: Some(FuzzFailure {
                    round,
                    reason,
                    scenario: scenario.clone(),
                    dumps: sim.dumps_jsonl(),
                }),
                scenario,
                bilateral_rounds,
                grouped_migration_rounds,
            });
        }
        bilateral_rounds += usize::from(bilateral);
        grouped_migration_rounds += usize::from(grouped);
    }
    Ok(FuzzOutcome {
        rounds_run: cfg.rounds,
        traffic,
        fanout,
        dumps: sim.dumps_jsonl(),
        failure: None,
        scenario,
        bilateral_rounds,
        grouped_migration_rounds,
    })
}

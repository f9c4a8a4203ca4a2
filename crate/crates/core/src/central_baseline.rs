//! Centralized baseline: rank 0 doubles as a domain manager that mirrors
//! the whole topology. Workers report their intents to it once per exchange
//! and receive back every changed link record of the grids they own.
//!
//! Structural work (subdividing, dropping deleted grids, registering
//! migrated hulls) still happens on the workers, in the same order as in
//! the decentralized protocol, so both paths end in identical state.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::codec::{GridUid, Rank};
use crate::protocol::{Balancer, Cluster, FanoutStats, Op, Plans, ProtocolError, RankNode, RoundBatch, RoundReport};
use crate::spacetree::{indexed_neighbors, DomainSpec, GridCoord, GridHull, RefinementFactor};
use crate::topology::RankTopology;
use crate::transport::{
    bytes_to_words, decode_hulls, encode_hulls, words_to_bytes, Channel, RankTask, TrafficStats, TransportMode,
};

const TAG_REFINE: u64 = 0;
const TAG_DELETE: u64 = 1;

/// The manager's global mirror. Payloads are not mirrored.
#[derive(Debug, Clone)]
pub struct ManagerState {
    factor: RefinementFactor,
    mirror: BTreeMap<(Rank, u32), GridHull>,
    index: HashMap<GridCoord, GridUid>,
}

impl ManagerState {
    pub fn from_topologies<'a>(
        factor: RefinementFactor,
        topologies: impl IntoIterator<Item = &'a RankTopology>,
    ) -> Self {
        let mut mirror = BTreeMap::new();
        let mut index = HashMap::new();
        for t in topologies {
            for h in t.grids() {
                let mut m = h.clone();
                m.payload.clear();
                index.insert(h.coord, h.uid);
                mirror.insert((h.uid.rank(), h.uid.gid()), m);
            }
        }
        ManagerState { factor, mirror, index }
    }

    pub fn len(&self) -> usize {
        self.mirror.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mirror.is_empty()
    }

    pub fn grid(&self, uid: GridUid) -> Option<&GridHull> {
        self.mirror.get(&(uid.rank(), uid.gid())).filter(|h| h.uid == uid)
    }

    fn lookup(&self, c: &GridCoord) -> Option<GridUid> {
        self.index.get(c).copied()
    }

    fn expected_links(&self, coord: &GridCoord) -> (Option<GridUid>, [Option<GridUid>; 6], Vec<Option<GridUid>>) {
        let f = self.factor;
        let parent = coord.parent(f).and_then(|p| self.lookup(&p));
        let neighbors = indexed_neighbors(coord, f, &self.index);
        let mut children: Vec<Option<GridUid>> = f.positions().map(|p| self.lookup(&coord.child(f, p))).collect();
        if children.iter().all(Option::is_none) {
            children.clear();
        }
        (parent, neighbors, children)
    }

    /// Recomputes links around `touched` coordinates; returns the changed
    /// records grouped by owner.
    fn refresh(&mut self, touched: &[GridCoord]) -> BTreeMap<Rank, Vec<GridHull>> {
        let f = self.factor;
        let mut dirty = BTreeSet::new();
        for c in touched {
            let mut around: Vec<GridCoord> = vec![*c];
            around.extend(c.parent(f));
            around.extend(crate::codec::Direction::FACES.iter().filter_map(|&d| c.neighbor(f, d)));
            around.extend(f.positions().map(|p| c.child(f, p)));
            dirty.extend(around.iter().filter_map(|a| self.lookup(a)));
        }
        let mut changed: BTreeMap<Rank, Vec<GridHull>> = BTreeMap::new();
        for uid in dirty {
            let coord = self.mirror[&(uid.rank(), uid.gid())].coord;
            let (parent, neighbors, children) = self.expected_links(&coord);
            let h = self.mirror.get_mut(&(uid.rank(), uid.gid())).unwrap();
            if h.parent != parent || h.neighbors != neighbors || h.children != children {
                h.parent = parent;
                h.neighbors = neighbors;
                h.children = children;
                changed.entry(uid.rank()).or_default().push(h.clone());
            }
        }
        changed
    }

    fn apply_intents(&mut self, batches: &[(Rank, Vec<u64>)]) -> Result<BTreeMap<Rank, Vec<GridHull>>, String> {
        let f = self.factor;
        let mut touched = Vec::new();
        for (w, words) in batches {
            let mut it = words.iter().copied();
            while let Some(tag) = it.next() {
                let gid = it.next().ok_or("truncated intent")? as u32;
                match tag {
                    TAG_REFINE => {
                        let n = it.next().ok_or("truncated refine intent")? as usize;
                        let parent = self
                            .mirror
                            .get(&(*w, gid))
                            .ok_or_else(|| format!("unknown grid {w}:{gid}"))?;
                        let (puid, pcoord) = (parent.uid, parent.coord);
                        for _ in 0..n {
                            let kid = GridUid::from_bits(it.next().ok_or("truncated child list")?);
                            let coord = pcoord.child(f, kid.hash());
                            self.mirror
                                .insert((kid.rank(), kid.gid()), GridHull::new(kid, coord, Some(puid)));
                            self.index.insert(coord, kid);
                            touched.push(coord);
                        }
                        touched.push(pcoord);
                    }
                    TAG_DELETE => {
                        let h = self
                            .mirror
                            .remove(&(*w, gid))
                            .ok_or_else(|| format!("unknown grid {w}:{gid}"))?;
                        self.index.remove(&h.coord);
                        touched.push(h.coord);
                    }
                    t => return Err(format!("unknown intent tag {t}")),
                }
            }
        }
        Ok(self.refresh(&touched))
    }
}

/// A cluster driven through the central manager on rank 0.
#[derive(Debug)]
pub struct CentralCluster {
    cluster: Cluster,
    manager: ManagerState,
}

fn apply_records(node: &mut RankNode, records: Vec<GridHull>) -> Result<(), ProtocolError> {
    for r in records {
        let g = node.topo.grid_mut(r.uid.gid())?;
        g.parent = r.parent;
        g.neighbors = r.neighbors;
        g.children = r.children;
    }
    Ok(())
}

fn malformed(rank: Rank, peer: Rank, reason: impl Into<String>) -> ProtocolError {
    ProtocolError::Malformed {
        rank,
        peer,
        channel: Channel::Manager,
        reason: reason.into(),
    }
}

struct Shipment {
    next_gid: u32,
    moves: Vec<(u32, Rank)>,
    hulls: Vec<GridHull>,
}

fn encode_shipment(next_gid: u32, moves: &[(u32, Rank)], hulls: &[GridHull]) -> Vec<u8> {
    let mut w = vec![next_gid as u64, moves.len() as u64];
    for &(g, t) in moves {
        w.push(g as u64);
        w.push(t as u64);
    }
    let mut bytes = words_to_bytes(&w);
    bytes.extend(encode_hulls(hulls));
    bytes
}

fn decode_shipment(bytes: &[u8]) -> Result<Shipment, String> {
    let words = bytes_to_words(bytes).ok_or("payload is not whole words")?;
    let n = *words.get(1).ok_or("truncated shipment")? as usize;
    if words.len() < 2 + 2 * n {
        return Err("truncated move list".into());
    }
    let moves = (0..n)
        .map(|i| (words[2 + 2 * i] as u32, words[3 + 2 * i] as Rank))
        .collect();
    let hulls = decode_hulls(&bytes[8 * (2 + 2 * n)..]).map_err(|e| e.to_string())?;
    Ok(Shipment {
        next_gid: words[0] as u32,
        moves,
        hulls,
    })
}

/// Arrivals then changed records, framed by the arrivals' byte length.
fn encode_reply(arrivals: &[GridHull], changed: &[GridHull]) -> Vec<u8> {
    let a = encode_hulls(arrivals);
    let mut out = words_to_bytes(&[a.len() as u64]);
    out.extend(a);
    out.extend(encode_hulls(changed));
    out
}

fn decode_reply(bytes: &[u8]) -> Result<(Vec<GridHull>, Vec<GridHull>), String> {
    if bytes.len() < 8 {
        return Err("truncated reply".into());
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + n {
        return Err("truncated arrivals".into());
    }
    let arrivals = decode_hulls(&bytes[8..8 + n]).map_err(|e| e.to_string())?;
    let changed = decode_hulls(&bytes[8 + n..]).map_err(|e| e.to_string())?;
    Ok((arrivals, changed))
}

impl CentralCluster {
    pub fn new(spec: DomainSpec, topologies: Vec<RankTopology>, mode: TransportMode) -> Self {
        let manager = ManagerState::from_topologies(spec.factor, &topologies);
        CentralCluster {
            cluster: Cluster::new(spec, topologies, mode),
            manager,
        }
    }

    pub fn with_exec(mut self, exec: crate::transport::ExecMode) -> Self {
        self.cluster = self.cluster.with_exec(exec);
        self
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    pub fn manager(&self) -> &ManagerState {
        &self.manager
    }

    /// Workers apply their intents locally and report them; the manager
    /// answers with changed link records.
    pub fn run_refine_delete_exchange(&mut self, batch: &RoundBatch) -> Result<TrafficStats, ProtocolError> {
        self.cluster.validate_batch(batch)?;
        let spec = self.cluster.spec;
        let p = self.cluster.nodes.len();
        let mut intents: Vec<Vec<u64>> = vec![Vec::new(); p];
        for it in &batch.intents {
            let node = self.cluster.node_mut(it.rank)?;
            let words = &mut intents[it.rank as usize];
            match it.op {
                Op::Refine => {
                    let kids = node.refine_local(&spec, it.gid)?;
                    words.extend([TAG_REFINE, it.gid as u64, kids.len() as u64]);
                    words.extend(kids.iter().map(|k| k.bits()));
                    self.cluster.fanout.refinements += 1;
                }
                Op::Delete => {
                    node.delete_local(&spec, it.gid)?;
                    words.extend([TAG_DELETE, it.gid as u64]);
                    self.cluster.fanout.deletions += 1;
                }
            }
        }
        let manager = &mut self.manager;
        let transport = &self.cluster.transport;
        let (head, rest) = self.cluster.nodes.split_first_mut().expect("at least one rank");
        let mut intents = intents.into_iter();
        let own = intents.next().unwrap();
        let mut tasks: Vec<(Rank, RankTask<'_, ProtocolError>)> = Vec::with_capacity(p);
        let ep0 = transport.endpoint(0);
        tasks.push((
            0,
            Box::pin(async move {
                let mut batches = vec![(0, own)];
                for w in 1..p as Rank {
                    batches.push((w, ep0.recv_words(w, Channel::Manager).await?));
                }
                let mut changed = manager.apply_intents(&batches).map_err(|e| malformed(0, 0, e))?;
                for w in 1..p as Rank {
                    let records = changed.remove(&w).unwrap_or_default();
                    ep0.send(w, Channel::Manager, encode_hulls(&records)).await?;
                }
                apply_records(head, changed.remove(&0).unwrap_or_default())
            }),
        ));
        for (node, words) in rest.iter_mut().zip(intents) {
            let w = node.topo.rank();
            let ep = transport.endpoint(w);
            tasks.push((
                w,
                Box::pin(async move {
                    ep.send_words(0, Channel::Manager, &words).await?;
                    let env = ep.recv(0, Channel::Manager).await?;
                    let records = decode_hulls(&env.payload)?;
                    apply_records(node, records)
                }),
            ));
        }
        let stats = transport.run_cycle(self.cluster.cycle, tasks, self.cluster.exec)?;
        self.cluster.cycle += 1;
        for node in &mut self.cluster.nodes {
            node.finish_central()?;
        }
        Ok(stats)
    }

    /// Workers ship planned grids to the manager, which assigns their new
    /// UIDs, forwards them to the targets and sends out changed links.
    pub fn run_migration_exchange(&mut self, plans: &Plans) -> Result<TrafficStats, ProtocolError> {
        self.cluster.validate_plans(plans)?;
        let p = self.cluster.nodes.len();
        let mut shipments: Vec<Vec<u8>> = Vec::with_capacity(p);
        for node in &self.cluster.nodes {
            let r = node.topo.rank();
            let moves = plans.get(&r).map(|pl| pl.moves.clone()).unwrap_or_default();
            let hulls = moves
                .iter()
                .map(|&(g, _)| node.topo.grid(g).cloned())
                .collect::<Result<Vec<_>, _>>()?;
            shipments.push(encode_shipment(node.topo.next_gid(), &moves, &hulls));
            self.cluster.fanout.migrations += moves.len() as u64;
        }
        let manager = &mut self.manager;
        let transport = &self.cluster.transport;
        let (head, rest) = self.cluster.nodes.split_first_mut().expect("at least one rank");
        let mut shipments = shipments.into_iter();
        let own = shipments.next().unwrap();
        let mut tasks: Vec<(Rank, RankTask<'_, ProtocolError>)> = Vec::with_capacity(p);
        let ep0 = transport.endpoint(0);
        tasks.push((
            0,
            Box::pin(async move {
                let mut all = vec![decode_shipment(&own).map_err(|e| malformed(0, 0, e))?];
                for w in 1..p as Rank {
                    let env = ep0.recv(w, Channel::Manager).await?;
                    all.push(decode_shipment(&env.payload).map_err(|e| malformed(0, w, e))?);
                }
                let mut replies = manager.migrate(&all).map_err(|e| malformed(0, 0, e))?;
                for w in 1..p as Rank {
                    let (a, c) = replies.remove(&w).unwrap_or_default();
                    ep0.send(w, Channel::Manager, encode_reply(&a, &c)).await?;
                }
                let (a, c) = replies.remove(&0).unwrap_or_default();
                let moves = all.swap_remove(0).moves;
                settle_migration(head, &moves, a, c)
            }),
        ));
        for (node, bytes) in rest.iter_mut().zip(shipments) {
            let w = node.topo.rank();
            let ep = transport.endpoint(w);
            let moves = plans.get(&w).map(|pl| pl.moves.clone()).unwrap_or_default();
            tasks.push((
                w,
                Box::pin(async move {
                    ep.send(0, Channel::Manager, bytes).await?;
                    let env = ep.recv(0, Channel::Manager).await?;
                    let (a, c) = decode_reply(&env.payload).map_err(|e| malformed(w, 0, e))?;
                    settle_migration(node, &moves, a, c)
                }),
            ));
        }
        let stats = transport.run_cycle(self.cluster.cycle, tasks, self.cluster.exec)?;
        self.cluster.cycle += 1;
        for node in &mut self.cluster.nodes {
            node.finish_central()?;
        }
        Ok(stats)
    }

    /// One round through the manager: refine/delete exchange, balancing,
    /// migration exchange.
    pub fn central_round(
        &mut self,
        batch: &RoundBatch,
        balancer: &mut dyn Balancer,
    ) -> Result<RoundReport, ProtocolError> {
        let before = self.cluster.fanout;
        self.cluster.fanout = FanoutStats::default();
        let mut traffic = vec![self.run_refine_delete_exchange(batch)?];
        let plans = self.cluster.plan_migrations(balancer);
        traffic.push(self.run_migration_exchange(&plans)?);
        let this = self.cluster.fanout;
        self.cluster.fanout = before;
        self.cluster.fanout.merge(&this);
        Ok(RoundReport {
            traffic,
            plans,
            fanout: this,
        })
    }
}

fn settle_migration(
    node: &mut RankNode,
    moves: &[(u32, Rank)],
    arrivals: Vec<GridHull>,
    changed: Vec<GridHull>,
) -> Result<(), ProtocolError> {
    for &(gid, _) in moves {
        node.topo.remove(gid)?;
    }
    for h in arrivals {
        node.topo.insert_assigned(h)?;
    }
    apply_records(node, changed)
}

type Reply = (Vec<GridHull>, Vec<GridHull>);

impl ManagerState {
    fn migrate(&mut self, shipments: &[Shipment]) -> Result<BTreeMap<Rank, Reply>, String> {
        let mut next: Vec<u32> = shipments.iter().map(|s| s.next_gid).collect();
        let mut payloads: HashMap<GridUid, Vec<u8>> = HashMap::new();
        let mut arrivals: BTreeMap<Rank, Vec<GridUid>> = BTreeMap::new();
        let mut touched = Vec::new();
        for (origin, s) in shipments.iter().enumerate() {
            if s.moves.len() != s.hulls.len() {
                return Err(format!(
                    "rank {origin} shipped {} grids for {} moves",
                    s.hulls.len(),
                    s.moves.len()
                ));
            }
            for (&(gid, target), hull) in s.moves.iter().zip(&s.hulls) {
                let slot = next
                    .get_mut(target as usize)
                    .ok_or_else(|| format!("no rank {target}"))?;
                let new = GridUid::new(target, *slot, hull.uid.hash()).map_err(|e| e.to_string())?;
                *slot += 1;
                let mut h = self
                    .mirror
                    .remove(&(origin as Rank, gid))
                    .ok_or_else(|| format!("unknown grid {origin}:{gid}"))?;
                h.uid = new;
                self.index.insert(h.coord, new);
                touched.push(h.coord);
                self.mirror.insert((target, new.gid()), h);
                payloads.insert(new, hull.payload.clone());
                arrivals.entry(target).or_default().push(new);
            }
        }
        let mut changed = self.refresh(&touched);
        let mut replies: BTreeMap<Rank, Reply> = BTreeMap::new();
        for (target, uids) in arrivals {
            let set: BTreeSet<GridUid> = uids.iter().copied().collect();
            let full = uids
                .iter()
                .map(|u| {
                    let mut h = self.mirror[&(u.rank(), u.gid())].clone();
                    h.payload = payloads.remove(u).unwrap_or_default();
                    h
                })
                .collect();
            let rest = changed
                .remove(&target)
                .unwrap_or_default()
                .into_iter()
                .filter(|h| !set.contains(&h.uid))
                .collect();
            replies.insert(target, (full, rest));
        }
        for (w, c) in changed {
            replies.entry(w).or_default().1 = c;
        }
        Ok(replies)
    }
}

use domaintopo::codec::{Direction, GridUid, Query, Rank, Task};
use domaintopo::harness::{check_consistency, initial_distribute};
use domaintopo::protocol::{
    Cluster, GreedyCountBalancer, MigrationPlan, NullBalancer, Plans, ProtocolError, RankNode, RoundBatch,
};
use domaintopo::spacetree::{DomainSpec, GridCoord, RefinementFactor, Scheme};
use domaintopo::transport::{Channel, ExecMode, TransportMode};

fn spec(max_depth: u8) -> DomainSpec {
    DomainSpec::unit_cube(RefinementFactor::BISECTION, max_depth)
}

fn cluster(depth: u8, max_depth: u8, ranks: usize) -> Cluster {
    let s = spec(max_depth);
    let d = initial_distribute(&s, depth, ranks, Scheme::Morton).unwrap();
    Cluster::new(s, d.topologies, TransportMode::Rendezvous)
}

fn assert_consistent(c: &Cluster) {
    let rep = check_consistency(&c.dumps()).unwrap();
    assert!(rep.is_clean(), "{rep}");
}

fn find(c: &Cluster, coord: GridCoord) -> GridUid {
    c.topologies()
        .flat_map(|t| t.grids())
        .find(|g| g.coord == coord)
        .map(|g| g.uid)
        .expect("coordinate present")
}

fn coord(depth: u8, index: [u64; 3]) -> GridCoord {
    GridCoord { depth, index }
}

fn refine_round(c: &mut Cluster, grids: &[GridUid]) {
    let mut b = RoundBatch::default();
    for g in grids {
        b.refine(g.rank(), g.gid());
    }
    c.run_full_round(&b, &mut NullBalancer).unwrap();
}

#[test]
fn refining_the_root_issues_no_queries() {
    let s = spec(2);
    let d = initial_distribute(&s, 0, 1, Scheme::Morton).unwrap();
    let mut node = RankNode::new(d.topologies.into_iter().next().unwrap());
    let (kids, queued) = node.issue_refine(&s, 0).unwrap();
    assert_eq!(kids.len(), 8);
    assert_eq!(queued, 0);
}

#[test]
fn corner_grid_queries_its_three_neighbours() {
    let s = spec(2);
    let d = initial_distribute(&s, 1, 1, Scheme::Morton).unwrap();
    let mut node = RankNode::new(d.topologies.into_iter().next().unwrap());
    let corner = node
        .topology()
        .grids()
        .find(|g| g.coord == coord(1, [0, 0, 0]))
        .unwrap()
        .uid;
    let (_, queued) = node.issue_refine(&s, corner.gid()).unwrap();
    assert_eq!(queued, 3);
    assert_eq!(node.topology().query_vector(0).len(), 3);
}

#[test]
fn refine_query_routes_to_the_owner_of_the_east_neighbour() {
    let s = spec(2);
    let d = initial_distribute(&s, 1, 3, Scheme::Morton).unwrap();
    let (rank, gid, east) = d
        .topologies
        .iter()
        .filter(|t| t.rank() != 2)
        .flat_map(|t| t.grids().map(move |g| (t.rank(), g)))
        .find_map(|(r, g)| {
            g.neighbor(Direction::East)
                .filter(|n| n.rank() == 2)
                .map(|n| (r, g.uid.gid(), n))
        })
        .expect("a grid with an east neighbour on rank 2");
    let mut node = RankNode::new(d.topologies.into_iter().nth(rank as usize).unwrap());
    node.issue_refine(&s, gid).unwrap();
    let words = node.topology().query_vector(2);
    let q = Query::decode(words[0]).unwrap();
    assert_eq!(q.task, Task::Refine);
    assert_eq!(q.direction, Direction::West);
    assert_eq!(q.gid, east.gid());
}

/// Two ranks, each holding half of the depth-1 grids with every depth-2
/// grid present. Rank 0 refines a depth-2 grid whose top neighbour sits on
/// rank 1.
fn two_rank_boundary() -> (Cluster, GridUid, GridUid) {
    let c = cluster(2, 3, 2);
    let low = find(&c, coord(2, [1, 1, 1]));
    let high = find(&c, coord(2, [1, 1, 2]));
    assert_eq!((low.rank(), high.rank()), (0, 1));
    (c, low, high)
}

#[test]
fn new_children_link_to_refined_remote_neighbour() {
    let (mut c, low, high) = two_rank_boundary();
    refine_round(&mut c, &[high]);
    refine_round(&mut c, &[low]);
    assert_consistent(&c);
    let t0 = c.topology(0);
    let kids: Vec<_> = t0.grids().filter(|g| g.parent == Some(low)).collect();
    assert_eq!(kids.len(), 8);
    for k in kids {
        let top = k.neighbor(Direction::Top);
        if k.coord.index[2] == 3 {
            let n = top.expect("top face child linked");
            assert_eq!(n.rank(), 1);
            let nb = c.topology(1).local(n).unwrap();
            assert_eq!(nb.parent, Some(high));
            assert_eq!(nb.neighbor(Direction::Bottom), Some(k.uid));
        } else {
            assert_eq!(top.map(|t| t.rank()), Some(0));
        }
    }
}

#[test]
fn unrefined_remote_neighbour_leaves_slots_empty() {
    let (mut c, low, _) = two_rank_boundary();
    refine_round(&mut c, &[low]);
    assert_consistent(&c);
    for k in c
        .topology(0)
        .grids()
        .filter(|g| g.parent == Some(low) && g.coord.index[2] == 3)
    {
        assert_eq!(k.neighbor(Direction::Top), None);
    }
}

#[test]
fn bilateral_refinement_writes_each_link_once() {
    let (mut c, low, high) = two_rank_boundary();
    let mut b = RoundBatch::default();
    b.refine(low.rank(), low.gid()).refine(high.rank(), high.gid());
    let report = c.run_full_round(&b, &mut NullBalancer).unwrap();
    assert_consistent(&c);
    assert_eq!(report.fanout.max_link_writes, 1);
    let crossing = c
        .topology(0)
        .grids()
        .filter(|g| g.parent == Some(low))
        .filter_map(|g| g.neighbor(Direction::Top))
        .filter(|n| n.rank() == 1)
        .count();
    assert_eq!(crossing, 4);
}

#[test]
fn interior_leaf_deletion_issues_seven_queries() {
    let s = spec(3);
    let d = initial_distribute(&s, 2, 1, Scheme::Morton).unwrap();
    let mut node = RankNode::new(d.topologies.into_iter().next().unwrap());
    let g = node
        .topology()
        .grids()
        .find(|g| g.coord == coord(2, [1, 2, 1]))
        .unwrap()
        .uid;
    assert_eq!(node.issue_delete(&s, g.gid()).unwrap(), 7);
}

#[test]
fn deleting_one_child_clears_only_its_parent_slot() {
    let mut c = cluster(2, 3, 3);
    let victim = find(&c, coord(2, [3, 3, 3]));
    let parent_uid = find(&c, coord(1, [1, 1, 1]));
    let mut b = RoundBatch::default();
    b.delete(victim.rank(), victim.gid());
    c.run_full_round(&b, &mut NullBalancer).unwrap();
    assert_consistent(&c);
    let parent = c.topology(parent_uid.rank()).local(parent_uid).unwrap();
    assert_eq!(parent.children.len(), 8);
    assert_eq!(parent.children.iter().filter(|k| k.is_none()).count(), 1);
    let slot = RefinementFactor::BISECTION.slot(victim.hash()).unwrap();
    assert_eq!(parent.children[slot], None);
}

#[test]
fn deletion_of_non_leaf_or_root_is_rejected() {
    let mut c = cluster(2, 3, 2);
    let inner = find(&c, coord(1, [0, 0, 0]));
    assert!(matches!(
        c.issue_delete(inner.rank(), inner.gid()),
        Err(ProtocolError::NotLeaf { .. })
    ));
    let mut c = cluster(0, 2, 1);
    assert!(matches!(c.issue_delete(0, 0), Err(ProtocolError::DeleteRoot { .. })));
}

#[test]
fn refining_a_refined_grid_is_rejected() {
    let mut c = cluster(2, 3, 2);
    let inner = find(&c, coord(1, [0, 0, 0]));
    assert!(c.issue_refine(inner.rank(), inner.gid()).is_err());
}

#[test]
fn simultaneous_delete_of_a_cross_rank_pair() {
    let (mut c, low, high) = two_rank_boundary();
    let mut b = RoundBatch::default();
    b.delete(low.rank(), low.gid()).delete(high.rank(), high.gid());
    c.run_full_round(&b, &mut NullBalancer).unwrap();
    assert_consistent(&c);
    assert_eq!(c.grid_count(), 71);
}

#[test]
fn query_for_unknown_grid_is_an_error() {
    let s = spec(3);
    let mut d = initial_distribute(&s, 1, 2, Scheme::Morton).unwrap();
    let issuer = d.topologies[0].gids().next().unwrap();
    d.topologies[0]
        .enqueue_query(1, Query::refine(Direction::West, 4000).unwrap(), issuer)
        .unwrap();
    let mut c = Cluster::new(s, d.topologies, TransportMode::Rendezvous);
    let err = c.run_refine_delete_cycle().unwrap_err();
    assert!(
        matches!(err, ProtocolError::UnknownTarget { rank: 1, peer: 0, .. }),
        "{err}"
    );
}

#[test]
fn one_query_vector_per_ordered_peer_pair() {
    let mut c = cluster(2, 3, 6);
    let peer_links: usize = c.topologies().map(|t| t.remote_ranks().len()).sum();
    let mut b = RoundBatch::default();
    for t in c.topologies() {
        for g in t.grids().filter(|g| g.depth() == 2).step_by(3) {
            b.refine(t.rank(), g.uid.gid());
        }
    }
    c.issue_batch(&b).unwrap();
    let stats = c.run_refine_delete_cycle().unwrap();
    let qv = stats[0].per_channel[&Channel::QueryVector];
    assert_eq!(qv.msgs_sent as usize, peer_links);
    assert!(stats.iter().all(|s| s.is_conserved()));
    assert_consistent(&c);
}

/// Finds a grid whose west neighbour lives on a third rank, plus a peer of
/// the origin that can receive it.
fn west_on_third_rank() -> Option<(Cluster, GridUid, GridUid, Rank)> {
    for depth in 2..=3 {
        for ranks in 3..=12 {
            let c = cluster(depth, depth + 1, ranks);
            let hit = c.topologies().find_map(|t| {
                t.grids().find_map(|g| {
                    let w = g.neighbor(Direction::West).filter(|w| w.rank() != t.rank())?;
                    let target = t.remote_ranks().iter().copied().find(|&p| p != w.rank())?;
                    Some((g.uid, w, target))
                })
            });
            if let Some((x, w, target)) = hit {
                return Some((c, x, w, target));
            }
        }
    }
    None
}

#[test]
fn migration_rewrites_third_rank_neighbour() {
    let (mut c, x, w, target) = west_on_third_rank().expect("layout with a west neighbour on a third rank");
    let origin = x.rank();
    let mut plans = Plans::new();
    plans.insert(
        origin,
        MigrationPlan {
            moves: vec![(x.gid(), target)],
        },
    );
    c.run_migration_round(&plans).unwrap();
    assert_consistent(&c);
    let west = c.topology(w.rank()).local(w).unwrap();
    let moved = west.neighbor(Direction::East).unwrap();
    assert_eq!(moved.rank(), target);
    assert_eq!(
        c.topology(target).local(moved).unwrap().neighbor(Direction::West),
        Some(w)
    );
    assert!(!c.topology(origin).grids().any(|g| g.uid == x));
}

#[test]
fn adjacent_grids_migrate_together() {
    let mut c = cluster(2, 3, 4);
    let t0 = c.topology(0);
    let target = t0.remote_ranks()[0];
    let (a, b) = t0
        .grids()
        .filter(|g| g.depth() == 2)
        .find_map(|g| {
            g.neighbors
                .iter()
                .flatten()
                .find(|n| n.rank() == 0)
                .map(|n| (g.uid, *n))
        })
        .unwrap();
    let (ca, cb) = (c_coord(&c, a), c_coord(&c, b));
    let mut plans = Plans::new();
    plans.insert(
        0,
        MigrationPlan {
            moves: vec![(a.gid(), target), (b.gid(), target)],
        },
    );
    let report_before = c.fanout().migrations;
    c.run_migration_round(&plans).unwrap();
    assert_consistent(&c);
    assert_eq!(c.fanout().migrations, report_before + 2);
    let moved: Vec<_> = c
        .topology(target)
        .grids()
        .filter(|g| g.coord == ca || g.coord == cb)
        .collect();
    assert_eq!(moved.len(), 2);
    let (ga, gb) = (moved[0], moved[1]);
    assert!(ga.neighbors.contains(&Some(gb.uid)) && gb.neighbors.contains(&Some(ga.uid)));
}

fn c_coord(c: &Cluster, uid: GridUid) -> GridCoord {
    c.dumps()
        .iter()
        .flatten()
        .find_map(|r| match r {
            domaintopo::spacetree::DumpRecord::Grid(g) if g.uid() == uid => Some(g.coord()),
            _ => None,
        })
        .unwrap_or_else(|| panic!("{uid} not found after migration"))
}

#[test]
fn empty_plan_changes_nothing() {
    let mut c = cluster(2, 3, 4);
    let before = c.dumps_jsonl();
    c.run_migration_round(&Plans::new()).unwrap();
    assert_eq!(c.dumps_jsonl(), before);
}

#[test]
fn plan_to_a_non_peer_is_rejected() {
    let mut c = cluster(2, 3, 8);
    let (origin, stranger) = c
        .topologies()
        .find_map(|t| {
            (0..8)
                .find(|&r| r != t.rank() && t.remote_ranks().binary_search(&r).is_err())
                .map(|s| (t.rank(), s))
        })
        .unwrap();
    let gid = c.topology(origin).gids().next().unwrap();
    let mut plans = Plans::new();
    plans.insert(
        origin,
        MigrationPlan {
            moves: vec![(gid, stranger)],
        },
    );
    let err = c.run_migration_round(&plans).unwrap_err();
    assert!(
        matches!(err, ProtocolError::Plan { origin: o, .. } if o == origin),
        "{err}"
    );
}

#[test]
fn linked_grids_from_two_origins_are_rejected() {
    let mut c = cluster(2, 3, 4);
    let (x, n) = c
        .topology(0)
        .grids()
        .find_map(|g| {
            g.neighbors
                .iter()
                .flatten()
                .find(|n| n.rank() == 1)
                .map(|n| (g.uid, *n))
        })
        .unwrap();
    let to0 = c.topology(1).remote_ranks()[0];
    let to1 = c.topology(0).remote_ranks().iter().copied().find(|&r| r != 0).unwrap();
    let mut plans = Plans::new();
    plans.insert(
        0,
        MigrationPlan {
            moves: vec![(x.gid(), to1)],
        },
    );
    plans.insert(
        1,
        MigrationPlan {
            moves: vec![(n.gid(), to0)],
        },
    );
    assert!(matches!(c.run_migration_round(&plans), Err(ProtocolError::Plan { .. })));
}

#[test]
fn refine_only_round_matches_the_bare_cycle() {
    let mut full = cluster(2, 3, 4);
    let mut bare = cluster(2, 3, 4);
    let mut b = RoundBatch::default();
    for t in full.topologies() {
        for g in t.grids().filter(|g| g.is_leaf()).step_by(4) {
            b.refine(t.rank(), g.uid.gid());
        }
    }
    full.run_full_round(&b, &mut NullBalancer).unwrap();
    bare.issue_batch(&b).unwrap();
    bare.run_refine_delete_cycle().unwrap();
    assert_eq!(full.dumps_jsonl(), bare.dumps_jsonl());
}

#[test]
fn greedy_balancer_rounds_stay_consistent() {
    let mut c = cluster(2, 3, 4);
    let mut b = RoundBatch::default();
    for g in c.topology(0).grids().filter(|g| g.is_leaf()) {
        b.refine(0, g.uid.gid());
    }
    let before = c.loads();
    let report = c.run_full_round(&b, &mut GreedyCountBalancer).unwrap();
    assert_consistent(&c);
    assert!(!report.plans.is_empty());
    let after = c.loads();
    assert!(after[0] < before[0] + 8 * b.intents.len());
    for _ in 0..3 {
        c.run_full_round(&RoundBatch::default(), &mut GreedyCountBalancer)
            .unwrap();
        assert_consistent(&c);
    }
}

fn mixed_rounds(c: &mut Cluster) -> Vec<String> {
    for round in 0..4 {
        let mut b = RoundBatch::default();
        for t in c.topologies() {
            let leaves: Vec<_> = t.grids().filter(|g| g.is_leaf() && g.depth() < 3).collect();
            if let Some(g) = leaves.get(round % leaves.len().max(1)) {
                b.refine(t.rank(), g.uid.gid());
            }
        }
        c.run_full_round(&b, &mut GreedyCountBalancer).unwrap();
    }
    c.dumps_jsonl()
}

#[test]
fn executors_and_transport_modes_agree() {
    let reference = mixed_rounds(&mut cluster(2, 3, 5));
    let threaded = mixed_rounds(&mut cluster(2, 3, 5).with_exec(ExecMode::Threads));
    assert_eq!(reference, threaded);
    let mut buffered = cluster(2, 3, 5);
    buffered.set_mode(TransportMode::Buffered { budget: 1 << 20 });
    assert_eq!(reference, mixed_rounds(&mut buffered));
}

#[test]
fn tiny_buffer_overflows() {
    let mut c = cluster(2, 3, 4);
    c.set_mode(TransportMode::Buffered { budget: 8 });
    let mut b = RoundBatch::default();
    for t in c.topologies() {
        for g in t.grids().filter(|g| g.depth() == 2) {
            b.refine(t.rank(), g.uid.gid());
        }
    }
    let err = c.run_full_round(&b, &mut NullBalancer).unwrap_err();
    assert!(
        matches!(
            err,
            ProtocolError::Transport(domaintopo::transport::TransportError::BufferOverflow { .. })
        ),
        "{err}"
    );
}

#[test]
fn remote_ranks_track_links_after_rounds() {
    let mut c = cluster(2, 3, 6);
    mixed_rounds(&mut c);
    for t in c.topologies() {
        let expected: Vec<Rank> = t.linked_ranks();
        assert_eq!(t.remote_ranks(), expected.as_slice());
    }
}

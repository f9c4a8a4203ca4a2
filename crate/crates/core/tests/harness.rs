use std::process::Command;

use domaintopo::codec::{Direction, GridUid};
use domaintopo::harness::*;
use domaintopo::spacetree::{uniform_grid_count, DomainSpec, DumpRecord, RefinementFactor, Scheme, TreeError};
use domaintopo::transport::{CostModel, ExecMode, TransportMode};
use proptest::prelude::*;

fn spec(max_depth: u8) -> DomainSpec {
    DomainSpec::unit_cube(RefinementFactor::BISECTION, max_depth)
}

fn dumps(depth: u8, ranks: usize) -> Vec<Vec<DumpRecord>> {
    let d = initial_distribute(&spec(depth + 1), depth, ranks, Scheme::Morton).unwrap();
    d.topologies.iter().map(|t| t.dump()).collect()
}

#[test]
fn five_ranks_get_equal_slices() {
    let d = initial_distribute(&spec(4), 3, 5, Scheme::Morton).unwrap();
    assert!(d.topologies.iter().all(|t| t.len() == 117));
    let dumps: Vec<_> = d.topologies.iter().map(|t| t.dump()).collect();
    let rep = check_consistency(&dumps).unwrap();
    assert!(rep.is_clean(), "{rep}");
    assert_eq!(rep.grids, 585);
    assert_eq!(d.traffic.per_rank[0].msgs_sent, 4);
}

#[test]
fn single_rank_holds_everything() {
    let d = initial_distribute(&spec(3), 2, 1, Scheme::DepthFirst).unwrap();
    assert_eq!(d.topologies[0].len(), 73);
    assert!(d.topologies[0].remote_ranks().is_empty());
}

#[test]
fn too_few_grids_is_a_configuration_error() {
    let err = initial_distribute(&spec(1), 0, 2, Scheme::Morton).unwrap_err();
    assert!(
        matches!(err, HarnessError::Tree(TreeError::TooFewGrids { .. })),
        "{err}"
    );
}

#[test]
fn geometry_is_attached_per_grid() {
    let s = spec(3);
    let d = initial_distribute(&s, 2, 3, Scheme::Morton).unwrap();
    for t in &d.topologies {
        for g in t.grids() {
            assert_eq!(g.payload, s.geometry_blob(&g.coord));
        }
    }
}

fn grid_mut(
    dumps: &mut [Vec<DumpRecord>],
    pred: impl Fn(&domaintopo::spacetree::GridRecord) -> bool,
) -> &mut domaintopo::spacetree::GridRecord {
    dumps
        .iter_mut()
        .flatten()
        .find_map(|r| match r {
            DumpRecord::Grid(g) if pred(g) => Some(g),
            _ => None,
        })
        .unwrap()
}

#[test]
fn corrupted_neighbour_is_reported_from_both_sides() {
    let mut d = dumps(2, 3);
    let victim = grid_mut(&mut d, |g| {
        g.depth == 2 && g.neighbors[Direction::East as usize].is_some()
    });
    let vuid = victim.uid();
    let true_east = GridUid::from_bits(victim.neighbors[Direction::East as usize].unwrap());
    let bogus = GridUid::new(0, 0, domaintopo::codec::PositionHash::ROOT).unwrap();
    victim.neighbors[Direction::East as usize] = Some(bogus.bits());
    let rep = check_consistency(&d).unwrap();
    assert_eq!(rep.violations.len(), 2, "{rep}");
    assert!(rep.violations.iter().any(|v| v.uid == Some(vuid)
        && matches!(v.kind, ViolationKind::Neighbor { dir: Direction::East, found: Some(f), .. } if f == bogus)));
    assert!(rep.violations.iter().any(|v| v.uid == Some(true_east)
        && matches!(v.kind, ViolationKind::AsymmetricNeighbor { dir: Direction::West, partner } if partner == vuid)));
    assert!(rep.violations.iter().all(|v| v.coord.is_some()));
}

#[test]
fn stale_remote_rank_is_reported() {
    let mut d = dumps(2, 4);
    let DumpRecord::Rank(h) = &mut d[1][0] else {
        panic!("header first")
    };
    h.remote_ranks.push(99);
    let rep = check_consistency(&d).unwrap();
    assert_eq!(rep.violations.len(), 1, "{rep}");
    assert!(matches!(rep.violations[0].kind, ViolationKind::RemoteRanks { .. }));
    assert_eq!(rep.violations[0].rank, 1);
}

#[test]
fn wrong_owner_and_missing_child_are_reported() {
    let mut d = dumps(2, 2);
    let g = d[1].pop().unwrap();
    d[0].push(g);
    let rep = check_consistency(&d).unwrap();
    assert!(
        rep.violations
            .iter()
            .any(|v| matches!(v.kind, ViolationKind::Ownership { holder: 0 })),
        "{rep}"
    );

    let mut d = dumps(2, 2);
    let parent = grid_mut(&mut d, |g| g.depth == 1);
    parent.children[3] = None;
    let rep = check_consistency(&d).unwrap();
    assert!(
        rep.violations.iter().any(|v| matches!(
            v.kind,
            ViolationKind::Child {
                slot: 3,
                found: None,
                ..
            }
        )),
        "{rep}"
    );
}

#[test]
fn unparseable_dump_is_a_format_error() {
    assert!(matches!(parse_dump("{not json"), Err(HarnessError::Format(_))));
    let grid_first = "{\"kind\":\"grid\",\"uid\":0,\"depth\":0,\"index\":[0,0,0],\"parent\":null,\"children\":[],\"neighbors\":[null,null,null,null,null,null],\"payload_len\":0}";
    let d = parse_dump(grid_first).unwrap();
    assert!(matches!(check_consistency(&[d]), Err(HarnessError::Format(_))));
}

#[test]
fn dumps_survive_jsonl_roundtrip() {
    let s = spec(3);
    let d = initial_distribute(&s, 2, 3, Scheme::Morton).unwrap();
    for t in &d.topologies {
        assert_eq!(parse_dump(&t.dump_jsonl()).unwrap(), t.dump());
    }
}

#[test]
fn indexed_and_bruteforce_oracles_agree_on_fuzzed_states() {
    for seed in 0..3 {
        let out = fuzz(&FuzzConfig::new(seed, 15, 4, 3)).unwrap();
        let parsed: Vec<_> = out.dumps.iter().map(|d| parse_dump(d).unwrap()).collect();
        let a = check_consistency_with(&parsed, Oracle::Indexed).unwrap();
        let b = check_consistency_with(&parsed, Oracle::BruteForce).unwrap();
        assert_eq!(a, b);
        assert!(a.is_clean());
    }
}

#[test]
fn bench_counts_grids_per_level() {
    for mode in [Mode::Decentral, Mode::Central] {
        for ranks in [1, 3, 7] {
            let r = bench_refine(&BenchConfig::new(2, ranks, mode)).unwrap();
            assert_eq!(r.initial_grids, uniform_grid_count(RefinementFactor::BISECTION, 2));
            assert_eq!(r.final_grids, 585);
            assert_eq!(r.violations, 0);
            assert!(r.total.is_conserved());
        }
    }
    let r = bench_refine(&BenchConfig::new(3, 4, Mode::Decentral)).unwrap();
    assert_eq!(r.initial_grids, 585);
    assert_eq!(r.final_grids, 4681);
}

#[test]
fn bench_rejects_multi_level_jumps() {
    let mut cfg = BenchConfig::new(1, 2, Mode::Decentral);
    cfg.to = 3;
    assert!(bench_refine(&cfg).is_err());
}

#[test]
fn bench_csv_has_synthetic_header_and_schema() {
    let r = bench_refine(&BenchConfig::new(1, 3, Mode::Decentral)).unwrap();
    let mut buf = Vec::new();
    r.write_csv(&mut buf, CostModel::default()).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# modeled_time is synthetic"));
    assert_eq!(
        lines.next().unwrap(),
        "cycle,rank,msgs_sent,msgs_recv,bytes_sent,bytes_recv,modeled_time"
    );
    assert_eq!(lines.count(), 3 * r.cycles.len());
}

#[test]
fn fuzz_seed_one_passes() {
    let out = fuzz(&FuzzConfig::new(1, 100, 8, 3)).unwrap();
    if let Some(f) = &out.failure {
        panic!("round {}: {}\n{}", f.round, f.reason, f.scenario);
    }
    assert_eq!(out.rounds_run, 100);
    assert!(out.bilateral_rounds > 0);
    assert!(out.grouped_migration_rounds > 0);
}

#[test]
fn fuzz_is_deterministic() {
    let cfg = FuzzConfig::new(7, 30, 6, 3);
    let a = fuzz(&cfg).unwrap();
    let b = fuzz(&cfg).unwrap();
    assert_eq!(a.traffic, b.traffic);
    assert_eq!(a.dumps, b.dumps);
    assert_eq!(a.scenario, b.scenario);
    let mut threaded = cfg;
    threaded.exec = ExecMode::Threads;
    assert_eq!(fuzz(&threaded).unwrap().dumps, a.dumps);
}

#[test]
fn zero_rounds_is_rejected() {
    assert!(matches!(
        fuzz(&FuzzConfig::new(1, 0, 2, 2)),
        Err(HarnessError::NoRounds)
    ));
}

#[test]
fn scenario_text_roundtrips_and_replays() {
    let out = fuzz(&FuzzConfig::new(3, 25, 5, 3)).unwrap();
    let text = out.scenario.to_string();
    let parsed: Scenario = text.parse().unwrap();
    assert_eq!(parsed, out.scenario);
    let replayed = replay(&parsed, ExecMode::RoundRobin).unwrap();
    assert!(replayed.failure.is_none());
    assert_eq!(replayed.sim.dumps_jsonl(), out.dumps);
}

#[test]
fn scenario_parse_errors_name_the_line() {
    let text = "seed=1\nranks=2\ndepth=1\nmax_depth=2\nscheme=morton\nmode=decentral\ntransport=rendezvous\n[ops]\nrefine 0:1\nexplode 0:1\n";
    match text.parse::<Scenario>() {
        Err(HarnessError::Scenario { line, .. }) => assert_eq!(line, 10),
        other => panic!("{other:?}"),
    }
    assert!("seed=1\n[ops]\n".parse::<Scenario>().is_err());
}

#[test]
fn handwritten_scenario_replays_in_both_modes() {
    let text = "\
# two rounds on three ranks
seed=0
ranks=3
depth=1
max_depth=3
scheme=morton
mode=decentral
transport=buffered:65536
[ops]
refine 0:1
refine 0:2
refine 1:0
---
delete 0:3
---
";
    let mut sc: Scenario = text.parse().unwrap();
    assert_eq!(sc.transport, TransportMode::Buffered { budget: 65536 });
    assert_eq!(sc.rounds.len(), 2);
    let dec = replay(&sc, ExecMode::RoundRobin).unwrap();
    assert!(dec.failure.is_none());
    sc.mode = Mode::Central;
    let cen = replay(&sc, ExecMode::RoundRobin).unwrap();
    assert_eq!(dec.sim.dumps_jsonl(), cen.sim.dumps_jsonl());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn scenario_format_roundtrips(
        seed in any::<u64>(),
        ranks in 1usize..64,
        ops in prop::collection::vec(prop::collection::vec((0u32..4, 0u32..64, 0u32..1000, 0u32..64), 0..6), 0..5),
        budget in prop::option::of(0usize..100_000),
    ) {
        let mut rounds = Vec::new();
        for round in ops {
            let mut r = ScenarioRound::default();
            for (kind, rank, gid, target) in round {
                match kind {
                    0 => { r.batch.refine(rank, gid); }
                    1 => { r.batch.delete(rank, gid); }
                    _ => r.plans.entry(rank).or_default().moves.push((gid, target)),
                }
            }
            rounds.push(r);
        }
        let sc = Scenario {
            seed,
            ranks,
            depth: 2,
            max_depth: 4,
            scheme: Scheme::DepthFirst,
            mode: Mode::Central,
            transport: budget.map_or(TransportMode::Rendezvous, |budget| TransportMode::Buffered { budget }),
            rounds,
        };
        let back: Scenario = sc.to_string().parse().unwrap();
        prop_assert_eq!(back, sc);
    }
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_domaintopo"))
}

#[test]
fn cli_gen_then_check_and_detect_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("dumps");
    let st = cli()
        .args(["gen", "--depth", "2", "--ranks", "3", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let st = cli().arg("check").arg(&out).output().unwrap();
    assert_eq!(st.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&st.stdout).contains("73 grids, 0 violations"));

    let file = out.join("rank_0001.jsonl");
    let text = std::fs::read_to_string(&file).unwrap();
    let header = text.lines().next().unwrap();
    let mut h: serde_json::Value = serde_json::from_str(header).unwrap();
    h["remote_ranks"] = serde_json::json!([]);
    let rest: Vec<&str> = text.lines().skip(1).collect();
    std::fs::write(&file, format!("{h}\n{}\n", rest.join("\n"))).unwrap();
    let st = cli().arg("check").arg(&out).output().unwrap();
    assert_eq!(st.status.code(), Some(1));

    std::fs::write(&file, "garbage\n").unwrap();
    assert_eq!(cli().arg("check").arg(&out).status().unwrap().code(), Some(2));
}

#[test]
fn cli_bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let st = cli()
        .args([
            "bench", "--mode", "central", "--from", "1", "--to", "2", "--ranks", "4", "--out",
        ])
        .arg(&csv)
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let text = std::fs::read_to_string(csv).unwrap();
    assert!(text.starts_with("# modeled_time is synthetic"));
    assert!(text.contains("cycle,rank,msgs_sent,msgs_recv,bytes_sent,bytes_recv,modeled_time"));
}

#[test]
fn cli_fuzz_and_replay() {
    let st = cli()
        .args(["fuzz", "--seed", "2", "--ops", "10", "--ranks", "4", "--depth", "3"])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let st = cli()
        .args([
            "--threads",
            "fuzz",
            "--seed",
            "2",
            "--ops",
            "5",
            "--ranks",
            "4",
            "--mode",
            "central",
        ])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.txt");
    let sc = fuzz(&FuzzConfig::new(2, 10, 4, 3)).unwrap().scenario;
    std::fs::write(&path, sc.to_string()).unwrap();
    let st = cli().arg("check").arg("--scenario").arg(&path).status().unwrap();
    assert_eq!(st.code(), Some(0));
}

#[test]
fn cli_usage_errors_exit_two() {
    assert_eq!(cli().arg("frobnicate").status().unwrap().code(), Some(2));
    assert_eq!(cli().args(["fuzz", "--ops", "0"]).status().unwrap().code(), Some(2));
    assert_eq!(
        cli().args(["bench", "--mode", "sideways"]).status().unwrap().code(),
        Some(2)
    );
    assert_eq!(cli().arg("check").status().unwrap().code(), Some(2));
}

//! Exit criteria. Runs as a plain binary so every criterion prints exactly
//! one PASS/FAIL line; the process fails if any criterion fails.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use domaintopo::codec::{decode_uid, encode_uid, Direction, GridUid, PositionHash, Query, Rank, Task};
use domaintopo::harness::{bench_refine, fuzz, replay, BenchConfig, FuzzConfig, Mode};
use domaintopo::protocol::FanoutStats;
use domaintopo::schedule::{build_pattern, join_stages, normalize_pairs, peers_from_pairs, regular_stages, CommStep};
use domaintopo::spacetree::{uniform_grid_count, RefinementFactor};
use domaintopo::transport::{Channel, ExecMode, RankTask, Transport, TransportError, TransportMode};

type Verdict = Result<String, String>;

fn within(start: Instant, limit: Duration, what: &str) -> Result<Duration, String> {
    let t = start.elapsed();
    if t < limit {
        Ok(t)
    } else {
        Err(format!("{what} took {t:.2?}, limit {limit:?}"))
    }
}

fn uid_oracle(rank: u64, gid: u64, hash: u64) -> u64 {
    rank * (1 << 32) + gid * (1 << 9) + hash
}

fn query_oracle(task: u64, dir: u64, gid: u64, hash: u64) -> u64 {
    task * (1 << 35) + dir * (1 << 32) + gid * (1 << 9) + hash
}

fn codec_exactness() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0DEC);
    for _ in 0..100_000 {
        let rank: Rank = rng.random();
        let gid = rng.random_range(0..1u32 << 23);
        let hash = PositionHash::from_bits(rng.random_range(0..512)).unwrap();
        let uid = GridUid::new(rank, gid, hash).map_err(|e| e.to_string())?;
        let back = decode_uid(uid.bits());
        if (back.rank(), back.gid(), back.hash()) != (rank, gid, hash) {
            return Err(format!("uid roundtrip failed for {rank}:{gid}#{}", hash.bits()));
        }
        let task = [Task::Refine, Task::Delete, Task::Migrate][rng.random_range(0..3)];
        let dir = match task {
            Task::Refine => Direction::FACES[rng.random_range(0..6)],
            Task::Delete => Direction::from_code(rng.random_range(0..7)),
            Task::Migrate => Direction::from_code(rng.random_range(0..8)),
        };
        let qhash = if dir == Direction::Subgrid {
            hash
        } else {
            PositionHash::ROOT
        };
        let q = Query::new(task, dir, gid, qhash).map_err(|e| e.to_string())?;
        let decoded = Query::decode(q.encode()).map_err(|e| e.to_string())?;
        if decoded != q {
            return Err(format!("query roundtrip failed for {q:?}"));
        }
    }
    let uid_vectors = [(0u32, 0u32, 0u16), (3, 1, 65), (u32::MAX, (1 << 23) - 1, 511)];
    for (r, g, h) in uid_vectors {
        let got = encode_uid(r, g, h).map_err(|e| e.to_string())?;
        let want = uid_oracle(r as u64, g as u64, h as u64);
        if got != want {
            return Err(format!("uid vector {r}:{g}#{h}: {got:#x} != {want:#x}"));
        }
    }
    let query_vectors = [
        (Task::Refine, Direction::West, 5u32, 0u16),
        (Task::Delete, Direction::Subgrid, 1234, 73),
        (Task::Migrate, Direction::Supergrid, (1 << 23) - 1, 0),
    ];
    for (t, d, g, h) in query_vectors {
        let q = Query::new(t, d, g, PositionHash::from_bits(h).unwrap()).map_err(|e| e.to_string())?;
        let want = query_oracle(t as u64, d as u64, g as u64, h as u64);
        if q.encode() != want {
            return Err(format!("query vector {q:?}: {:#x} != {want:#x}", q.encode()));
        }
    }
    let t = within(start, Duration::from_secs(1), "codec roundtrips")?;
    Ok(format!("1e5 uid and query roundtrips plus 6 layout vectors in {t:.2?}"))
}

fn grid_counts() -> Verdict {
    let want = [(3u8, 585u64), (4, 4681), (5, 37449), (6, 299593)];
    for (d, n) in want {
        let got = uniform_grid_count(RefinementFactor::BISECTION, d);
        if got != n {
            return Err(format!("depth {d}: {got} grids, expected {n}"));
        }
    }
    // The distributed path reproduces the smaller totals too.
    for (from, n) in [(2u8, 585u64), (3, 4681)] {
        let r = bench_refine(&BenchConfig::new(from, 4, Mode::Decentral)).map_err(|e| e.to_string())?;
        if r.final_grids != n {
            return Err(format!("refining depth {from}: {} grids, expected {n}", r.final_grids));
        }
    }
    Ok("585 / 4681 / 37449 / 299593".into())
}

fn all_pairs(n: Rank) -> BTreeSet<(Rank, Rank)> {
    normalize_pairs((0..n).flat_map(|a| (0..n).map(move |b| (a, b))))
}

fn table(rows: &[[i32; 6]]) -> Vec<Vec<Option<Rank>>> {
    rows.iter()
        .map(|r| r.iter().map(|&c| (c >= 0).then_some(c as Rank)).collect())
        .collect()
}

fn pattern_golden() -> Verdict {
    const X: i32 = -1;
    let regular = table(&[
        [1, 0, X, X, X, X],
        [2, X, 0, X, X, X],
        [3, 2, 1, 0, X, X],
        [4, 3, X, 1, 0, X],
        [5, 4, 3, 2, 1, 0],
        [X, 5, 4, X, 2, 1],
        [X, X, 5, 4, 3, 2],
        [X, X, X, 5, X, 3],
        [X, X, X, X, 5, 4],
    ]);
    let joined = table(&[
        [1, 0, 5, 4, 3, 2],
        [2, X, 0, 5, X, 3],
        [3, 2, 1, 0, 5, 4],
        [4, 3, X, 1, 0, X],
        [5, 4, 3, 2, 1, 0],
        [X, 5, 4, X, 2, 1],
    ]);
    let pairs = all_pairs(6);
    for (r, peers) in peers_from_pairs(&pairs) {
        let s = build_pattern(r, &peers).map_err(|e| e.to_string())?;
        if s.exchange_order() != peers {
            return Err(format!("rank {r} contacts {:?}", s.exchange_order()));
        }
    }
    let reg = regular_stages(&pairs).map_err(|e| e.to_string())?;
    if reg.cells() != regular {
        return Err(format!("regular table differs:\n{}", reg.to_csv()));
    }
    let opt = join_stages(&pairs).map_err(|e| e.to_string())?;
    if opt.cells() != joined {
        return Err(format!("joined table differs:\n{}", opt.to_csv()));
    }
    let merges: Vec<Vec<usize>> = opt.stages.iter().map(|s| s.merged.clone()).collect();
    let want = vec![vec![1, 7], vec![2, 8], vec![3, 9], vec![4], vec![5], vec![6]];
    if merges != want {
        return Err(format!("merged stage labels {merges:?}"));
    }
    Ok("9-stage regular and 6-stage joined tables match cell for cell".into())
}

/// Executes each rank's schedule: the origin sends a query vector and
/// waits for the answer, the remote side answers.
fn run_schedules(ranks: usize, steps: Vec<Vec<CommStep>>, mode: TransportMode) -> Result<u64, TransportError> {
    let t = Transport::new(ranks, mode);
    let tasks: Vec<(Rank, RankTask<'_, TransportError>)> = steps
        .into_iter()
        .enumerate()
        .map(|(r, steps)| {
            let ep = t.endpoint(r as Rank);
            let task: RankTask<'_, TransportError> = Box::pin(async move {
                for s in steps {
                    match s {
                        CommStep::Send(p) => {
                            ep.send_words(p, Channel::QueryVector, &[r as u64]).await?;
                            ep.recv_words(p, Channel::NeighbourVector).await?;
                        }
                        CommStep::Recv(p) => {
                            ep.recv_words(p, Channel::QueryVector).await?;
                            ep.send_words(p, Channel::NeighbourVector, &[p as u64]).await?;
                        }
                        CommStep::LocalUpdate => {}
                    }
                }
                Ok(())
            });
            (r as Rank, task)
        })
        .collect();
    let stats = t.run_cycle(0, tasks, ExecMode::RoundRobin)?;
    Ok(stats.total().msgs_sent)
}

fn deadlock_freedom() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xDEAD);
    let mut messages = 0;
    for trial in 0..1000 {
        let n: Rank = rng.random_range(2..=32);
        let density: f64 = rng.random_range(0.05..=1.0);
        let mut pairs: BTreeSet<(Rank, Rank)> = BTreeSet::new();
        for a in 0..n {
            for b in a + 1..n {
                if rng.random_bool(density) {
                    pairs.insert((a, b));
                }
            }
        }
        if pairs.is_empty() {
            pairs.insert((0, n - 1));
        }
        let peers = peers_from_pairs(&pairs);
        let steps: Vec<Vec<CommStep>> = (0..n)
            .map(|r| {
                let p = peers.get(&r).cloned().unwrap_or_default();
                build_pattern(r, &p).map(|s| s.steps)
            })
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let sent = run_schedules(n as usize, steps, TransportMode::Rendezvous)
            .map_err(|e| format!("trial {trial} with {n} ranks: {e}"))?;
        if sent != 4 * pairs.len() as u64 {
            return Err(format!("trial {trial}: {sent} messages for {} pairs", pairs.len()));
        }
        messages += sent;
    }
    // Every rank opens with a send: a cycle of blocked senders.
    let n = 6;
    let pairs = all_pairs(n);
    let peers = peers_from_pairs(&pairs);
    let adversarial: Vec<Vec<CommStep>> = (0..n)
        .map(|r| {
            peers[&r]
                .iter()
                .flat_map(|&p| [CommStep::Send(p), CommStep::Recv(p)])
                .collect()
        })
        .collect();
    match run_schedules(n as usize, adversarial, TransportMode::Rendezvous) {
        Err(e @ TransportError::Deadlock { .. }) => {
            let t = within(start, Duration::from_secs(60), "deadlock trials")?;
            Ok(format!(
                "1000 pair sets, {messages} messages, no deadlock; adversarial case: {e}; {t:.2?}"
            ))
        }
        Err(e) => Err(format!("adversarial case raised {e} instead of a deadlock")),
        Ok(_) => Err("adversarial all-send-first schedules completed".into()),
    }
}

fn fuzz_consistency(fanout: &mut FanoutStats) -> Verdict {
    let start = Instant::now();
    let (mut rounds, mut bilateral, mut grouped) = (0, 0, 0);
    for seed in 0..20u64 {
        let ranks = [2usize, 4, 8, 16][seed as usize % 4];
        let depth = 3 + (seed % 2) as u8;
        let out = fuzz(&FuzzConfig::new(seed, 100, ranks, depth)).map_err(|e| e.to_string())?;
        if let Some(f) = out.failure {
            return Err(format!("seed {seed}, round {}: {}", f.round, f.reason));
        }
        rounds += out.rounds_run;
        bilateral += out.bilateral_rounds;
        grouped += out.grouped_migration_rounds;
        fanout.merge(&out.fanout);
    }
    if bilateral == 0 || grouped == 0 {
        return Err(format!(
            "bilateral rounds {bilateral}, grouped migration rounds {grouped}"
        ));
    }
    let t = within(start, Duration::from_secs(300), "fuzzing")?;
    Ok(format!(
        "{rounds} rounds over 20 seeds, zero violations; {bilateral} bilateral-refinement and {grouped} grouped-migration rounds; {t:.2?}"
    ))
}

fn scaling_trends() -> Verdict {
    let start = Instant::now();
    let ranks = [4usize, 8, 16, 32];
    let mut dec = Vec::new();
    let mut dec_words = Vec::new();
    let mut cen = Vec::new();
    for &p in &ranks {
        let d = bench_refine(&BenchConfig::new(4, p, Mode::Decentral)).map_err(|e| e.to_string())?;
        let c = bench_refine(&BenchConfig::new(4, p, Mode::Central)).map_err(|e| e.to_string())?;
        dec.push(d.max_rank_msgs().1);
        dec_words.push(
            d.total
                .per_rank
                .iter()
                .map(|t| (t.bytes_sent + t.bytes_recv) / 8)
                .max()
                .unwrap_or(0),
        );
        let (busiest, _) = c.max_rank_msgs();
        if busiest != 0 {
            return Err(format!("central busiest rank is {busiest}, not the manager"));
        }
        cen.push(c.rank0_msgs());
    }
    let t = within(start, Duration::from_secs(120), "scaling benchmark")?;
    let dec_ok = dec.windows(2).all(|w| w[1] <= w[0]);
    let cen_ok = cen.windows(2).all(|w| w[1] > w[0]);
    let detail = format!(
        "P {ranks:?}: decentral max per-rank messages {dec:?} (payload words {dec_words:?}), central manager messages {cen:?}; {t:.2?}"
    );
    match (dec_ok, cen_ok) {
        (true, true) => Ok(detail),
        (false, _) => Err(format!("decentral maximum is not non-increasing. {detail}")),
        (_, false) => Err(format!("central manager count is not strictly increasing. {detail}")),
    }
}

fn mode_equivalence() -> Verdict {
    let start = Instant::now();
    for seed in 0..10u64 {
        let ranks = [3usize, 5, 8, 12, 16][seed as usize % 5];
        let out = fuzz(&FuzzConfig::new(1000 + seed, 40, ranks, 3)).map_err(|e| e.to_string())?;
        if let Some(f) = out.failure {
            return Err(format!("scenario {seed} failed in round {}: {}", f.round, f.reason));
        }
        let mut sc = out.scenario.clone();
        sc.mode = Mode::Central;
        let central = replay(&sc, ExecMode::RoundRobin).map_err(|e| e.to_string())?;
        if let Some((round, rep)) = central.failure {
            return Err(format!("scenario {seed}: central round {round} inconsistent: {rep}"));
        }
        if central.sim.dumps_jsonl() != out.dumps {
            return Err(format!("scenario {seed}: central dumps differ from decentral"));
        }
    }
    Ok(format!("10 scenarios byte-identical in {:.2?}", start.elapsed()))
}

fn fanout_bounds(fanout: &FanoutStats) -> Verdict {
    let children = RefinementFactor::BISECTION.children();
    if fanout.refinements == 0 || fanout.deletions == 0 || fanout.migrations == 0 {
        return Err(format!("instrumentation saw no traffic: {fanout:?}"));
    }
    if !fanout.within_bounds(children) {
        return Err(format!("bounds exceeded: {fanout:?}"));
    }
    if fanout.max_link_writes > 1 {
        return Err(format!(
            "a link slot was written {} times in one cycle",
            fanout.max_link_writes
        ));
    }
    Ok(format!(
        "max queries: refine {}/6 over {} refinements, delete {}/7 over {} deletions, migrate {}/{} over {} migrations",
        fanout.max_refine_queries,
        fanout.refinements,
        fanout.max_delete_queries,
        fanout.deletions,
        fanout.max_migrate_queries,
        7 + children,
        fanout.migrations
    ))
}

fn main() -> ExitCode {
    let mut fanout = FanoutStats::default();
    let results: Vec<(&str, Verdict)> = vec![
        ("1 codec exactness", codec_exactness()),
        ("2 grid counts", grid_counts()),
        ("3 pattern golden tables", pattern_golden()),
        ("4 deadlock freedom", deadlock_freedom()),
        ("5 fuzzed consistency", fuzz_consistency(&mut fanout)),
        ("6 scaling trends", scaling_trends()),
        ("7 mode equivalence", mode_equivalence()),
        ("8 bounded fan-out", fanout_bounds(&fanout)),
    ];
    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(detail) => println!("acceptance {name}: PASS ({detail})"),
            Err(why) => {
                failed += 1;
                println!("acceptance {name}: FAIL ({why})");
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria pass",
        results.len() - failed,
        results.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

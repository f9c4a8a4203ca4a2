//! Python bindings for the `domaintopo` simulator.

// Triggered inside the pyfunction macro expansion.
#![allow(clippy::useless_conversion)]

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use domaintopo::codec::{self, Direction, Task};
use domaintopo::harness::{self, BenchConfig, FuzzConfig, Mode, Scenario, Sim};
use domaintopo::protocol::{GreedyCountBalancer, NullBalancer, RoundBatch};
use domaintopo::schedule::{self, CommStep, StageTable};
use domaintopo::spacetree::{uniform_grid_count, DomainSpec, RefinementFactor, Scheme};
use domaintopo::transport::{ExecMode, TransportMode};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn exec_mode(threads: bool) -> ExecMode {
    if threads {
        ExecMode::Threads
    } else {
        ExecMode::RoundRobin
    }
}

/// Pack `(rank, gid, hash)` into a 64-bit grid UID.
#[pyfunction]
fn encode_uid(rank: u32, gid: u32, hash: u16) -> PyResult<u64> {
    codec::encode_uid(rank, gid, hash).map_err(value_err)
}

/// Split a grid UID into `(rank, gid, hash)`.
#[pyfunction]
fn decode_uid(bits: u64) -> (u32, u32, u16) {
    let u = codec::decode_uid(bits);
    (u.rank(), u.gid(), u.hash().bits())
}

/// Pack a task query. `task` and `direction` are the numeric codes.
#[pyfunction]
fn encode_query(task: u8, direction: u8, gid: u32, hash: u16) -> PyResult<u64> {
    let task = Task::from_code(task).map_err(value_err)?;
    codec::encode_query(task, Direction::from_code(direction), gid, hash).map_err(value_err)
}

/// Split a query word into `(task, direction, gid, hash)` codes.
#[pyfunction]
fn decode_query(word: u64) -> PyResult<(u8, u8, u32, u16)> {
    let q = codec::decode_query(word).map_err(value_err)?;
    Ok((q.task as u8, q.direction.code(), q.gid, q.hash.bits()))
}

/// Per-rank communication order as `("recv"|"send"|"local", peer)` steps.
#[pyfunction]
fn build_pattern(rank: u32, remote_ranks: Vec<u32>) -> PyResult<Vec<(String, Option<u32>)>> {
    let s = schedule::build_pattern(rank, &remote_ranks).map_err(value_err)?;
    Ok(s.steps
        .iter()
        .map(|step| match step {
            CommStep::Recv(p) => ("recv".to_string(), Some(*p)),
            CommStep::Send(p) => ("send".to_string(), Some(*p)),
            CommStep::LocalUpdate => ("local".to_string(), None),
        })
        .collect())
}

/// Stage table for the given rank pairs, one row per stage and one column
/// per rank. Cells hold the partner rank or `None` when idle.
#[pyfunction]
#[pyo3(signature = (pairs, joined = false))]
fn stage_table(pairs: Vec<(u32, u32)>, joined: bool) -> PyResult<Vec<Vec<Option<u32>>>> {
    let pairs = schedule::normalize_pairs(pairs);
    let t = if joined {
        schedule::join_stages(&pairs)
    } else {
        schedule::regular_stages(&pairs)
    };
    t.map(|t: StageTable| t.cells()).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (depth, factor = (2, 2, 2)))]
fn grid_count(depth: u8, factor: (u8, u8, u8)) -> PyResult<u64> {
    let f = RefinementFactor::new(factor.0, factor.1, factor.2).map_err(value_err)?;
    Ok(uniform_grid_count(f, depth))
}

fn parse_mode(s: &str) -> PyResult<Mode> {
    s.parse().map_err(value_err)
}

fn parse_scheme(s: &str) -> PyResult<Scheme> {
    harness::parse_scheme(s).map_err(value_err)
}

fn parse_transport(s: &str) -> PyResult<TransportMode> {
    harness::parse_transport(s).map_err(value_err)
}

/// A distributed simulation over a bisection-refined unit cube.
#[pyclass(name = "Simulation", unsendable)]
struct PySim {
    sim: Sim,
    spec: DomainSpec,
}

#[pymethods]
impl PySim {
    #[new]
    #[pyo3(signature = (depth, ranks, max_depth = None, mode = "decentral", scheme = "morton", transport = "rendezvous", threads = false))]
    fn new(
        depth: u8,
        ranks: usize,
        max_depth: Option<u8>,
        mode: &str,
        scheme: &str,
        transport: &str,
        threads: bool,
    ) -> PyResult<Self> {
        let spec = DomainSpec::unit_cube(RefinementFactor::BISECTION, max_depth.unwrap_or(depth + 2));
        let dist = harness::initial_distribute(&spec, depth, ranks, parse_scheme(scheme)?).map_err(value_err)?;
        let sim = Sim::new(
            parse_mode(mode)?,
            spec,
            dist.topologies,
            parse_transport(transport)?,
            exec_mode(threads),
        );
        Ok(PySim { sim, spec })
    }

    fn ranks(&self) -> usize {
        self.sim.cluster().topologies().count()
    }

    fn grid_count(&self) -> usize {
        self.sim.cluster().topologies().map(|t| t.len()).sum()
    }

    /// Leaf grids as `(rank, gid, depth)`.
    fn leaves(&self) -> Vec<(u32, u32, u8)> {
        self.sim
            .cluster()
            .topologies()
            .flat_map(|t| {
                t.grids()
                    .filter(|g| g.is_leaf())
                    .map(move |g| (t.rank(), g.uid.gid(), g.depth()))
            })
            .collect()
    }

    /// Run one full round. `refine` and `delete` hold `(rank, gid)` pairs.
    /// Returns the total `(messages, bytes)` sent.
    #[pyo3(signature = (refine = Vec::new(), delete = Vec::new(), balance = false))]
    fn round(&mut self, refine: Vec<(u32, u32)>, delete: Vec<(u32, u32)>, balance: bool) -> PyResult<(u64, u64)> {
        let mut batch = RoundBatch::default();
        for (r, g) in refine {
            batch.refine(r, g);
        }
        for (r, g) in delete {
            batch.delete(r, g);
        }
        let report = if balance {
            self.sim.round(&batch, &mut GreedyCountBalancer)
        } else {
            self.sim.round(&batch, &mut NullBalancer)
        }
        .map_err(runtime_err)?;
        Ok(report.traffic.iter().fold((0, 0), |(m, b), s| {
            let t = s.total();
            (m + t.msgs_sent, b + t.bytes_sent)
        }))
    }

    /// One JSONL dump per rank.
    fn dumps(&self) -> Vec<String> {
        self.sim.dumps_jsonl()
    }

    /// Violation messages; empty when the distributed state is consistent.
    fn check(&self) -> PyResult<Vec<String>> {
        let report = self.sim.check().map_err(runtime_err)?;
        Ok(report.violations.iter().map(|v| v.to_string()).collect())
    }

    fn max_depth(&self) -> u8 {
        self.spec.max_depth
    }
}

/// Check a set of per-rank JSONL dumps. Returns violation messages.
#[pyfunction]
fn check_dumps(dumps: Vec<String>) -> PyResult<Vec<String>> {
    let parsed = dumps
        .iter()
        .map(|d| harness::parse_dump(d))
        .collect::<Result<Vec<_>, _>>()
        .map_err(value_err)?;
    let report = harness::check_consistency(&parsed).map_err(runtime_err)?;
    Ok(report.violations.iter().map(|v| v.to_string()).collect())
}

/// Run a seeded fuzz campaign. Returns
/// `(passed, rounds_run, messages, failure_reason, scenario_text)`.
#[pyfunction]
#[pyo3(signature = (seed, rounds, ranks, depth = 3, mode = "decentral", threads = false))]
fn fuzz(
    seed: u64,
    rounds: usize,
    ranks: usize,
    depth: u8,
    mode: &str,
    threads: bool,
) -> PyResult<(bool, usize, u64, Option<String>, String)> {
    let mut cfg = FuzzConfig::new(seed, rounds, ranks, depth);
    cfg.mode = parse_mode(mode)?;
    cfg.exec = exec_mode(threads);
    let out = harness::fuzz(&cfg).map_err(value_err)?;
    Ok((
        out.passed(),
        out.rounds_run,
        out.traffic.total().msgs_sent,
        out.failure.as_ref().map(|f| f.reason.clone()),
        out.scenario.to_string(),
    ))
}

/// Replay a scenario file's text. Returns `None` when every round is
/// consistent, otherwise `(round, report)` for the first failing round.
#[pyfunction]
#[pyo3(signature = (text, threads = false))]
fn replay(text: &str, threads: bool) -> PyResult<Option<(usize, String)>> {
    let sc: Scenario = text.parse().map_err(value_err)?;
    let out = harness::replay(&sc, exec_mode(threads)).map_err(runtime_err)?;
    Ok(out.failure.map(|(round, report)| (round, report.to_string())))
}

/// Refine a uniform tree from `from_depth` by one level. Returns
/// `(initial_grids, final_grids, busiest_rank, busiest_msgs, rank0_msgs)`.
#[pyfunction]
#[pyo3(name = "bench", signature = (from_depth, ranks, mode = "decentral"))]
fn bench_refine(from_depth: u8, ranks: usize, mode: &str) -> PyResult<(u64, u64, u32, u64, u64)> {
    let cfg = BenchConfig::new(from_depth, ranks, parse_mode(mode)?);
    let res = harness::bench_refine(&cfg).map_err(value_err)?;
    let (rank, msgs) = res.max_rank_msgs();
    Ok((res.initial_grids, res.final_grids, rank, msgs, res.rank0_msgs()))
}

#[pymodule]
fn domaintopo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(encode_uid, m)?)?;
    m.add_function(wrap_pyfunction!(decode_uid, m)?)?;
    m.add_function(wrap_pyfunction!(encode_query, m)?)?;
    m.add_function(wrap_pyfunction!(decode_query, m)?)?;
    m.add_function(wrap_pyfunction!(build_pattern, m)?)?;
    m.add_function(wrap_pyfunction!(stage_table, m)?)?;
    m.add_function(wrap_pyfunction!(grid_count, m)?)?;
    m.add_function(wrap_pyfunction!(check_dumps, m)?)?;
    m.add_function(wrap_pyfunction!(fuzz, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    m.add_function(wrap_pyfunction!(bench_refine, m)?)?;
    m.add_class::<PySim>()?;
    Ok(())
}

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use domaintopo::harness::{
    bench_refine, check_consistency, fuzz, initial_distribute, parse_dump, parse_scheme, parse_transport, replay,
    BenchConfig, FuzzConfig, Mode, Scenario,
};
use domaintopo::spacetree::{DomainSpec, RefinementFactor, Scheme};
use domaintopo::transport::{CostModel, ExecMode, TransportMode};

#[derive(Parser)]
#[command(name = "domaintopo", version, about = "Distributed space-tree topology simulator")]
struct Cli {
    /// Run one executor thread per rank instead of the deterministic interleaving.
    #[arg(long, global = true)]
    threads: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a uniform tree, distribute it and write one JSONL dump per rank.
    Gen {
        #[arg(long, default_value_t = 2)]
        depth: u8,
        #[arg(long, default_value_t = 4)]
        ranks: usize,
        #[arg(long, default_value = "morton", value_parser = parse_scheme)]
        scheme: Scheme,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine a uniform tree by one level and report traffic as CSV.
    Bench {
        #[arg(long, default_value = "decentral")]
        mode: Mode,
        #[arg(long, default_value_t = 3)]
        from: u8,
        #[arg(long)]
        to: Option<u8>,
        #[arg(long, default_value_t = 4)]
        ranks: usize,
        #[arg(long, default_value = "morton", value_parser = parse_scheme)]
        scheme: Scheme,
        #[arg(long, default_value = "rendezvous", value_parser = parse_transport)]
        transport: TransportMode,
        /// Per-message latency of the synthetic cost model, seconds.
        #[arg(long, default_value_t = CostModel::default().alpha)]
        alpha: f64,
        /// Per-byte cost of the synthetic cost model, seconds.
        #[arg(long, default_value_t = CostModel::default().beta)]
        beta: f64,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Random refine/delete/migrate rounds with a consistency check after each.
    Fuzz {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        ops: usize,
        #[arg(long, default_value_t = 8)]
        ranks: usize,
        #[arg(long, default_value_t = 3)]
        depth: u8,
        #[arg(long, default_value = "decentral")]
        mode: Mode,
        #[arg(long, default_value = "rendezvous", value_parser = parse_transport)]
        transport: TransportMode,
        /// Directory for the failure artifact (scenario plus dumps).
        #[arg(long, default_value = "fuzz-failure")]
        out: PathBuf,
    },
    /// Check dumps for consistency, or replay a scenario file and check each round.
    Check {
        /// Dump files or directories of `*.jsonl` dumps.
        dumps: Vec<PathBuf>,
        #[arg(long, conflicts_with = "dumps")]
        scenario: Option<PathBuf>,
    },
}

enum Outcome {
    Pass,
    Violation,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.threads {
        ExecMode::Threads
    } else {
        ExecMode::RoundRobin
    };
    match run(cli.cmd, exec) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Violation) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn write_dumps(dir: &Path, dumps: &[String]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (r, d) in dumps.iter().enumerate() {
        fs::write(dir.join(format!("rank_{r:04}.jsonl")), d)?;
    }
    Ok(())
}

fn collect_dump_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut inner: Vec<PathBuf> = fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<io::Result<_>>()?;
            inner.retain(|f| f.extension().is_some_and(|e| e == "jsonl"));
            inner.sort();
            files.extend(inner);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn run(cmd: Cmd, exec: ExecMode) -> Result<Outcome> {
    match cmd {
        Cmd::Gen {
            depth,
            ranks,
            scheme,
            out,
        } => {
            let spec = DomainSpec::unit_cube(RefinementFactor::BISECTION, depth.max(1));
            let dist = initial_distribute(&spec, depth, ranks, scheme)?;
            let dumps: Vec<String> = dist.topologies.iter().map(|t| t.dump_jsonl()).collect();
            write_dumps(&out, &dumps)?;
            let grids: usize = dist.topologies.iter().map(|t| t.len()).sum();
            println!("wrote {grids} grids over {ranks} ranks to {}", out.display());
            Ok(Outcome::Pass)
        }
        Cmd::Bench {
            mode,
            from,
            to,
            ranks,
            scheme,
            transport,
            alpha,
            beta,
            out,
        } => {
            let mut cfg = BenchConfig::new(from, ranks, mode);
            cfg.to = to.unwrap_or(from + 1);
            cfg.scheme = scheme;
            cfg.transport = transport;
            cfg.exec = exec;
            let res = bench_refine(&cfg)?;
            let cost = CostModel { alpha, beta };
            match &out {
                Some(path) => res.write_csv(fs::File::create(path)?, cost)?,
                None => res.write_csv(io::stdout().lock(), cost)?,
            }
            let (rank, msgs) = res.max_rank_msgs();
            let total = res.total.total();
            let summary = format!(
                "{mode}: {} -> {} grids, {} messages, {} bytes, busiest rank {rank} with {msgs} messages, modeled time {:.6} s (synthetic)",
                res.initial_grids,
                res.final_grids,
                total.msgs_sent,
                total.bytes_sent,
                total.modeled_time(cost)
            );
            if out.is_some() {
                println!("{summary}");
            } else {
                eprintln!("{summary}");
            }
            if res.violations > 0 {
                eprintln!("{} consistency violations", res.violations);
                return Ok(Outcome::Violation);
            }
            Ok(Outcome::Pass)
        }
        Cmd::Fuzz {
            seed,
            ops,
            ranks,
            depth,
            mode,
            transport,
            out,
        } => {
            let mut cfg = FuzzConfig::new(seed, ops, ranks, depth);
            cfg.mode = mode;
            cfg.transport = transport;
            cfg.exec = exec;
            let res = fuzz(&cfg)?;
            match &res.failure {
                None => {
                    let t = res.traffic.total();
                    println!(
                        "seed {seed}: {} rounds passed, {} messages, {} bytes",
                        res.rounds_run, t.msgs_sent, t.bytes_sent
                    );
                    Ok(Outcome::Pass)
                }
                Some(f) => {
                    fs::create_dir_all(&out)?;
                    fs::write(out.join("scenario.txt"), f.scenario.to_string())?;
                    write_dumps(&out.join("dumps"), &f.dumps)?;
                    eprintln!("seed {seed}: round {} failed\n{}", f.round, f.reason);
                    eprintln!("artifact written to {}", out.display());
                    Ok(Outcome::Violation)
                }
            }
        }
        Cmd::Check { dumps, scenario } => {
            if let Some(path) = scenario {
                let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                let sc: Scenario = text.parse()?;
                let res = replay(&sc, exec)?;
                return Ok(match res.failure {
                    None => {
                        println!("{} rounds replayed, consistent", sc.rounds.len());
                        Outcome::Pass
                    }
                    Some((round, report)) => {
                        print!("round {round}: {report}");
                        Outcome::Violation
                    }
                });
            }
            if dumps.is_empty() {
                bail!("no dumps given");
            }
            let files = collect_dump_files(&dumps)?;
            let mut parsed = Vec::with_capacity(files.len());
            for f in &files {
                let text = fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
                parsed.push(parse_dump(&text).with_context(|| format!("parsing {}", f.display()))?);
            }
            let report = check_consistency(&parsed)?;
            let mut stdout = io::stdout().lock();
            write!(stdout, "{report}")?;
            Ok(if report.is_clean() {
                Outcome::Pass
            } else {
                Outcome::Violation
            })
        }
    }
}

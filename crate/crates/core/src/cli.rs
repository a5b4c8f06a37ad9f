//! Command-line front end: configuration, dispatch and the validation suites.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::Deserialize;

use crate::atomics::{atomic_load, atomic_store, cas_at, rmw_at, MemOrder, RmwKind, Scope};
use crate::bench::{
    self, bench_all, bench_p2p, bench_patterns_worlds, format_pattern_table, parse_size, reference_bandwidth, AllOp,
    P2pOp, PatternBenchConfig,
};
use crate::error::{Error, Result};
use crate::kernels::{run_pattern, BlockConfig, CommDelay, GemmProblem, GemmShape, Jitter, Partition, Pattern, RunOptions};
use crate::runtime::{run_world, seeded_rng, strided_tiles, Backoff, WorldConfig};
use crate::symheap::{DType, HeapAddress, SymmetricHeap, HEAP_ALIGN};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Point-to-point load/store/atomic bandwidth for every rank pair.
    BenchP2p,
    /// All ranks loading or storing to all ranks at once.
    BenchAll,
    /// Validate and time the four GEMM + all-scatter patterns.
    BenchPatterns,
    /// Run the property suites.
    Validate,
    /// Small end-to-end tour.
    Demo,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::BenchP2p => "bench-p2p",
            Command::BenchAll => "bench-all",
            Command::BenchPatterns => "bench-patterns",
            Command::Validate => "validate",
            Command::Demo => "demo",
        }
    }
}

/// Flags shared by every command. Each may also be set in the `--config`
/// file under the same name; flags win.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Options {
    /// Number of ranks [default: 4]
    #[arg(long, global = true)]
    pub world: Option<usize>,
    /// Compute units (worker slots) per rank [default: 8]
    #[arg(long, global = true)]
    pub cus: Option<usize>,
    /// Symmetric heap arena per rank, MiB [default: 256]
    #[arg(long, global = true)]
    pub arena_mib: Option<usize>,
    /// Seed for every random input [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Message sizes, e.g. `4K,64K,1M` [default: 4KiB..64MiB doubling]
    #[arg(long, global = true)]
    pub sizes: Option<String>,
    /// GEMM shapes `MxNxK,...` [default: 256x128x512,512x288x2304,512x224x896]
    #[arg(long, global = true)]
    pub shapes: Option<String>,
    /// Patterns to run [default: all four]
    #[arg(long, global = true)]
    pub patterns: Option<String>,
    /// World sizes for bench-patterns [default: --world]
    #[arg(long, global = true)]
    pub worlds: Option<String>,
    /// Operations for bench-p2p / bench-all [default: all]
    #[arg(long, global = true)]
    pub ops: Option<String>,
    /// Added latency per remote transfer, microseconds [default: none]
    #[arg(long, global = true)]
    pub comm_delay_us: Option<u64>,
    /// Output directory [default: out]
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Barrier and lock-wait timeout, seconds [default: 30]
    #[arg(long, global = true)]
    pub timeout_s: Option<u64>,
    /// Timed iterations per bandwidth cell, first discarded [default: 6]
    #[arg(long, global = true)]
    pub iters: Option<usize>,
    /// Timed runs per pattern, median reported [default: 1]
    #[arg(long, global = true)]
    pub runs: Option<usize>,
    #[arg(long, global = true, hide = true)]
    #[serde(default)]
    pub inject_fault: bool,
}

impl Options {
    /// `self` with gaps filled from `file`.
    fn or(self, file: Options) -> Options {
        Options {
            world: self.world.or(file.world),
            cus: self.cus.or(file.cus),
            arena_mib: self.arena_mib.or(file.arena_mib),
            seed: self.seed.or(file.seed),
            sizes: self.sizes.or(file.sizes),
            shapes: self.shapes.or(file.shapes),
            patterns: self.patterns.or(file.patterns),
            worlds: self.worlds.or(file.worlds),
            ops: self.ops.or(file.ops),
            comm_delay_us: self.comm_delay_us.or(file.comm_delay_us),
            out: self.out.or(file.out),
            timeout_s: self.timeout_s.or(file.timeout_s),
            iters: self.iters.or(file.iters),
            runs: self.runs.or(file.runs),
            inject_fault: self.inject_fault || file.inject_fault,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "symmem", version, about = "Symmetric-heap RMA runtime: benchmarks and GEMM overlap patterns")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    options: Options,
    /// Flat JSON file of option values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub world_size: usize,
    pub num_cu: usize,
    pub arena_size: usize,
    pub seed: u64,
    pub sizes: Vec<usize>,
    pub shapes: Vec<GemmShape>,
    pub patterns: Vec<Pattern>,
    pub worlds: Vec<usize>,
    pub ops: Vec<String>,
    pub comm_delay: Option<Duration>,
    pub out: PathBuf,
    pub timeout: Duration,
    pub iters: usize,
    pub runs: usize,
    pub inject_fault: bool,
}

pub const DEFAULT_SHAPES: [GemmShape; 3] = [
    GemmShape::new(256, 128, 512),
    GemmShape::new(512, 288, 2304),
    GemmShape::new(512, 224, 896),
];

impl RunConfig {
    pub fn world_config(&self) -> WorldConfig {
        WorldConfig::new(self.world_size, self.arena_size, self.num_cu).with_timeout(self.timeout)
    }

    fn from_options(command: Command, o: Options) -> Result<Self> {
        let usage = |m: String| Error::Argument(m);
        let world_size = o.world.unwrap_or(4);
        let num_cu = o.cus.unwrap_or(8);
        let arena_mib = o.arena_mib.unwrap_or(256);
        if world_size == 0 || num_cu == 0 || arena_mib == 0 {
            return Err(usage("--world, --cus and --arena-mib must be positive".into()));
        }
        let list = |s: &Option<String>| -> Vec<String> {
            s.as_deref()
                .map(|s| s.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect())
                .unwrap_or_default()
        };
        let sizes = match &o.sizes {
            Some(_) => list(&o.sizes).iter().map(|s| parse_size(s)).collect::<Result<Vec<_>>>()?,
            None => bench::doubling_sizes(4 << 10, 64 << 20),
        };
        let shapes = match &o.shapes {
            Some(_) => list(&o.shapes).iter().map(|s| s.parse()).collect::<Result<Vec<_>>>()?,
            None => DEFAULT_SHAPES.to_vec(),
        };
        let patterns = match &o.patterns {
            Some(_) => list(&o.patterns).iter().map(|s| s.parse()).collect::<Result<Vec<_>>>()?,
            None => Pattern::ALL.to_vec(),
        };
        let worlds = match &o.worlds {
            Some(_) => list(&o.worlds)
                .iter()
                .map(|s| s.parse::<usize>().ok().filter(|&w| w > 0).ok_or_else(|| usage(format!("bad world size `{s}`"))))
                .collect::<Result<Vec<_>>>()?,
            None => vec![world_size],
        };
        let ops = list(&o.ops);
        for op in &ops {
            let ok = match command {
                Command::BenchAll => op.parse::<AllOp>().is_ok(),
                _ => op.parse::<P2pOp>().is_ok(),
            };
            if !ok {
                return Err(usage(format!("unknown op `{op}` for {}", command.name())));
            }
        }
        if sizes.is_empty() || shapes.is_empty() || patterns.is_empty() || worlds.is_empty() {
            return Err(usage("list options must not be empty".into()));
        }
        let iters = o.iters.unwrap_or(bench::DEFAULT_ITERS);
        if iters < bench::MIN_ITERS {
            return Err(usage(format!("--iters must be at least {}", bench::MIN_ITERS)));
        }
        let runs = o.runs.unwrap_or(1);
        if runs == 0 {
            return Err(usage("--runs must be positive".into()));
        }
        Ok(Self {
            command,
            world_size,
            num_cu,
            arena_size: arena_mib << 20,
            seed: o.seed.unwrap_or(0),
            sizes,
            shapes,
            patterns,
            worlds,
            ops,
            comm_delay: o.comm_delay_us.map(Duration::from_micros),
            out: o.out.unwrap_or_else(|| PathBuf::from("out")),
            timeout: Duration::from_secs(o.timeout_s.unwrap_or(30).max(1)),
            iters,
            runs,
            inject_fault: o.inject_fault,
        })
    }
}

#[derive(Debug)]
pub enum ParseError {
    /// Help or version output; not an error.
    Info(String),
    Usage(String),
}

impl ParseError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ParseError::Info(_) => EXIT_OK,
            ParseError::Usage(_) => EXIT_USAGE,
        }
    }
}

impl std::fmt::Display for ParseError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParseError::Info(s) | ParseError::Usage(s) => f.write_str(s.trim_end()),
        }
    }
}

fn read_config_file(path: &Path) -> Result<Options> {
    let text = fs::read_to_string(path).map_err(|e| Error::Argument(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Argument(format!("{}: {e}", path.display())))
}

/// Parses `argv` (program name first) and the optional `--config` file.
pub fn parse<I, T>(argv: I) -> std::result::Result<RunConfig, ParseError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| {
        use clap::error::ErrorKind;
        match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ParseError::Info(e.to_string()),
            _ => ParseError::Usage(e.to_string()),
        }
    })?;
    let file = match &cli.config {
        Some(p) => read_config_file(p).map_err(|e| ParseError::Usage(e.to_string()))?,
        None => Options::default(),
    };
    RunConfig::from_options(cli.command, cli.options.or(file)).map_err(|e| ParseError::Usage(e.to_string()))
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Argument(_) | Error::OutOfHeap { .. } => EXIT_USAGE,
        _ => EXIT_VALIDATION,
    }
}

/// Executes `cfg`, returning the process exit code.
pub fn run(cfg: &RunConfig) -> i32 {
    let result = match cfg.command {
        Command::BenchP2p => run_bandwidth(cfg, false),
        Command::BenchAll => run_bandwidth(cfg, true),
        Command::BenchPatterns => run_patterns(cfg),
        Command::Validate => run_validate(cfg),
        Command::Demo => run_demo(cfg),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

fn ensure_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    Ok(())
}

fn run_bandwidth(cfg: &RunConfig, all: bool) -> Result<i32> {
    ensure_out(cfg)?;
    let ops = cfg.ops.clone();
    let results = run_world(cfg.world_config(), |ctx| -> Result<Vec<bench::BandwidthMatrix>> {
        let reference = if ctx.rank() == 0 { reference_bandwidth(&ctx)? } else { 0.0 };
        let reference = ctx.broadcast(reference, 0)?;
        let mut mats = Vec::new();
        if all {
            let ops: Vec<AllOp> = if ops.is_empty() { AllOp::ALL.to_vec() } else { ops.iter().map(|o| o.parse()).collect::<Result<_>>()? };
            for op in ops {
                mats.extend(bench_all(&ctx, op, &cfg.sizes, cfg.iters, reference)?);
            }
        } else {
            let ops: Vec<P2pOp> = if ops.is_empty() { P2pOp::ALL.to_vec() } else { ops.iter().map(|o| o.parse()).collect::<Result<_>>()? };
            for op in ops {
                mats.extend(bench_p2p(&ctx, op, &cfg.sizes, cfg.iters, reference)?);
            }
        }
        Ok(mats)
    })?;
    let mats = results.into_iter().next().expect("world has a rank 0")?;
    if let Some(m) = mats.first() {
        println!("reference bandwidth: {:.2} GiB/s", m.reference_gibps);
    }
    for m in &mats {
        m.write_csv(&cfg.out)?;
        println!("{m}\n");
    }
    Ok(EXIT_OK)
}

fn pattern_config(cfg: &RunConfig) -> PatternBenchConfig {
    PatternBenchConfig {
        shapes: cfg.shapes.clone(),
        patterns: cfg.patterns.clone(),
        comm_delay: cfg.comm_delay.map(CommDelay::serial),
        runs: cfg.runs,
        seed: cfg.seed,
        inject_fault: cfg.inject_fault,
        ..Default::default()
    }
}

fn run_patterns(cfg: &RunConfig) -> Result<i32> {
    ensure_out(cfg)?;
    let rows = bench_patterns_worlds(&cfg.world_config(), &cfg.worlds, &pattern_config(cfg))?;
    bench::write_patterns_csv(&rows, &cfg.out.join("patterns.csv"))?;
    print!("{}", format_pattern_table(&rows));
    Ok(if rows.iter().all(|r| r.validated) { EXIT_OK } else { EXIT_VALIDATION })
}

fn run_demo(cfg: &RunConfig) -> Result<i32> {
    let world = cfg.world_size.clamp(1, 2);
    let mut wc = cfg.world_config();
    wc.world_size = world;
    let shape = GemmShape::new(256, 128, 512);
    println!("world {world}, {} compute units per rank, GEMM {shape}", cfg.num_cu);
    let pc = PatternBenchConfig {
        shapes: vec![shape],
        seed: cfg.seed,
        inject_fault: cfg.inject_fault,
        ..Default::default()
    };
    let rows = bench_patterns_worlds(&wc, &[world], &pc)?;
    print!("{}", format_pattern_table(&rows));
    let base = rows.iter().find(|r| r.pattern == Pattern::BulkSync);
    for r in rows.iter().filter(|r| r.validated) {
        if let Some(b) = base.filter(|b| b.validated) {
            println!("{:<18} {:.2}x vs bulk-sync", r.pattern.name(), r.speedup_over(b));
        }
    }
    let reference = bench::reference_bandwidth_with(32 << 20, 3)?;
    let small = run_world(wc, |ctx| bench_p2p(&ctx, P2pOp::Store, &[1 << 20], 4, reference))?;
    let m = small.into_iter().next().expect("rank 0")?;
    println!("\n{}", m[0]);
    Ok(if rows.iter().all(|r| r.validated) { EXIT_OK } else { EXIT_VALIDATION })
}

/// One property suite: name and outcome.
pub type SuiteResult = (&'static str, Result<String>);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Validation(msg()))
    }
}

pub fn suite_translation(seed: u64, checks: usize) -> Result<String> {
    let mut rng = seeded_rng(seed, 101);
    let heap = SymmetricHeap::new(8, 1 << 16)?;
    let layout = heap.layout();
    for _ in 0..checks {
        let (a, b) = (rng.random_range(0..8), rng.random_range(0..8));
        let off = rng.random_range(0..layout.arena_size());
        let addr = layout.address(a, off)?;
        let there = layout.translate(addr, a, b)?;
        check(layout.offset_of(there)? == off && there.rank == b, || format!("offset moved translating {a}->{b}"))?;
        check(layout.translate(there, b, a)? == addr, || format!("{a}->{b}->{a} is not the identity"))?;
        check(layout.translate(addr, a, a)? == addr, || "self translation moved".into())?;
        let outside = HeapAddress {
            rank: a,
            linear: layout.base(a)? + layout.arena_size() as u64 + rng.random_range(0..1024u64),
        };
        check(layout.translate(outside, a, b).is_err(), || "out-of-arena address accepted".into())?;
    }
    Ok(format!("{checks} round trips"))
}

pub fn suite_allocation(seed: u64, world: usize, steps: usize) -> Result<String> {
    let cfg = WorldConfig::new(world, 64 << 20, 1);
    let traces = run_world(cfg, |ctx| -> Result<Vec<(usize, usize)>> {
        let mut rng = seeded_rng(seed, 102);
        for _ in 0..steps {
            let n = rng.random_range(1..2048);
            ctx.alloc(&[n], DType::U32)?;
        }
        Ok(ctx.heap().allocation_trace(ctx.rank()))
    })?
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    check(traces.windows(2).all(|w| w[0] == w[1]), || "ranks saw different allocation offsets".into())?;
    check(traces[0].iter().all(|(o, _)| o % HEAP_ALIGN == 0), || "misaligned allocation".into())?;
    Ok(format!("{steps} allocations on {world} ranks"))
}

pub fn suite_atomics(seed: u64, world: usize, adds: usize, trials: usize) -> Result<String> {
    let world = world.max(2);
    let cfg = WorldConfig::new(world, 1 << 20, 1);
    let out = run_world(cfg, |ctx| -> Result<(u64, usize)> {
        let counter = ctx.zeros(&[1], DType::U64)?;
        ctx.barrier()?;
        for _ in 0..adds {
            rmw_at::<u64>(&ctx, RmwKind::Add, &counter, 0, 0, 1, MemOrder::Relaxed, Scope::Sys)?;
        }
        ctx.barrier()?;
        let total: u64 = ctx.heap().read(&counter, 0, 0)?;
        let data = ctx.zeros(&[1], DType::U32)?;
        let flag = ctx.zeros(&[1], DType::U32)?;
        let ack = ctx.zeros(&[1], DType::U32)?;
        ctx.barrier()?;
        let ack_addr = ack.element_address(ctx.layout(), ctx.rank(), 0)?;
        let mut stale = 0;
        let mut rng = seeded_rng(seed, 103 + ctx.rank() as u64);
        for t in 1..=trials as u32 {
            let mut b = Backoff::new();
            if ctx.rank() == 0 {
                while atomic_load::<u32>(&ctx, ack_addr, 1, MemOrder::Acquire, Scope::Sys)? != t - 1 {
                    b.snooze();
                }
                if rng.random_range(0..4) == 0 {
                    std::thread::yield_now();
                }
                ctx.heap().write(&data, 1, 0, t)?;
                if cas_at::<u32>(&ctx, &flag, 0, 1, t - 1, t, MemOrder::Release, Scope::Sys)? != t - 1 {
                    return Err(Error::Validation("publication flag changed under its writer".into()));
                }
            } else if ctx.rank() == 1 {
                while cas_at::<u32>(&ctx, &flag, 0, 1, t, t, MemOrder::Acquire, Scope::Sys)? != t {
                    b.snooze();
                }
                if ctx.heap().read::<u32>(&data, 1, 0)? != t {
                    stale += 1;
                }
                atomic_store::<u32>(&ctx, ack_addr, 1, t, MemOrder::Release, Scope::Sys)?;
            }
        }
        ctx.barrier()?;
        Ok((total, stale))
    })?
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let want = (world * adds) as u64;
    check(out[0].0 == want, || format!("counter is {}, expected {want}", out[0].0))?;
    let stale: usize = out.iter().map(|o| o.1).sum();
    check(stale == 0, || format!("{stale} stale reads"))?;
    Ok(format!("counter {want}, {trials} publications"))
}

pub fn suite_locks(seed: u64, timeout: Duration) -> Result<String> {
    let shape = GemmShape::new(160, 100, 8);
    let blocks = BlockConfig::new(4, 4, 8, 3);
    let tiles = shape.m.div_ceil(blocks.block_m) * shape.n.div_ceil(blocks.block_n);
    for (pattern, part) in [
        (Pattern::WgSpecialized, Partition::new(3, 2)),
        (Pattern::ProducerConsumer, Partition::new(3, 2)),
        (Pattern::WgSpecialized, Partition::new(1, 1)),
        (Pattern::ProducerConsumer, Partition::new(1, 1)),
    ] {
        let cfg = WorldConfig::new(2, 4 << 20, 5).with_timeout(timeout);
        run_world(cfg, |ctx| -> Result<()> {
            let p = GemmProblem::new(&ctx, shape, blocks, seed)?;
            let opts = RunOptions {
                partition: Some(part),
                jitter: Some(Jitter {
                    max: Duration::from_micros(30),
                    seed,
                }),
                ..Default::default()
            };
            run_pattern(&ctx, &p, pattern, &opts).map(|_| ())
        })?
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    }
    Ok(format!("{tiles} tiles per run, 4 runs"))
}

pub fn suite_patterns(cfg: &RunConfig) -> Result<String> {
    let pc = PatternBenchConfig {
        shapes: vec![GemmShape::new(96, 40, 72), GemmShape::new(64, 48, 100)],
        blocks: BlockConfig::new(16, 16, 32, 2),
        seed: cfg.seed,
        inject_fault: cfg.inject_fault,
        ..Default::default()
    };
    let mut worlds = vec![1, 2, cfg.world_size];
    worlds.sort_unstable();
    worlds.dedup();
    let wc = WorldConfig::new(1, 16 << 20, cfg.num_cu.max(2)).with_timeout(cfg.timeout);
    let rows = bench_patterns_worlds(&wc, &worlds, &pc)?;
    if let Some(bad) = rows.iter().find(|r| !r.validated) {
        return Err(Error::Validation(format!(
            "{} {} world {}: {}",
            bad.pattern,
            bad.shape,
            bad.world_size,
            bad.failure.as_deref().unwrap_or("failed")
        )));
    }
    Ok(format!("{} configurations match the reference", rows.len()))
}

pub fn suite_coverage(max: usize) -> Result<String> {
    for total in 1..=max {
        for grid in 1..=max {
            let mut seen = vec![0u8; total];
            for pid in 0..grid {
                for t in strided_tiles(pid, total, grid) {
                    seen[t] += 1;
                }
            }
            check(seen.iter().all(|&c| c == 1), || format!("{total} tiles on a grid of {grid}"))?;
        }
    }
    Ok(format!("{} grid shapes", max * max))
}

pub fn suite_bandwidth(cfg: &RunConfig) -> Result<String> {
    let sizes = [8, 4 << 10, 64 << 10];
    let wc = WorldConfig::new(cfg.world_size.min(4), 4 << 20, 1).with_timeout(cfg.timeout);
    let cells = run_world(wc, |ctx| -> Result<usize> {
        let mut cells = 0;
        for op in P2pOp::ALL {
            cells += bench_p2p(&ctx, op, &sizes, 3, 1.0)?.iter().map(|m| m.gibps.len()).sum::<usize>();
        }
        for op in AllOp::ALL {
            cells += bench_all(&ctx, op, &sizes, 3, 1.0)?.iter().map(|m| m.gibps.len()).sum::<usize>();
        }
        Ok(cells)
    })?
    .into_iter()
    .next()
    .expect("rank 0")?;
    Ok(format!("{cells} cells verified"))
}

pub fn run_suites(cfg: &RunConfig) -> Vec<SuiteResult> {
    let seed = cfg.seed;
    let suites: Vec<(&'static str, Box<dyn Fn() -> Result<String>>)> = vec![
        ("translation", Box::new(move || suite_translation(seed, 10_000))),
        ("allocation", Box::new(move || suite_allocation(seed, cfg.world_size, 1000))),
        ("atomics", Box::new(move || suite_atomics(seed, cfg.world_size, 10_000, 2000))),
        ("lock-protocol", Box::new(move || suite_locks(seed, cfg.timeout))),
        ("patterns", Box::new(move || suite_patterns(cfg))),
        ("grid-coverage", Box::new(|| suite_coverage(64))),
        ("bandwidth-integrity", Box::new(move || suite_bandwidth(cfg))),
    ];
    suites.into_iter().map(|(name, f)| (name, f())).collect()
}

fn run_validate(cfg: &RunConfig) -> Result<i32> {
    let mut failed = 0;
    for (name, res) in run_suites(cfg) {
        match res {
            Ok(detail) => println!("ok     {name:<20} {detail}"),
            Err(e) => {
                failed += 1;
                println!("FAILED {name:<20} {e}");
            }
        }
    }
    Ok(if failed == 0 {
        println!("all suites passed");
        EXIT_OK
    } else {
        println!("{failed} suite(s) failed");
        EXIT_VALIDATION
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse_ok(args: &[&str]) -> RunConfig {
        parse(std::iter::once("symmem").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn defaults() {
        let c = parse_ok(&["validate", "--world", "2"]);
        assert_eq!(c.command, Command::Validate);
        assert_eq!((c.world_size, c.num_cu, c.arena_size, c.seed), (2, 8, 256 << 20, 0));
        assert_eq!(c.worlds, vec![2]);
        assert_eq!(c.shapes, DEFAULT_SHAPES.to_vec());
        assert_eq!(c.sizes.first(), Some(&4096));
        assert_eq!(c.sizes.last(), Some(&(64 << 20)));
        assert_eq!(c.comm_delay, None);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"world": 8, "seed": 5, "comm-delay-us": 40}"#).unwrap();
        let c = parse_ok(&["demo", "--config", path.to_str().unwrap(), "--world", "4"]);
        assert_eq!((c.world_size, c.seed), (4, 5));
        assert_eq!(c.comm_delay, Some(Duration::from_micros(40)));
    }

    #[test]
    fn unknown_keys_and_flags_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"wrold": 8}"#).unwrap();
        let e = parse(["symmem", "validate", "--config", path.to_str().unwrap()]).unwrap_err();
        assert_eq!(e.exit_code(), EXIT_USAGE);
        let e = parse(["symmem", "validate", "--bogus"]).unwrap_err();
        assert_eq!(e.exit_code(), EXIT_USAGE);
        assert_eq!(parse(["symmem", "--help"]).unwrap_err().exit_code(), EXIT_OK);
        for bad in [
            vec!["bench-patterns", "--shapes", "512x288"],
            vec!["bench-p2p", "--sizes", "4Q"],
            vec!["bench-p2p", "--ops", "all_load"],
            vec!["validate", "--world", "0"],
            vec!["bench-p2p", "--iters", "2"],
            vec!["bench-patterns", "--patterns", "ring"],
        ] {
            let args = std::iter::once("symmem").chain(bad.iter().copied());
            assert_eq!(parse(args).unwrap_err().exit_code(), EXIT_USAGE, "{bad:?}");
        }
    }

    #[test]
    fn shapes_round_trip() {
        let c = parse_ok(&["bench-patterns", "--shapes", "512x288x2304,64x32x16"]);
        assert_eq!(c.shapes, vec![GemmShape::new(512, 288, 2304), GemmShape::new(64, 32, 16)]);
        let printed: Vec<String> = c.shapes.iter().map(|s| s.to_string()).collect();
        let again = parse_ok(&["bench-patterns", "--shapes", &printed.join(",")]);
        assert_eq!(again.shapes, c.shapes);
    }

    #[test]
    fn small_suites_pass() {
        suite_translation(1, 500).unwrap();
        suite_allocation(1, 3, 100).unwrap();
        suite_atomics(1, 3, 500, 100).unwrap();
        suite_coverage(16).unwrap();
    }
}

//! Bandwidth microbenchmarks and the pattern comparison study.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use log::warn;
use serde::Serialize;

use crate::atomics::{rmw_each, MemOrder, RmwKind, Scope};
use crate::error::{arg, Error, Result};
use crate::kernels::{
    reference_output, run_pattern, trace, verify_output, BlockConfig, CommDelay, GemmProblem, GemmShape, Partition,
    Pattern, RunOptions,
};
use crate::rma::{self, TileView};
use crate::runtime::{run_world, WorldConfig, WorldContext};
use crate::symheap::{DType, SymmetricBuffer};

/// Bytes moved by each [`reference_bandwidth`] sample.
pub const REFERENCE_BYTES: usize = 256 << 20;
const REFERENCE_SAMPLES: usize = 5;
/// Normalized values above this are clamped and flagged.
pub const NORMALIZED_CEILING: f64 = 1.05;
pub const MIN_ITERS: usize = 3;
pub const DEFAULT_ITERS: usize = 6;

const GIB: f64 = (1u64 << 30) as f64;

/// Parses `4096`, `4K`, `4KiB`, `64M`, `64MiB`, `1G`.
pub fn parse_size(s: &str) -> Result<usize> {
    let t = s.trim();
    let split = t.find(|c: char| !c.is_ascii_digit()).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let n: usize = num
        .parse()
        .map_err(|_| Error::Argument(format!("bad size `{s}`")))?;
    let shift = match unit.trim().to_ascii_lowercase().as_str() {
        "" | "b" => 0,
        "k" | "kib" | "kb" => 10,
        "m" | "mib" | "mb" => 20,
        "g" | "gib" | "gb" => 30,
        _ => return arg(format!("bad size unit in `{s}`")),
    };
    n.checked_shl(shift)
        .filter(|v| v >> shift == n)
        .ok_or_else(|| Error::Argument(format!("size `{s}` overflows")))
}

/// `8B`, `4KiB`, `64MiB`: the largest binary unit that divides `bytes`.
pub fn format_size(bytes: usize) -> String {
    for (shift, unit) in [(30, "GiB"), (20, "MiB"), (10, "KiB")] {
        if bytes >= 1 << shift && bytes.is_multiple_of(1 << shift) {
            return format!("{}{unit}", bytes >> shift);
        }
    }
    format!("{bytes}B")
}

/// Powers of two from `lo` to `hi` inclusive.
pub fn doubling_sizes(lo: usize, hi: usize) -> Vec<usize> {
    std::iter::successors(Some(lo.max(1)), |&s| s.checked_mul(2))
        .take_while(|&s| s <= hi)
        .collect()
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => values[n / 2],
        _ => (values[n / 2 - 1] + values[n / 2]) / 2.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum P2pOp {
    Load,
    Store,
    AtomicAdd,
    AtomicXchg,
}

impl P2pOp {
    pub const ALL: [P2pOp; 4] = [P2pOp::Load, P2pOp::Store, P2pOp::AtomicAdd, P2pOp::AtomicXchg];

    pub fn name(self) -> &'static str {
        match self {
            P2pOp::Load => "load",
            P2pOp::Store => "store",
            P2pOp::AtomicAdd => "atomic_add",
            P2pOp::AtomicXchg => "atomic_xchg",
        }
    }
}

impl FromStr for P2pOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        P2pOp::ALL
            .into_iter()
            .find(|o| o.name() == s.trim())
            .ok_or_else(|| Error::Argument(format!("unknown p2p op `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AllOp {
    AllLoad,
    AllStore,
}

impl AllOp {
    pub const ALL: [AllOp; 2] = [AllOp::AllLoad, AllOp::AllStore];

    pub fn name(self) -> &'static str {
        match self {
            AllOp::AllLoad => "all_load",
            AllOp::AllStore => "all_store",
        }
    }
}

impl FromStr for AllOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AllOp::ALL
            .into_iter()
            .find(|o| o.name() == s.trim())
            .ok_or_else(|| Error::Argument(format!("unknown all-to-all op `{s}`")))
    }
}

/// Measured and normalized bandwidth of every (src, dst) pair for one op and
/// message size.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthMatrix {
    pub op: &'static str,
    pub size: usize,
    pub world_size: usize,
    pub reference_gibps: f64,
    /// Row-major by source rank.
    pub gibps: Vec<f64>,
    pub normalized: Vec<f64>,
    /// Cells whose raw ratio fell outside `[0, NORMALIZED_CEILING]`.
    pub out_of_range: Vec<bool>,
}

impl BandwidthMatrix {
    pub fn from_measured(op: &'static str, size: usize, world_size: usize, gibps: Vec<f64>, reference: f64) -> Self {
        let mut normalized = Vec::with_capacity(gibps.len());
        let mut out_of_range = Vec::with_capacity(gibps.len());
        for &g in &gibps {
            let raw = g / reference;
            out_of_range.push(!(0.0..=NORMALIZED_CEILING).contains(&raw));
            normalized.push(if raw.is_nan() { 0.0 } else { raw.clamp(0.0, NORMALIZED_CEILING) });
        }
        Self {
            op,
            size,
            world_size,
            reference_gibps: reference,
            gibps,
            normalized,
            out_of_range,
        }
    }

    pub fn gibps(&self, src: usize, dst: usize) -> f64 {
        self.gibps[src * self.world_size + dst]
    }

    pub fn normalized(&self, src: usize, dst: usize) -> f64 {
        self.normalized[src * self.world_size + dst]
    }

    pub fn file_name(&self) -> String {
        let prefix = if self.op.starts_with("all_") { "" } else { "p2p_" };
        format!("{prefix}{}_{}.csv", self.op, format_size(self.size))
    }

    /// Columns: `src_rank, dst_rank, gibps, normalized`.
    pub fn write_csv(&self, dir: &Path) -> Result<PathBuf> {
        #[derive(Serialize)]
        struct Row {
            src_rank: usize,
            dst_rank: usize,
            gibps: f64,
            normalized: f64,
        }
        let path = dir.join(self.file_name());
        let mut w = csv::Writer::from_path(&path)?;
        for s in 0..self.world_size {
            for d in 0..self.world_size {
                w.serialize(Row {
                    src_rank: s,
                    dst_rank: d,
                    gibps: self.gibps(s, d),
                    normalized: self.normalized(s, d),
                })?;
            }
        }
        w.flush()?;
        Ok(path)
    }
}

impl fmt::Display for BandwidthMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} {} (GiB/s, normalized)", self.op, format_size(self.size))?;
        write!(f, "src\\dst")?;
        for d in 0..self.world_size {
            write!(f, " {d:>14}")?;
        }
        for s in 0..self.world_size {
            write!(f, "\n{s:>7}")?;
            for d in 0..self.world_size {
                let flag = if self.out_of_range[s * self.world_size + d] { '!' } else { ' ' };
                write!(f, " {:>7.2} ({:.2}){flag}", self.gibps(s, d), self.normalized(s, d))?;
            }
        }
        Ok(())
    }
}

/// Local memory-copy bandwidth in GiB/s: median of five self-copies of
/// [`REFERENCE_BYTES`] through [`rma::put`] in a private single-rank heap,
/// after one untimed warmup copy. This is the operation a self cell of
/// [`bench_p2p`] measures.
pub fn reference_bandwidth(_ctx: &WorldContext) -> Result<f64> {
    reference_bandwidth_with(REFERENCE_BYTES, REFERENCE_SAMPLES)
}

pub fn reference_bandwidth_with(bytes: usize, samples: usize) -> Result<f64> {
    let n = (bytes / 4).max(1);
    let arena = crate::symheap::align_up(n * 4, crate::symheap::HEAP_ALIGN) * 2;
    let ctx = crate::runtime::init(WorldConfig::new(1, arena, 1))?.remove(0);
    let src = ctx.alloc(&[n], DType::U32)?;
    let dst = ctx.alloc(&[n], DType::U32)?;
    let words = payload(0, 0, 0, n);
    ctx.heap().write_all(&src, 0, &words)?;
    let (sv, dv) = (TileView::full(&src)?, TileView::full(&dst)?);
    let mut times = Vec::with_capacity(samples);
    for i in 0..=samples.max(1) {
        let t = Instant::now();
        rma::put::<u32>(&ctx, &sv, &dv, 0, 0)?;
        let dt = t.elapsed().as_secs_f64();
        if i > 0 {
            times.push((n * 4) as f64 / dt.max(1e-9) / GIB);
        }
    }
    check_payload(&ctx.heap().read_all(&dst, 0)?, &words, || "reference copy".into())?;
    let lo = times.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = times.iter().copied().fold(0.0, f64::max);
    if hi > lo * 1.25 {
        warn!("reference bandwidth samples vary by more than 25% ({lo:.2}..{hi:.2} GiB/s)");
    }
    Ok(median(&mut times))
}

/// Payload for iteration `iter` from `src` towards `dst`.
fn pattern_word(iter: usize, src: usize, dst: usize, i: usize) -> u32 {
    let tag = ((iter as u32) << 20) ^ ((src as u32) << 10) ^ dst as u32;
    (i as u32).wrapping_mul(0x9E37_79B1) ^ tag.rotate_left(13) ^ 0x5bd1_e995
}

fn payload(iter: usize, src: usize, dst: usize, n: usize) -> Vec<u32> {
    (0..n).map(|i| pattern_word(iter, src, dst, i)).collect()
}

fn check_payload(got: &[u32], want: &[u32], what: impl Fn() -> String) -> Result<()> {
    match got.iter().zip(want).position(|(g, w)| g != w) {
        None if got.len() == want.len() => Ok(()),
        None => Err(Error::DataCorruption(format!("{}: length {} != {}", what(), got.len(), want.len()))),
        Some(i) => Err(Error::DataCorruption(format!(
            "{}: word {i} is {:#010x}, expected {:#010x}",
            what(),
            got[i],
            want[i]
        ))),
    }
}

fn validate_sizes(ctx: &WorldContext, sizes: &[usize], iters: usize, slots: usize) -> Result<()> {
    if iters < MIN_ITERS {
        return arg(format!("iters must be >= {MIN_ITERS} (the first is warmup), got {iters}"));
    }
    for &s in sizes {
        if s == 0 || s % 4 != 0 {
            return arg(format!("message size {s} is not a positive multiple of 4 bytes"));
        }
        let need = s * (1 + slots) + 2 * crate::symheap::HEAP_ALIGN;
        if need > ctx.config().arena_size {
            return arg(format!(
                "message size {} needs {} of arena, only {} available",
                format_size(s),
                format_size(need),
                format_size(ctx.config().arena_size)
            ));
        }
    }
    Ok(())
}

/// One timed transfer of `op` from `src` to `dst`, run on the initiating
/// rank. Returns elapsed seconds.
fn p2p_transfer(ctx: &WorldContext, op: P2pOp, sbuf: &SymmetricBuffer, dbuf: &SymmetricBuffer, src: usize, dst: usize, words: &[u32]) -> Result<f64> {
    let sv = TileView::full(sbuf)?;
    let dv = TileView::full(dbuf)?;
    let t = Instant::now();
    match op {
        P2pOp::Load => rma::get::<u32>(ctx, &sv, &dv, src, dst)?,
        P2pOp::Store => rma::put::<u32>(ctx, &sv, &dv, src, dst)?,
        P2pOp::AtomicAdd => rmw_each(ctx, RmwKind::Add, dbuf, dst, words, MemOrder::Relaxed, Scope::Sys)?,
        P2pOp::AtomicXchg => rmw_each(ctx, RmwKind::Xchg, dbuf, dst, words, MemOrder::Relaxed, Scope::Sys)?,
    }
    Ok(t.elapsed().as_secs_f64())
}

/// Point-to-point bandwidth of `op` for every ordered rank pair. Loads are
/// initiated by the destination, all other ops by the source. Collective.
pub fn bench_p2p(ctx: &WorldContext, op: P2pOp, sizes: &[usize], iters: usize, reference: f64) -> Result<Vec<BandwidthMatrix>> {
    validate_sizes(ctx, sizes, iters, 1)?;
    let w = ctx.world_size();
    let me = ctx.rank();
    let mut out = Vec::with_capacity(sizes.len());
    for &size in sizes {
        ctx.reset_heap()?;
        let n = size / 4;
        let sbuf = ctx.alloc(&[n], DType::U32)?;
        let dbuf = ctx.alloc(&[n], DType::U32)?;
        let mut gibps = vec![0.0; w * w];
        for src in 0..w {
            for dst in 0..w {
                let initiator = if op == P2pOp::Load { dst } else { src };
                let mut samples = Vec::with_capacity(iters);
                for iter in 0..iters {
                    let words = payload(iter, src, dst, n);
                    if me == src {
                        ctx.heap().write_all(&sbuf, src, &words)?;
                    }
                    if me == dst {
                        let fill = if op == P2pOp::AtomicAdd { 0u32 } else { 0xDEAD_BEEF };
                        ctx.heap().write_all(&dbuf, dst, &vec![fill; n])?;
                    }
                    ctx.barrier()?;
                    let result = if me == initiator {
                        p2p_transfer(ctx, op, &sbuf, &dbuf, src, dst, &words).and_then(|dt| {
                            let got: Vec<u32> = ctx.heap().read_all(&dbuf, dst)?;
                            check_payload(&got, &words, || {
                                format!("{} {} {src}->{dst} iter {iter}", op.name(), format_size(size))
                            })?;
                            Ok(dt)
                        })
                    } else {
                        Ok(0.0)
                    };
                    let result = ctx.broadcast(result, initiator)?;
                    let dt = result?;
                    if iter > 0 {
                        samples.push(size as f64 / dt.max(1e-9) / GIB);
                    }
                }
                gibps[src * w + dst] = median(&mut samples);
            }
        }
        out.push(BandwidthMatrix::from_measured(op.name(), size, w, gibps, reference));
    }
    if me == 0 {
        warn_non_monotone(&out);
    }
    Ok(out)
}

/// Every rank transfers to (or from) every rank at once; rank `s`'s payload
/// for `d` lands in slot `s` of `d`'s destination buffer. Collective.
pub fn bench_all(ctx: &WorldContext, op: AllOp, sizes: &[usize], iters: usize, reference: f64) -> Result<Vec<BandwidthMatrix>> {
    let w = ctx.world_size();
    validate_sizes(ctx, sizes, iters, w)?;
    let me = ctx.rank();
    let mut out = Vec::with_capacity(sizes.len());
    for &size in sizes {
        ctx.reset_heap()?;
        let n = size / 4;
        let sbuf = ctx.alloc(&[w * n], DType::U32)?;
        let dbuf = ctx.alloc(&[w * n], DType::U32)?;
        let mut samples = vec![Vec::with_capacity(iters); w * w];
        for iter in 0..iters {
            let mine: Vec<u32> = (0..w).flat_map(|d| payload(iter, me, d, n)).collect();
            ctx.heap().write_all(&sbuf, me, &mine)?;
            ctx.heap().write_all(&dbuf, me, &vec![0xDEAD_BEEFu32; w * n])?;
            ctx.barrier()?;
            let mut times = vec![0.0f64; w];
            let mut result = Ok(());
            for step in 0..w {
                let peer = (me + step + 1) % w;
                let (src, dst) = match op {
                    AllOp::AllStore => (me, peer),
                    AllOp::AllLoad => (peer, me),
                };
                let sv = TileView::linear(&sbuf, dst * n, n)?;
                let dv = TileView::linear(&dbuf, src * n, n)?;
                let t = Instant::now();
                let r = match op {
                    AllOp::AllStore => rma::put::<u32>(ctx, &sv, &dv, src, dst),
                    AllOp::AllLoad => rma::get::<u32>(ctx, &sv, &dv, src, dst),
                };
                times[peer] = t.elapsed().as_secs_f64();
                if r.is_err() {
                    result = r;
                    break;
                }
            }
            ctx.barrier()?;
            if result.is_ok() {
                let got: Vec<u32> = ctx.heap().read_all(&dbuf, me)?;
                result = (0..w).try_for_each(|s| {
                    check_payload(&got[s * n..(s + 1) * n], &payload(iter, s, me, n), || {
                        format!("{} {} {s}->{me} iter {iter}", op.name(), format_size(size))
                    })
                });
            }
            let gathered = ctx.all_gather((times, result))?;
            for (r, (t, res)) in gathered.into_iter().enumerate() {
                res?;
                if iter == 0 {
                    continue;
                }
                for (peer, dt) in t.into_iter().enumerate() {
                    let (src, dst) = match op {
                        AllOp::AllStore => (r, peer),
                        AllOp::AllLoad => (peer, r),
                    };
                    samples[src * w + dst].push(size as f64 / dt.max(1e-9) / GIB);
                }
            }
        }
        let gibps = samples.iter_mut().map(|s| median(s)).collect();
        out.push(BandwidthMatrix::from_measured(op.name(), size, w, gibps, reference));
    }
    if me == 0 {
        warn_non_monotone(&out);
    }
    Ok(out)
}

fn warn_non_monotone(mats: &[BandwidthMatrix]) {
    for pair in mats.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        for i in 0..a.gibps.len() {
            if b.gibps[i] < a.gibps[i] * 0.9 {
                warn!(
                    "{} cell {}->{}: {:.2} GiB/s at {} after {:.2} at {}",
                    a.op,
                    i / a.world_size,
                    i % a.world_size,
                    b.gibps[i],
                    format_size(b.size),
                    a.gibps[i],
                    format_size(a.size)
                );
            }
        }
    }
}

/// Mean over pairs of the largest size's bandwidth divided by the peak.
pub fn plateau_ratio(mats: &[BandwidthMatrix]) -> Option<f64> {
    let last = mats.last()?;
    let peak = mats.iter().flat_map(|m| m.gibps.iter().copied()).fold(0.0, f64::max);
    (peak > 0.0).then(|| last.gibps.iter().sum::<f64>() / last.gibps.len() as f64 / peak)
}

#[derive(Debug, Clone)]
pub struct PatternBenchConfig {
    pub shapes: Vec<GemmShape>,
    pub patterns: Vec<Pattern>,
    pub blocks: BlockConfig,
    pub partition: Option<Partition>,
    pub comm_delay: Option<CommDelay>,
    /// Timed runs per (shape, pattern); the median is reported.
    pub runs: usize,
    pub seed: u64,
    pub rtol: f32,
    /// Corrupts one output element before validation.
    pub inject_fault: bool,
}

impl Default for PatternBenchConfig {
    fn default() -> Self {
        Self {
            shapes: vec![GemmShape::new(512, 288, 2304)],
            patterns: Pattern::ALL.to_vec(),
            blocks: BlockConfig::default(),
            partition: None,
            comm_delay: None,
            runs: 1,
            seed: 0,
            rtol: 1e-5,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternTiming {
    pub pattern: Pattern,
    pub shape: GemmShape,
    pub world_size: usize,
    pub tiles: usize,
    pub validated: bool,
    /// First barrier exit to last rank finishing. Zero when not validated.
    pub total: Duration,
    /// First compute start to last compute end, across ranks.
    pub compute: Duration,
    /// First to last remote transfer, across ranks.
    pub comm: Duration,
    pub transfers: usize,
    pub overlap_efficiency: Option<f64>,
    pub failure: Option<String>,
}

impl PatternTiming {
    pub fn speedup_over(&self, base: &PatternTiming) -> f64 {
        base.total.as_secs_f64() / self.total.as_secs_f64()
    }
}

fn span_len(s: Option<(Duration, Duration)>) -> Duration {
    s.map_or(Duration::ZERO, |(a, b)| b.saturating_sub(a))
}

/// One validated run of `pattern`. Collective; every rank gets the same
/// result.
fn timed_run(
    ctx: &WorldContext,
    p: &GemmProblem,
    expected: &[f32],
    pattern: Pattern,
    cfg: &PatternBenchConfig,
) -> Result<(Duration, Duration, Duration, usize, Option<String>)> {
    let opts = RunOptions {
        partition: cfg.partition,
        jitter: None,
        trace: true,
        comm_delay: cfg.comm_delay,
    };
    let rep = run_pattern(ctx, p, pattern, &opts)?;
    if cfg.inject_fault && ctx.rank() == 0 {
        let v: f32 = ctx.heap().read(&p.c_global, 0, 0)?;
        ctx.heap().write(&p.c_global, 0, 0, v + 1.0)?;
    }
    let check = verify_output(ctx, p, expected, cfg.rtol).err().map(|e| e.to_string());
    let all = ctx.all_gather((rep.started, rep.finished, rep.events, check))?;
    let t0 = all.iter().map(|a| a.0).min().unwrap_or_default();
    let t1 = all.iter().map(|a| a.1).max().unwrap_or_default();
    let events: Vec<_> = all.iter().flat_map(|a| a.2.iter().cloned()).collect();
    let failure = all.into_iter().find_map(|a| a.3);
    let transfers = events
        .iter()
        .filter(|e| e.phase.is_comm() && e.peer != Some(e.rank))
        .count();
    Ok((
        t1.saturating_sub(t0),
        span_len(trace::compute_span(&events)),
        span_len(trace::comm_span(&events)),
        transfers,
        failure,
    ))
}

/// Validates and times every pattern on every shape in this world.
/// Collective; every rank gets the same list.
pub fn bench_patterns(ctx: &WorldContext, cfg: &PatternBenchConfig) -> Result<Vec<PatternTiming>> {
    if cfg.runs == 0 {
        return arg("runs must be >= 1");
    }
    let mut out = Vec::new();
    for &shape in &cfg.shapes {
        ctx.reset_heap()?;
        let p = GemmProblem::new(ctx, shape, cfg.blocks, cfg.seed)?;
        let expected = if ctx.rank() == 0 { reference_output(ctx, &p)? } else { Vec::new() };
        let expected = ctx.broadcast(expected, 0)?;
        let first = out.len();
        for &pattern in &cfg.patterns {
            let mut runs = Vec::with_capacity(cfg.runs);
            let mut failure = None;
            for _ in 0..cfg.runs {
                let r = timed_run(ctx, &p, &expected, pattern, cfg)?;
                if let Some(f) = r.4.clone() {
                    failure = Some(f);
                    break;
                }
                runs.push(r);
            }
            let mut t = PatternTiming {
                pattern,
                shape,
                world_size: ctx.world_size(),
                tiles: p.total_tiles(),
                validated: failure.is_none(),
                total: Duration::ZERO,
                compute: Duration::ZERO,
                comm: Duration::ZERO,
                transfers: 0,
                overlap_efficiency: None,
                failure,
            };
            if t.validated {
                runs.sort_by_key(|r| r.0);
                let mid = &runs[runs.len() / 2];
                (t.total, t.compute, t.comm, t.transfers) = (mid.0, mid.1, mid.2, mid.3);
            }
            out.push(t);
        }
        if cfg.comm_delay.is_some() {
            attach_overlap_efficiency(&mut out[first..]);
        }
    }
    Ok(out)
}

/// `1 − (T_overlapped − T_compute) / T_comm`, with compute and
/// communication spans taken from the bulk-synchronous run.
pub fn overlap_efficiency(overlapped: Duration, compute: Duration, comm: Duration) -> Option<f64> {
    let c = comm.as_secs_f64();
    (c > 0.0).then(|| 1.0 - (overlapped.as_secs_f64() - compute.as_secs_f64()) / c)
}

fn attach_overlap_efficiency(rows: &mut [PatternTiming]) {
    let Some(base) = rows.iter().find(|r| r.pattern == Pattern::BulkSync && r.validated).cloned() else {
        return;
    };
    for r in rows.iter_mut().filter(|r| r.validated) {
        r.overlap_efficiency = overlap_efficiency(r.total, base.compute, base.comm);
    }
}

/// Runs [`bench_patterns`] in a fresh world per size in `worlds`.
pub fn bench_patterns_worlds(base: &WorldConfig, worlds: &[usize], cfg: &PatternBenchConfig) -> Result<Vec<PatternTiming>> {
    let mut out = Vec::new();
    for &w in worlds {
        let mut wc = base.clone();
        wc.world_size = w;
        let mut per_rank = run_world(wc, |ctx| bench_patterns(&ctx, cfg))?;
        out.extend(per_rank.swap_remove(0)?);
    }
    Ok(out)
}

/// Columns: `pattern, M, N, K, world, total_s, compute_s, comm_s, validated`.
/// Timing columns are empty for configurations that failed validation.
pub fn write_patterns_csv(rows: &[PatternTiming], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["pattern", "M", "N", "K", "world", "total_s", "compute_s", "comm_s", "validated"])?;
    for r in rows {
        let secs = |d: Duration| {
            if r.validated {
                format!("{:.6}", d.as_secs_f64())
            } else {
                String::new()
            }
        };
        w.write_record([
            r.pattern.name().to_string(),
            r.shape.m.to_string(),
            r.shape.n.to_string(),
            r.shape.k.to_string(),
            r.world_size.to_string(),
            secs(r.total),
            secs(r.compute),
            secs(r.comm),
            r.validated.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Plain-text summary of pattern timings, one line per row.
pub fn format_pattern_table(rows: &[PatternTiming]) -> String {
    let mut s = format!(
        "{:<18} {:>16} {:>5} {:>10} {:>10} {:>10} {:>8} {:>9}\n",
        "pattern", "shape", "world", "total_s", "compute_s", "comm_s", "overlap", "validated"
    );
    for r in rows {
        let ov = r.overlap_efficiency.map_or("-".to_string(), |e| format!("{e:.2}"));
        s += &format!(
            "{:<18} {:>16} {:>5} {:>10.4} {:>10.4} {:>10.4} {:>8} {:>9}\n",
            r.pattern.name(),
            r.shape.to_string(),
            r.world_size,
            r.total.as_secs_f64(),
            r.compute.as_secs_f64(),
            r.comm.as_secs_f64(),
            ov,
            r.validated
        );
        if let Some(f) = &r.failure {
            s += &format!("  failed: {f}\n");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(world: usize) -> WorldConfig {
        WorldConfig::new(world, 4 << 20, 4).with_timeout(Duration::from_secs(20))
    }

    #[test]
    fn sizes_parse_and_format() {
        assert_eq!(parse_size("4096").unwrap(), 4096);
        assert_eq!(parse_size("4K").unwrap(), 4096);
        assert_eq!(parse_size("64MiB").unwrap(), 64 << 20);
        assert_eq!(parse_size("8b").unwrap(), 8);
        assert!(parse_size("4Q").is_err());
        assert!(parse_size("").is_err());
        assert_eq!(format_size(8), "8B");
        assert_eq!(format_size(4096), "4KiB");
        assert_eq!(format_size(6144), "6KiB");
        assert_eq!(format_size(64 << 20), "64MiB");
        for s in doubling_sizes(8, 1 << 30) {
            assert_eq!(parse_size(&format_size(s)).unwrap(), s);
        }
        assert_eq!(doubling_sizes(4096, 16384), vec![4096, 8192, 16384]);
    }

    #[test]
    fn median_excludes_nothing_itself() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }

    #[test]
    fn normalization_clamps_and_flags() {
        let m = BandwidthMatrix::from_measured("load", 8, 2, vec![1.0, 2.0, 3.0, f64::NAN], 2.0);
        assert_eq!(m.normalized, vec![0.5, 1.0, NORMALIZED_CEILING, 0.0]);
        assert_eq!(m.out_of_range, vec![false, false, true, true]);
        assert_eq!(m.file_name(), "p2p_load_8B.csv");
        let a = BandwidthMatrix::from_measured("all_store", 4096, 1, vec![1.0], 1.0);
        assert_eq!(a.file_name(), "all_store_4KiB.csv");
    }

    #[test]
    fn reference_is_positive() {
        let r = reference_bandwidth_with(1 << 20, 3).unwrap();
        assert!(r.is_finite() && r > 0.0);
    }

    #[test]
    fn p2p_ops_verify_every_cell() {
        run_world(cfg(2), |ctx| {
            for op in P2pOp::ALL {
                let mats = bench_p2p(&ctx, op, &[8, 4096], 3, 1.0).unwrap();
                assert_eq!(mats.len(), 2);
                for m in &mats {
                    assert_eq!(m.gibps.len(), 4);
                    assert!(m.gibps.iter().all(|g| g.is_finite() && *g > 0.0), "{m}");
                }
            }
        })
        .unwrap();
    }

    #[test]
    fn all_ops_populate_every_cell() {
        run_world(cfg(3), |ctx| {
            for op in AllOp::ALL {
                let mats = bench_all(&ctx, op, &[256], 3, 1.0).unwrap();
                assert!(mats[0].gibps.iter().all(|g| g.is_finite() && *g > 0.0));
            }
        })
        .unwrap();
    }

    #[test]
    fn bench_rejects_bad_arguments() {
        run_world(cfg(1), |ctx| {
            assert!(bench_p2p(&ctx, P2pOp::Load, &[4096], 2, 1.0).is_err());
            assert!(bench_p2p(&ctx, P2pOp::Load, &[6], 3, 1.0).is_err());
            assert!(bench_p2p(&ctx, P2pOp::Load, &[64 << 20], 3, 1.0).is_err());
        })
        .unwrap();
    }

    #[test]
    fn patterns_validate_and_fill_csv() {
        let pc = PatternBenchConfig {
            shapes: vec![GemmShape::new(64, 32, 48)],
            blocks: BlockConfig::new(16, 16, 16, 2),
            ..Default::default()
        };
        let rows = bench_patterns_worlds(&cfg(2), &[1, 2], &pc).unwrap();
        assert_eq!(rows.len(), 8);
        for r in &rows {
            assert!(r.validated, "{r:?}");
            assert!(r.compute <= r.total && r.comm <= r.total, "{r:?}");
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("patterns.csv");
        write_patterns_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 9);
        assert!(text.starts_with("pattern,M,N,K,world,total_s,compute_s,comm_s,validated"));
    }

    #[test]
    fn injected_fault_fails_validation() {
        let pc = PatternBenchConfig {
            shapes: vec![GemmShape::new(32, 16, 16)],
            patterns: vec![Pattern::BulkSync],
            blocks: BlockConfig::new(16, 16, 16, 1),
            inject_fault: true,
            ..Default::default()
        };
        let rows = bench_patterns_worlds(&cfg(2), &[2], &pc).unwrap();
        assert!(!rows[0].validated && rows[0].failure.is_some());
        assert_eq!(rows[0].total, Duration::ZERO);
    }

    #[test]
    fn overlap_efficiency_formula() {
        let s = Duration::from_secs;
        assert_eq!(overlap_efficiency(s(10), s(10), s(5)), Some(1.0));
        assert_eq!(overlap_efficiency(s(15), s(10), s(5)), Some(0.0));
        assert_eq!(overlap_efficiency(s(1), s(1), Duration::ZERO), None);
    }
}

//! Tiled GEMM and the four GEMM + all-scatter overlap patterns.
//!
//! Every rank multiplies the shared `A` (M×K) by its own shard `B` (K×N) and
//! scatters the M×N result into column block `[r·N, (r+1)·N)` of every rank's
//! `C_global`.

pub mod trace;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::Rng;

use crate::atomics::{cas_at, MemOrder, Scope};
use crate::error::{arg, Error, Result};
use crate::rma::{self, TileView};
use crate::runtime::{fill_uniform, seeded_rng, strided_tiles, Backoff, GridLaunch, WorldContext};
use crate::symheap::{DType, SymmetricBuffer};

pub use trace::{CommDelay, Phase, Recorder, TraceEvent};

/// Written over `C_global` before each run so unwritten cells never pass
/// validation.
pub const CANARY: f32 = f32::NAN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GemmShape {
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

impl GemmShape {
    pub const fn new(m: usize, n: usize, k: usize) -> Self {
        Self { m, n, k }
    }
}

impl fmt::Display for GemmShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.m, self.n, self.k)
    }
}

impl FromStr for GemmShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let dims: Vec<&str> = s.trim().split(['x', 'X']).collect();
        if dims.len() != 3 {
            return arg(format!("shape `{s}` is not of the form MxNxK"));
        }
        let mut out = [0usize; 3];
        for (slot, d) in out.iter_mut().zip(&dims) {
            *slot = d
                .trim()
                .parse()
                .map_err(|_| Error::Argument(format!("bad extent `{d}` in shape `{s}`")))?;
            if *slot == 0 {
                return arg(format!("shape `{s}` has a zero extent"));
            }
        }
        Ok(Self::new(out[0], out[1], out[2]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    pub block_m: usize,
    pub block_n: usize,
    pub block_k: usize,
    pub group_m: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            block_m: 64,
            block_n: 32,
            block_k: 64,
            group_m: 4,
        }
    }
}

impl BlockConfig {
    pub fn new(block_m: usize, block_n: usize, block_k: usize, group_m: usize) -> Self {
        Self {
            block_m,
            block_n,
            block_k,
            group_m,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.block_m == 0 || self.block_n == 0 || self.block_k == 0 || self.group_m == 0 {
            return arg(format!("block sizes must be >= 1, got {self:?}"));
        }
        Ok(())
    }
}

/// Maps a linear tile id to `(pid_m, pid_n)` with grouped swizzling:
/// `group_m` rows of tiles are swept column by column before moving on.
pub fn tile_to_coords(tile_id: usize, num_pid_m: usize, num_pid_n: usize, group_m: usize) -> (usize, usize) {
    debug_assert!(tile_id < num_pid_m * num_pid_n);
    let in_group = group_m.max(1) * num_pid_n;
    let group = tile_id / in_group;
    let first = group * group_m.max(1);
    let size = (num_pid_m - first).min(group_m.max(1));
    let local = tile_id % in_group;
    (first + local % size, local / size)
}

/// Per-tile `u32` flags in the symmetric heap.
#[derive(Debug, Clone)]
pub struct LockArray {
    buf: SymmetricBuffer,
}

impl LockArray {
    pub fn new(ctx: &WorldContext, tiles: usize) -> Result<Self> {
        Ok(Self {
            buf: ctx.zeros(&[tiles.max(1)], DType::U32)?,
        })
    }

    pub fn buffer(&self) -> &SymmetricBuffer {
        &self.buf
    }

    /// Current flags of this rank's array.
    pub fn states(&self, ctx: &WorldContext) -> Result<Vec<u32>> {
        ctx.heap().read_all(&self.buf, ctx.rank())
    }

    pub fn reset(&self, ctx: &WorldContext) -> Result<()> {
        ctx.heap().write_all(&self.buf, ctx.rank(), &vec![0u32; self.buf.numel()])
    }
}

/// One rank's share of a distributed GEMM + all-scatter.
#[derive(Debug, Clone)]
pub struct GemmProblem {
    pub shape: GemmShape,
    pub blocks: BlockConfig,
    pub world_size: usize,
    pub a: SymmetricBuffer,
    pub b: SymmetricBuffer,
    pub c_local: SymmetricBuffer,
    pub c_global: SymmetricBuffer,
    pub locks: LockArray,
}

impl GemmProblem {
    /// Collectively allocates and fills the operands. `A` is identical on all
    /// ranks; each rank's `B` comes from its own random stream. Ends with a
    /// barrier.
    pub fn new(ctx: &WorldContext, shape: GemmShape, blocks: BlockConfig, seed: u64) -> Result<Self> {
        let p = Self::allocate(ctx, shape, blocks)?;
        fill_uniform(ctx, &p.a, -1.0, 1.0, seed, 0)?;
        fill_uniform(ctx, &p.b, -1.0, 1.0, seed, 1 + ctx.rank() as u64)?;
        ctx.barrier()?;
        Ok(p)
    }

    /// Allocates zeroed operands without filling or synchronizing.
    pub fn allocate(ctx: &WorldContext, shape: GemmShape, blocks: BlockConfig) -> Result<Self> {
        blocks.validate()?;
        if shape.m == 0 || shape.n == 0 || shape.k == 0 {
            return arg(format!("shape {shape} has a zero extent"));
        }
        let w = ctx.world_size();
        let tiles = shape.m.div_ceil(blocks.block_m) * shape.n.div_ceil(blocks.block_n);
        Ok(Self {
            shape,
            blocks,
            world_size: w,
            a: ctx.zeros(&[shape.m, shape.k], DType::F32)?,
            b: ctx.zeros(&[shape.k, shape.n], DType::F32)?,
            c_local: ctx.zeros(&[shape.m, shape.n], DType::F32)?,
            c_global: ctx.zeros(&[shape.m, shape.n * w], DType::F32)?,
            locks: LockArray::new(ctx, tiles)?,
        })
    }

    pub fn num_pid_m(&self) -> usize {
        self.shape.m.div_ceil(self.blocks.block_m)
    }

    pub fn num_pid_n(&self) -> usize {
        self.shape.n.div_ceil(self.blocks.block_n)
    }

    pub fn total_tiles(&self) -> usize {
        self.num_pid_m() * self.num_pid_n()
    }

    pub fn coords(&self, tile_id: usize) -> (usize, usize) {
        tile_to_coords(tile_id, self.num_pid_m(), self.num_pid_n(), self.blocks.group_m)
    }

    /// The `(pid_m, pid_n)` tile of `rank`'s column block in `C_global`.
    pub fn global_tile(&self, pid_m: usize, pid_n: usize, rank: usize) -> Result<TileView> {
        let GemmShape { m, n, .. } = self.shape;
        let BlockConfig { block_m, block_n, .. } = self.blocks;
        let (r0, c0) = (pid_m * block_m, pid_n * block_n);
        TileView::block(
            &self.c_global,
            r0,
            block_m,
            rank * n + c0,
            block_n,
            m.saturating_sub(r0),
            n.saturating_sub(c0),
        )
    }

    pub fn local_tile(&self, pid_m: usize, pid_n: usize) -> Result<TileView> {
        let GemmShape { m, n, .. } = self.shape;
        let BlockConfig { block_m, block_n, .. } = self.blocks;
        let (r0, c0) = (pid_m * block_m, pid_n * block_n);
        TileView::block(&self.c_local, r0, block_m, c0, block_n, m.saturating_sub(r0), n.saturating_sub(c0))
    }

    /// Fills this rank's `C_global` with [`CANARY`] and zeroes its locks.
    pub fn clear_outputs(&self, ctx: &WorldContext) -> Result<()> {
        ctx.heap()
            .write_all(&self.c_global, ctx.rank(), &vec![CANARY; self.c_global.numel()])?;
        self.locks.reset(ctx)
    }
}

/// Scratch for [`gemm_tile_into`], reusable across tiles.
#[derive(Debug, Default)]
pub struct TileScratch {
    a: Vec<f32>,
    b: Vec<f32>,
}

/// Accumulator for tile `(pid_m, pid_n)` of this rank's `A × B`, row-major
/// `block_m × block_n`. Lanes outside `M`/`N` are zero.
pub fn gemm_tile(ctx: &WorldContext, p: &GemmProblem, pid_m: usize, pid_n: usize) -> Result<Vec<f32>> {
    let mut acc = vec![0.0; p.blocks.block_m * p.blocks.block_n];
    gemm_tile_into(ctx, p, pid_m, pid_n, &mut TileScratch::default(), &mut acc)?;
    Ok(acc)
}

pub fn gemm_tile_into(
    ctx: &WorldContext,
    p: &GemmProblem,
    pid_m: usize,
    pid_n: usize,
    scratch: &mut TileScratch,
    acc: &mut [f32],
) -> Result<()> {
    let GemmShape { m, n, k } = p.shape;
    let BlockConfig {
        block_m: bm,
        block_n: bn,
        block_k: bk,
        ..
    } = p.blocks;
    if pid_m >= p.num_pid_m() || pid_n >= p.num_pid_n() {
        return arg(format!(
            "tile ({pid_m}, {pid_n}) outside a {}x{} grid",
            p.num_pid_m(),
            p.num_pid_n()
        ));
    }
    if acc.len() != bm * bn {
        return arg(format!("accumulator has {} lanes, tile has {}", acc.len(), bm * bn));
    }
    let rank = ctx.rank();
    let (r0, c0) = (pid_m * bm, pid_n * bn);
    scratch.a.resize(bm * bk, 0.0);
    scratch.b.resize(bk * bn, 0.0);
    acc.fill(0.0);
    for kb in 0..k.div_ceil(bk) {
        let k0 = kb * bk;
        let av = TileView::block(&p.a, r0, bm, k0, bk, m - r0, k - k0)?;
        let bv = TileView::block(&p.b, k0, bk, c0, bn, k - k0, n - c0)?;
        rma::load_into(ctx, &av, rank, rank, &mut scratch.a)?;
        rma::load_into(ctx, &bv, rank, rank, &mut scratch.b)?;
        for i in 0..bm {
            let arow = &scratch.a[i * bk..(i + 1) * bk];
            let crow = &mut acc[i * bn..(i + 1) * bn];
            for (kk, &av) in arow.iter().enumerate() {
                let brow = &scratch.b[kk * bn..(kk + 1) * bn];
                for (c, &bv) in crow.iter_mut().zip(brow) {
                    *c += av * bv;
                }
            }
        }
    }
    Ok(())
}

/// Plain GEMM of this rank's `A × B` into `C_local`, one persistent grid of
/// `num_cu` instances.
pub fn local_gemm(ctx: &WorldContext, p: &GemmProblem) -> Result<()> {
    let grid = ctx.num_cu();
    let (c, pr) = (ctx.clone(), p.clone());
    let h = ctx.launch(GridLaunch::new(grid, "gemm", move |pid| {
        let mut scratch = TileScratch::default();
        let mut acc = vec![0.0; pr.blocks.block_m * pr.blocks.block_n];
        for t in strided_tiles(pid, pr.total_tiles(), grid) {
            let (pm, pn) = pr.coords(t);
            gemm_tile_into(&c, &pr, pm, pn, &mut scratch, &mut acc)?;
            rma::store(&c, &pr.local_tile(pm, pn)?, &acc, c.rank(), c.rank())?;
        }
        Ok(())
    }))?;
    h.wait()
}

/// Workgroup split between GEMM producers and communication consumers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Partition {
    pub gemm_slots: usize,
    pub comm_slots: usize,
}

impl Partition {
    pub fn new(gemm_slots: usize, comm_slots: usize) -> Self {
        Self { gemm_slots, comm_slots }
    }

    /// Roughly 256:48 of `num_cu`, with at least one slot on each side.
    pub fn for_cus(num_cu: usize) -> Result<Self> {
        if num_cu < 2 {
            return arg(format!("a producer/consumer split needs at least 2 compute units, got {num_cu}"));
        }
        let comm = ((num_cu * 48 + 152) / 304).clamp(1, num_cu - 1);
        Ok(Self::new(num_cu - comm, comm))
    }

    pub fn total(&self) -> usize {
        self.gemm_slots + self.comm_slots
    }

    fn validate(&self, num_cu: usize) -> Result<()> {
        if self.gemm_slots == 0 || self.comm_slots == 0 {
            return arg(format!("partition needs at least one slot per side, got {self:?}"));
        }
        if self.total() > num_cu {
            return Err(Error::Resource(format!(
                "partition {}+{} exceeds {num_cu} compute units",
                self.gemm_slots, self.comm_slots
            )));
        }
        Ok(())
    }
}

/// Random sleeps injected around lock operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Jitter {
    pub max: Duration,
    pub seed: u64,
}

/// Host-side record of every lock transition, per tile.
#[derive(Debug)]
pub struct LockLedger {
    releases: Vec<AtomicU32>,
    acquires: Vec<AtomicU32>,
}

impl LockLedger {
    pub fn new(tiles: usize) -> Self {
        Self {
            releases: (0..tiles).map(|_| AtomicU32::new(0)).collect(),
            acquires: (0..tiles).map(|_| AtomicU32::new(0)).collect(),
        }
    }

    fn counts(v: &[AtomicU32]) -> Vec<u32> {
        v.iter().map(|c| c.load(Ordering::Relaxed)).collect()
    }

    pub fn releases(&self) -> Vec<u32> {
        Self::counts(&self.releases)
    }

    pub fn acquires(&self) -> Vec<u32> {
        Self::counts(&self.acquires)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LockAccounting {
    pub releases: Vec<u32>,
    pub acquires: Vec<u32>,
    pub final_states: Vec<u32>,
}

impl LockAccounting {
    /// Every tile released once, acquired once, and back at 0.
    pub fn check(&self) -> Result<()> {
        let bad: Vec<usize> = (0..self.releases.len())
            .filter(|&t| self.releases[t] != 1 || self.acquires[t] != 1 || self.final_states[t] != 0)
            .collect();
        if let Some(&t) = bad.first() {
            return Err(Error::Validation(format!(
                "{} tiles broke the lock protocol; tile {t}: {} releases, {} acquires, final flag {}",
                bad.len(),
                self.releases[t],
                self.acquires[t],
                self.final_states[t]
            )));
        }
        Ok(())
    }
}

/// Instrumentation shared by the kernels of one rank.
#[derive(Debug, Clone)]
pub struct Hooks {
    pub recorder: Arc<Recorder>,
    pub jitter: Option<Jitter>,
    pub ledger: Arc<LockLedger>,
}

impl Hooks {
    pub fn new(p: &GemmProblem, recorder: Arc<Recorder>, jitter: Option<Jitter>) -> Self {
        Self {
            recorder,
            jitter,
            ledger: Arc::new(LockLedger::new(p.total_tiles())),
        }
    }

    pub fn plain(p: &GemmProblem) -> Self {
        Self::new(p, Arc::new(Recorder::default()), None)
    }
}

struct Jitterer(Option<(Duration, rand_chacha::ChaCha8Rng)>);

impl Jitterer {
    fn new(j: Option<Jitter>, rank: usize, role: u64, pid: usize) -> Self {
        Self(j.map(|j| (j.max, seeded_rng(j.seed, ((rank as u64) << 40) | (role << 32) | pid as u64))))
    }

    fn pause(&mut self) {
        if let Some((max, rng)) = &mut self.0 {
            let us = max.as_micros() as u64;
            if us > 0 {
                thread::sleep(Duration::from_micros(rng.random_range(0..=us)));
            }
        }
    }
}

/// Computes `tile` and returns the accumulator, recorded as a compute event.
fn compute(
    ctx: &WorldContext,
    p: &GemmProblem,
    hooks: &Hooks,
    pid: usize,
    tile: usize,
    scratch: &mut TileScratch,
    acc: &mut [f32],
) -> Result<(usize, usize)> {
    let (pm, pn) = p.coords(tile);
    hooks
        .recorder
        .span(ctx, pid, tile, Phase::Compute, None, || gemm_tile_into(ctx, p, pm, pn, scratch, acc))?;
    Ok((pm, pn))
}

fn store_own_block(
    ctx: &WorldContext,
    p: &GemmProblem,
    hooks: &Hooks,
    pid: usize,
    tile: usize,
    (pm, pn): (usize, usize),
    acc: &[f32],
) -> Result<()> {
    let cur = ctx.rank();
    let view = p.global_tile(pm, pn, cur)?;
    hooks
        .recorder
        .span(ctx, pid, tile, Phase::LocalStore, Some(cur), || rma::store(ctx, &view, acc, cur, cur))
}

/// Puts this rank's finished tile into every other rank's `C_global`.
fn scatter_remote(ctx: &WorldContext, p: &GemmProblem, hooks: &Hooks, pid: usize, tile: usize) -> Result<()> {
    let cur = ctx.rank();
    let (pm, pn) = p.coords(tile);
    let view = p.global_tile(pm, pn, cur)?;
    for remote in (0..p.world_size).filter(|&r| r != cur) {
        hooks.recorder.transfer(ctx, pid, tile, Phase::Put, cur, remote, || {
            rma::put::<f32>(ctx, &view, &view, cur, remote)
        })?;
    }
    Ok(())
}

/// GEMM tiles on a persistent grid, each stored into `C_global`'s own block.
fn gemm_to_own_block(ctx: &WorldContext, p: &GemmProblem, hooks: &Hooks, grid: usize, tag: &str) -> GridLaunch {
    let (c, pr, hk) = (ctx.clone(), p.clone(), hooks.clone());
    GridLaunch::new(grid, tag, move |pid| {
        let mut scratch = TileScratch::default();
        let mut acc = vec![0.0; pr.blocks.block_m * pr.blocks.block_n];
        for t in strided_tiles(pid, pr.total_tiles(), grid) {
            let coords = compute(&c, &pr, &hk, pid, t, &mut scratch, &mut acc)?;
            store_own_block(&c, &pr, &hk, pid, t, coords, &acc)?;
        }
        Ok(())
    })
}

/// Unfused bulk-synchronous: a GEMM kernel, a world barrier, then an
/// all-scatter kernel on the same stream.
pub fn pattern_bulk_sync(ctx: &WorldContext, p: &GemmProblem, hooks: &Hooks) -> Result<()> {
    let grid = ctx.num_cu();
    ctx.launch(gemm_to_own_block(ctx, p, hooks, grid, "main"))?;
    ctx.barrier()?;
    let (c, pr, hk) = (ctx.clone(), p.clone(), hooks.clone());
    ctx.launch(GridLaunch::new(grid, "main", move |pid| {
        for t in strided_tiles(pid, pr.total_tiles(), grid) {
            scatter_remote(&c, &pr, &hk, pid, t)?;
        }
        Ok(())
    }))?;
    ctx.barrier()
}

/// Fused sequential: each instance stores its accumulator to every rank,
/// itself included, right after computing it.
pub fn pattern_fused_sequential(ctx: &WorldContext, p: &GemmProblem, hooks: &Hooks) -> Result<()> {
    let grid = ctx.num_cu();
    let (c, pr, hk) = (ctx.clone(), p.clone(), hooks.clone());
    ctx.launch(GridLaunch::new(grid, "main", move |pid| {
        let cur = c.rank();
        let mut scratch = TileScratch::default();
        let mut acc = vec![0.0; pr.blocks.block_m * pr.blocks.block_n];
        for t in strided_tiles(pid, pr.total_tiles(), grid) {
            let (pm, pn) = compute(&c, &pr, &hk, pid, t, &mut scratch, &mut acc)?;
            let view = pr.global_tile(pm, pn, cur)?;
            for remote in 0..pr.world_size {
                hk.recorder.transfer(&c, pid, t, Phase::RemoteStore, cur, remote, || {
                    rma::store(&c, &view, &acc, cur, remote)
                })?;
            }
        }
        Ok(())
    }))?;
    ctx.barrier()
}

/// Producer body for instance `pid` of `stride` producers: compute, store the
/// own block, then release the tile's flag.
fn produce(ctx: &WorldContext, p: &GemmProblem, hooks: &Hooks, pid: usize, stride: usize) -> Result<()> {
    let cur = ctx.rank();
    let mut scratch = TileScratch::default();
    let mut acc = vec![0.0; p.blocks.block_m * p.blocks.block_n];
    let mut jitter = Jitterer::new(hooks.jitter, cur, 0, pid);
    for t in strided_tiles(pid, p.total_tiles(), stride) {
        let coords = compute(ctx, p, hooks, pid, t, &mut scratch, &mut acc)?;
        store_own_block(ctx, p, hooks, pid, t, coords, &acc)?;
        jitter.pause();
        let prev = hooks.recorder.span(ctx, pid, t, Phase::Signal, None, || {
            cas_at::<u32>(ctx, p.locks.buffer(), t, cur, 0, 1, MemOrder::Release, Scope::Gpu)
        })?;
        if prev != 0 {
            return Err(Error::Kernel(format!("tile {t} flag was {prev} when its producer released it")));
        }
        hooks.ledger.releases[t].fetch_add(1, Ordering::Relaxed);
    }
    Ok(())
}

fn lock_diagnostic(ctx: &WorldContext, p: &GemmProblem, waiting: usize) -> String {
    let states = p.locks.states(ctx).unwrap_or_default();
    let set: Vec<usize> = (0..states.len()).filter(|&t| states[t] != 0).collect();
    format!(
        "rank {} consumer timed out waiting on tile {waiting}; flags {:?}; tiles currently set: {set:?}",
        ctx.rank(),
        states
    )
}

/// Consumer body for instance `cpid` of `stride` consumers: acquire each
/// tile's flag, then put the tile to every remote rank.
fn consume(ctx: &WorldContext, p: &GemmProblem, hooks: &Hooks, pid: usize, cpid: usize, stride: usize) -> Result<()> {
    let cur = ctx.rank();
    let mut jitter = Jitterer::new(hooks.jitter, cur, 1, cpid);
    for t in strided_tiles(cpid, p.total_tiles(), stride) {
        jitter.pause();
        let deadline = Instant::now() + ctx.barrier_timeout();
        hooks.recorder.span(ctx, pid, t, Phase::Wait, None, || {
            let mut backoff = Backoff::new();
            loop {
                match cas_at::<u32>(ctx, p.locks.buffer(), t, cur, 1, 0, MemOrder::Acquire, Scope::Gpu)? {
                    1 => return Ok(()),
                    0 => {}
                    v => return Err(Error::Kernel(format!("tile {t} flag holds {v}"))),
                }
                if Instant::now() >= deadline {
                    return Err(Error::Deadlock(lock_diagnostic(ctx, p, t)));
                }
                backoff.snooze();
            }
        })?;
        hooks.ledger.acquires[t].fetch_add(1, Ordering::Relaxed);
        scatter_remote(ctx, p, hooks, pid, t)?;
    }
    Ok(())
}

/// Producer grid of `slots` instances.
pub fn producer_grid(ctx: &WorldContext, p: &GemmProblem, hooks: &Hooks, slots: usize, tag: &str) -> GridLaunch {
    let (c, pr, hk) = (ctx.clone(), p.clone(), hooks.clone());
    GridLaunch::new(slots, tag, move |pid| produce(&c, &pr, &hk, pid, slots)).with_slots(slots)
}

/// Consumer grid of `slots` instances.
pub fn consumer_grid(ctx: &WorldContext, p: &GemmProblem, hooks: &Hooks, slots: usize, tag: &str) -> GridLaunch {
    let (c, pr, hk) = (ctx.clone(), p.clone(), hooks.clone());
    GridLaunch::new(slots, tag, move |pid| consume(&c, &pr, &hk, pid, pid, slots)).with_slots(slots)
}

/// Fused workgroup-specialized: one grid whose first `gemm_slots` instances
/// produce tiles and the rest scatter them.
pub fn pattern_fused_wg_specialized(ctx: &WorldContext, p: &GemmProblem, part: Partition, hooks: &Hooks) -> Result<()> {
    part.validate(ctx.num_cu())?;
    let (c, pr, hk) = (ctx.clone(), p.clone(), hooks.clone());
    let Partition { gemm_slots, comm_slots } = part;
    let grid = GridLaunch::new(part.total(), "main", move |pid| {
        if pid < gemm_slots {
            produce(&c, &pr, &hk, pid, gemm_slots)
        } else {
            consume(&c, &pr, &hk, pid, pid - gemm_slots, comm_slots)
        }
    })
    .with_slots(part.total());
    ctx.launch(grid)?;
    ctx.barrier()
}

/// Unfused producer-consumer: producer and consumer grids on separate
/// streams with hard slot budgets.
pub fn pattern_unfused_producer_consumer(
    ctx: &WorldContext,
    p: &GemmProblem,
    part: Partition,
    hooks: &Hooks,
) -> Result<()> {
    part.validate(ctx.num_cu())?;
    ctx.launch_concurrent(vec![
        producer_grid(ctx, p, hooks, part.gemm_slots, "gemm"),
        consumer_grid(ctx, p, hooks, part.comm_slots, "comm"),
    ])?;
    ctx.barrier()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pattern {
    BulkSync,
    ProducerConsumer,
    FusedSequential,
    WgSpecialized,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [
        Pattern::BulkSync,
        Pattern::ProducerConsumer,
        Pattern::FusedSequential,
        Pattern::WgSpecialized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::BulkSync => "bulk-sync",
            Pattern::ProducerConsumer => "producer-consumer",
            Pattern::FusedSequential => "fused-sequential",
            Pattern::WgSpecialized => "wg-specialized",
        }
    }

    pub fn uses_locks(self) -> bool {
        matches!(self, Pattern::ProducerConsumer | Pattern::WgSpecialized)
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "bulk-sync" | "bulk" => Ok(Pattern::BulkSync),
            "producer-consumer" | "pc" => Ok(Pattern::ProducerConsumer),
            "fused-sequential" | "fused-seq" => Ok(Pattern::FusedSequential),
            "wg-specialized" | "wg" => Ok(Pattern::WgSpecialized),
            other => arg(format!(
                "unknown pattern `{other}` (expected bulk-sync, producer-consumer, fused-sequential or wg-specialized)"
            )),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Defaults to [`Partition::for_cus`].
    pub partition: Option<Partition>,
    pub jitter: Option<Jitter>,
    pub trace: bool,
    pub comm_delay: Option<CommDelay>,
}

#[derive(Debug, Clone)]
pub struct PatternReport {
    pub pattern: Pattern,
    /// Barrier-to-barrier time on this rank.
    pub wall: Duration,
    /// World-epoch timestamps bracketing `wall`.
    pub started: Duration,
    pub finished: Duration,
    pub events: Vec<TraceEvent>,
    pub locks: Option<LockAccounting>,
}

/// Clears outputs, runs `pattern` collectively and checks the lock protocol
/// where one applies. Must be called by every rank.
pub fn run_pattern(ctx: &WorldContext, p: &GemmProblem, pattern: Pattern, opts: &RunOptions) -> Result<PatternReport> {
    let part = match opts.partition {
        Some(part) => part,
        None if pattern.uses_locks() => Partition::for_cus(ctx.num_cu())?,
        None => Partition::new(1, 1),
    };
    let hooks = Hooks::new(p, Arc::new(Recorder::new(opts.trace, opts.comm_delay)), opts.jitter);
    p.clear_outputs(ctx)?;
    ctx.barrier()?;
    let started = ctx.now();
    match pattern {
        Pattern::BulkSync => pattern_bulk_sync(ctx, p, &hooks)?,
        Pattern::FusedSequential => pattern_fused_sequential(ctx, p, &hooks)?,
        Pattern::WgSpecialized => pattern_fused_wg_specialized(ctx, p, part, &hooks)?,
        Pattern::ProducerConsumer => pattern_unfused_producer_consumer(ctx, p, part, &hooks)?,
    }
    let finished = ctx.now();
    let wall = finished.saturating_sub(started);
    let locks = if pattern.uses_locks() {
        let acc = LockAccounting {
            releases: hooks.ledger.releases(),
            acquires: hooks.ledger.acquires(),
            final_states: p.locks.states(ctx)?,
        };
        acc.check()?;
        Some(acc)
    } else {
        None
    };
    Ok(PatternReport {
        pattern,
        wall,
        started,
        finished,
        events: hooks.recorder.events(),
        locks,
    })
}

/// Expected `C_global` (M × N·W): every rank's `A × B` at its column block,
/// accumulated over `k` in order. Reads `B` from every rank.
pub fn reference_output(ctx: &WorldContext, p: &GemmProblem) -> Result<Vec<f32>> {
    let GemmShape { m, n, k } = p.shape;
    let w = p.world_size;
    let a: Vec<f32> = ctx.heap().read_all(&p.a, ctx.rank())?;
    let mut out = vec![0.0f32; m * n * w];
    let mut row = vec![0.0f32; n];
    for r in 0..w {
        let b: Vec<f32> = ctx.heap().read_all(&p.b, r)?;
        for i in 0..m {
            row.fill(0.0);
            for kk in 0..k {
                let av = a[i * k + kk];
                for (c, &bv) in row.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                    *c += av * bv;
                }
            }
            out[i * n * w + r * n..i * n * w + (r + 1) * n].copy_from_slice(&row);
        }
    }
    Ok(out)
}

/// Whether `actual` is within `rtol` of `expected` (plus a tiny absolute
/// floor for values near zero). NaN never matches.
pub fn close(actual: f32, expected: f32, rtol: f32) -> bool {
    (actual - expected).abs() <= rtol * expected.abs() + f32::MIN_POSITIVE
}

/// Compares this rank's `C_global` with `expected`.
pub fn verify_output(ctx: &WorldContext, p: &GemmProblem, expected: &[f32], rtol: f32) -> Result<()> {
    let got: Vec<f32> = ctx.heap().read_all(&p.c_global, ctx.rank())?;
    if got.len() != expected.len() {
        return Err(Error::Validation(format!(
            "C_global has {} elements, reference has {}",
            got.len(),
            expected.len()
        )));
    }
    let cols = p.shape.n * p.world_size;
    let bad: Vec<usize> = (0..got.len()).filter(|&i| !close(got[i], expected[i], rtol)).collect();
    if let Some(&i) = bad.first() {
        return Err(Error::Validation(format!(
            "rank {}: {} of {} C_global elements differ; first at ({}, {}): got {}, expected {}",
            ctx.rank(),
            bad.len(),
            got.len(),
            i / cols,
            i % cols,
            got[i],
            expected[i]
        )));
    }
    Ok(())
}

//! World lifecycle: rank contexts, collectives, symmetric tensor constructors
//! and the grid scheduler that emulates workgroups over compute units.
//!
//! Every rank is one host thread holding a [`WorldContext`]. Kernels are
//! launched as grids; each grid instance (`pid`) runs on one of the rank's
//! `num_cu` worker slots. Slots are hard reservations, so a grid whose
//! instances spin on each other must fit in its slot budget.

use std::any::Any;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{arg, Error, Result};
use crate::rma::{self, TileView};
use crate::symheap::{DType, Element, HeapLayout, SymmetricBuffer, SymmetricHeap};

pub const DEFAULT_BARRIER_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone)]
pub struct WorldConfig {
    pub world_size: usize,
    pub arena_size: usize,
    pub num_cu: usize,
    pub barrier_timeout: Duration,
    /// Run every atomic with sequentially consistent ordering regardless of
    /// the order requested at the call site.
    pub promote_orders: bool,
}

impl WorldConfig {
    pub fn new(world_size: usize, arena_size: usize, num_cu: usize) -> Self {
        Self {
            world_size,
            arena_size,
            num_cu,
            barrier_timeout: DEFAULT_BARRIER_TIMEOUT,
            promote_orders: false,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.barrier_timeout = timeout;
        self
    }

    pub fn with_promoted_orders(mut self, promote: bool) -> Self {
        self.promote_orders = promote;
        self
    }
}

struct BarrierState {
    generation: u64,
    arrived: Vec<bool>,
    count: usize,
    broken: Option<Vec<usize>>,
}

struct TimedBarrier {
    state: Mutex<BarrierState>,
    cv: Condvar,
}

impl TimedBarrier {
    fn new(n: usize) -> Self {
        Self {
            state: Mutex::new(BarrierState {
                generation: 0,
                arrived: vec![false; n],
                count: 0,
                broken: None,
            }),
            cv: Condvar::new(),
        }
    }

    fn wait(&self, rank: usize, timeout: Duration) -> Result<()> {
        let start = Instant::now();
        let mut st = self.state.lock().unwrap();
        if let Some(absent) = &st.broken {
            return Err(Error::BarrierTimeout {
                waited_ms: 0,
                absent: absent.clone(),
            });
        }
        st.arrived[rank] = true;
        st.count += 1;
        if st.count == st.arrived.len() {
            st.count = 0;
            st.arrived.iter_mut().for_each(|a| *a = false);
            st.generation += 1;
            self.cv.notify_all();
            return Ok(());
        }
        let generation = st.generation;
        loop {
            let elapsed = start.elapsed();
            if elapsed >= timeout {
                let absent: Vec<usize> = st
                    .arrived
                    .iter()
                    .enumerate()
                    .filter(|(_, &a)| !a)
                    .map(|(r, _)| r)
                    .collect();
                st.broken = Some(absent.clone());
                self.cv.notify_all();
                return Err(Error::BarrierTimeout {
                    waited_ms: elapsed.as_millis(),
                    absent,
                });
            }
            let (guard, _) = self.cv.wait_timeout(st, timeout - elapsed).unwrap();
            st = guard;
            if st.generation != generation {
                return Ok(());
            }
            if let Some(absent) = &st.broken {
                return Err(Error::BarrierTimeout {
                    waited_ms: start.elapsed().as_millis(),
                    absent: absent.clone(),
                });
            }
        }
    }
}

/// Counting pool of worker slots (emulated compute units).
struct SlotPool {
    free: Mutex<usize>,
    cv: Condvar,
}

impl SlotPool {
    fn acquire(&self, n: usize) {
        let mut free = self.free.lock().unwrap();
        while *free < n {
            free = self.cv.wait(free).unwrap();
        }
        *free -= n;
    }

    fn release(&self, n: usize) {
        *self.free.lock().unwrap() += n;
        self.cv.notify_all();
    }
}

#[derive(Default)]
struct Completion {
    result: Mutex<Option<Result<()>>>,
    cv: Condvar,
}

impl Completion {
    fn finish(&self, r: Result<()>) {
        *self.result.lock().unwrap() = Some(r);
        self.cv.notify_all();
    }

    fn wait(&self) -> Result<()> {
        let mut g = self.result.lock().unwrap();
        while g.is_none() {
            g = self.cv.wait(g).unwrap();
        }
        g.as_ref().unwrap().clone()
    }

    fn is_done(&self) -> bool {
        self.result.lock().unwrap().is_some()
    }
}

struct WorldShared {
    config: WorldConfig,
    heap: SymmetricHeap,
    barrier: TimedBarrier,
    bcast: Mutex<Option<Box<dyn Any + Send>>>,
    epoch: Instant,
}

struct RankLocal {
    slots: SlotPool,
    streams: Mutex<HashMap<String, Arc<Completion>>>,
    pending: Mutex<Vec<(String, Arc<Completion>)>>,
}

/// One rank's view of the world. Cheap to clone; clones share state.
#[derive(Clone)]
pub struct WorldContext {
    rank: usize,
    shared: Arc<WorldShared>,
    local: Arc<RankLocal>,
}

impl fmt::Debug for WorldContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WorldContext")
            .field("rank", &self.rank)
            .field("world_size", &self.world_size())
            .field("num_cu", &self.num_cu())
            .finish()
    }
}

/// Brings up the heap and returns one context per rank.
pub fn init(config: WorldConfig) -> Result<Vec<WorldContext>> {
    if config.num_cu == 0 {
        return arg("num_cu must be at least 1");
    }
    let heap = SymmetricHeap::new(config.world_size, config.arena_size)?;
    let shared = Arc::new(WorldShared {
        barrier: TimedBarrier::new(config.world_size),
        heap,
        bcast: Mutex::new(None),
        epoch: Instant::now(),
        config,
    });
    Ok((0..shared.config.world_size)
        .map(|rank| WorldContext {
            rank,
            shared: shared.clone(),
            local: Arc::new(RankLocal {
                slots: SlotPool {
                    free: Mutex::new(shared.config.num_cu),
                    cv: Condvar::new(),
                },
                streams: Mutex::new(HashMap::new()),
                pending: Mutex::new(Vec::new()),
            }),
        })
        .collect())
}

/// Runs `body` once per rank, each on its own thread, and returns the results
/// in rank order.
pub fn run_world<R, F>(config: WorldConfig, body: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(WorldContext) -> R + Sync,
{
    let contexts = init(config)?;
    run_contexts(contexts, body)
}

pub fn run_contexts<R, F>(contexts: Vec<WorldContext>, body: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(WorldContext) -> R + Sync,
{
    thread::scope(|s| {
        let handles: Vec<_> = contexts
            .into_iter()
            .map(|ctx| {
                let body = &body;
                thread::Builder::new()
                    .name(format!("rank-{}", ctx.rank))
                    .spawn_scoped(s, move || body(ctx))
                    .expect("spawn rank thread")
            })
            .collect();
        handles
            .into_iter()
            .enumerate()
            .map(|(rank, h)| {
                h.join()
                    .map_err(|_| Error::Kernel(format!("rank {rank} panicked")))
            })
            .collect()
    })
}

pub type KernelFn = dyn Fn(usize) -> Result<()> + Send + Sync;

/// A grid of workgroup instances to run on a rank's worker slots.
#[derive(Clone)]
pub struct GridLaunch {
    pub grid_size: usize,
    pub stream_tag: String,
    /// Slot budget; defaults to `min(grid_size, num_cu)` for plain launches
    /// and to `grid_size` for concurrent launches.
    pub slots: Option<usize>,
    pub kernel: Arc<KernelFn>,
}

impl GridLaunch {
    pub fn new<F>(grid_size: usize, stream_tag: impl Into<String>, kernel: F) -> Self
    where
        F: Fn(usize) -> Result<()> + Send + Sync + 'static,
    {
        Self {
            grid_size,
            stream_tag: stream_tag.into(),
            slots: None,
            kernel: Arc::new(kernel),
        }
    }

    pub fn with_slots(mut self, slots: usize) -> Self {
        self.slots = Some(slots);
        self
    }
}

impl fmt::Debug for GridLaunch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GridLaunch")
            .field("grid_size", &self.grid_size)
            .field("stream_tag", &self.stream_tag)
            .field("slots", &self.slots)
            .finish()
    }
}

/// Completion handle of a launched grid.
pub struct LaunchHandle {
    tag: String,
    completion: Arc<Completion>,
}

impl LaunchHandle {
    pub fn stream_tag(&self) -> &str {
        &self.tag
    }

    pub fn is_done(&self) -> bool {
        self.completion.is_done()
    }

    pub fn wait(&self) -> Result<()> {
        self.completion.wait()
    }
}

/// Executes every pid of a grid on `budget` worker threads.
fn execute_grid(kernel: &KernelFn, grid_size: usize, budget: usize) -> Result<()> {
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let first_err: Mutex<Option<Error>> = Mutex::new(None);
    let work = || loop {
        if abort.load(Ordering::Relaxed) {
            break;
        }
        let pid = next.fetch_add(1, Ordering::Relaxed);
        if pid >= grid_size {
            break;
        }
        if let Err(e) = kernel(pid) {
            abort.store(true, Ordering::Relaxed);
            first_err.lock().unwrap().get_or_insert(e);
            break;
        }
    };
    if budget == 1 {
        work();
    } else {
        thread::scope(|s| {
            for _ in 0..budget {
                s.spawn(work);
            }
        });
    }
    match first_err.into_inner().unwrap() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

impl WorldContext {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn world_size(&self) -> usize {
        self.shared.config.world_size
    }

    pub fn num_cu(&self) -> usize {
        self.shared.config.num_cu
    }

    pub fn config(&self) -> &WorldConfig {
        &self.shared.config
    }

    pub fn barrier_timeout(&self) -> Duration {
        self.shared.config.barrier_timeout
    }

    pub fn heap(&self) -> &SymmetricHeap {
        &self.shared.heap
    }

    pub fn layout(&self) -> &HeapLayout {
        self.shared.heap.layout()
    }

    pub fn heap_bases(&self) -> Vec<u64> {
        self.layout().base_table().to_vec()
    }

    /// Monotonic time since world bring-up, shared by all ranks.
    pub fn now(&self) -> Duration {
        self.shared.epoch.elapsed()
    }

    pub(crate) fn promote_orders(&self) -> bool {
        self.shared.config.promote_orders
    }

    /// Waits for this rank's queued grids, then for every rank to arrive.
    pub fn barrier(&self) -> Result<()> {
        self.barrier_impl(None)
    }

    /// Like [`barrier`](Self::barrier) but only drains grids on `stream_tag`.
    pub fn barrier_stream(&self, stream_tag: &str) -> Result<()> {
        self.barrier_impl(Some(stream_tag))
    }

    fn barrier_impl(&self, tag: Option<&str>) -> Result<()> {
        let kernel_result = self.synchronize(tag);
        self.shared.barrier.wait(self.rank, self.barrier_timeout())?;
        kernel_result
    }

    /// Drains this rank's outstanding grids (all, or those on one tag).
    pub fn synchronize(&self, tag: Option<&str>) -> Result<()> {
        let drained: Vec<Arc<Completion>> = {
            let mut pending = self.local.pending.lock().unwrap();
            let (take, keep): (Vec<_>, Vec<_>) = pending
                .drain(..)
                .partition(|(t, _)| tag.is_none_or(|want| want == t));
            *pending = keep;
            take.into_iter().map(|(_, c)| c).collect()
        };
        let mut result = Ok(());
        for c in drained {
            if let Err(e) = c.wait() {
                if result.is_ok() {
                    result = Err(e);
                }
            }
        }
        result
    }

    fn register(&self, tag: &str) -> (Option<Arc<Completion>>, Arc<Completion>) {
        let completion = Arc::new(Completion::default());
        let prev = self
            .local
            .streams
            .lock()
            .unwrap()
            .insert(tag.to_string(), completion.clone());
        self.local
            .pending
            .lock()
            .unwrap()
            .push((tag.to_string(), completion.clone()));
        (prev, completion)
    }

    /// Asynchronously launches a grid. Grids on the same stream tag run one
    /// after another.
    pub fn launch(&self, grid: GridLaunch) -> Result<LaunchHandle> {
        if grid.grid_size == 0 {
            return arg("grid_size must be at least 1");
        }
        let budget = grid.slots.unwrap_or(grid.grid_size.min(self.num_cu()));
        if budget == 0 || budget > self.num_cu() {
            return arg(format!(
                "slot budget {budget} must be in 1..={}",
                self.num_cu()
            ));
        }
        let (prev, completion) = self.register(&grid.stream_tag);
        let local = self.local.clone();
        let done = completion.clone();
        thread::Builder::new()
            .name(format!("launch-r{}-{}", self.rank, grid.stream_tag))
            .spawn(move || {
                if let Some(Err(e)) = prev.map(|p| p.wait()) {
                    done.finish(Err(Error::Kernel(format!("predecessor on stream failed: {e}"))));
                    return;
                }
                local.slots.acquire(budget);
                let r = execute_grid(grid.kernel.as_ref(), grid.grid_size, budget);
                local.slots.release(budget);
                done.finish(r);
            })
            .map_err(|e| Error::Resource(e.to_string()))?;
        Ok(LaunchHandle {
            tag: grid.stream_tag,
            completion,
        })
    }

    /// Launches several grids that run at the same time, each confined to its
    /// own slot budget. Budgets are reserved together and must fit in
    /// `num_cu`.
    pub fn launch_concurrent(&self, grids: Vec<GridLaunch>) -> Result<Vec<LaunchHandle>> {
        if grids.is_empty() {
            return Ok(Vec::new());
        }
        let mut budgets = Vec::with_capacity(grids.len());
        for (i, g) in grids.iter().enumerate() {
            if g.grid_size == 0 {
                return arg("grid_size must be at least 1");
            }
            if grids[..i].iter().any(|o| o.stream_tag == g.stream_tag) {
                return arg(format!("duplicate stream tag {:?} in concurrent launch", g.stream_tag));
            }
            let b = g.slots.unwrap_or(g.grid_size);
            if b == 0 {
                return arg("slot budget must be at least 1");
            }
            budgets.push(b);
        }
        let total: usize = budgets.iter().sum();
        if total > self.num_cu() {
            return arg(format!(
                "slot budgets {budgets:?} sum to {total}, exceeding num_cu {}",
                self.num_cu()
            ));
        }
        let mut plan = Vec::with_capacity(grids.len());
        let mut handles = Vec::with_capacity(grids.len());
        let mut preds = Vec::new();
        for (g, b) in grids.into_iter().zip(budgets) {
            let (prev, completion) = self.register(&g.stream_tag);
            preds.extend(prev);
            handles.push(LaunchHandle {
                tag: g.stream_tag.clone(),
                completion: completion.clone(),
            });
            plan.push((g, b, completion));
        }
        let local = self.local.clone();
        thread::Builder::new()
            .name(format!("launch-r{}-concurrent", self.rank))
            .spawn(move || {
                if let Some(e) = preds.iter().find_map(|p| p.wait().err()) {
                    for (_, _, c) in &plan {
                        c.finish(Err(Error::Kernel(format!("predecessor on stream failed: {e}"))));
                    }
                    return;
                }
                local.slots.acquire(total);
                thread::scope(|s| {
                    for (g, b, c) in &plan {
                        let local = &local;
                        s.spawn(move || {
                            let r = execute_grid(g.kernel.as_ref(), g.grid_size, *b);
                            local.slots.release(*b);
                            c.finish(r);
                        });
                    }
                });
            })
            .map_err(|e| Error::Resource(e.to_string()))?;
        Ok(handles)
    }

    /// Sends `value` from `root` to every rank. Non-root values are ignored.
    pub fn broadcast<T: Clone + Send + 'static>(&self, value: T, root: usize) -> Result<T> {
        if root >= self.world_size() {
            return arg(format!(
                "broadcast root {root} out of range for world size {}",
                self.world_size()
            ));
        }
        if self.world_size() == 1 {
            return Ok(value);
        }
        if self.rank == root {
            *self.shared.bcast.lock().unwrap() = Some(Box::new(value.clone()));
        }
        self.shared.barrier.wait(self.rank, self.barrier_timeout())?;
        let out = if self.rank == root {
            Ok(value)
        } else {
            let slot = self.shared.bcast.lock().unwrap();
            slot.as_ref()
                .and_then(|b| b.downcast_ref::<T>())
                .cloned()
                .ok_or_else(|| Error::Argument("broadcast payload type differs between ranks".into()))
        };
        self.shared.barrier.wait(self.rank, self.barrier_timeout())?;
        out
    }

    /// Every rank's `value`, indexed by rank.
    pub fn all_gather<T: Clone + Send + 'static>(&self, value: T) -> Result<Vec<T>> {
        (0..self.world_size())
            .map(|root| self.broadcast(value.clone(), root))
            .collect()
    }

    /// Copies `buf`'s contents on `root` into `buf` on every other rank.
    pub fn broadcast_buffer<T: Element>(&self, buf: &SymmetricBuffer, root: usize) -> Result<()> {
        if root >= self.world_size() {
            return arg(format!(
                "broadcast root {root} out of range for world size {}",
                self.world_size()
            ));
        }
        self.barrier()?;
        if self.rank != root {
            let view = TileView::full(buf)?;
            rma::get::<T>(self, &view, &view, root, self.rank)?;
        }
        self.barrier()
    }

    /// Collectively drops all allocations and zero-fills the heap.
    pub fn reset_heap(&self) -> Result<()> {
        self.barrier()?;
        if self.rank == 0 {
            self.heap().reset();
        }
        self.barrier()
    }

    pub fn alloc(&self, shape: &[usize], dtype: DType) -> Result<SymmetricBuffer> {
        self.heap().alloc(self.rank, shape, dtype)
    }

    fn fill_with(&self, buf: &SymmetricBuffer, mut f: impl FnMut(usize) -> f64) -> Result<()> {
        macro_rules! fill {
            ($t:ty) => {{
                let v: Vec<$t> = (0..buf.numel()).map(|i| <$t>::from_f64(f(i))).collect();
                self.heap().write_all(buf, self.rank, &v)
            }};
        }
        match buf.dtype() {
            DType::F32 => fill!(f32),
            DType::I32 => fill!(i32),
            DType::U32 => fill!(u32),
            DType::U64 => fill!(u64),
        }
    }

    /// Uninitialized in the sense of the API; the heap hands out zeroed memory
    /// after bring-up or reset, but reused memory is not cleared.
    pub fn empty(&self, shape: &[usize], dtype: DType) -> Result<SymmetricBuffer> {
        self.alloc(shape, dtype)
    }

    pub fn zeros(&self, shape: &[usize], dtype: DType) -> Result<SymmetricBuffer> {
        self.full(shape, 0.0, dtype)
    }

    pub fn ones(&self, shape: &[usize], dtype: DType) -> Result<SymmetricBuffer> {
        self.full(shape, 1.0, dtype)
    }

    pub fn full(&self, shape: &[usize], value: f64, dtype: DType) -> Result<SymmetricBuffer> {
        let buf = self.alloc(shape, dtype)?;
        self.fill_with(&buf, |_| value)?;
        Ok(buf)
    }

    pub fn zeros_like(&self, other: &SymmetricBuffer) -> Result<SymmetricBuffer> {
        self.zeros(other.shape(), other.dtype())
    }

    /// `[start, start + step, ...]` up to but excluding `end`.
    pub fn arange(&self, start: f64, end: f64, step: f64, dtype: DType) -> Result<SymmetricBuffer> {
        if step == 0.0 || !step.is_finite() {
            return arg("arange step must be finite and non-zero");
        }
        let n = ((end - start) / step).ceil().max(0.0) as usize;
        let buf = self.alloc(&[n], dtype)?;
        self.fill_with(&buf, |i| start + i as f64 * step)?;
        Ok(buf)
    }

    /// `n` evenly spaced values from `lo` to `hi` inclusive.
    pub fn linspace(&self, lo: f64, hi: f64, n: usize, dtype: DType) -> Result<SymmetricBuffer> {
        let buf = self.alloc(&[n], dtype)?;
        let step = if n > 1 { (hi - lo) / (n - 1) as f64 } else { 0.0 };
        self.fill_with(&buf, |i| {
            if n > 1 && i == n - 1 {
                hi
            } else {
                lo + i as f64 * step
            }
        })?;
        Ok(buf)
    }

    /// Uniform f32 values in `[0, 1)`.
    pub fn rand(&self, shape: &[usize], seed: u64) -> Result<SymmetricBuffer> {
        self.uniform(shape, 0.0, 1.0, seed)
    }

    /// Uniform f32 values in `[low, high)`.
    pub fn uniform(&self, shape: &[usize], low: f32, high: f32, seed: u64) -> Result<SymmetricBuffer> {
        let buf = self.alloc(shape, DType::F32)?;
        fill_uniform(self, &buf, low, high, seed, 0)?;
        Ok(buf)
    }

    /// Standard normal f32 values.
    pub fn randn(&self, shape: &[usize], seed: u64) -> Result<SymmetricBuffer> {
        let buf = self.alloc(shape, DType::F32)?;
        let mut rng = seeded_rng(seed, 0);
        let v: Vec<f32> = (0..buf.numel()).map(|_| rng.sample(StandardNormal)).collect();
        self.heap().write_all(&buf, self.rank, &v)?;
        Ok(buf)
    }

    /// Integers drawn uniformly from `[low, high)`.
    pub fn randint(&self, low: i64, high: i64, shape: &[usize], dtype: DType, seed: u64) -> Result<SymmetricBuffer> {
        if low >= high {
            return arg(format!("randint needs low < high, got [{low}, {high})"));
        }
        if dtype == DType::F32 {
            return arg("randint requires an integer dtype");
        }
        let buf = self.alloc(shape, dtype)?;
        let mut rng = seeded_rng(seed, 0);
        self.fill_with(&buf, |_| rng.random_range(low..high) as f64)?;
        Ok(buf)
    }
}

/// The generator behind every random constructor: ChaCha8 keyed by `seed`,
/// on stream `stream`. Symmetric constructors use stream 0 so all ranks draw
/// the same values.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fills this rank's copy of `buf` (f32) with uniform values in `[low, high)`.
pub fn fill_uniform(
    ctx: &WorldContext,
    buf: &SymmetricBuffer,
    low: f32,
    high: f32,
    seed: u64,
    stream: u64,
) -> Result<()> {
    if !(low < high) {
        return arg(format!("uniform needs low < high, got [{low}, {high})"));
    }
    let mut rng = seeded_rng(seed, stream);
    let v: Vec<f32> = (0..buf.numel()).map(|_| rng.random_range(low..high)).collect();
    ctx.heap().write_all(buf, ctx.rank(), &v)
}

/// Escalating wait: busy spins, then yields, then short sleeps.
#[derive(Debug, Default)]
pub struct Backoff {
    step: u32,
}

impl Backoff {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snooze(&mut self) {
        if self.step < 6 {
            for _ in 0..(1u32 << self.step) {
                std::hint::spin_loop();
            }
        } else if self.step < 12 {
            thread::yield_now();
        } else {
            thread::sleep(Duration::from_micros(20));
        }
        self.step = self.step.saturating_add(1);
    }
}

/// Tiles a persistent-grid instance visits with a `pid`-strided loop.
pub fn strided_tiles(pid: usize, total_tiles: usize, stride: usize) -> impl Iterator<Item = usize> {
    (pid..total_tiles).step_by(stride.max(1))
}

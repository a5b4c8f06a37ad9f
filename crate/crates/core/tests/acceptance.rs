//! Acceptance gate. Each criterion runs serially and prints one PASS/FAIL
//! line; the process exits nonzero if any criterion fails.

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use symmem::atomics::{atomic_load, atomic_store, cas_at, rmw_at, MemOrder, RmwKind, Scope};
use symmem::bench::{
    bench_all, bench_p2p, bench_patterns_worlds, doubling_sizes, reference_bandwidth, AllOp, P2pOp,
    PatternBenchConfig, PatternTiming,
};
use symmem::kernels::{
    run_pattern, BlockConfig, CommDelay, GemmProblem, GemmShape, Jitter, Partition, Pattern, RunOptions,
};
use symmem::runtime::{run_world, strided_tiles, Backoff, WorldConfig};
use symmem::symheap::{DType, HeapAddress, SymmetricHeap, HEAP_ALIGN};
use symmem::{Error, WorldContext};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(t: Instant, budget: Duration) -> Result<Duration, String> {
    let e = t.elapsed();
    ensure(e < budget, || format!("took {e:.2?}, budget {budget:?}"))?;
    Ok(e)
}

/// Straight triple loop, `k` innermost, f32 accumulation.
fn naive_gemm(a: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0f32;
            for kk in 0..k {
                s += a[i * k + kk] * b[kk * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// Per-rank GEMMs concatenated along columns.
fn assembled_oracle(ctx: &WorldContext, p: &GemmProblem) -> Vec<f32> {
    let GemmShape { m, n, k } = p.shape;
    let w = ctx.world_size();
    let a: Vec<f32> = ctx.heap().read_all(&p.a, 0).unwrap();
    let mut out = vec![0.0f32; m * n * w];
    for r in 0..w {
        let b: Vec<f32> = ctx.heap().read_all(&p.b, r).unwrap();
        let c = naive_gemm(&a, &b, m, n, k);
        for i in 0..m {
            out[i * n * w + r * n..i * n * w + (r + 1) * n].copy_from_slice(&c[i * n..(i + 1) * n]);
        }
    }
    out
}

fn oracle_equivalence() -> Outcome {
    let t = Instant::now();
    let shapes = [
        GemmShape::new(256, 128, 512),
        GemmShape::new(512, 288, 2304),
        GemmShape::new(512, 224, 896),
    ];
    let mut configs = 0;
    for world in [1, 2, 4] {
        let cfg = WorldConfig::new(world, 64 << 20, 8).with_timeout(Duration::from_secs(60));
        let per_rank = run_world(cfg, |ctx| -> Result<usize, String> {
            let mut done = 0;
            for (si, &shape) in shapes.iter().enumerate() {
                ctx.reset_heap().map_err(|e| e.to_string())?;
                let p = GemmProblem::new(&ctx, shape, BlockConfig::default(), 11 + si as u64).map_err(|e| e.to_string())?;
                let oracle = if ctx.rank() == 0 { assembled_oracle(&ctx, &p) } else { Vec::new() };
                let oracle = ctx.broadcast(oracle, 0).map_err(|e| e.to_string())?;
                for pattern in Pattern::ALL {
                    run_pattern(&ctx, &p, pattern, &RunOptions::default()).map_err(|e| e.to_string())?;
                    let got: Vec<f32> = ctx.heap().read_all(&p.c_global, ctx.rank()).unwrap();
                    let bad = got
                        .iter()
                        .zip(&oracle)
                        .filter(|(g, o)| !((*g - *o).abs() <= 1e-5 * o.abs()))
                        .count();
                    ensure(bad == 0, || {
                        format!("{pattern} {shape} world {world} rank {}: {bad} elements outside rtol 1e-5", ctx.rank())
                    })?;
                    ctx.barrier().map_err(|e| e.to_string())?;
                    done += 1;
                }
            }
            Ok(done)
        })
        .map_err(|e| e.to_string())?;
        for r in per_rank {
            r?;
        }
        configs += shapes.len() * Pattern::ALL.len();
    }
    let e = within(t, Duration::from_secs(60))?;
    Ok(format!("{configs} shape/world/pattern configurations on every rank in {e:.2?}"))
}

fn translation_properties() -> Outcome {
    let t = Instant::now();
    let world = 8;
    let arena = 1 << 20;
    let heap = SymmetricHeap::new(world, arena).map_err(|e| e.to_string())?;
    let layout = heap.layout();
    let bases = layout.base_table().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..10_000 {
        let from = rng.random_range(0..world);
        let to = rng.random_range(0..world);
        let off = rng.random_range(0..arena);
        let addr = HeapAddress {
            rank: from,
            linear: bases[from] + off as u64,
        };
        let moved = layout.translate(addr, from, to).map_err(|e| e.to_string())?;
        ensure(moved.linear == bases[to] + (addr.linear - bases[from]) && moved.rank == to, || {
            format!("{from}->{to} offset {off} landed at {:#x}", moved.linear)
        })?;
        let back = layout.translate(moved, to, from).map_err(|e| e.to_string())?;
        ensure(back == addr, || format!("{from}->{to}->{from} offset {off} is not the identity"))?;
        ensure(layout.translate(addr, from, from).unwrap() == addr, || "self translation moved".into())?;
        let other = (off + 1 + rng.random_range(0..arena - 1)) % arena;
        let other_addr = HeapAddress {
            rank: from,
            linear: bases[from] + other as u64,
        };
        ensure(layout.translate(other_addr, from, to).unwrap() != moved, || "two offsets collided".into())?;
        let below = HeapAddress {
            rank: from,
            linear: bases[from].wrapping_sub(1 + rng.random_range(0..64u64)),
        };
        let above = HeapAddress {
            rank: from,
            linear: bases[from] + arena as u64 + rng.random_range(0..64u64),
        };
        ensure(layout.translate(below, from, to).is_err(), || "address below arena accepted".into())?;
        ensure(layout.translate(above, from, to).is_err(), || "address past arena accepted".into())?;
    }
    let e = within(t, Duration::from_secs(1))?;
    Ok(format!("10000 randomized checks in {e:.2?}"))
}

fn allocation_symmetry() -> Outcome {
    let t = Instant::now();
    let cfg = WorldConfig::new(4, 64 << 20, 1);
    let traces = run_world(cfg, |ctx| {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let dtypes = [DType::F32, DType::I32, DType::U32, DType::U64];
        for _ in 0..1000 {
            let n = rng.random_range(1..3000);
            let d = dtypes[rng.random_range(0..4)];
            ctx.alloc(&[n], d).unwrap();
        }
        ctx.heap().allocation_trace(ctx.rank())
    })
    .map_err(|e| e.to_string())?;
    ensure(traces[0].len() == 1000, || format!("{} allocations logged", traces[0].len()))?;
    ensure(traces.iter().all(|tr| *tr == traces[0]), || "offset sequences differ across ranks".into())?;
    ensure(traces[0].iter().all(|(o, _)| o % HEAP_ALIGN == 0), || "an offset is not 256-byte aligned".into())?;
    ensure(traces[0].windows(2).all(|w| w[0].0 + w[0].1 <= w[1].0), || "allocations overlap".into())?;
    let e = within(t, Duration::from_secs(1))?;
    Ok(format!("1000-step traces identical on 4 ranks, all 256 B aligned, in {e:.2?}"))
}

fn atomic_counting() -> Outcome {
    let t = Instant::now();
    let totals = run_world(WorldConfig::new(8, 1 << 20, 1), |ctx| {
        let c = ctx.zeros(&[1], DType::U32).unwrap();
        ctx.barrier().unwrap();
        for _ in 0..10_000 {
            rmw_at::<u32>(&ctx, RmwKind::Add, &c, 0, 0, 1, MemOrder::Relaxed, Scope::Sys).unwrap();
        }
        ctx.barrier().unwrap();
        ctx.heap().read::<u32>(&c, 0, 0).unwrap()
    })
    .map_err(|e| e.to_string())?;
    ensure(totals.iter().all(|&v| v == 80_000), || format!("counter read {totals:?}"))?;

    let trials = 10_000u32;
    let stale = run_world(WorldConfig::new(2, 1 << 20, 1), |ctx| {
        let data = ctx.zeros(&[1], DType::U32).unwrap();
        let flag = ctx.zeros(&[1], DType::U32).unwrap();
        let ack = ctx.zeros(&[1], DType::U32).unwrap();
        ctx.barrier().unwrap();
        let ack_addr = ack.element_address(ctx.layout(), ctx.rank(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.rank() as u64 + 5);
        let mut stale = 0u32;
        let delay = |rng: &mut ChaCha8Rng| {
            for _ in 0..rng.random_range(0..200) {
                std::hint::spin_loop();
            }
            if rng.random_range(0..8) == 0 {
                std::thread::yield_now();
            }
        };
        for trial in 1..=trials {
            let mut b = Backoff::new();
            if ctx.rank() == 0 {
                while atomic_load::<u32>(&ctx, ack_addr, 0, MemOrder::Acquire, Scope::Sys).unwrap() != trial - 1 {
                    b.snooze();
                }
                delay(&mut rng);
                ctx.heap().write(&data, 0, 0, trial).unwrap();
                let prev = cas_at::<u32>(&ctx, &flag, 0, 0, trial - 1, trial, MemOrder::Release, Scope::Sys).unwrap();
                assert_eq!(prev, trial - 1);
            } else {
                while cas_at::<u32>(&ctx, &flag, 0, 0, trial, trial, MemOrder::Acquire, Scope::Sys).unwrap() != trial {
                    b.snooze();
                }
                delay(&mut rng);
                if ctx.heap().read::<u32>(&data, 0, 0).unwrap() != trial {
                    stale += 1;
                }
                atomic_store::<u32>(&ctx, ack_addr, 0, trial, MemOrder::Release, Scope::Sys).unwrap();
            }
        }
        stale
    })
    .map_err(|e| e.to_string())?;
    ensure(stale[1] == 0, || format!("{} stale reads in {trials} trials", stale[1]))?;
    let e = within(t, Duration::from_secs(30))?;
    Ok(format!("8 x 10000 adds = 80000; {trials} publications, 0 stale, in {e:.2?}"))
}

fn lock_protocol() -> Outcome {
    let t = Instant::now();
    let shape = GemmShape::new(160, 100, 8);
    let blocks = BlockConfig::new(4, 4, 8, 5);
    let mut runs = 0;
    for (pattern, part) in [
        (Pattern::WgSpecialized, Partition::new(4, 2)),
        (Pattern::ProducerConsumer, Partition::new(4, 2)),
        (Pattern::WgSpecialized, Partition::new(1, 1)),
        (Pattern::ProducerConsumer, Partition::new(1, 1)),
    ] {
        let cfg = WorldConfig::new(2, 4 << 20, 6).with_timeout(Duration::from_secs(20));
        let reports = run_world(cfg, |ctx| {
            let p = GemmProblem::new(&ctx, shape, blocks, 3).unwrap();
            let opts = RunOptions {
                partition: Some(part),
                jitter: Some(Jitter {
                    max: Duration::from_micros(40),
                    seed: 9,
                }),
                ..Default::default()
            };
            let rep = run_pattern(&ctx, &p, pattern, &opts);
            (p.total_tiles(), rep)
        })
        .map_err(|e| e.to_string())?;
        for (rank, (tiles, rep)) in reports.into_iter().enumerate() {
            let rep = rep.map_err(|e| format!("{pattern} {part:?} rank {rank}: {e}"))?;
            ensure(tiles == 1000, || format!("{tiles} tiles"))?;
            let locks = rep.locks.ok_or_else(|| "no lock accounting".to_string())?;
            for tile in 0..tiles {
                ensure(
                    locks.releases[tile] == 1 && locks.acquires[tile] == 1 && locks.final_states[tile] == 0,
                    || format!("{pattern} {part:?} rank {rank} tile {tile}: {locks:?}"),
                )?;
            }
        }
        runs += 1;
    }
    let e = within(t, Duration::from_secs(30))?;
    Ok(format!("{runs} jittered runs of 1000 tiles, each flag 0->1->0 once, in {e:.2?}"))
}

fn find(rows: &[PatternTiming], p: Pattern) -> Result<&PatternTiming, String> {
    let r = rows.iter().find(|r| r.pattern == p).ok_or(format!("{p} missing"))?;
    ensure(r.validated, || format!("{p} failed validation: {:?}", r.failure))?;
    Ok(r)
}

fn overlap() -> Outcome {
    let t = Instant::now();
    let shape = GemmShape::new(512, 288, 2304);
    let world = 4;
    let base = WorldConfig::new(1, 64 << 20, 8).with_timeout(Duration::from_secs(60));
    let calib = PatternBenchConfig {
        shapes: vec![shape],
        patterns: vec![Pattern::BulkSync],
        runs: 3,
        ..Default::default()
    };
    let rows = bench_patterns_worlds(&base, &[world], &calib).map_err(|e| e.to_string())?;
    let c = find(&rows, Pattern::BulkSync)?;
    let transfers = (c.tiles * (world - 1)) as u32;
    let d = c.compute / transfers;
    let cfg = PatternBenchConfig {
        shapes: vec![shape],
        patterns: Pattern::ALL.to_vec(),
        partition: Some(Partition::new(4, 4)),
        comm_delay: Some(CommDelay::serial(d)),
        runs: 5,
        ..Default::default()
    };
    let rows = bench_patterns_worlds(&base, &[world], &cfg).map_err(|e| e.to_string())?;
    let bulk = find(&rows, Pattern::BulkSync)?.total.as_secs_f64();
    let ratio = |p| find(&rows, p).map(|r| r.total.as_secs_f64() / bulk);
    let (pc, wg, fs) = (
        ratio(Pattern::ProducerConsumer)?,
        ratio(Pattern::WgSpecialized)?,
        ratio(Pattern::FusedSequential)?,
    );
    let detail = format!(
        "delay {d:.0?}/transfer, bulk {bulk:.3}s, producer-consumer {pc:.2}x, wg-specialized {wg:.2}x, fused-sequential {fs:.2}x"
    );
    ensure(pc <= 0.75 && wg <= 0.75 && fs <= 1.0, || detail.clone())?;
    let e = within(t, Duration::from_secs(120))?;
    Ok(format!("{detail}, in {e:.2?}"))
}

fn microbenchmark_integrity() -> Outcome {
    let t = Instant::now();
    let sizes = doubling_sizes(4 << 10, 64 << 20);
    let largest = *sizes.last().unwrap();
    let cfg = WorldConfig::new(2, 256 << 20, 1).with_timeout(Duration::from_secs(60));
    let out = run_world(cfg, |ctx| -> Result<(usize, Vec<f64>), Error> {
        let reference = if ctx.rank() == 0 { reference_bandwidth(&ctx)? } else { 0.0 };
        let reference = ctx.broadcast(reference, 0)?;
        let mut cells = 0;
        let mut self_cells = Vec::new();
        for op in P2pOp::ALL {
            let mats = bench_p2p(&ctx, op, &sizes, 6, reference)?;
            cells += mats.iter().map(|m| m.gibps.len()).sum::<usize>();
            if matches!(op, P2pOp::Load | P2pOp::Store) {
                let m = mats.iter().find(|m| m.size == largest).unwrap();
                self_cells.extend((0..2).map(|r| m.normalized(r, r)));
            }
        }
        for op in AllOp::ALL {
            cells += bench_all(&ctx, op, &sizes, 6, reference)?.iter().map(|m| m.gibps.len()).sum::<usize>();
        }
        Ok((cells, self_cells))
    })
    .map_err(|e| e.to_string())?;
    let (cells, self_cells) = out.into_iter().next().unwrap().map_err(|e| e.to_string())?;
    ensure(self_cells.iter().all(|v| (0.8..=1.05).contains(v)), || {
        format!("self-copy normalized cells {self_cells:.3?} outside [0.8, 1.05]")
    })?;
    let e = within(t, Duration::from_secs(120))?;
    Ok(format!(
        "{cells} cells verified bit-exact over 4KiB..64MiB; self-copy normalized {self_cells:.2?}; in {e:.2?}"
    ))
}

fn grid_coverage() -> Outcome {
    let t = Instant::now();
    for total in 1..=64usize {
        for grid in 1..=64usize {
            let mut hits = vec![0u32; total];
            for pid in 0..grid {
                for tile in strided_tiles(pid, total, grid) {
                    hits[tile] += 1;
                }
            }
            ensure(hits.iter().all(|&h| h == 1), || format!("{total} tiles, grid {grid}: {hits:?}"))?;
            for tile in 0..total {
                ensure(strided_tiles(tile % grid, total, grid).any(|x| x == tile), || {
                    format!("tile {tile} not owned by pid {}", tile % grid)
                })?;
            }
        }
    }
    let e = within(t, Duration::from_secs(1))?;
    Ok(format!("4096 (tiles, grid) pairs in {e:.2?}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("oracle equivalence", oracle_equivalence),
        ("translation properties", translation_properties),
        ("allocation symmetry", allocation_symmetry),
        ("atomic counting", atomic_counting),
        ("lock protocol liveness and accounting", lock_protocol),
        ("overlap property", overlap),
        ("microbenchmark integrity", microbenchmark_integrity),
        ("persistent-grid coverage", grid_coverage),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("{} of 8 criteria passed", 8 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

use std::time::Duration;

use symmem::kernels::{
    gemm_tile, reference_output, run_pattern, verify_output, BlockConfig, GemmProblem, GemmShape, Jitter, Partition,
    Pattern, RunOptions,
};
use symmem::runtime::fill_uniform;
use symmem::{run_world, WorldConfig, WorldContext};

fn world(size: usize, cus: usize) -> WorldConfig {
    WorldConfig::new(size, 16 << 20, cus).with_timeout(Duration::from_secs(30))
}

/// Naive i-j-k product of rank `r`'s operands, placed in its column block.
fn naive_global(ctx: &WorldContext, p: &GemmProblem) -> Vec<f32> {
    let GemmShape { m, n, k } = p.shape;
    let w = p.world_size;
    let mut out = vec![0.0f32; m * n * w];
    let a: Vec<f32> = ctx.heap().read_all(&p.a, 0).unwrap();
    for r in 0..w {
        let b: Vec<f32> = ctx.heap().read_all(&p.b, r).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for kk in 0..k {
                    acc += a[i * k + kk] * b[kk * n + j];
                }
                out[i * n * w + r * n + j] = acc;
            }
        }
    }
    out
}

fn check_pattern(cfg: WorldConfig, shape: GemmShape, blocks: BlockConfig, pattern: Pattern, opts: RunOptions) {
    run_world(cfg, move |ctx| {
        let p = GemmProblem::new(&ctx, shape, blocks, 21).unwrap();
        let oracle = if ctx.rank() == 0 { naive_global(&ctx, &p) } else { Vec::new() };
        let oracle = ctx.broadcast(oracle, 0).unwrap();
        run_pattern(&ctx, &p, pattern, &opts).unwrap();
        ctx.barrier().unwrap();
        verify_output(&ctx, &p, &oracle, 1e-5).unwrap();
    })
    .unwrap();
}

#[test]
fn bulk_sync_two_ranks_square() {
    check_pattern(
        world(2, 4),
        GemmShape::new(128, 128, 128),
        BlockConfig::new(32, 32, 32, 4),
        Pattern::BulkSync,
        RunOptions::default(),
    );
}

#[test]
fn fused_sequential_four_ranks() {
    check_pattern(
        world(4, 4),
        GemmShape::new(256, 64, 512),
        BlockConfig::default(),
        Pattern::FusedSequential,
        RunOptions::default(),
    );
}

#[test]
fn wg_specialized_full_node_partition() {
    check_pattern(
        world(2, 304),
        GemmShape::new(128, 64, 64),
        BlockConfig::new(16, 16, 32, 4),
        Pattern::WgSpecialized,
        RunOptions {
            partition: Some(Partition::new(256, 48)),
            ..Default::default()
        },
    );
}

#[test]
fn wg_specialized_minimal_partition() {
    check_pattern(
        world(2, 2),
        GemmShape::new(64, 48, 40),
        BlockConfig::new(16, 16, 16, 2),
        Pattern::WgSpecialized,
        RunOptions {
            partition: Some(Partition::new(1, 1)),
            ..Default::default()
        },
    );
}

#[test]
fn producer_consumer_three_one() {
    check_pattern(
        world(2, 4),
        GemmShape::new(96, 64, 80),
        BlockConfig::new(16, 16, 16, 2),
        Pattern::ProducerConsumer,
        RunOptions {
            partition: Some(Partition::new(3, 1)),
            ..Default::default()
        },
    );
}

#[test]
fn jittered_lock_patterns_stay_correct() {
    for pattern in [Pattern::WgSpecialized, Pattern::ProducerConsumer] {
        check_pattern(
            world(3, 4),
            GemmShape::new(48, 32, 24),
            BlockConfig::new(8, 8, 8, 2),
            pattern,
            RunOptions {
                partition: Some(Partition::new(2, 2)),
                jitter: Some(Jitter {
                    max: Duration::from_micros(200),
                    seed: 4,
                }),
                ..Default::default()
            },
        );
    }
}

#[test]
fn k_tail_matches_naive_oracle() {
    let blocks = BlockConfig::new(16, 16, 16, 2);
    let shape = GemmShape::new(40, 24, 3 * blocks.block_k + 1);
    for pattern in Pattern::ALL {
        check_pattern(
            world(2, 4),
            shape,
            blocks,
            pattern,
            RunOptions {
                partition: Some(Partition::new(2, 2)),
                ..Default::default()
            },
        );
    }
}

#[test]
fn world_one_patterns_equal_local_gemm() {
    for pattern in Pattern::ALL {
        check_pattern(
            world(1, 2),
            GemmShape::new(33, 17, 29),
            BlockConfig::new(8, 8, 8, 2),
            pattern,
            RunOptions::default(),
        );
    }
}

#[test]
fn two_by_two_tile() {
    run_world(world(1, 1), |ctx| {
        let p = GemmProblem::allocate(&ctx, GemmShape::new(2, 2, 2), BlockConfig::new(2, 2, 2, 1)).unwrap();
        ctx.heap().write_all(&p.a, 0, &[1.0f32, 2.0, 3.0, 4.0]).unwrap();
        ctx.heap().write_all(&p.b, 0, &[5.0f32, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(gemm_tile(&ctx, &p, 0, 0).unwrap(), vec![19.0, 22.0, 43.0, 50.0]);
    })
    .unwrap();
}

#[test]
fn identity_operand_reproduces_b() {
    run_world(world(1, 1), |ctx| {
        let n = 32;
        let p = GemmProblem::allocate(&ctx, GemmShape::new(n, n, n), BlockConfig::new(n, n, n, 1)).unwrap();
        let eye: Vec<f32> = (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect();
        ctx.heap().write_all(&p.a, 0, &eye).unwrap();
        fill_uniform(&ctx, &p.b, -1.0, 1.0, 8, 0).unwrap();
        let b: Vec<f32> = ctx.heap().read_all(&p.b, 0).unwrap();
        assert_eq!(gemm_tile(&ctx, &p, 0, 0).unwrap(), b);
    })
    .unwrap();
}

#[test]
fn library_reference_agrees_with_naive_oracle() {
    run_world(world(2, 2), |ctx| {
        let p = GemmProblem::new(&ctx, GemmShape::new(50, 30, 70), BlockConfig::new(16, 16, 16, 2), 5).unwrap();
        let ours = reference_output(&ctx, &p).unwrap();
        let naive = naive_global(&ctx, &p);
        assert_eq!(ours, naive);
    })
    .unwrap();
}

#[test]
fn reruns_are_bit_identical() {
    run_world(world(2, 4), |ctx| {
        let p = GemmProblem::new(&ctx, GemmShape::new(64, 32, 48), BlockConfig::new(16, 16, 16, 2), 3).unwrap();
        let mut first: Option<Vec<f32>> = None;
        for pattern in Pattern::ALL {
            let opts = RunOptions {
                partition: Some(Partition::new(3, 1)),
                ..Default::default()
            };
            run_pattern(&ctx, &p, pattern, &opts).unwrap();
            ctx.barrier().unwrap();
            let got: Vec<f32> = ctx.heap().read_all(&p.c_global, ctx.rank()).unwrap();
            match &first {
                None => first = Some(got),
                Some(f) => assert!(f.iter().zip(&got).all(|(a, b)| a.to_bits() == b.to_bits()), "{pattern}"),
            }
            ctx.barrier().unwrap();
        }
    })
    .unwrap();
}

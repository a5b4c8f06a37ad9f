//! Scoped, ordered atomics on symmetric-heap cells.
//!
//! Every operation follows the same two steps as the memory operations:
//! translate the caller's pointer to the target rank, then perform the
//! hardware atomic there. Scopes are validated and carried, but all of them
//! are realized with process-wide visibility.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicI32, AtomicU32, AtomicU64, Ordering};

use crate::error::{arg, Error, Result};
use crate::runtime::WorldContext;
use crate::symheap::{check_dtype, Element, HeapAddress, SymmetricBuffer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MemOrder {
    Relaxed,
    Acquire,
    Release,
    AcqRel,
    SeqCst,
}

impl MemOrder {
    fn rmw(self, promote: bool) -> Ordering {
        if promote {
            return Ordering::SeqCst;
        }
        match self {
            MemOrder::Relaxed => Ordering::Relaxed,
            MemOrder::Acquire => Ordering::Acquire,
            MemOrder::Release => Ordering::Release,
            MemOrder::AcqRel => Ordering::AcqRel,
            MemOrder::SeqCst => Ordering::SeqCst,
        }
    }

    fn cas_failure(self, promote: bool) -> Ordering {
        if promote {
            return Ordering::SeqCst;
        }
        match self {
            MemOrder::Relaxed | MemOrder::Release => Ordering::Relaxed,
            MemOrder::Acquire | MemOrder::AcqRel => Ordering::Acquire,
            MemOrder::SeqCst => Ordering::SeqCst,
        }
    }
}

impl FromStr for MemOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "relaxed" => MemOrder::Relaxed,
            "acquire" => MemOrder::Acquire,
            "release" => MemOrder::Release,
            "acq_rel" => MemOrder::AcqRel,
            "seq_cst" => MemOrder::SeqCst,
            other => return arg(format!("unknown memory order {other:?}")),
        })
    }
}

/// Visibility domain of a synchronizing operation, weakest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scope {
    Block,
    Gpu,
    Sys,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "block" => Scope::Block,
            "gpu" => Scope::Gpu,
            "sys" => Scope::Sys,
            other => return arg(format!("unknown scope {other:?}")),
        })
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Block => "block",
            Scope::Gpu => "gpu",
            Scope::Sys => "sys",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RmwKind {
    Add,
    And,
    Or,
    Xor,
    Min,
    Max,
    Xchg,
}

/// Element types with atomic read-modify-write support.
pub trait AtomicElement: Element {
    /// # Safety
    /// `ptr` must be valid and naturally aligned for `Self`.
    unsafe fn rmw(ptr: *mut u8, kind: RmwKind, operand: Self, order: Ordering) -> Result<Self>;

    /// Returns the value observed before the operation.
    ///
    /// # Safety
    /// `ptr` must be valid and naturally aligned for `Self`.
    unsafe fn cas(ptr: *mut u8, expected: Self, desired: Self, success: Ordering, failure: Ordering) -> Self;

    /// # Safety
    /// `ptr` must be valid and naturally aligned for `Self`.
    unsafe fn load(ptr: *const u8, order: Ordering) -> Self;

    /// # Safety
    /// `ptr` must be valid and naturally aligned for `Self`.
    unsafe fn store(ptr: *mut u8, value: Self, order: Ordering);
}

macro_rules! int_atomic {
    ($t:ty, $atomic:ty) => {
        impl AtomicElement for $t {
            unsafe fn rmw(ptr: *mut u8, kind: RmwKind, v: Self, order: Ordering) -> Result<Self> {
                let a = <$atomic>::from_ptr(ptr as *mut $t);
                Ok(match kind {
                    RmwKind::Add => a.fetch_add(v, order),
                    RmwKind::And => a.fetch_and(v, order),
                    RmwKind::Or => a.fetch_or(v, order),
                    RmwKind::Xor => a.fetch_xor(v, order),
                    RmwKind::Min => a.fetch_min(v, order),
                    RmwKind::Max => a.fetch_max(v, order),
                    RmwKind::Xchg => a.swap(v, order),
                })
            }

            unsafe fn cas(ptr: *mut u8, expected: Self, desired: Self, success: Ordering, failure: Ordering) -> Self {
                match <$atomic>::from_ptr(ptr as *mut $t).compare_exchange(expected, desired, success, failure) {
                    Ok(v) | Err(v) => v,
                }
            }

            unsafe fn load(ptr: *const u8, order: Ordering) -> Self {
                <$atomic>::from_ptr(ptr as *mut $t).load(order)
            }

            unsafe fn store(ptr: *mut u8, value: Self, order: Ordering) {
                <$atomic>::from_ptr(ptr as *mut $t).store(value, order)
            }
        }
    };
}

int_atomic!(i32, AtomicI32);
int_atomic!(u32, AtomicU32);
int_atomic!(u64, AtomicU64);

impl AtomicElement for f32 {
    unsafe fn rmw(ptr: *mut u8, kind: RmwKind, v: Self, order: Ordering) -> Result<Self> {
        let a = AtomicU32::from_ptr(ptr as *mut u32);
        let combine: fn(f32, f32) -> f32 = match kind {
            RmwKind::Xchg => return Ok(f32::from_bits(a.swap(v.to_bits(), order))),
            RmwKind::Add => |cur, v| cur + v,
            RmwKind::Min | RmwKind::Max if v.is_nan() => {
                return arg("NaN operand for atomic min/max");
            }
            RmwKind::Min => |cur: f32, v: f32| if v.total_cmp(&cur).is_lt() { v } else { cur },
            RmwKind::Max => |cur: f32, v: f32| if v.total_cmp(&cur).is_gt() { v } else { cur },
            RmwKind::And | RmwKind::Or | RmwKind::Xor => {
                return arg("bitwise atomics are not defined for f32");
            }
        };
        let failure = match order {
            Ordering::AcqRel | Ordering::Acquire => Ordering::Acquire,
            Ordering::SeqCst => Ordering::SeqCst,
            _ => Ordering::Relaxed,
        };
        let mut cur = a.load(Ordering::Relaxed);
        loop {
            let next = combine(f32::from_bits(cur), v).to_bits();
            match a.compare_exchange_weak(cur, next, order, failure) {
                Ok(prev) => return Ok(f32::from_bits(prev)),
                Err(seen) => cur = seen,
            }
        }
    }

    unsafe fn cas(ptr: *mut u8, expected: Self, desired: Self, success: Ordering, failure: Ordering) -> Self {
        let a = AtomicU32::from_ptr(ptr as *mut u32);
        match a.compare_exchange(expected.to_bits(), desired.to_bits(), success, failure) {
            Ok(v) | Err(v) => f32::from_bits(v),
        }
    }

    unsafe fn load(ptr: *const u8, order: Ordering) -> Self {
        f32::from_bits(AtomicU32::from_ptr(ptr as *mut u32).load(order))
    }

    unsafe fn store(ptr: *mut u8, value: Self, order: Ordering) {
        AtomicU32::from_ptr(ptr as *mut u32).store(value.to_bits(), order)
    }
}

fn target_ptr<T: Element>(ctx: &WorldContext, addr: HeapAddress, to_rank: usize) -> Result<*mut u8> {
    let remote = ctx.layout().translate(addr, addr.rank, to_rank)?;
    let size = T::DTYPE.size();
    ctx.heap().checked_ptr(remote, size, size)
}

/// Atomic read-modify-write of the cell at `addr` (an address in the caller's
/// arena) on `to_rank`. Returns the previous value.
pub fn atomic_rmw<T: AtomicElement>(
    ctx: &WorldContext,
    kind: RmwKind,
    addr: HeapAddress,
    to_rank: usize,
    operand: T,
    order: MemOrder,
    _scope: Scope,
) -> Result<T> {
    let ptr = target_ptr::<T>(ctx, addr, to_rank)?;
    unsafe { T::rmw(ptr, kind, operand, order.rmw(ctx.promote_orders())) }
}

/// Compare-and-swap of the cell at `addr` on `to_rank`. Returns the value
/// observed before the operation whether or not the swap happened.
pub fn atomic_cas<T: AtomicElement>(
    ctx: &WorldContext,
    addr: HeapAddress,
    to_rank: usize,
    expected: T,
    desired: T,
    order: MemOrder,
    _scope: Scope,
) -> Result<T> {
    let ptr = target_ptr::<T>(ctx, addr, to_rank)?;
    let promote = ctx.promote_orders();
    Ok(unsafe { T::cas(ptr, expected, desired, order.rmw(promote), order.cas_failure(promote)) })
}

pub fn atomic_load<T: AtomicElement>(
    ctx: &WorldContext,
    addr: HeapAddress,
    to_rank: usize,
    order: MemOrder,
    _scope: Scope,
) -> Result<T> {
    let o = match order {
        MemOrder::Release | MemOrder::AcqRel => {
            return arg(format!("{order:?} ordering is invalid for a load"));
        }
        MemOrder::Relaxed => Ordering::Relaxed,
        MemOrder::Acquire => Ordering::Acquire,
        MemOrder::SeqCst => Ordering::SeqCst,
    };
    let o = if ctx.promote_orders() { Ordering::SeqCst } else { o };
    let ptr = target_ptr::<T>(ctx, addr, to_rank)?;
    Ok(unsafe { T::load(ptr, o) })
}

pub fn atomic_store<T: AtomicElement>(
    ctx: &WorldContext,
    addr: HeapAddress,
    to_rank: usize,
    value: T,
    order: MemOrder,
    _scope: Scope,
) -> Result<()> {
    let o = match order {
        MemOrder::Acquire | MemOrder::AcqRel => {
            return arg(format!("{order:?} ordering is invalid for a store"));
        }
        MemOrder::Relaxed => Ordering::Relaxed,
        MemOrder::Release => Ordering::Release,
        MemOrder::SeqCst => Ordering::SeqCst,
    };
    let o = if ctx.promote_orders() { Ordering::SeqCst } else { o };
    let ptr = target_ptr::<T>(ctx, addr, to_rank)?;
    unsafe { T::store(ptr, value, o) };
    Ok(())
}

/// Convenience over [`atomic_rmw`] addressing element `index` of `buf`,
/// with the buffer's dtype checked against `T`.
#[allow(clippy::too_many_arguments)]
pub fn rmw_at<T: AtomicElement>(
    ctx: &WorldContext,
    kind: RmwKind,
    buf: &SymmetricBuffer,
    index: usize,
    to_rank: usize,
    operand: T,
    order: MemOrder,
    scope: Scope,
) -> Result<T> {
    check_dtype::<T>(buf)?;
    let addr = buf.element_address(ctx.layout(), ctx.rank(), index)?;
    atomic_rmw(ctx, kind, addr, to_rank, operand, order, scope)
}

#[allow(clippy::too_many_arguments)]
pub fn cas_at<T: AtomicElement>(
    ctx: &WorldContext,
    buf: &SymmetricBuffer,
    index: usize,
    to_rank: usize,
    expected: T,
    desired: T,
    order: MemOrder,
    scope: Scope,
) -> Result<T> {
    check_dtype::<T>(buf)?;
    let addr = buf.element_address(ctx.layout(), ctx.rank(), index)?;
    atomic_cas(ctx, addr, to_rank, expected, desired, order, scope)
}

/// Element-wise `atomic_rmw` over elements `0..operands.len()` of `buf` on
/// `to_rank`, translating the buffer address once.
pub fn rmw_each<T: AtomicElement>(
    ctx: &WorldContext,
    kind: RmwKind,
    buf: &SymmetricBuffer,
    to_rank: usize,
    operands: &[T],
    order: MemOrder,
    _scope: Scope,
) -> Result<()> {
    check_dtype::<T>(buf)?;
    if operands.len() > buf.numel() {
        return arg(format!("{} operands for a buffer of {} elements", operands.len(), buf.numel()));
    }
    if buf.strides() != crate::symheap::row_major_strides(buf.shape()) {
        return arg("rmw_each needs a contiguous buffer");
    }
    if operands.is_empty() {
        return Ok(());
    }
    let size = T::DTYPE.size();
    let addr = ctx.layout().address(ctx.rank(), buf.offset())?;
    let remote = ctx.layout().translate(addr, ctx.rank(), to_rank)?;
    let base = ctx.heap().checked_ptr(remote, operands.len() * size, size)?;
    let o = order.rmw(ctx.promote_orders());
    for (i, &v) in operands.iter().enumerate() {
        unsafe { T::rmw(base.add(i * size), kind, v, o)? };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{init, run_world, WorldConfig};
    use crate::symheap::DType;

    fn one() -> WorldContext {
        init(WorldConfig::new(1, 1 << 16, 1)).unwrap().remove(0)
    }

    #[test]
    fn add_to_zero() {
        let ctx = one();
        let b = ctx.zeros(&[1], DType::U32).unwrap();
        let prev = rmw_at(&ctx, RmwKind::Add, &b, 0, 0, 5u32, MemOrder::Relaxed, Scope::Gpu).unwrap();
        assert_eq!(prev, 0);
        assert_eq!(ctx.heap().read::<u32>(&b, 0, 0).unwrap(), 5);
    }

    #[test]
    fn exchange() {
        let ctx = one();
        let b = ctx.full(&[1], 7.0, DType::I32).unwrap();
        let prev = rmw_at(&ctx, RmwKind::Xchg, &b, 0, 0, 9i32, MemOrder::AcqRel, Scope::Sys).unwrap();
        assert_eq!(prev, 7);
        assert_eq!(ctx.heap().read::<i32>(&b, 0, 0).unwrap(), 9);
    }

    #[test]
    fn bitwise_and_minmax() {
        let ctx = one();
        let b = ctx.full(&[1], 12.0, DType::U64).unwrap();
        let run = |k, v: u64| rmw_at(&ctx, k, &b, 0, 0, v, MemOrder::Relaxed, Scope::Block).unwrap();
        assert_eq!(run(RmwKind::And, 10), 12);
        assert_eq!(run(RmwKind::Or, 1), 8);
        assert_eq!(run(RmwKind::Xor, 3), 9);
        assert_eq!(run(RmwKind::Min, 5), 10);
        assert_eq!(run(RmwKind::Max, 2), 5);
        assert_eq!(ctx.heap().read::<u64>(&b, 0, 0).unwrap(), 5);
    }

    #[test]
    fn float_rmw() {
        let ctx = one();
        let b = ctx.full(&[1], 1.5, DType::F32).unwrap();
        let run = |k, v: f32| rmw_at(&ctx, k, &b, 0, 0, v, MemOrder::AcqRel, Scope::Gpu);
        assert_eq!(run(RmwKind::Add, 2.0).unwrap(), 1.5);
        assert_eq!(run(RmwKind::Max, -1.0).unwrap(), 3.5);
        assert_eq!(run(RmwKind::Min, -1.0).unwrap(), 3.5);
        assert_eq!(ctx.heap().read::<f32>(&b, 0, 0).unwrap(), -1.0);
        assert!(matches!(run(RmwKind::Min, f32::NAN), Err(Error::Argument(_))));
        assert!(matches!(run(RmwKind::Xor, 1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn cas_success_and_failure() {
        let ctx = one();
        let b = ctx.zeros(&[1], DType::U32).unwrap();
        assert_eq!(cas_at(&ctx, &b, 0, 0, 0u32, 1, MemOrder::Release, Scope::Gpu).unwrap(), 0);
        assert_eq!(ctx.heap().read::<u32>(&b, 0, 0).unwrap(), 1);
        assert_eq!(cas_at(&ctx, &b, 0, 0, 0u32, 1, MemOrder::Release, Scope::Gpu).unwrap(), 1);
        assert_eq!(ctx.heap().read::<u32>(&b, 0, 0).unwrap(), 1);
    }

    #[test]
    fn misaligned_cell_rejected() {
        let ctx = one();
        let b = ctx.zeros(&[2], DType::U64).unwrap();
        let mut addr = b.element_address(ctx.layout(), 0, 0).unwrap();
        addr.linear += 4;
        let err = atomic_rmw(&ctx, RmwKind::Add, addr, 0, 1u64, MemOrder::Relaxed, Scope::Gpu).unwrap_err();
        assert!(matches!(err, Error::Misaligned { align: 8, .. }));
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let ctx = one();
        let b = ctx.zeros(&[1], DType::U32).unwrap();
        assert!(matches!(
            rmw_at(&ctx, RmwKind::Add, &b, 0, 0, 1i32, MemOrder::Relaxed, Scope::Gpu),
            Err(Error::DTypeMismatch { .. })
        ));
    }

    #[test]
    fn plain_orders_validated() {
        let ctx = one();
        let b = ctx.zeros(&[1], DType::U32).unwrap();
        let addr = b.element_address(ctx.layout(), 0, 0).unwrap();
        assert!(atomic_store(&ctx, addr, 0, 1u32, MemOrder::Acquire, Scope::Gpu).is_err());
        assert!(atomic_load::<u32>(&ctx, addr, 0, MemOrder::Release, Scope::Gpu).is_err());
        atomic_store(&ctx, addr, 0, 3u32, MemOrder::Release, Scope::Gpu).unwrap();
        assert_eq!(atomic_load::<u32>(&ctx, addr, 0, MemOrder::Acquire, Scope::Gpu).unwrap(), 3);
    }

    #[test]
    fn parse_orders_and_scopes() {
        assert_eq!("seq_cst".parse::<MemOrder>().unwrap(), MemOrder::SeqCst);
        assert_eq!("acq_rel".parse::<MemOrder>().unwrap(), MemOrder::AcqRel);
        assert!("consume".parse::<MemOrder>().is_err());
        assert!(Scope::Block < Scope::Gpu && Scope::Gpu < Scope::Sys);
        assert_eq!("sys".parse::<Scope>().unwrap(), Scope::Sys);
        assert!("wave".parse::<Scope>().is_err());
    }

    #[test]
    fn remote_counting() {
        let totals = run_world(WorldConfig::new(4, 1 << 16, 1), |ctx| {
            let b = ctx.zeros(&[1], DType::U64).unwrap();
            ctx.barrier().unwrap();
            for _ in 0..1000 {
                rmw_at(&ctx, RmwKind::Add, &b, 0, 0, 1u64, MemOrder::Relaxed, Scope::Sys).unwrap();
            }
            ctx.barrier().unwrap();
            ctx.heap().read::<u64>(&b, 0, 0).unwrap()
        })
        .unwrap();
        assert!(totals.iter().all(|&t| t == 4000));
    }

    #[test]
    fn float_add_is_linearizable() {
        // Integer-valued float adds are exact, so any interleaving sums to N*K.
        let totals = run_world(WorldConfig::new(4, 1 << 16, 1), |ctx| {
            let b = ctx.zeros(&[1], DType::F32).unwrap();
            ctx.barrier().unwrap();
            for _ in 0..500 {
                rmw_at(&ctx, RmwKind::Add, &b, 0, 1, 1.0f32, MemOrder::Relaxed, Scope::Sys).unwrap();
            }
            ctx.barrier().unwrap();
            ctx.heap().read::<f32>(&b, 1, 0).unwrap()
        })
        .unwrap();
        assert!(totals.iter().all(|&t| t == 2000.0));
    }

    #[test]
    fn exchange_chain_loses_nothing() {
        // Each rank swaps in distinct tokens; every token except the final
        // cell value must come back exactly once.
        let got = run_world(WorldConfig::new(4, 1 << 16, 1), |ctx| {
            let b = ctx.zeros(&[1], DType::U32).unwrap();
            ctx.barrier().unwrap();
            let mine: Vec<u32> = (0..200)
                .map(|i| {
                    let token = (ctx.rank() as u32 + 1) * 1000 + i;
                    rmw_at(&ctx, RmwKind::Xchg, &b, 0, 0, token, MemOrder::AcqRel, Scope::Sys).unwrap()
                })
                .collect();
            ctx.barrier().unwrap();
            (mine, ctx.heap().read::<u32>(&b, 0, 0).unwrap())
        })
        .unwrap();
        let mut returned: Vec<u32> = got.iter().flat_map(|(m, _)| m.iter().copied()).collect();
        returned.push(got[0].1);
        returned.sort_unstable();
        let mut expect: Vec<u32> = (0..4u32)
            .flat_map(|r| (0..200).map(move |i| (r + 1) * 1000 + i))
            .collect();
        expect.push(0);
        expect.sort_unstable();
        assert_eq!(returned, expect);
    }
}

//! Symmetric heap: one mapped region split into equally sized per-rank arenas.
//!
//! Every rank performs the same sequence of allocations, so an object lives at
//! the same offset inside every arena. A pointer into one arena is turned into
//! the matching pointer on a peer by swapping arena bases, see
//! [`HeapLayout::translate`].
//!
//! All cell accesses go through atomics of the cell's natural width, which is
//! what lets ranks and worker slots touch the same memory from several threads.

use std::alloc::{self, Layout};
use std::fmt;
use std::ptr::NonNull;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};

/// Granularity of every symmetric allocation, in bytes.
pub const HEAP_ALIGN: usize = 256;

const REGION_ALIGN: usize = 4096;

pub fn align_up(value: usize, align: usize) -> usize {
    value.div_ceil(align) * align
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I32,
    U32,
    U64,
}

impl DType {
    pub const fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 | DType::U32 => 4,
            DType::U64 => 8,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::I32 => "i32",
            DType::U32 => "u32",
            DType::U64 => "u64",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A scalar type that can live in the symmetric heap.
///
/// # Safety
///
/// Implementors must have `size_of::<Self>() == Self::DTYPE.size()` and the
/// bit conversions must be lossless.
pub unsafe trait Element:
    Copy + Default + PartialEq + fmt::Debug + Send + Sync + 'static
{
    const DTYPE: DType;

    fn to_bits(self) -> u64;
    fn from_bits(bits: u64) -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// Relaxed atomic read of one cell.
    ///
    /// # Safety
    /// `ptr` must be valid for reads of `DTYPE.size()` bytes and naturally aligned.
    #[inline]
    unsafe fn read(ptr: *const u8) -> Self {
        if Self::DTYPE.size() == 4 {
            let bits = AtomicU32::from_ptr(ptr as *mut u32).load(Ordering::Relaxed);
            Self::from_bits(bits as u64)
        } else {
            Self::from_bits(AtomicU64::from_ptr(ptr as *mut u64).load(Ordering::Relaxed))
        }
    }

    /// Relaxed atomic write of one cell.
    ///
    /// # Safety
    /// `ptr` must be valid for writes of `DTYPE.size()` bytes and naturally aligned.
    #[inline]
    unsafe fn write(ptr: *mut u8, value: Self) {
        if Self::DTYPE.size() == 4 {
            AtomicU32::from_ptr(ptr as *mut u32).store(value.to_bits() as u32, Ordering::Relaxed);
        } else {
            AtomicU64::from_ptr(ptr as *mut u64).store(value.to_bits(), Ordering::Relaxed);
        }
    }
}

unsafe impl Element for f32 {
    const DTYPE: DType = DType::F32;
    fn to_bits(self) -> u64 {
        f32::to_bits(self) as u64
    }
    fn from_bits(bits: u64) -> Self {
        f32::from_bits(bits as u32)
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

unsafe impl Element for i32 {
    const DTYPE: DType = DType::I32;
    fn to_bits(self) -> u64 {
        self as u32 as u64
    }
    fn from_bits(bits: u64) -> Self {
        bits as u32 as i32
    }
    fn from_f64(v: f64) -> Self {
        v as i32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

unsafe impl Element for u32 {
    const DTYPE: DType = DType::U32;
    fn to_bits(self) -> u64 {
        self as u64
    }
    fn from_bits(bits: u64) -> Self {
        bits as u32
    }
    fn from_f64(v: f64) -> Self {
        v as u32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

unsafe impl Element for u64 {
    const DTYPE: DType = DType::U64;
    fn to_bits(self) -> u64 {
        self
    }
    fn from_bits(bits: u64) -> Self {
        bits
    }
    fn from_f64(v: f64) -> Self {
        v as u64
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

/// An absolute address inside one rank's arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HeapAddress {
    pub rank: usize,
    pub linear: u64,
}

/// Arena geometry: the base of every rank's arena and the arena size.
///
/// This is the table device code reads on every translation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeapLayout {
    arena_size: usize,
    base_table: Vec<u64>,
}

impl HeapLayout {
    /// Builds a layout from an explicit base table. Bases must be distinct and
    /// arenas must not overlap.
    pub fn from_bases(base_table: Vec<u64>, arena_size: usize) -> Result<Self> {
        if base_table.is_empty() {
            return arg("base table must have at least one rank");
        }
        if arena_size == 0 {
            return arg("arena_size must be positive");
        }
        let mut sorted = base_table.clone();
        sorted.sort_unstable();
        for pair in sorted.windows(2) {
            if pair[1] - pair[0] < arena_size as u64 {
                return arg(format!(
                    "arenas at {:#x} and {:#x} overlap for arena_size {arena_size}",
                    pair[0], pair[1]
                ));
            }
        }
        if sorted
            .last()
            .and_then(|b| b.checked_add(arena_size as u64))
            .is_none()
        {
            return arg("arena extends past the end of the address space");
        }
        Ok(Self {
            arena_size,
            base_table,
        })
    }

    pub fn world_size(&self) -> usize {
        self.base_table.len()
    }

    pub fn arena_size(&self) -> usize {
        self.arena_size
    }

    pub fn base_table(&self) -> &[u64] {
        &self.base_table
    }

    pub fn base(&self, rank: usize) -> Result<u64> {
        self.base_table.get(rank).copied().ok_or_else(|| {
            Error::Argument(format!(
                "rank {rank} out of range for world size {}",
                self.world_size()
            ))
        })
    }

    /// Address of `offset` bytes into `rank`'s arena.
    pub fn address(&self, rank: usize, offset: usize) -> Result<HeapAddress> {
        let base = self.base(rank)?;
        if offset >= self.arena_size {
            return Err(Error::OutsideArena {
                rank,
                linear: base.wrapping_add(offset as u64),
                base,
                end: base + self.arena_size as u64,
            });
        }
        Ok(HeapAddress {
            rank,
            linear: base + offset as u64,
        })
    }

    /// Byte offset of `addr` within the arena of `addr.rank`.
    pub fn offset_of(&self, addr: HeapAddress) -> Result<usize> {
        let base = self.base(addr.rank)?;
        let end = base + self.arena_size as u64;
        if addr.linear < base || addr.linear >= end {
            return Err(Error::OutsideArena {
                rank: addr.rank,
                linear: addr.linear,
                base,
                end,
            });
        }
        Ok((addr.linear - base) as usize)
    }

    /// Moves `addr` from `from_rank`'s arena to the same offset in `to_rank`'s.
    pub fn translate(&self, addr: HeapAddress, from_rank: usize, to_rank: usize) -> Result<HeapAddress> {
        if addr.rank != from_rank {
            return arg(format!(
                "address belongs to rank {}, translation requested from rank {from_rank}",
                addr.rank
            ));
        }
        let from_base = self.base(from_rank)?;
        let to_base = self.base(to_rank)?;
        let end = from_base + self.arena_size as u64;
        if addr.linear < from_base || addr.linear >= end {
            return Err(Error::OutsideArena {
                rank: from_rank,
                linear: addr.linear,
                base: from_base,
                end,
            });
        }
        let offset = addr.linear - from_base;
        Ok(HeapAddress {
            rank: to_rank,
            linear: to_base + offset,
        })
    }
}

/// A typed, shaped view into the symmetric heap. Valid on every rank at the
/// same offset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymmetricBuffer {
    offset: usize,
    shape: Vec<usize>,
    strides: Vec<usize>,
    dtype: DType,
    len_bytes: usize,
}

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

impl SymmetricBuffer {
    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len_bytes(&self) -> usize {
        self.len_bytes
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Reinterprets the buffer with custom element strides. The new layout
    /// must not overlap itself and must fit in the original allocation.
    pub fn with_strides(&self, shape: Vec<usize>, strides: Vec<usize>) -> Result<Self> {
        if shape.len() != strides.len() {
            return arg("shape and strides must have the same rank");
        }
        let mut dims: Vec<usize> = (0..shape.len()).filter(|&d| shape[d] > 1).collect();
        dims.sort_by_key(|&d| strides[d]);
        let mut span = 1usize;
        for &d in &dims {
            if strides[d] < span {
                return arg(format!("strides {strides:?} overlap for shape {shape:?}"));
            }
            span = strides[d] * shape[d];
        }
        let numel: usize = shape.iter().product();
        let extent = if numel == 0 {
            0
        } else {
            shape
                .iter()
                .zip(&strides)
                .map(|(&n, &s)| (n - 1) * s)
                .sum::<usize>()
                + 1
        };
        let len_bytes = extent * self.dtype.size();
        if len_bytes > self.len_bytes {
            return arg(format!(
                "strided view needs {len_bytes} bytes, allocation has {}",
                self.len_bytes
            ));
        }
        Ok(Self {
            offset: self.offset,
            shape,
            strides,
            dtype: self.dtype,
            len_bytes: self.len_bytes,
        })
    }

    /// Heap address of element `index` (row-major flat index over the shape)
    /// in `rank`'s arena.
    pub fn element_address(&self, layout: &HeapLayout, rank: usize, index: usize) -> Result<HeapAddress> {
        let elem = self.element_offset(index)?;
        layout.address(rank, self.offset + elem * self.dtype.size())
    }

    pub(crate) fn element_offset(&self, index: usize) -> Result<usize> {
        if index >= self.numel() {
            return arg(format!(
                "element {index} out of range for buffer of {} elements",
                self.numel()
            ));
        }
        let mut rem = index;
        let mut off = 0;
        for d in (0..self.shape.len()).rev() {
            off += (rem % self.shape[d]) * self.strides[d];
            rem /= self.shape[d];
        }
        Ok(off)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct AllocRecord {
    offset: usize,
    len: usize,
    dtype: Option<DType>,
}

#[derive(Debug, Default)]
struct AllocState {
    log: Vec<AllocRecord>,
    next_per_rank: Vec<usize>,
    cursor: usize,
}

struct Region {
    ptr: NonNull<u8>,
    layout: Layout,
}

// The region is only touched through atomics or under collective
// synchronization.
unsafe impl Send for Region {}
unsafe impl Sync for Region {}

impl Drop for Region {
    fn drop(&mut self) {
        unsafe { alloc::dealloc(self.ptr.as_ptr(), self.layout) }
    }
}

/// The heap shared by every rank of a world.
pub struct SymmetricHeap {
    region: Region,
    layout: HeapLayout,
    state: Mutex<AllocState>,
}

impl fmt::Debug for SymmetricHeap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SymmetricHeap")
            .field("layout", &self.layout)
            .field("cursor", &self.cursor())
            .finish()
    }
}

impl SymmetricHeap {
    /// Maps and zero-fills one arena per rank.
    pub fn new(world_size: usize, arena_size: usize) -> Result<Self> {
        if world_size == 0 {
            return arg("world_size must be at least 1");
        }
        if arena_size == 0 || !arena_size.is_multiple_of(HEAP_ALIGN) {
            return arg(format!(
                "arena_size must be a positive multiple of {HEAP_ALIGN}, got {arena_size}"
            ));
        }
        let total = world_size
            .checked_mul(arena_size)
            .ok_or_else(|| Error::Resource("heap size overflows usize".into()))?;
        let mem_layout = Layout::from_size_align(total, REGION_ALIGN)
            .map_err(|e| Error::Resource(e.to_string()))?;
        let raw = unsafe { alloc::alloc_zeroed(mem_layout) };
        let ptr = NonNull::new(raw).ok_or_else(|| {
            Error::Resource(format!("failed to map {total} bytes for {world_size} arenas"))
        })?;
        let base = ptr.as_ptr() as u64;
        let bases = (0..world_size)
            .map(|r| base + (r * arena_size) as u64)
            .collect();
        Ok(Self {
            region: Region {
                ptr,
                layout: mem_layout,
            },
            layout: HeapLayout::from_bases(bases, arena_size)?,
            state: Mutex::new(AllocState {
                next_per_rank: vec![0; world_size],
                ..Default::default()
            }),
        })
    }

    pub fn layout(&self) -> &HeapLayout {
        &self.layout
    }

    pub fn world_size(&self) -> usize {
        self.layout.world_size()
    }

    pub fn arena_size(&self) -> usize {
        self.layout.arena_size()
    }

    /// Offset of the next free byte, identical for every rank once all ranks
    /// have issued the same allocations.
    pub fn cursor(&self) -> usize {
        self.state.lock().unwrap().cursor
    }

    /// Offsets of all allocations issued so far by `rank`, in order.
    pub fn allocation_trace(&self, rank: usize) -> Vec<(usize, usize)> {
        let st = self.state.lock().unwrap();
        let n = st.next_per_rank.get(rank).copied().unwrap_or(0);
        st.log[..n].iter().map(|r| (r.offset, r.len)).collect()
    }

    /// Collective bump allocation of `len` raw bytes on behalf of `rank`.
    ///
    /// The first rank to reach the k-th allocation fixes its offset; the
    /// other ranks must request the same size and receive the same offset.
    pub fn alloc_bytes(&self, rank: usize, len: usize) -> Result<usize> {
        self.alloc_record(rank, len, None)
    }

    pub fn alloc(&self, rank: usize, shape: &[usize], dtype: DType) -> Result<SymmetricBuffer> {
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &n| acc.checked_mul(n))
            .ok_or_else(|| Error::Argument(format!("shape {shape:?} overflows")))?;
        let len_bytes = numel
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::Argument(format!("shape {shape:?} overflows")))?;
        let offset = self.alloc_record(rank, len_bytes, Some(dtype))?;
        Ok(SymmetricBuffer {
            offset,
            shape: shape.to_vec(),
            strides: row_major_strides(shape),
            dtype,
            len_bytes,
        })
    }

    fn alloc_record(&self, rank: usize, len: usize, dtype: Option<DType>) -> Result<usize> {
        let mut st = self.state.lock().unwrap();
        let seq = *st.next_per_rank.get(rank).ok_or_else(|| {
            Error::Argument(format!("rank {rank} out of range for world size {}", self.world_size()))
        })?;
        if let Some(rec) = st.log.get(seq) {
            if rec.len != len || rec.dtype != dtype {
                return Err(Error::Asymmetric {
                    rank,
                    detail: format!(
                        "allocation #{seq} requested {len} bytes ({dtype:?}), peers requested {} bytes ({:?})",
                        rec.len, rec.dtype
                    ),
                });
            }
            let offset = rec.offset;
            st.next_per_rank[rank] += 1;
            return Ok(offset);
        }
        let offset = align_up(st.cursor, HEAP_ALIGN);
        let arena = self.arena_size();
        let remaining = arena.saturating_sub(offset);
        if offset > arena || len > remaining {
            return Err(Error::OutOfHeap {
                requested: len,
                remaining: arena.saturating_sub(st.cursor),
            });
        }
        st.log.push(AllocRecord { offset, len, dtype });
        st.cursor = offset + len;
        st.next_per_rank[rank] += 1;
        Ok(offset)
    }

    /// Drops every allocation and zero-fills all arenas.
    ///
    /// Collective: callers must ensure no rank touches the heap concurrently.
    pub fn reset(&self) {
        let mut st = self.state.lock().unwrap();
        st.log.clear();
        st.cursor = 0;
        st.next_per_rank.iter_mut().for_each(|n| *n = 0);
        unsafe { std::ptr::write_bytes(self.region.ptr.as_ptr(), 0, self.region.layout.size()) };
    }

    /// Raw pointer to `len` bytes at `addr`, bounds-checked against the arena
    /// of `addr.rank` and aligned to `align`.
    pub(crate) fn checked_ptr(&self, addr: HeapAddress, len: usize, align: usize) -> Result<*mut u8> {
        let offset = self.layout.offset_of(addr)?;
        if len > self.arena_size() - offset {
            let base = self.layout.base(addr.rank)?;
            return Err(Error::OutsideArena {
                rank: addr.rank,
                linear: addr.linear + len as u64 - 1,
                base,
                end: base + self.arena_size() as u64,
            });
        }
        if !addr.linear.is_multiple_of(align as u64) {
            return Err(Error::Misaligned {
                linear: addr.linear,
                align,
            });
        }
        let region_offset = (addr.linear - self.region.ptr.as_ptr() as u64) as usize;
        Ok(unsafe { self.region.ptr.as_ptr().add(region_offset) })
    }

    /// Plain read of one element of `buf` on `rank`.
    pub fn read<T: Element>(&self, buf: &SymmetricBuffer, rank: usize, index: usize) -> Result<T> {
        check_dtype::<T>(buf)?;
        let addr = buf.element_address(&self.layout, rank, index)?;
        let ptr = self.checked_ptr(addr, T::DTYPE.size(), T::DTYPE.size())?;
        Ok(unsafe { T::read(ptr) })
    }

    /// Plain write of one element of `buf` on `rank`.
    pub fn write<T: Element>(&self, buf: &SymmetricBuffer, rank: usize, index: usize, value: T) -> Result<()> {
        check_dtype::<T>(buf)?;
        let addr = buf.element_address(&self.layout, rank, index)?;
        let ptr = self.checked_ptr(addr, T::DTYPE.size(), T::DTYPE.size())?;
        unsafe { T::write(ptr, value) };
        Ok(())
    }

    /// Copies out every element of `buf` on `rank` in row-major order.
    pub fn read_all<T: Element>(&self, buf: &SymmetricBuffer, rank: usize) -> Result<Vec<T>> {
        check_dtype::<T>(buf)?;
        let base = self.layout.address(rank, buf.offset).map(|a| a.linear);
        let n = buf.numel();
        if n == 0 {
            return Ok(Vec::new());
        }
        let base = self.checked_ptr(
            HeapAddress {
                rank,
                linear: base?,
            },
            buf.len_bytes,
            T::DTYPE.size(),
        )?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let off = buf.element_offset(i)? * T::DTYPE.size();
            out.push(unsafe { T::read(base.add(off)) });
        }
        Ok(out)
    }

    /// Overwrites every element of `buf` on `rank` from `values` (row-major).
    pub fn write_all<T: Element>(&self, buf: &SymmetricBuffer, rank: usize, values: &[T]) -> Result<()> {
        check_dtype::<T>(buf)?;
        if values.len() != buf.numel() {
            return arg(format!(
                "expected {} values, got {}",
                buf.numel(),
                values.len()
            ));
        }
        if values.is_empty() {
            return Ok(());
        }
        let addr = self.layout.address(rank, buf.offset)?;
        let base = self.checked_ptr(addr, buf.len_bytes, T::DTYPE.size())?;
        for (i, &v) in values.iter().enumerate() {
            let off = buf.element_offset(i)? * T::DTYPE.size();
            unsafe { T::write(base.add(off), v) };
        }
        Ok(())
    }
}

pub(crate) fn check_dtype<T: Element>(buf: &SymmetricBuffer) -> Result<()> {
    if buf.dtype != T::DTYPE {
        return Err(Error::DTypeMismatch {
            expected: buf.dtype.name(),
            actual: T::DTYPE.name(),
        });
    }
    Ok(())
}

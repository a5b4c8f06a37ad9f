//! One-sided memory operations on masked tiles of symmetric buffers.
//!
//! Value-based `load`/`store` move tiles between caller-owned values and a
//! (possibly remote) arena. Buffer-based `put`/`get`/`copy` move data between
//! two arenas. All of them translate the view's address from the caller's
//! arena to the target arena and then touch memory with relaxed ordering;
//! publication to other contexts needs a release/acquire pair from
//! [`crate::atomics`].

use crate::error::{arg, Result};
use crate::runtime::WorldContext;
use crate::symheap::{check_dtype, Element, HeapAddress, SymmetricBuffer};

/// Index vector along one tile axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Axis {
    Range { start: usize, len: usize },
    Indices(Vec<usize>),
}

impl Axis {
    pub fn range(start: usize, len: usize) -> Self {
        Axis::Range { start, len }
    }

    pub fn len(&self) -> usize {
        match self {
            Axis::Range { len, .. } => *len,
            Axis::Indices(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> usize {
        match self {
            Axis::Range { start, .. } => start + i,
            Axis::Indices(v) => v[i],
        }
    }

    /// Largest index among the first `n` positions.
    fn max_of_prefix(&self, n: usize) -> Option<usize> {
        match self {
            Axis::Range { start, .. } => n.checked_sub(1).map(|last| start + last),
            Axis::Indices(v) => v[..n].iter().copied().max(),
        }
    }

    /// Shifts every index by `delta`, e.g. to address a rank's column block.
    pub fn shifted(&self, delta: usize) -> Self {
        match self {
            Axis::Range { start, len } => Axis::Range {
                start: start + delta,
                len: *len,
            },
            Axis::Indices(v) => Axis::Indices(v.iter().map(|i| i + delta).collect()),
        }
    }
}

/// Which tile lanes are live.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mask {
    All,
    /// Lane `(i, j)` is live iff `i < rows && j < cols`; the shape of the
    /// `(rm < M) & (rn < N)` masks used by tiled kernels.
    Prefix { rows: usize, cols: usize },
    /// Row-major per-lane flags.
    Explicit(Vec<bool>),
}

/// A masked 2-D tile of a symmetric buffer.
///
/// Element `(i, j)` lives at `rows[i] * row_stride + cols[j] * col_stride`.
/// One-dimensional buffers are viewed as a single row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileView {
    buffer: SymmetricBuffer,
    rows: Axis,
    cols: Axis,
    mask: Mask,
    row_stride: usize,
    col_stride: usize,
    extent: (usize, usize),
}

impl TileView {
    pub fn new(buffer: &SymmetricBuffer, rows: Axis, cols: Axis, mask: Mask) -> Result<Self> {
        let (extent, row_stride, col_stride) = match (buffer.shape(), buffer.strides()) {
            ([n], [s]) => ((1, *n), 0, *s),
            ([m, n], [sm, sn]) => ((*m, *n), *sm, *sn),
            (shape, strides) if is_row_major(shape, strides) => ((1, buffer.numel()), 0, 1),
            (shape, _) => return arg(format!("cannot tile a non-contiguous buffer of shape {shape:?}")),
        };
        let view = Self {
            buffer: buffer.clone(),
            rows,
            cols,
            mask,
            row_stride,
            col_stride,
            extent,
        };
        view.validate()?;
        Ok(view)
    }

    /// The whole buffer, every lane live.
    pub fn full(buffer: &SymmetricBuffer) -> Result<Self> {
        let (r, c) = match buffer.shape() {
            [n] => (1, *n),
            [m, n] => (*m, *n),
            _ => (1, buffer.numel()),
        };
        Self::new(buffer, Axis::range(0, r), Axis::range(0, c), Mask::All)
    }

    /// `len` consecutive elements of a one-dimensional buffer.
    pub fn linear(buffer: &SymmetricBuffer, start: usize, len: usize) -> Result<Self> {
        Self::new(buffer, Axis::range(0, 1), Axis::range(start, len), Mask::All)
    }

    /// A `tile_rows x tile_cols` block at `(row0, col0)` whose lanes beyond
    /// `(valid_rows, valid_cols)` are masked off.
    pub fn block(
        buffer: &SymmetricBuffer,
        row0: usize,
        tile_rows: usize,
        col0: usize,
        tile_cols: usize,
        valid_rows: usize,
        valid_cols: usize,
    ) -> Result<Self> {
        Self::new(
            buffer,
            Axis::range(row0, tile_rows),
            Axis::range(col0, tile_cols),
            Mask::Prefix {
                rows: valid_rows.min(tile_rows),
                cols: valid_cols.min(tile_cols),
            },
        )
    }

    pub fn buffer(&self) -> &SymmetricBuffer {
        &self.buffer
    }

    pub fn rows(&self) -> &Axis {
        &self.rows
    }

    pub fn cols(&self) -> &Axis {
        &self.cols
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn tile_shape(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    pub fn numel(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    /// Columns are consecutive and unit-stride, so each row is one run.
    pub fn is_contiguous(&self) -> bool {
        matches!(self.cols, Axis::Range { .. }) && (self.col_stride == 1 || self.cols.len() <= 1)
    }

    /// Returns a copy whose column indices are shifted by `delta`.
    pub fn shift_cols(&self, delta: usize) -> Result<Self> {
        Self::new(&self.buffer, self.rows.clone(), self.cols.shifted(delta), self.mask.clone())
    }

    fn live_rows(&self) -> usize {
        match &self.mask {
            Mask::Prefix { rows, .. } => (*rows).min(self.rows.len()),
            _ => self.rows.len(),
        }
    }

    fn live_cols(&self) -> usize {
        match &self.mask {
            Mask::Prefix { cols, .. } => (*cols).min(self.cols.len()),
            _ => self.cols.len(),
        }
    }

    #[inline]
    fn is_live(&self, i: usize, j: usize) -> bool {
        match &self.mask {
            Mask::All => true,
            Mask::Prefix { rows, cols } => i < *rows && j < *cols,
            Mask::Explicit(m) => m[i * self.cols.len() + j],
        }
    }

    fn validate(&self) -> Result<()> {
        let (m, n) = self.extent;
        if let Mask::Explicit(flags) = &self.mask {
            if flags.len() != self.numel() {
                return arg(format!(
                    "mask has {} lanes, tile has {}",
                    flags.len(),
                    self.numel()
                ));
            }
            for i in 0..self.rows.len() {
                for j in 0..self.cols.len() {
                    if flags[i * self.cols.len() + j] && (self.rows.get(i) >= m || self.cols.get(j) >= n) {
                        return arg(format!(
                            "live lane ({}, {}) outside buffer extent {m}x{n}",
                            self.rows.get(i),
                            self.cols.get(j)
                        ));
                    }
                }
            }
            return Ok(());
        }
        let (lr, lc) = (self.live_rows(), self.live_cols());
        if lr == 0 || lc == 0 {
            return Ok(());
        }
        let max_r = self.rows.max_of_prefix(lr).unwrap_or(0);
        let max_c = self.cols.max_of_prefix(lc).unwrap_or(0);
        if max_r >= m || max_c >= n {
            return arg(format!(
                "live lane ({max_r}, {max_c}) outside buffer extent {m}x{n}"
            ));
        }
        Ok(())
    }

    fn has_live_lanes(&self) -> bool {
        match &self.mask {
            Mask::Explicit(m) => m.iter().any(|&b| b),
            _ => self.live_rows() > 0 && self.live_cols() > 0,
        }
    }

    /// Element offset of lane `(i, j)`.
    #[inline]
    fn elem(&self, i: usize, j: usize) -> usize {
        self.rows.get(i) * self.row_stride + self.cols.get(j) * self.col_stride
    }
}

fn is_row_major(shape: &[usize], strides: &[usize]) -> bool {
    crate::symheap::row_major_strides(shape) == strides
}

/// Base pointer of `view`'s buffer on `target`, reached by translating the
/// caller-side address on `origin`.
fn resolve<T: Element>(ctx: &WorldContext, view: &TileView, origin: usize, target: usize) -> Result<*mut u8> {
    check_dtype::<T>(&view.buffer)?;
    let layout = ctx.layout();
    let local: HeapAddress = layout.address(origin, view.buffer.offset())?;
    let remote = layout.translate(local, origin, target)?;
    ctx.heap()
        .checked_ptr(remote, view.buffer.len_bytes(), T::DTYPE.size())
}

/// Reads `view` from `from_rank`'s arena into `out` (row-major), using the
/// caller-side address on `to_rank`. Masked-off lanes are set to zero.
pub fn load_into<T: Element>(
    ctx: &WorldContext,
    view: &TileView,
    to_rank: usize,
    from_rank: usize,
    out: &mut [T],
) -> Result<()> {
    if out.len() != view.numel() {
        return arg(format!("output has {} lanes, tile has {}", out.len(), view.numel()));
    }
    if !view.has_live_lanes() {
        out.fill(T::default());
        return Ok(());
    }
    let base = resolve::<T>(ctx, view, to_rank, from_rank)?;
    let size = T::DTYPE.size();
    let cols = view.cols.len();
    if !matches!(view.mask, Mask::Explicit(_)) {
        let (lr, lc) = (view.live_rows(), view.live_cols());
        if lr < view.rows.len() || lc < cols {
            out.fill(T::default());
        }
        for i in 0..lr {
            let row = &mut out[i * cols..i * cols + lc];
            if view.is_contiguous() {
                let start = view.elem(i, 0) * size;
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot = unsafe { T::read(base.add(start + j * size)) };
                }
            } else {
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot = unsafe { T::read(base.add(view.elem(i, j) * size)) };
                }
            }
        }
        return Ok(());
    }
    for i in 0..view.rows.len() {
        for j in 0..cols {
            out[i * cols + j] = if view.is_live(i, j) {
                unsafe { T::read(base.add(view.elem(i, j) * size)) }
            } else {
                T::default()
            };
        }
    }
    Ok(())
}

/// Value-based remote read: the tile as seen in `from_rank`'s arena.
pub fn load<T: Element>(ctx: &WorldContext, view: &TileView, to_rank: usize, from_rank: usize) -> Result<Vec<T>> {
    let mut out = vec![T::default(); view.numel()];
    load_into(ctx, view, to_rank, from_rank, &mut out)?;
    Ok(out)
}

/// Value-based remote write of `values` (row-major) into `to_rank`'s arena,
/// using the caller-side address on `from_rank`. Masked-off lanes are left
/// untouched.
pub fn store<T: Element>(
    ctx: &WorldContext,
    view: &TileView,
    values: &[T],
    from_rank: usize,
    to_rank: usize,
) -> Result<()> {
    if values.len() != view.numel() {
        return arg(format!("tile has {} lanes, got {} values", view.numel(), values.len()));
    }
    if !view.has_live_lanes() {
        return Ok(());
    }
    let base = resolve::<T>(ctx, view, from_rank, to_rank)?;
    let size = T::DTYPE.size();
    let cols = view.cols.len();
    if !matches!(view.mask, Mask::Explicit(_)) {
        let (lr, lc) = (view.live_rows(), view.live_cols());
        for i in 0..lr {
            let row = &values[i * cols..i * cols + lc];
            if view.is_contiguous() {
                let start = view.elem(i, 0) * size;
                for (j, &v) in row.iter().enumerate() {
                    unsafe { T::write(base.add(start + j * size), v) };
                }
            } else {
                for (j, &v) in row.iter().enumerate() {
                    unsafe { T::write(base.add(view.elem(i, j) * size), v) };
                }
            }
        }
        return Ok(());
    }
    for i in 0..view.rows.len() {
        for j in 0..cols {
            if view.is_live(i, j) {
                unsafe { T::write(base.add(view.elem(i, j) * size), values[i * cols + j]) };
            }
        }
    }
    Ok(())
}

/// Cell-by-cell relaxed copy of `n` contiguous elements.
///
/// # Safety
/// Both ranges must be valid, naturally aligned and either disjoint or equal.
#[inline]
unsafe fn copy_cells<T: Element>(src: *const u8, dst: *mut u8, n: usize) {
    let size = T::DTYPE.size();
    for j in 0..n {
        T::write(dst.add(j * size), T::read(src.add(j * size)));
    }
}

/// Lane-by-lane copy between two resolved views. A lane moves when it is
/// live in both views.
fn transfer<T: Element>(src: &TileView, src_base: *const u8, dst: &TileView, dst_base: *mut u8) {
    let size = T::DTYPE.size();
    let simple = |v: &TileView| !matches!(v.mask, Mask::Explicit(_));
    if simple(src) && simple(dst) {
        let lr = src.live_rows().min(dst.live_rows());
        let lc = src.live_cols().min(dst.live_cols());
        let fast = src.is_contiguous() && dst.is_contiguous();
        for i in 0..lr {
            if fast {
                let s = unsafe { src_base.add(src.elem(i, 0) * size) };
                let d = unsafe { dst_base.add(dst.elem(i, 0) * size) };
                unsafe { copy_cells::<T>(s, d, lc) };
            } else {
                for j in 0..lc {
                    unsafe {
                        T::write(
                            dst_base.add(dst.elem(i, j) * size),
                            T::read(src_base.add(src.elem(i, j) * size)),
                        )
                    };
                }
            }
        }
        return;
    }
    for i in 0..src.rows.len() {
        for j in 0..src.cols.len() {
            if src.is_live(i, j) && dst.is_live(i, j) {
                unsafe {
                    T::write(
                        dst_base.add(dst.elem(i, j) * size),
                        T::read(src_base.add(src.elem(i, j) * size)),
                    )
                };
            }
        }
    }
}

fn check_shapes(src: &TileView, dst: &TileView) -> Result<()> {
    if src.tile_shape() != dst.tile_shape() {
        return arg(format!(
            "tile shapes differ: source {:?}, destination {:?}",
            src.tile_shape(),
            dst.tile_shape()
        ));
    }
    Ok(())
}

/// Copies `src` in `src_rank`'s arena to `dst` in `dst_rank`'s arena; both
/// addresses are translated from the caller's own arena.
pub fn copy<T: Element>(
    ctx: &WorldContext,
    src: &TileView,
    dst: &TileView,
    src_rank: usize,
    dst_rank: usize,
) -> Result<()> {
    check_shapes(src, dst)?;
    if !src.has_live_lanes() || !dst.has_live_lanes() {
        return Ok(());
    }
    let origin = ctx.rank();
    let s = resolve::<T>(ctx, src, origin, src_rank)?;
    let d = resolve::<T>(ctx, dst, origin, dst_rank)?;
    transfer::<T>(src, s, dst, d);
    Ok(())
}

/// Local-to-remote buffer copy: `src` on `from_rank` into `dst` on `to_rank`.
pub fn put<T: Element>(
    ctx: &WorldContext,
    src: &TileView,
    dst: &TileView,
    from_rank: usize,
    to_rank: usize,
) -> Result<()> {
    check_shapes(src, dst)?;
    if !src.has_live_lanes() || !dst.has_live_lanes() {
        return Ok(());
    }
    let s = resolve::<T>(ctx, src, from_rank, from_rank)?;
    let d = resolve::<T>(ctx, dst, from_rank, to_rank)?;
    transfer::<T>(src, s, dst, d);
    Ok(())
}

/// Remote-to-local buffer copy: `src` on `from_rank` into `dst` on `to_rank`
/// (the caller's rank).
pub fn get<T: Element>(
    ctx: &WorldContext,
    src: &TileView,
    dst: &TileView,
    from_rank: usize,
    to_rank: usize,
) -> Result<()> {
    check_shapes(src, dst)?;
    if !src.has_live_lanes() || !dst.has_live_lanes() {
        return Ok(());
    }
    let s = resolve::<T>(ctx, src, to_rank, from_rank)?;
    let d = resolve::<T>(ctx, dst, to_rank, to_rank)?;
    transfer::<T>(src, s, dst, d);
    Ok(())
}

//! Single-process symmetric-memory runtime.
//!
//! Ranks are threads sharing one mapped region carved into per-rank arenas.
//! On top of the heap sit one-sided tile operations ([`rma`]), scoped atomics
//! ([`atomics`]), a world runtime with collectives and an emulated
//! compute-unit scheduler ([`runtime`]), and the GEMM + all-scatter overlap
//! patterns ([`kernels`]) with their benchmark harness ([`bench`]).

pub mod atomics;
pub mod bench;
pub mod cli;
pub mod error;
pub mod kernels;
pub mod rma;
pub mod runtime;
pub mod symheap;

pub use error::{Error, Result};
pub use runtime::{run_world, GridLaunch, LaunchHandle, WorldConfig, WorldContext};
pub use symheap::{DType, Element, HeapAddress, HeapLayout, SymmetricBuffer, SymmetricHeap};

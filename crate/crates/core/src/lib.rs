//! Core engine for generative 2D wheel design.
//!
//! The crate couples reference-guided SIMP topology optimization with a
//! boundary-equilibrium GAN to grow large families of wheel designs from a
//! small seed set, then scores the results by compliance, material cost and
//! novelty. Everything here is pure computation over in-memory buffers; file
//! formats, plotting and the CLI live in the companion `wheelgen-cli` crate.
//!
//! The crate is `no_std`-compatible (`--no-default-features --features libm`);
//! only an allocator is required.

#![cfg_attr(not(feature = "std"), no_std)]

#[cfg(all(not(feature = "std"), not(feature = "libm")))]
compile_error!("wheelgen-core needs either the `std` or the `libm` feature for float math");

extern crate alloc;

pub(crate) mod fmath;
pub(crate) mod gemm;

pub mod began;
pub mod explore;
pub mod fea;
pub mod geometry;
pub mod image;
pub mod neural;
pub mod novelty;
pub mod synth;
pub mod topopt;

pub use geometry::{LoadCase, WheelDomain};
pub use image::DesignImage;
pub use topopt::{OptimizationResult, SimpConfig};


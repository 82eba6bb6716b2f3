//! Task-aware arbitrary-size point cloud downsampling.
//!
//! A heuristic pre-sampler (farthest point or random sampling) reduces an
//! input cloud to any requested size; a learned point-wise refiner then
//! nudges each pre-sampled point by a small offset so that a frozen
//! downstream network performs well on the result. One trained sampler
//! serves every input and sample size in its training ranges.
//!
//! The crate is organized as:
//! - [`tensor`]: dense-array engine with reverse-mode gradients and Adam
//! - [`geometry`]: FPS, k-NN, Chamfer/Hausdorff, normalization
//! - [`presampling`]: feature embedding and heuristic pre-sampling
//! - [`refinement`]: the offset refining block with density attention
//! - [`objectives`]: losses and task metrics
//! - [`taskheads`]: the frozen classification network
//! - [`training`]: two-stage sampler training and evaluation grids
//! - [`io`]: datasets, checkpoints, XYZ files and metric CSVs

// Training churns through large short-lived buffers; the default
// allocator's mmap/munmap cycling on them costs more than the math.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod error;
pub mod geometry;
pub mod io;
pub mod objectives;
pub mod params;
pub mod presampling;
pub mod refinement;
pub mod sampler;
pub mod taskheads;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

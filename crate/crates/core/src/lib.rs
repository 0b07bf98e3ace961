//! SpotNet: an anchor-free center-point object detector with a motion-derived
//! segmentation side task, aimed at small desk-scale scenes.

pub mod annotate;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod decode;
pub mod error;
pub mod evalkit;
pub mod loss;
pub mod net;
pub mod plot;
pub mod scalar;
pub mod tensor;
pub mod trainer;
pub mod types;
pub mod videogen;

pub use error::{Error, Result};

/// Worker-thread cap: `SPOTNET_NUM_THREADS` when set (minimum 1), otherwise
/// the machine's available parallelism.
pub fn num_threads() -> usize {
    std::env::var("SPOTNET_NUM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub use scalar::Scalar;

/// Concrete single-precision model (the trainer's default).
pub type SpotNetF32 = net::SpotNet<f32>;
/// Concrete double-precision model (used where gradcheck accuracy matters).
pub type SpotNetF64 = net::SpotNet<f64>;
/// Concrete tapes to match.
pub type TapeF32 = tensor::Tape<f32>;
pub type TapeF64 = tensor::Tape<f64>;

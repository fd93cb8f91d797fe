//! Time-frequency network (TFN) for closed-set speaker identification.
//!
//! Two branches look at the same speech chunk: a time branch whose first
//! layer is a bank of learnable sinc band-pass filters applied to the raw
//! waveform, and a frequency branch that runs 1-D convolutions over MFCC
//! frames. Their embeddings are concatenated under one of three fusion
//! topologies and classified. Every layer carries a hand-written backward
//! pass; everything runs in `f64` on the CPU and is deterministic given
//! its seeds.

pub mod audio;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dsp;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod sincfilter;
pub mod train;

pub use error::{Result, TfnError};

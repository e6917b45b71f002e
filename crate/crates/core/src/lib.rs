//! Desk-scale unified multimodal decoder.
//!
//! A single autoregressive transformer handles text, continuous visual
//! understanding tokens, and discrete multi-scale generation tokens:
//! modality-routed feed-forward experts over shared attention, a low-rank
//! scale-aware adapter bank on the generation expert, next-scale image
//! decoding with classifier-free guidance, and the stage-wise training
//! machinery (teacher distillation, packing, uneven gradient accumulation,
//! global-batch loss reduction). Everything runs on a minimal f64 tensor
//! library with tape-based reverse-mode autodiff, verified by invariant
//! suites and finite-difference oracles rather than benchmarks.

pub mod attention;
pub mod error;
pub mod generation;
pub mod model;
pub mod moe;
pub mod params;
pub mod ppm;
pub mod rng;
pub mod spectra;
pub mod tensor;
pub mod tokenizer;
pub mod training;
pub mod verify;

pub use error::{Error, Result};

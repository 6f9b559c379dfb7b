//! Dual-encoder masked image modeling on paired RGB + height-map (DSM)
//! tiles.
//!
//! The crate covers the full loop at desk scale: a deterministic synthetic
//! tile generator, a binary tile container with per-city normalization,
//! windowed-attention encoders trained by masked reconstruction with an
//! optional cross-modal contrastive term, and an evaluation harness
//! (linear probe, linear segmentation head, ablation grid) plus a CLI.

pub mod config;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod synthdata;
pub mod tileio;
pub mod trainer;
pub mod viz;

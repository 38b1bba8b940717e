//! Volumetric cross-modality synthesis toolkit.
//!
//! Trains an unpaired 3D CycleGAN (cycle-consistency + gradient-correlation
//! losses) to translate MR-like volumes to CT-like volumes, segments bone via
//! per-slice Otsu thresholding, reconstructs a triangle mesh and validates it
//! against anatomical landmarks with rigid pre-alignment + ICP.
//!
//! This crate is the algorithmic core: no file IO, `no_std` + `alloc`. The
//! companion `vgan` crate carries file formats and the CLI.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod augment;
pub mod autograd;
pub mod gan;
pub mod geom;
pub mod losses;
pub mod phantom;
pub mod reconstruct;
pub mod rng;
pub mod scalar;
pub mod segment;
pub mod validate;
pub mod volume;

mod mc_tables;

pub use scalar::Scalar;
pub use volume::{Region, Volume};

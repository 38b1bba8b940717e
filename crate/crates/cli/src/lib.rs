//! File formats, configuration, and pipeline orchestration around the
//! `vgan-core` algorithms: MetaImage volumes, ASCII PLY meshes, binary
//! checkpoints, landmark CSVs, INI configs, and run manifests.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod landmarks;
pub mod manifest;
pub mod mhd;
pub mod ply;

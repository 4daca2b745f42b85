//! File formats: NetPBM images, config files, checkpoints, dataset trees.

pub mod checkpoint;
pub mod config_file;
pub mod dataset;
pub mod netpbm;

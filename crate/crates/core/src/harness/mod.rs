//! Synthetic feeders, file formats and experiment sweeps.

pub mod experiment;
pub mod io;
pub mod synth;

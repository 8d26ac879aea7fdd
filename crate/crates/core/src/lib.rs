pub mod cli;
pub mod correspondence;
pub mod featureio;
pub mod geometry;
mod kernel;
pub mod metrics;
pub mod rendercompare;
pub mod synth;

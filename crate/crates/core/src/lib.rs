//! Viscosity estimation from simulated vial-inversion videos.

pub mod physics;
pub mod rheology;
pub mod flowsim;
pub mod imaging;
pub mod dataset;
pub mod neuralnet;
pub mod pipeline;
pub mod config;
pub mod cli;

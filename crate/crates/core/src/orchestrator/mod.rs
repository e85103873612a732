//! Ladder configuration, run directories and energy accounting.

pub mod config;
pub mod meter;
pub mod run;

pub use config::{EvalConfig, GeometricLadder, LadderConfig, LowEssPolicy, RungOverride, TrainingMode};
pub use meter::{EnergyMeter, MeterSnapshot, MeteredTarget, Phase};
pub use run::{
    anneal_rung, evaluate_buffer, resume, resume_with, run_ladder, run_with, sample_mcmc, LadderOutput, Manifest,
    RunLock, RunOptions,
};

//! Library surface of the command-line front end, kept callable so the
//! integration and acceptance suites can drive full experiments in-process.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_ablate, cmd_denoise, cmd_eval, cmd_gen, cmd_train, cohort_hash, plan_dump, Arm, ArmReport,
};
pub use config::{ProviderKind, RunConfig};

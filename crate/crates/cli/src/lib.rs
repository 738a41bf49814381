//! Command-line harness library: run configuration, staged training,
//! generation, evaluation, ablation, and inspection commands.

pub mod commands;
pub mod run_config;

pub use commands::{
    cmd_ablate, cmd_dump_dataset, cmd_eval, cmd_generate, cmd_inspect_mask, cmd_train,
};
pub use run_config::RunConfig;

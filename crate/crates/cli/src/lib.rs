//! Training, evaluation, ablation and reporting on top of `pulsefuse`.

pub mod ablate;
pub mod config;
pub mod evaluate;
pub mod figures;
pub mod report;
pub mod train;

pub use config::RunConfig;

use pulsefuse::Error;

/// Process exit status for a failed command: 2 for configuration problems
/// (including incompatible checkpoints), 4 for numerical divergence and 3
/// for everything data related.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidParameter(_) | Error::Version(_) => 2,
        Error::Divergence { .. } => 4,
        _ => 3,
    }
}

//! Subcommand implementations. Each `run` returns the process exit code.

pub mod fit;
pub mod report;
pub mod simulate;
pub mod test_spatial;

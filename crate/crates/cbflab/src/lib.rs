//! Numerical tests for topological obstructions to control barrier functions.
//!
//! The crate analyzes control-affine systems with safe sets given by scalar
//! barrier functions: it computes Euler characteristics of safe sets via
//! cubical complexes, certifies zeros of vector fields through topological
//! degree, checks solvability obstructions for perturbation families,
//! verifies forward invariance and flow-out constructions by integration,
//! and synthesizes safe controllers (pointwise quadratic-program filters and
//! partition-of-unity blends).

pub mod config;
pub mod dsl;
pub mod flow;
pub mod geometry;
pub mod obstruction;
pub(crate) mod opt;
pub mod report;
pub mod runner;
pub mod synthesis;
pub mod zeros;
pub mod system;

/// Entry point for the `cbflab` binary; returns the process exit code.
pub fn cli_main() -> i32 {
    runner::cli_main()
}

//! Verification harness for octree attention: configuration, synthetic
//! scenes, the stacked backbone and the subcommands behind the `octattn`
//! binary.

pub mod backbone;
pub mod config;
pub mod report;
pub mod run;
pub mod synth;

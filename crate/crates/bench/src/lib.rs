//! Benchmark and demo drivers behind the `closet-bench` command.

pub mod demo;
pub mod experiments;
pub mod measure;

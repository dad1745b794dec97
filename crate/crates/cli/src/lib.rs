//! Configuration, suite runner and trace output behind the `viji` binary.

pub mod bench;
pub mod config;
